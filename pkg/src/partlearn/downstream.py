"""Few-shot adaptation of a pretrained part encoder.

Strategies: MLP probe, epsilon-SVR probe, low-rank adapters on the vertex
tier, full finetuning, and a from-scratch baseline, evaluated by a seeded
R^2 protocol under static (log z-score) or dynamic (multiplicative
heuristic) label normalization.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
import time
import warnings

import numpy as np

from . import nncore as nn
from .encoder import PartEncoder

STRATEGIES = ("probe-mlp", "probe-svr", "lora-r1", "lora-r8", "finetune", "scratch")
NORMALIZATIONS = ("static", "static+tdi", "dynamic")
CSV_COLUMNS = ("task", "strategy", "normalization", "shots", "run_seed", "r2",
               "fit_seconds", "trainable_params")
PREDICT_CHUNK = 256


# --- metric ---------------------------------------------------------------------

def r2_score(predictions, truths) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot.

    Undefined (and rejected) for constant truth, where SS_tot = 0.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truths, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("predictions and truths must have equal length")
    if t.size < 2:
        raise ValueError("r2_score needs at least 2 samples")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("r2_score is undefined for constant truth values")
    ss_res = float(np.sum((p - t) ** 2))
    return 1.0 - ss_res / ss_tot


# --- label normalization -------------------------------------------------------

@dataclasses.dataclass
class Normalizer:
    """Label transform for one downstream fit.

    mode "static": targets are z-scored in the log domain and predictions
    mapped back through exp; bounded labels opt out with log=False and pass
    through raw.  mode "dynamic": targets stay raw and the head output is
    multiplied by a per-part heuristic estimate (the task-dependent input,
    TDI) before the loss, so the head learns a correction factor.
    ``tdi_feature`` appends the raw TDI value to the head input instead
    (static mode only).
    """

    mode: str = "static"
    log: bool = True
    tdi_feature: bool = False
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ValueError(f"unknown normalizer mode {self.mode!r}")
        if self.tdi_feature and self.mode != "static":
            raise ValueError("tdi_feature is a static-mode option")

    @property
    def needs_tdi(self) -> bool:
        return self.mode == "dynamic" or self.tdi_feature

    def fit(self, labels, tdi=None) -> "Normalizer":
        y = np.asarray(labels, dtype=np.float64).ravel()
        if self.mode == "dynamic":
            if tdi is None:
                raise ValueError("dynamic normalization needs TDI values")
            t = np.asarray(tdi, dtype=np.float64).ravel()
            if t.shape != y.shape:
                raise ValueError("TDI values must align with labels")
            if np.any(t <= 0):
                raise ValueError("dynamic normalization requires TDI > 0 "
                                 "on the training split")
            return self
        if self.log:
            if np.any(y <= 0):
                raise ValueError("log-domain normalization needs positive labels")
            z = np.log(y)
            self.mu = float(z.mean())
            sigma = float(z.std())
            self.sigma = sigma if sigma > 0.0 else 1.0
        return self

    def normalize(self, labels) -> np.ndarray:
        y = np.asarray(labels, dtype=np.float64)
        if self.mode == "dynamic" or not self.log:
            return y.astype(np.float64, copy=True)
        return (np.log(y) - self.mu) / self.sigma

    def denormalize(self, values) -> np.ndarray:
        z = np.asarray(values, dtype=np.float64)
        if self.mode == "dynamic" or not self.log:
            return z.astype(np.float64, copy=True)
        return np.exp(self.mu + self.sigma * z)


def make_normalizer(normalization: str, labels, tdi=None, log: bool = True) -> Normalizer:
    """Build and fit the Normalizer for one mode string from NORMALIZATIONS."""
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    nz = Normalizer(mode="dynamic" if normalization == "dynamic" else "static",
                    log=log, tdi_feature=(normalization == "static+tdi"))
    return nz.fit(labels, tdi=tdi)


def dynamic_predict(head_output, tdi_value) -> np.ndarray:
    """Multiplicative prediction: head output scaled by the heuristic estimate."""
    h = np.asarray(head_output, dtype=np.float64)
    t = np.asarray(tdi_value, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("TDI values must be positive")
    return h * t


def _check_tdi(normalizer: Normalizer, tdi, n: int):
    if not normalizer.needs_tdi:
        return None
    if tdi is None:
        raise ValueError(f"{normalizer.mode!r} normalization needs TDI values")
    t = np.asarray(tdi, dtype=np.float64).ravel()
    if t.shape[0] != n:
        raise ValueError("TDI values must align with the samples")
    if np.any(t <= 0):
        raise ValueError("TDI values must be positive")
    return t


def _head_inputs(latents, normalizer: Normalizer, tdi):
    """Head input matrix (+ validated TDI column when the mode uses one)."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("latents must be 2-d (n_samples, width)")
    t = _check_tdi(normalizer, tdi, x.shape[0])
    if normalizer.tdi_feature:
        x = np.concatenate([x, t[:, None]], axis=1)
    return x, t


# --- probe head -----------------------------------------------------------------

class ProbeHead:
    """Two affine layers (d_in -> 64 -> 1) with a relu between."""

    HIDDEN = 64

    def __init__(self, d_in: int, rng: np.random.Generator, name: str = "head"):
        self.lin1 = nn.Linear(d_in, self.HIDDEN, rng, f"{name}.lin1")
        self.lin2 = nn.Linear(self.HIDDEN, 1, rng, f"{name}.lin2")

    def __call__(self, x: nn.Tensor) -> nn.Tensor:
        return self.lin2(nn.relu(self.lin1(x)))

    def params(self) -> dict:
        out = self.lin1.params()
        out.update(self.lin2.params())
        return out

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params().values())


def _head_rng(seed: int) -> np.random.Generator:
    # shared by every strategy so zero-step fits start from the same head
    return np.random.default_rng([seed, 11])


# --- low-rank adapters ----------------------------------------------------------

class LoraAdapter:
    """Low-rank weight deltas W + B.A for both conv weight matrices of every
    vertex-tier layer; A is gaussian, B starts at zero so the adapted network
    initially equals the frozen one."""

    def __init__(self, encoder: PartEncoder, rank: int, rng: np.random.Generator):
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.rank = int(rank)
        self.layer_names = [layer.name for layer in encoder.adapter_layers()]
        self.pairs = {}
        for layer in encoder.adapter_layers():
            for kind, w in (("self", layer.w_self), ("nbr", layer.w_nbr)):
                d_out, d_in = w.data.shape
                a = nn.Tensor(rng.standard_normal((self.rank, d_in)) / math.sqrt(d_in),
                              requires_grad=True)
                b = nn.Tensor(np.zeros((d_out, self.rank)), requires_grad=True)
                self.pairs[(layer.name, kind)] = (a, b)

    def params(self) -> dict:
        out = {}
        for (lname, kind), (a, b) in self.pairs.items():
            out[f"lora.{lname}.{kind}.a"] = a
            out[f"lora.{lname}.{kind}.b"] = b
        return out

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params().values())

    def compose(self) -> dict:
        """Per-layer (self_extra, nbr_extra) deltas as autodiff nodes."""
        out = {}
        for lname in self.layer_names:
            a_s, b_s = self.pairs[(lname, "self")]
            a_n, b_n = self.pairs[(lname, "nbr")]
            out[lname] = (nn.matmul(b_s, a_s), nn.matmul(b_n, a_n))
        return out


# --- gradient fits --------------------------------------------------------------

@dataclasses.dataclass
class AdaptResult:
    """A fitted downstream regressor.

    ``encoder`` is None for probes, whose ``predict`` takes precomputed
    latents; otherwise ``predict`` takes part graphs and runs the updated
    (finetune) or adapter-augmented (LoRA) encoder.
    """

    head: ProbeHead
    normalizer: Normalizer
    trainable_params: int
    final_loss: float
    encoder: PartEncoder | None = None
    lora: LoraAdapter | None = None

    def predict(self, inputs, tdi=None) -> np.ndarray:
        if self.encoder is None:
            lat = np.asarray(inputs, dtype=np.float64)
        else:
            adapters = self.lora.compose() if self.lora is not None else None
            lat = encode_corpus(self.encoder, list(inputs), adapters=adapters)
        x, t = _head_inputs(lat, self.normalizer, tdi)
        z = self.head(nn.Tensor(x)).data[:, 0]
        if self.normalizer.mode == "dynamic":
            return dynamic_predict(z, t)
        return self.normalizer.denormalize(z)


def encode_corpus(encoder: PartEncoder, graphs: list, *, adapters: dict | None = None,
                  chunk: int = PREDICT_CHUNK) -> np.ndarray:
    """Latent codes as a plain array, chunked to bound peak memory."""
    out = []
    for i in range(0, len(graphs), chunk):
        out.append(encoder.encode_graphs(graphs[i:i + chunk], adapters=adapters).data)
    return np.concatenate(out, axis=0)


def clone_encoder(encoder: PartEncoder) -> PartEncoder:
    """Fresh encoder with identical weights; the input is never mutated."""
    twin = PartEncoder(encoder.config)
    src, dst = encoder.params(), twin.params()
    for name, p in src.items():
        dst[name].data[...] = p.data
    return twin


def _check_labels(labels, n_inputs: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.shape[0] != n_inputs:
        raise ValueError("labels must align with the inputs")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    return y


def _run_fit(make_pred, params: dict, y_raw: np.ndarray, normalizer: Normalizer,
             tdi_vec, seed: int, steps: int, lr_start: float, lr_end: float,
             batch_size) -> float:
    """Huber + Adam + cosine loop shared by every gradient strategy.

    ``make_pred(idx)`` returns the head-output column for sample indices idx.
    Dynamic mode multiplies by the TDI inside the graph, so the loss compares
    against raw labels after multiplication.
    """
    n = y_raw.shape[0]
    if normalizer.mode == "dynamic":
        targets = y_raw.astype(np.float64)
    else:
        targets = normalizer.normalize(y_raw)
    sched = nn.CosineSchedule(lr_start, lr_end, max(steps, 1))
    opt = nn.Adam(params)
    rng = np.random.default_rng([seed, 23])
    last = float("nan")
    for step in range(steps):
        if batch_size is None or batch_size >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        opt.zero_grad()
        pred = make_pred(idx)
        if normalizer.mode == "dynamic":
            pred = nn.mul(pred, nn.Tensor(tdi_vec[idx][:, None]))
        loss = nn.huber_loss(pred, nn.Tensor(targets[idx][:, None]))
        last = nn.check_finite(loss.item(), f"downstream fit step {step}")
        loss.backward()
        opt.step(sched.lr(step))
    return last


def fit_probe_mlp(latents, labels, normalizer: Normalizer, seed: int = 0, *,
                  steps: int = 2000, lr_start: float = 1e-3, lr_end: float = 1e-5,
                  tdi=None, batch_size=None) -> AdaptResult:
    """Train a fresh two-layer head on frozen latents."""
    x, t = _head_inputs(latents, normalizer, tdi)
    y = _check_labels(labels, x.shape[0])
    head = ProbeHead(x.shape[1], _head_rng(seed))
    xt = nn.Tensor(x)

    def make_pred(idx):
        inp = xt if idx.shape[0] == x.shape[0] else nn.take_rows(xt, idx)
        return head(inp)

    final = _run_fit(make_pred, head.params(), y, normalizer, t, seed,
                     steps, lr_start, lr_end, batch_size)
    return AdaptResult(head=head, normalizer=normalizer,
                       trainable_params=head.parameter_count(), final_loss=final)


def fit_lora(encoder: PartEncoder, graphs: list, labels, normalizer: Normalizer,
             seed: int = 0, *, rank: int = 1, steps: int = 2000,
             lr_start: float = 1e-3, lr_end: float = 1e-5, tdi=None,
             batch_size=None) -> AdaptResult:
    """Train low-rank adapters plus a head against a frozen base encoder."""
    n = len(graphs)
    y = _check_labels(labels, n)
    t = _check_tdi(normalizer, tdi, n)
    adapter = LoraAdapter(encoder, rank, np.random.default_rng([seed, 19]))
    d_head = encoder.config.latent_width + (1 if normalizer.tdi_feature else 0)
    head = ProbeHead(d_head, _head_rng(seed))
    prebatch = encoder.batch_graphs(graphs)

    def make_pred(idx):
        if idx.shape[0] == n:
            lat = encoder.encode_graphs(graphs, adapters=adapter.compose(),
                                        batch=prebatch)
        else:
            lat = encoder.encode_graphs([graphs[i] for i in idx],
                                        adapters=adapter.compose())
        if normalizer.tdi_feature:
            lat = nn.concat_cols([lat, nn.Tensor(t[idx][:, None])])
        return head(lat)

    params = adapter.params()
    params.update(head.params())
    final = _run_fit(make_pred, params, y, normalizer, t, seed,
                     steps, lr_start, lr_end, batch_size)
    return AdaptResult(head=head, normalizer=normalizer,
                       trainable_params=adapter.parameter_count() + head.parameter_count(),
                       final_loss=final, encoder=encoder, lora=adapter)


def finetune_all(encoder: PartEncoder, graphs: list, labels, normalizer: Normalizer,
                 seed: int = 0, *, steps: int = 2000, lr_start: float = 1e-4,
                 lr_end: float = 1e-6, tdi=None, batch_size=None) -> AdaptResult:
    """Copy the encoder and train every weight plus a fresh head."""
    n = len(graphs)
    y = _check_labels(labels, n)
    t = _check_tdi(normalizer, tdi, n)
    twin = clone_encoder(encoder)
    d_head = twin.config.latent_width + (1 if normalizer.tdi_feature else 0)
    head = ProbeHead(d_head, _head_rng(seed))
    prebatch = twin.batch_graphs(graphs)

    def make_pred(idx):
        if idx.shape[0] == n:
            lat = twin.encode_graphs(graphs, batch=prebatch)
        else:
            lat = twin.encode_graphs([graphs[i] for i in idx])
        if normalizer.tdi_feature:
            lat = nn.concat_cols([lat, nn.Tensor(t[idx][:, None])])
        return head(lat)

    params = twin.params()
    params.update(head.params())
    final = _run_fit(make_pred, params, y, normalizer, t, seed,
                     steps, lr_start, lr_end, batch_size)
    return AdaptResult(head=head, normalizer=normalizer,
                       trainable_params=twin.parameter_count() + head.parameter_count(),
                       final_loss=final, encoder=twin)


def fit_scratch(encoder_config, graphs: list, labels, normalizer: Normalizer,
                seed: int = 0, *, steps: int = 2000, lr_start: float = 1e-4,
                lr_end: float = 1e-6, tdi=None, batch_size=None) -> AdaptResult:
    """Baseline: finetune_all from a randomly initialized encoder."""
    enc_seed = int(np.random.default_rng([seed, 17]).integers(2 ** 31))
    fresh = PartEncoder(dataclasses.replace(encoder_config, seed=enc_seed))
    return finetune_all(fresh, graphs, labels, normalizer, seed, steps=steps,
                        lr_start=lr_start, lr_end=lr_end, tdi=tdi,
                        batch_size=batch_size)


# --- support-vector regression --------------------------------------------------

class SvrConvergenceWarning(UserWarning):
    """Dual coordinate descent hit its pass cap before reaching tolerance."""


def rbf_kernel(a, b, gamma: float) -> np.ndarray:
    """exp(-gamma * ||a_i - b_j||^2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    return np.exp(-gamma * np.maximum(d2, 0.0))


@dataclasses.dataclass
class SvrModel:
    """Epsilon-SVR with an RBF kernel, solved in the dual by coordinate
    descent around a fixed offset (the training-target mean)."""

    inputs: np.ndarray
    beta: np.ndarray
    bias: float
    gamma: float
    c: float
    epsilon: float
    converged: bool
    passes: int
    normalizer: Normalizer

    @property
    def support_count(self) -> int:
        return int(np.count_nonzero(self.beta))

    def decision(self, x) -> np.ndarray:
        k = rbf_kernel(np.asarray(x, dtype=np.float64), self.inputs, self.gamma)
        return k @ self.beta + self.bias

    def predict(self, latents, tdi=None) -> np.ndarray:
        x, t = _head_inputs(latents, self.normalizer, tdi)
        z = self.decision(x)
        if self.normalizer.mode == "dynamic":
            return dynamic_predict(z, t)
        return self.normalizer.denormalize(z)


def fit_svr(latents, labels, normalizer: Normalizer | None = None, *,
            c: float = 10.0, epsilon: float = 0.01, gamma: float | None = None,
            tol: float = 1e-4, max_passes: int = 5000, tdi=None) -> SvrModel:
    """Epsilon-insensitive support-vector regression on frozen latents.

    The offset is fixed at the training-target mean (optimizing it couples
    every dual coordinate and stalls descent); the remainder solves
    min 0.5 b'Kb - y'b + eps*|b|_1 over b in [-C, C]^n by coordinate
    descent, each update moving one coordinate to its exact minimizer
    clip(soft(r_i, eps) / K_ii, -C, C) in seeded-permutation order.
    Convergence means the largest coordinate move in a pass fell below
    ``tol``.  Hitting ``max_passes`` first raises SvrConvergenceWarning and
    flags the model rather than failing silently.  Dynamic mode fits the
    ratio label / TDI and multiplies back at prediction time.
    """
    nz = normalizer if normalizer is not None else Normalizer(mode="static", log=False)
    x, t = _head_inputs(latents, nz, tdi)
    y_raw = _check_labels(labels, x.shape[0])
    if x.shape[0] < 2:
        raise ValueError("fit_svr needs at least 2 samples")
    y_full = y_raw / t if nz.mode == "dynamic" else nz.normalize(y_raw)
    g = 1.0 / x.shape[1] if gamma is None else float(gamma)
    if g <= 0 or c <= 0 or epsilon < 0:
        raise ValueError("gamma and C must be positive, epsilon non-negative")
    bias = float(y_full.mean())
    y = y_full - bias
    q = rbf_kernel(x, x, g)
    n = x.shape[0]
    beta = np.zeros(n)
    qb = np.zeros(n)
    diag = np.diag(q).copy()
    order_rng = np.random.default_rng(12)
    converged, passes, worst = False, 0, float("inf")
    for p in range(max_passes):
        passes = p + 1
        worst = 0.0
        for i in order_rng.permutation(n):
            r = y[i] - qb[i] + diag[i] * beta[i]
            new = math.copysign(max(abs(r) - epsilon, 0.0), r) / diag[i]
            new = min(max(new, -c), c)
            delta = new - beta[i]
            if delta != 0.0:
                beta[i] = new
                qb += delta * q[:, i]
                worst = max(worst, abs(delta))
        if worst < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"SVR coordinate descent did not converge in {max_passes} "
                      f"passes (last max update {worst:.3g})", SvrConvergenceWarning)
    return SvrModel(inputs=x, beta=beta, bias=bias, gamma=g, c=float(c),
                    epsilon=float(epsilon), converged=converged, passes=passes,
                    normalizer=nz)


# --- evaluation protocol ---------------------------------------------------------

@dataclasses.dataclass
class TaskData:
    """One downstream label set aligned with a part corpus.

    TDI estimates come in two flavors: ``tdi`` is a fixed per-part array,
    while ``tdi_fit`` is a callable ``train_idx -> per-part array`` that
    refits the heuristic on each run's training subset, so the estimator
    never sees labels outside the shots it was given.  When both are set,
    ``tdi_fit`` wins.
    """

    name: str
    labels: np.ndarray
    tdi: np.ndarray | None = None  # per-part heuristic estimate, if the task has one
    log: bool = True               # static normalization works in the log domain
    tdi_fit: object = None         # callable(train_idx) -> estimates for all parts


@dataclasses.dataclass
class ReportRow:
    task: str
    strategy: str
    normalization: str
    shots: int
    run_seed: int
    r2: float
    fit_seconds: float
    trainable_params: int


@dataclasses.dataclass
class EvalReport:
    rows: list

    def aggregates(self) -> list:
        """Mean/std R^2 per (task, strategy, normalization, shots)."""
        groups = {}
        for r in self.rows:
            key = (r.task, r.strategy, r.normalization, r.shots)
            groups.setdefault(key, []).append(r.r2)
        out = []
        for key in sorted(groups):
            vals = np.array(groups[key], dtype=np.float64)
            out.append({"task": key[0], "strategy": key[1], "normalization": key[2],
                        "shots": key[3], "runs": int(vals.size),
                        "r2_mean": float(vals.mean()), "r2_std": float(vals.std())})
        return out


def _parse_strategy(strategy: str):
    if strategy.startswith("lora-r"):
        return "lora", int(strategy[len("lora-r"):])
    if strategy in ("probe-mlp", "probe-svr", "finetune", "scratch"):
        return strategy, None
    raise ValueError(f"unknown strategy {strategy!r}")


def run_protocol(encoder: PartEncoder, graphs: list, tasks: list, *,
                 strategies=("probe-mlp",), shot_list=(50, 100),
                 normalizations=("static",), n_runs: int = 10,
                 test_size: int = 2000, seed: int = 0,
                 run_offset: int = 0,
                 fit_options: dict | None = None) -> EvalReport:
    """Few-shot R^2 evaluation grid.

    For every (shots, run, task, normalization, strategy) cell: draw the
    run's training subset from the pool (keyed by (seed, shots, run) only,
    so all strategies and tasks share subsets), fit, and score R^2 on the
    fixed held-out test split.  ``fit_options`` maps a strategy name to
    extra keyword arguments for its fit function.  ``run_offset`` shifts
    the run seeds, so a single cell of a larger grid can be reproduced.
    """
    n = len(graphs)
    for strategy in strategies:
        _parse_strategy(strategy)
    for norm in normalizations:
        if norm not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {norm!r}")
    needs_tdi = any(norm != "static" for norm in normalizations)
    for task in tasks:
        _check_labels(task.labels, n)
        if task.tdi is not None and np.asarray(task.tdi).ravel().shape[0] != n:
            raise ValueError(f"task {task.name!r} TDI must align with the corpus")
        if needs_tdi and task.tdi is None and task.tdi_fit is None:
            raise ValueError(f"task {task.name!r} has no TDI source for "
                             f"TDI-aware normalization")
    if not 1 <= test_size < n:
        raise ValueError("insufficient corpus for the test split")
    order = np.random.default_rng([seed, 5]).permutation(n)
    test_idx = np.sort(order[:test_size])
    pool = order[test_size:]
    if max(shot_list) > pool.size:
        raise ValueError(f"insufficient corpus: pool of {pool.size} parts "
                         f"cannot supply {max(shot_list)} shots")
    latents = encode_corpus(encoder, graphs)
    test_graphs = [graphs[i] for i in test_idx]
    options = fit_options or {}
    rows = []
    for shots in shot_list:
        for run in range(run_offset, run_offset + n_runs):
            subset = np.sort(np.random.default_rng([seed, shots, run])
                             .choice(pool, size=shots, replace=False))
            train_graphs = [graphs[i] for i in subset]
            for task in tasks:
                y_tr = np.asarray(task.labels, dtype=np.float64)[subset]
                y_te = np.asarray(task.labels, dtype=np.float64)[test_idx]
                tdi_all = None
                if needs_tdi:
                    if task.tdi_fit is not None:
                        tdi_all = np.asarray(task.tdi_fit(subset.copy()),
                                             dtype=np.float64).ravel()
                        if tdi_all.shape[0] != n:
                            raise ValueError(f"task {task.name!r} tdi_fit must "
                                             f"return one estimate per part")
                    else:
                        tdi_all = np.asarray(task.tdi, dtype=np.float64).ravel()
                for norm in normalizations:
                    tdi_tr = None if tdi_all is None else tdi_all[subset]
                    tdi_te = None if tdi_all is None else tdi_all[test_idx]
                    nz = make_normalizer(norm, y_tr, tdi=tdi_tr, log=task.log)
                    for strategy in strategies:
                        kind, rank = _parse_strategy(strategy)
                        opts = dict(options.get(strategy, {}))
                        t0 = time.perf_counter()
                        if kind == "probe-mlp":
                            fit = fit_probe_mlp(latents[subset], y_tr, nz,
                                                seed=run, tdi=tdi_tr, **opts)
                            preds = fit.predict(latents[test_idx], tdi=tdi_te)
                            trainable = fit.trainable_params
                        elif kind == "probe-svr":
                            model = fit_svr(latents[subset], y_tr, nz,
                                            tdi=tdi_tr, **opts)
                            preds = model.predict(latents[test_idx], tdi=tdi_te)
                            trainable = model.support_count + 1
                        elif kind == "lora":
                            fit = fit_lora(encoder, train_graphs, y_tr, nz,
                                           seed=run, rank=rank, tdi=tdi_tr, **opts)
                            preds = fit.predict(test_graphs, tdi=tdi_te)
                            trainable = fit.trainable_params
                        elif kind == "finetune":
                            fit = finetune_all(encoder, train_graphs, y_tr, nz,
                                               seed=run, tdi=tdi_tr, **opts)
                            preds = fit.predict(test_graphs, tdi=tdi_te)
                            trainable = fit.trainable_params
                        else:  # scratch
                            fit = fit_scratch(encoder.config, train_graphs, y_tr,
                                              nz, seed=run, tdi=tdi_tr, **opts)
                            preds = fit.predict(test_graphs, tdi=tdi_te)
                            trainable = fit.trainable_params
                        dt = time.perf_counter() - t0
                        rows.append(ReportRow(task=task.name, strategy=strategy,
                                              normalization=norm, shots=int(shots),
                                              run_seed=int(run),
                                              r2=r2_score(preds, y_te),
                                              fit_seconds=dt,
                                              trainable_params=int(trainable)))
    return EvalReport(rows)


# --- report files ---------------------------------------------------------------

def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report_csv(report: EvalReport, path: str, *, timing: bool = False):
    """Report rows as CSV.

    fit_seconds stays blank unless ``timing`` is set: wall-clock noise would
    break the byte-identical-rerun contract the reports are checked against.
    """
    lines = [",".join(CSV_COLUMNS)]
    for r in report.rows:
        secs = repr(float(r.fit_seconds)) if timing else ""
        lines.append(",".join([r.task, r.strategy, r.normalization, str(r.shots),
                               str(r.run_seed), repr(float(r.r2)), secs,
                               str(r.trainable_params)]))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_report_json(report: EvalReport, path: str, *, timing: bool = False):
    rows = []
    for r in report.rows:
        row = dataclasses.asdict(r)
        row["fit_seconds"] = float(r.fit_seconds) if timing else None
        rows.append(row)
    payload = {"rows": rows, "aggregates": report.aggregates()}
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_report_csv(path: str) -> EvalReport:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or tuple(lines[0].split(",")) != CSV_COLUMNS:
        raise ValueError("not a report CSV")
    rows = []
    for ln in lines[1:]:
        f = ln.split(",")
        rows.append(ReportRow(task=f[0], strategy=f[1], normalization=f[2],
                              shots=int(f[3]), run_seed=int(f[4]), r2=float(f[5]),
                              fit_seconds=float(f[6]) if f[6] else float("nan"),
                              trainable_params=int(f[7])))
    return EvalReport(rows)


# --- latent embedding ------------------------------------------------------------

def pca_embed(latents, dims: int = 2) -> np.ndarray:
    """Centered PCA projection with a deterministic sign convention (each
    direction's largest-magnitude component is made positive)."""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < dims:
        raise ValueError("pca_embed needs at least `dims` samples")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:dims].copy()
    for k in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[k])))
        if comps[k, j] < 0:
            comps[k] = -comps[k]
    return centered @ comps.T
