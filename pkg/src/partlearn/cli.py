"""Command-line pipeline for part corpora, pretraining, and evaluation.

Subcommands cover the full experiment lifecycle: ``gen`` builds a labeled
part corpus on disk, ``pretrain`` trains the self-supervised model over it,
``adapt`` fits one downstream cell, ``report`` runs the few-shot evaluation
grid, ``reconstruct`` decodes a part's SDF grid from a checkpoint,
``sweep-checkpoints`` scores a series of checkpoints on one task, and
``embed`` writes PCA coordinates of the latent space.

Configuration is a flat ``key = value`` text file (``#`` comments allowed);
unknown keys are rejected, and every command writes its fully resolved
configuration beside its outputs, so a run is reproducible from the echo
alone.  Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure (non-finite loss or an SVR fit that did not converge).
"""

from __future__ import annotations

import argparse
import dataclasses
import glob as globlib
import io
import json
import os
import sys
import warnings
import zipfile

# Heavy modules are imported lazily (see _ensure_imports) so that --threads
# can pin BLAS thread-count environment variables before numpy initializes.
np = None
augmentation = None
downstream = None
encoder = None
geometry = None
heuristics = None
pretrain = None
synth = None

DATA_ROOT_ENV = "PARTLEARN_DATA_ROOT"
MANIFEST_NAME = "manifest.json"
LABELS_NAME = "labels.csv"
LOCK_NAME = ".lock"
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    """Malformed invocation or configuration; exit status 1."""


class DataError(Exception):
    """Missing or inconsistent input files; exit status 2."""


def _ensure_imports():
    global np, augmentation, downstream, encoder, geometry, heuristics
    global pretrain, synth
    if np is not None:
        return
    import numpy
    from . import augmentation as _a, downstream as _d, encoder as _e
    from . import geometry as _g, heuristics as _h, pretrain as _p, synth as _s
    np = numpy
    augmentation, downstream, encoder = _a, _d, _e
    geometry, heuristics, pretrain, synth = _g, _h, _p, _s


# --- configuration -----------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple:
    return tuple(int(x.strip()) for x in s.split(",") if x.strip())


def _parse_strs(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


_PARSERS = {"int": int, "float": float, "str": str, "bool": _parse_bool,
            "ints": _parse_ints, "strs": _parse_strs}

# key -> (kind, default).  A 0 / 0.0 / "" default marked "module default"
# in the comments means the owning module's own default applies.
SCHEMA = {
    "run.seed": ("int", 0),
    "run.out": ("str", "out"),
    "data.root": ("str", ""),          # empty -> $PARTLEARN_DATA_ROOT or "data"

    "gen.n_parts": ("int", 64),
    "gen.min_primitives": ("int", 2),
    "gen.max_primitives": ("int", 8),
    "gen.resolution": ("int", 64),     # metrics / setup-orientation lattice
    "gen.grid_n": ("int", 40),         # stored SDF grid resolution

    "pretrain.hidden_width": ("int", 1024),
    "pretrain.latent_width": ("int", 64),
    "pretrain.convs_per_tier": ("int", 2),
    "pretrain.decoder1_width": ("int", 128),
    "pretrain.decoder2_width": ("int", 1024),
    "pretrain.decoder2_layers": ("int", 4),
    "pretrain.sdf_weight": ("float", 1.0),
    "pretrain.batch_rows": ("int", 64),
    "pretrain.points_per_row": ("int", 16),
    "pretrain.near_fraction": ("float", 0.4),
    "pretrain.pool_size": ("int", 256),
    "pretrain.grid_n": ("int", 40),
    "pretrain.lr_start": ("float", 1e-4),
    "pretrain.lr_end": ("float", 1e-6),
    "pretrain.total_steps": ("int", 1000),
    "pretrain.epochs": ("float", 0.0),  # >0 overrides total_steps
    "pretrain.log_every": ("int", 50),
    "pretrain.checkpoint_every": ("int", 0),  # 0 -> final checkpoint only;
                                              # use multiples of log_every
    "pretrain.eval_parts": ("int", 0),        # held-out parts for test loss

    "adapt.checkpoint": ("str", ""),
    "adapt.strategy": ("str", "probe-mlp"),
    "adapt.rank": ("int", 1),          # low-rank adapter rank (lora only)
    "adapt.normalization": ("str", "static"),
    "adapt.task": ("str", "am_time"),
    "adapt.shots": ("int", 100),
    "adapt.run": ("int", 0),
    "adapt.test_size": ("int", 2000),
    "adapt.steps": ("int", 0),         # 0 -> module default
    "adapt.lr_start": ("float", 0.0),  # 0 -> module default
    "adapt.lr_end": ("float", 0.0),    # 0 -> module default
    "adapt.batch_size": ("int", 0),    # 0 -> full batch
    "adapt.svr_c": ("float", 0.0),     # 0 -> module default
    "adapt.svr_epsilon": ("float", 0.0),
    "adapt.svr_gamma": ("float", 0.0),
    "adapt.svr_max_passes": ("int", 0),
    "adapt.degraded_sm_tdi": ("bool", False),
    "adapt.timing": ("bool", False),

    "report.checkpoint": ("str", ""),
    "report.strategies": ("strs", ("probe-mlp",)),
    "report.normalizations": ("strs", ("static",)),
    "report.tasks": ("strs", ("sm_time", "am_time", "stress_proxy", "blade_proxy")),
    "report.shots": ("ints", (50, 100)),
    "report.n_runs": ("int", 10),
    "report.test_size": ("int", 2000),
    "report.steps": ("int", 0),
    "report.batch_size": ("int", 0),
    "report.rank": ("int", 1),
    "report.degraded_sm_tdi": ("bool", False),
    "report.timing": ("bool", False),

    "reconstruct.checkpoint": ("str", ""),
    "reconstruct.part_id": ("str", ""),
    "reconstruct.n": ("int", 40),

    "sweep.checkpoints": ("str", ""),  # glob over checkpoint files
    "sweep.task": ("str", "am_time"),
    "sweep.shots": ("int", 100),
    "sweep.n_runs": ("int", 3),
    "sweep.test_size": ("int", 2000),
    "sweep.steps": ("int", 0),
    "sweep.batch_size": ("int", 0),

    "embed.checkpoint": ("str", ""),
    "embed.dims": ("int", 2),
}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; unknown or repeated keys are rejected."""
    out = {}
    for ln_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {ln_no}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise UsageError(f"config line {ln_no}: unknown key {key!r}")
        if key in out:
            raise UsageError(f"config line {ln_no}: duplicate key {key!r}")
        kind = SCHEMA[key][0]
        try:
            out[key] = _PARSERS[kind](val)
        except ValueError as exc:
            raise UsageError(f"config line {ln_no}: bad {kind} for "
                             f"{key!r}: {val!r} ({exc})") from exc
    return out


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


class RunConfig:
    """Fully resolved configuration: defaults overlaid with file and flags."""

    def __init__(self, overrides: dict | None = None):
        self.values = {k: spec[1] for k, spec in SCHEMA.items()}
        self.values.update(overrides or {})

    def __getitem__(self, key):
        return self.values[key]

    def data_root(self) -> str:
        root = self.values["data.root"]
        return root or os.environ.get(DATA_ROOT_ENV, "data")

    def echo_text(self, extra_comments=()) -> str:
        lines = [f"{k} = {_format_value(SCHEMA[k][0], self.values[k])}"
                 for k in sorted(self.values)]
        lines.extend(extra_comments)
        return "\n".join(lines) + "\n"


# --- output plumbing ---------------------------------------------------------------

class _DirLock:
    """Exclusive .lock file guarding one output directory."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, LOCK_NAME)
        self.fd = None

    def __enter__(self):
        os.makedirs(self.out_dir, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"output directory {self.out_dir!r} is locked; "
                            f"remove {self.path} if no other run is active")
        os.write(self.fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.path)
        return False


def _write_text(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_npz(path: str, arrays: dict):
    """np.savez with a pinned zip timestamp so reruns are byte-identical."""
    buf_zip = io.BytesIO()
    with zipfile.ZipFile(buf_zip, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf_zip.getvalue())
    os.replace(tmp, path)


def _echo_config(cfg: RunConfig, out_dir: str, command: str, extra=()):
    _write_text(os.path.join(out_dir, f"{command}.cfg"), cfg.echo_text(extra))


# --- dataset IO --------------------------------------------------------------------

GRAPH_FIELDS = ("vertex_feats", "edge_feats", "face_feats", "edge_verts",
                "edge_faces")
LABEL_COLUMNS = ("part_id", "sm_time", "am_time", "stress_proxy", "blade_proxy")


def write_graph_json(graph, path: str):
    payload = {f: getattr(graph, f).tolist() for f in GRAPH_FIELDS}
    _write_text(path, json.dumps(payload))


def read_graph_json(path: str):
    with open(path) as f:
        d = json.load(f)
    return encoder.PartGraph(**{f: d[f] for f in GRAPH_FIELDS})


def write_labels_csv(ids, labels, path: str):
    lines = [",".join(LABEL_COLUMNS)]
    for pid, rec in zip(ids, labels):
        vals = [repr(float(getattr(rec, f))) for f in LABEL_COLUMNS[1:]]
        lines.append(",".join([pid] + vals))
    _write_text(path, "\n".join(lines) + "\n")


def read_labels_csv(path: str):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or tuple(lines[0].split(",")) != LABEL_COLUMNS:
        raise DataError(f"{path} is not a labels file")
    ids, columns = [], {f: [] for f in LABEL_COLUMNS[1:]}
    for line in lines[1:]:
        cells = line.split(",")
        if len(cells) != len(LABEL_COLUMNS):
            raise DataError(f"{path}: malformed row {line!r}")
        ids.append(cells[0])
        for f, cell in zip(LABEL_COLUMNS[1:], cells[1:]):
            columns[f].append(float(cell))
    return ids, {f: np.array(v, dtype=np.float64) for f, v in columns.items()}


@dataclasses.dataclass
class Dataset:
    root: str
    manifest: dict
    ids: list
    labels: dict   # label field -> float64 array aligned with ids
    metas: list    # per-part meta dicts (geometry features, setup axis)
    graphs: list | None = None
    parts: list | None = None


def load_dataset(root: str, *, graphs: bool = True, parts: bool = False) -> Dataset:
    man_path = os.path.join(root, MANIFEST_NAME)
    if not os.path.isfile(man_path):
        raise DataError(f"no dataset manifest at {man_path}")
    with open(man_path) as f:
        manifest = json.load(f)
    if manifest.get("format") != "partlearn-dataset":
        raise DataError(f"{man_path} is not a dataset manifest")
    ids, labels = read_labels_csv(os.path.join(root, LABELS_NAME))
    entries = manifest["parts"]
    if [e["part_id"] for e in entries] != ids:
        raise DataError(f"{root}: manifest and labels disagree on part ids")
    metas = []
    for entry in entries:
        with open(os.path.join(root, entry["meta"])) as f:
            metas.append(json.load(f))
    ds = Dataset(root=root, manifest=manifest, ids=ids, labels=labels, metas=metas)
    if graphs:
        ds.graphs = [read_graph_json(os.path.join(root, e["graph"]))
                     for e in entries]
    if parts:
        ds.parts = [geometry.read_part(os.path.join(root, e["csg"]))
                    for e in entries]
    return ds


# --- task-difficulty estimates -------------------------------------------------------

class TdiProvider:
    """Refits a task's heuristic time model on each training subset.

    TDI-aware normalization in a few-shot cell may only use the labels of
    that cell's shots, so the heuristic is refit per subset; every fit is
    recorded for the config echo.  Estimates are floored at 5% of the
    smallest training label to keep them positive.
    """

    def __init__(self, task: str, features, labels, *, degraded: bool = False):
        self.task = task
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.degraded = degraded
        self.fitted = []

    def __call__(self, train_idx):
        feats = self.features[train_idx]
        times = self.labels[train_idx]
        if self.task == "am_time":
            model = heuristics.fit_am_model(feats, times)
        else:
            model = heuristics.fit_sm_model(feats, times,
                                            force_zero_slope=self.degraded)
        entry = {"train_size": int(len(train_idx)), **model.to_dict()}
        if not self.fitted or self.fitted[-1] != entry:  # refits of one cell
            self.fitted.append(entry)
        est = np.asarray(model.predict(self.features), dtype=np.float64)
        return np.maximum(est, 0.05 * float(np.min(times)))


def tdi_provider_for(task: str, metas, labels, *, degraded_sm: bool = False):
    """Per-part heuristic features from stored metadata, or None if the task
    has no heuristic estimator."""
    if task == "am_time":
        feats = [m["metrics"]["volume"] * heuristics.INFILL_FRACTION
                 + m["metrics"]["area"] * heuristics.WALL_THICKNESS
                 for m in metas]
        return TdiProvider(task, feats, labels)
    if task == "sm_time":
        feats = []
        for m in metas:
            ext = np.array(m["bbox_max"]) - np.array(m["bbox_min"])
            stock = float(np.prod(ext))
            feats.append(max(stock - m["metrics"]["volume"], 1e-9 * stock))
        return TdiProvider(task, feats, labels, degraded=degraded_sm)
    return None


def build_tasks(names, dataset: Dataset, *, need_tdi: bool,
                degraded_sm: bool = False):
    """TaskData list plus the providers keyed by task name."""
    tasks, providers = [], {}
    for name in names:
        if name not in dataset.labels:
            raise UsageError(f"unknown task {name!r}; choose from "
                             f"{sorted(dataset.labels)}")
        labels = dataset.labels[name]
        provider = None
        if need_tdi:
            provider = tdi_provider_for(name, dataset.metas, labels,
                                        degraded_sm=degraded_sm)
            if provider is None:
                raise UsageError(f"task {name!r} has no heuristic time model "
                                 f"for TDI-aware normalization")
            providers[name] = provider
        tasks.append(downstream.TaskData(name, labels, log=(name != "blade_proxy"),
                                         tdi_fit=provider))
    return tasks, providers


def _tdi_comments(providers: dict) -> list:
    return [f"# fitted-tdi {name} = {json.dumps(p.fitted, sort_keys=True)}"
            for name, p in sorted(providers.items())]


# --- commands ----------------------------------------------------------------------

def cmd_gen(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    n = cfg["gen.n_parts"]
    lo, hi = cfg["gen.min_primitives"], cfg["gen.max_primitives"]
    if n < 1 or lo < 2 or hi < lo:
        raise UsageError("gen.n_parts must be >= 1 and "
                         "2 <= gen.min_primitives <= gen.max_primitives")
    with _DirLock(out):
        for sub in ("parts", "graphs", "grids", "meta"):
            os.makedirs(os.path.join(out, sub), exist_ok=True)
        parts, labels, metrics = synth.generate_corpus(
            n, base_seed=cfg["run.seed"], primitive_range=(lo, hi),
            resolution=cfg["gen.resolution"])
        entries = []
        for i, (part, rec, mets) in enumerate(zip(parts, labels, metrics)):
            pid = part.part_id
            entry = {"part_id": pid, "seed": cfg["run.seed"] + i,
                     "csg": f"parts/{pid}.csg", "graph": f"graphs/{pid}.json",
                     "grid": f"grids/{pid}.vsdf", "meta": f"meta/{pid}.json"}
            geometry.write_part(part, os.path.join(out, entry["csg"]))
            write_graph_json(encoder.extract_graph(part),
                             os.path.join(out, entry["graph"]))
            geometry.write_grid(geometry.bake_grid(part, n=cfg["gen.grid_n"]),
                                os.path.join(out, entry["grid"]))
            meta = {"part_id": pid, "seed": entry["seed"],
                    "bbox_min": part.bbox.min_corner.tolist(),
                    "bbox_max": part.bbox.max_corner.tolist(),
                    "setup_axis": geometry.choose_setup_orientation(
                        part, resolution=cfg["gen.resolution"]),
                    "group_order": len(augmentation.all_codes()),
                    "metrics": dataclasses.asdict(mets),
                    "labels": dataclasses.asdict(rec)}
            _write_text(os.path.join(out, entry["meta"]),
                        json.dumps(meta, indent=2, sort_keys=True))
            entries.append(entry)
            if (i + 1) % 200 == 0:
                print(f"gen: {i + 1}/{n} parts", file=sys.stderr)
        write_labels_csv([p.part_id for p in parts], labels,
                         os.path.join(out, LABELS_NAME))
        manifest = {"format": "partlearn-dataset", "version": 1,
                    "n_parts": n, "base_seed": cfg["run.seed"],
                    "primitive_range": [lo, hi],
                    "metrics_resolution": cfg["gen.resolution"],
                    "grid_n": cfg["gen.grid_n"], "parts": entries}
        _write_text(os.path.join(out, MANIFEST_NAME),
                    json.dumps(manifest, indent=2, sort_keys=True))
        _echo_config(cfg, out, "gen")
    return f"wrote {n} parts to {out}"


def _pretrain_config(cfg: RunConfig, n_parts: int):
    enc_cfg = encoder.EncoderConfig(hidden_width=cfg["pretrain.hidden_width"],
                                    latent_width=cfg["pretrain.latent_width"],
                                    convs_per_tier=cfg["pretrain.convs_per_tier"],
                                    seed=cfg["run.seed"])
    total = cfg["pretrain.total_steps"]
    if cfg["pretrain.epochs"] > 0:
        # one epoch = every part sampled once, i.e. n_parts batch rows
        total = max(1, round(cfg["pretrain.epochs"] * n_parts
                             / cfg["pretrain.batch_rows"]))
    return pretrain.PretrainConfig(
        encoder=enc_cfg,
        decoder1_width=cfg["pretrain.decoder1_width"],
        decoder2_width=cfg["pretrain.decoder2_width"],
        decoder2_layers=cfg["pretrain.decoder2_layers"],
        sdf_weight=cfg["pretrain.sdf_weight"],
        batch_rows=cfg["pretrain.batch_rows"],
        points_per_row=cfg["pretrain.points_per_row"],
        near_fraction=cfg["pretrain.near_fraction"],
        pool_size=cfg["pretrain.pool_size"],
        grid_n=cfg["pretrain.grid_n"],
        lr_start=cfg["pretrain.lr_start"],
        lr_end=cfg["pretrain.lr_end"],
        total_steps=total,
        log_every=cfg["pretrain.log_every"],
        seed=cfg["run.seed"])


def cmd_pretrain(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    ds = load_dataset(cfg.data_root(), graphs=True, parts=True)
    pcfg = _pretrain_config(cfg, len(ds.ids))
    reuse_grids = ds.manifest["grid_n"] == pcfg.grid_n
    records = []
    for part, graph, entry in zip(ds.parts, ds.graphs, ds.manifest["parts"]):
        grid = (geometry.read_grid(os.path.join(ds.root, entry["grid"]))
                if reuse_grids else None)
        records.append(pretrain.build_record(part, pcfg, graph=graph, grid=grid))
    k = cfg["pretrain.eval_parts"]
    if k >= len(records):
        raise UsageError("pretrain.eval_parts must leave at least one "
                         "training part")
    train_records = records[:-k] if k > 0 else records
    eval_records = records[-k:] if k > 0 else None

    with _DirLock(out):
        ckpt_dir = os.path.join(out, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        model = pretrain.VirlModel(pcfg)
        every = cfg["pretrain.checkpoint_every"]

        def on_row(row):
            step = row["step"]
            if every > 0 and step % every == 0 and step < pcfg.total_steps:
                pretrain.save_checkpoint(
                    os.path.join(ckpt_dir, f"step_{step:08d}.virl"),
                    model, step,
                    (row["loss_total"], row["loss_bbox"], row["loss_sdf"]))
            print(f"pretrain: step {step}/{pcfg.total_steps} "
                  f"loss {row['loss_total']:.5f}", file=sys.stderr)

        history = pretrain.train(model, train_records,
                                 eval_records=eval_records, on_row=on_row)
        last = history[-1]
        pretrain.save_checkpoint(
            os.path.join(ckpt_dir, f"step_{pcfg.total_steps:08d}.virl"),
            model, pcfg.total_steps,
            (last["loss_total"], last["loss_bbox"], last["loss_sdf"]))
        pretrain.write_loss_csv(history, os.path.join(out, "loss.csv"))
        _echo_config(cfg, out, "pretrain")
    return (f"pretrained {pcfg.total_steps} steps on {len(train_records)} parts; "
            f"final loss {last['loss_total']:.5f}")


_GRADIENT_STRATEGIES = ("probe-mlp", "lora", "finetune", "scratch")


def _adapt_fit_options(cfg: RunConfig, strategy_id: str) -> dict:
    base = strategy_id.split("-r")[0] if strategy_id.startswith("lora") \
        else strategy_id
    opts = {}
    if base in _GRADIENT_STRATEGIES:
        if cfg["adapt.steps"] > 0:
            opts["steps"] = cfg["adapt.steps"]
        if cfg["adapt.lr_start"] > 0:
            opts["lr_start"] = cfg["adapt.lr_start"]
        if cfg["adapt.lr_end"] > 0:
            opts["lr_end"] = cfg["adapt.lr_end"]
        if cfg["adapt.batch_size"] > 0:
            opts["batch_size"] = cfg["adapt.batch_size"]
    elif base == "probe-svr":
        if cfg["adapt.svr_c"] > 0:
            opts["c"] = cfg["adapt.svr_c"]
        if cfg["adapt.svr_epsilon"] > 0:
            opts["epsilon"] = cfg["adapt.svr_epsilon"]
        if cfg["adapt.svr_gamma"] > 0:
            opts["gamma"] = cfg["adapt.svr_gamma"]
        if cfg["adapt.svr_max_passes"] > 0:
            opts["max_passes"] = cfg["adapt.svr_max_passes"]
    return {strategy_id: opts} if opts else {}


def _strategy_id(name: str, rank: int) -> str:
    allowed = ("probe-mlp", "probe-svr", "lora", "finetune", "scratch")
    if name not in allowed:
        raise UsageError(f"unknown strategy {name!r}; choose from {allowed}")
    if name == "lora":
        if rank < 1:
            raise UsageError("adapter rank must be >= 1")
        return f"lora-r{rank}"
    return name


def _check_normalizations(norms) -> bool:
    if not norms:
        raise UsageError("normalization list must not be empty")
    for nm in norms:
        if nm not in downstream.NORMALIZATIONS:
            raise UsageError(f"unknown normalization {nm!r}; choose from "
                             f"{downstream.NORMALIZATIONS}")
    return any(nm != "static" for nm in norms)


def _load_encoder(path: str):
    if not path:
        raise UsageError("a checkpoint path is required")
    if not os.path.isfile(path):
        raise DataError(f"no checkpoint at {path}")
    model, step, _ = pretrain.load_checkpoint(path)
    return model, step


def _save_fit(fit, path: str):
    """Fitted head / adapter / encoder weights as one npz archive."""
    arrays = {}
    if isinstance(fit, downstream.SvrModel):
        arrays["svr.inputs"] = fit.inputs
        arrays["svr.beta"] = fit.beta
        arrays["svr.bias"] = np.array(fit.bias)
        arrays["svr.gamma"] = np.array(fit.gamma)
    else:
        for name, t in fit.head.params().items():
            arrays[f"head.{name}"] = t.data
        if fit.lora is not None:
            # adapters ride on the checkpoint encoder, which is not re-saved
            for name, t in fit.lora.params().items():
                arrays[name] = t.data
        elif fit.encoder is not None:
            for name, t in fit.encoder.params().items():
                arrays[f"encoder.{name}"] = t.data
    _write_npz(path, arrays)


def cmd_adapt(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    strategy_id = _strategy_id(cfg["adapt.strategy"], cfg["adapt.rank"])
    norm = cfg["adapt.normalization"]
    need_tdi = _check_normalizations((norm,))
    model, _ = _load_encoder(cfg["adapt.checkpoint"])
    ds = load_dataset(cfg.data_root())
    tasks, providers = build_tasks((cfg["adapt.task"],), ds, need_tdi=need_tdi,
                                   degraded_sm=cfg["adapt.degraded_sm_tdi"])
    with _DirLock(out):
        report = downstream.run_protocol(
            model.encoder, ds.graphs, tasks,
            strategies=(strategy_id,), shot_list=(cfg["adapt.shots"],),
            normalizations=(norm,), n_runs=1, run_offset=cfg["adapt.run"],
            test_size=cfg["adapt.test_size"], seed=cfg["run.seed"],
            fit_options=_adapt_fit_options(cfg, strategy_id))
        row = report.rows[0]
        fit = _refit_cell(model.encoder, ds, tasks[0], strategy_id, norm, cfg)
        _save_fit(fit, os.path.join(out, "model.npz"))
        payload = dataclasses.asdict(row)
        if not cfg["adapt.timing"]:
            payload["fit_seconds"] = None
        nz = fit.normalizer
        payload["normalizer"] = {"mode": nz.mode, "log": nz.log,
                                 "tdi_feature": nz.tdi_feature,
                                 "mu": nz.mu, "sigma": nz.sigma}
        _write_text(os.path.join(out, "metrics.json"),
                    json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _echo_config(cfg, out, "adapt", _tdi_comments(providers))
    return (f"{row.task}/{strategy_id}/{norm} shots={row.shots} "
            f"run={row.run_seed}: r2 {row.r2:.4f}")


def _refit_cell(enc, ds: Dataset, task, strategy_id: str, norm: str,
                cfg: RunConfig):
    """Repeat one protocol cell's fit so its weights can be saved.

    run_protocol scores cells but does not return fitted models; the same
    seeds and subsets reproduce the identical fit here.
    """
    n = len(ds.graphs)
    seed, shots, run = cfg["run.seed"], cfg["adapt.shots"], cfg["adapt.run"]
    order = np.random.default_rng([seed, 5]).permutation(n)
    pool = order[cfg["adapt.test_size"]:]
    subset = np.sort(np.random.default_rng([seed, shots, run])
                     .choice(pool, size=shots, replace=False))
    y_tr = np.asarray(task.labels, dtype=np.float64)[subset]
    tdi_all = None
    if norm != "static":
        tdi_all = np.asarray(task.tdi_fit(subset.copy()), dtype=np.float64)
    tdi_tr = None if tdi_all is None else tdi_all[subset]
    nz = downstream.make_normalizer(norm, y_tr, tdi=tdi_tr, log=task.log)
    opts = _adapt_fit_options(cfg, strategy_id).get(strategy_id, {})
    kind, rank = downstream._parse_strategy(strategy_id)
    train_graphs = [ds.graphs[i] for i in subset]
    if kind == "probe-mlp":
        latents = downstream.encode_corpus(enc, train_graphs)
        return downstream.fit_probe_mlp(latents, y_tr, nz, seed=run,
                                        tdi=tdi_tr, **opts)
    if kind == "probe-svr":
        latents = downstream.encode_corpus(enc, train_graphs)
        return downstream.fit_svr(latents, y_tr, nz, tdi=tdi_tr, **opts)
    if kind == "lora":
        return downstream.fit_lora(enc, train_graphs, y_tr, nz, seed=run,
                                   rank=rank, tdi=tdi_tr, **opts)
    if kind == "finetune":
        return downstream.finetune_all(enc, train_graphs, y_tr, nz, seed=run,
                                       tdi=tdi_tr, **opts)
    return downstream.fit_scratch(enc.config, train_graphs, y_tr, nz, seed=run,
                                  tdi=tdi_tr, **opts)


def _report_fit_options(cfg: RunConfig, strategy_ids) -> dict:
    opts = {}
    for sid in strategy_ids:
        base = "lora" if sid.startswith("lora") else sid
        if base in _GRADIENT_STRATEGIES:
            cell = {}
            if cfg["report.steps"] > 0:
                cell["steps"] = cfg["report.steps"]
            if cfg["report.batch_size"] > 0:
                cell["batch_size"] = cfg["report.batch_size"]
            if cell:
                opts[sid] = cell
    return opts


def cmd_report(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    names = cfg["report.strategies"]
    if not names:
        raise UsageError("report.strategies must not be empty")
    strategy_ids = tuple(_strategy_id(nm, cfg["report.rank"]) for nm in names)
    need_tdi = _check_normalizations(cfg["report.normalizations"])
    model, _ = _load_encoder(cfg["report.checkpoint"])
    ds = load_dataset(cfg.data_root())
    tasks, providers = build_tasks(cfg["report.tasks"], ds, need_tdi=need_tdi,
                                   degraded_sm=cfg["report.degraded_sm_tdi"])
    with _DirLock(out):
        report = downstream.run_protocol(
            model.encoder, ds.graphs, tasks,
            strategies=strategy_ids, shot_list=cfg["report.shots"],
            normalizations=cfg["report.normalizations"],
            n_runs=cfg["report.n_runs"], test_size=cfg["report.test_size"],
            seed=cfg["run.seed"],
            fit_options=_report_fit_options(cfg, strategy_ids))
        timing = cfg["report.timing"]
        downstream.write_report_csv(report, os.path.join(out, "report.csv"),
                                    timing=timing)
        downstream.write_report_json(report, os.path.join(out, "report.json"),
                                     timing=timing)
        _echo_config(cfg, out, "report", _tdi_comments(providers))
    return f"wrote {len(report.rows)} result rows to {out}/report.csv"


def cmd_reconstruct(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    pid = cfg["reconstruct.part_id"]
    if not pid:
        raise UsageError("reconstruct.part_id is required")
    model, step = _load_encoder(cfg["reconstruct.checkpoint"])
    ds = load_dataset(cfg.data_root(), graphs=False, parts=False)
    by_id = {e["part_id"]: e for e in ds.manifest["parts"]}
    if pid not in by_id:
        raise DataError(f"part {pid!r} not in dataset {ds.root}")
    part = geometry.read_part(os.path.join(ds.root, by_id[pid]["csg"]))
    graph = encoder.extract_graph(part)
    n = cfg["reconstruct.n"]
    with _DirLock(out):
        center = (part.bbox.min_corner + part.bbox.max_corner) / 2
        rec = pretrain.reconstruct_grid(model, graph, center=center, n=n)
        geometry.write_grid(rec, os.path.join(out, f"{pid}_n{n}.vsdf"))
        iou = pretrain.iou_grids(rec, geometry.bake_grid(part, n=n))
        _write_text(os.path.join(out, "reconstruct.json"),
                    json.dumps({"part_id": pid, "n": n, "iou": iou,
                                "checkpoint_step": step},
                               indent=2, sort_keys=True) + "\n")
        _echo_config(cfg, out, "reconstruct")
    return f"reconstructed {pid} at n={n}: iou {iou:.4f}"


def cmd_sweep_checkpoints(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    pattern = cfg["sweep.checkpoints"]
    if not pattern:
        raise UsageError("sweep.checkpoints glob is required")
    paths = sorted(globlib.glob(pattern))
    if not paths:
        raise DataError(f"no checkpoints match {pattern!r}")
    ds = load_dataset(cfg.data_root())
    tasks, _ = build_tasks((cfg["sweep.task"],), ds, need_tdi=False)
    fit_opts = {}
    if cfg["sweep.steps"] > 0:
        fit_opts["steps"] = cfg["sweep.steps"]
    if cfg["sweep.batch_size"] > 0:
        fit_opts["batch_size"] = cfg["sweep.batch_size"]
    with _DirLock(out):
        lines = ["checkpoint,step,task,shots,runs,r2_mean,r2_std"]
        for path in paths:
            model, step = _load_encoder(path)
            report = downstream.run_protocol(
                model.encoder, ds.graphs, tasks,
                strategies=("probe-mlp",), shot_list=(cfg["sweep.shots"],),
                n_runs=cfg["sweep.n_runs"], test_size=cfg["sweep.test_size"],
                seed=cfg["run.seed"],
                fit_options={"probe-mlp": fit_opts} if fit_opts else None)
            agg = report.aggregates()[0]
            lines.append(",".join([os.path.basename(path), str(step),
                                   agg["task"], str(agg["shots"]),
                                   str(agg["runs"]), repr(agg["r2_mean"]),
                                   repr(agg["r2_std"])]))
            print(f"sweep: {os.path.basename(path)} r2 {agg['r2_mean']:.4f}",
                  file=sys.stderr)
        _write_text(os.path.join(out, "sweep.csv"), "\n".join(lines) + "\n")
        _echo_config(cfg, out, "sweep-checkpoints")
    return f"swept {len(paths)} checkpoints to {out}/sweep.csv"


def cmd_embed(cfg: RunConfig) -> str:
    out = cfg["run.out"]
    model, _ = _load_encoder(cfg["embed.checkpoint"])
    ds = load_dataset(cfg.data_root())
    dims = cfg["embed.dims"]
    latents = downstream.encode_corpus(model.encoder, ds.graphs)
    coords = downstream.pca_embed(latents, dims=dims)
    with _DirLock(out):
        label_fields = list(LABEL_COLUMNS[1:])
        header = (["part_id"] + [f"pc{k + 1}" for k in range(dims)]
                  + label_fields)
        lines = [",".join(header)]
        for i, pid in enumerate(ds.ids):
            cells = [pid] + [repr(float(c)) for c in coords[i]]
            cells += [repr(float(ds.labels[f][i])) for f in label_fields]
            lines.append(",".join(cells))
        _write_text(os.path.join(out, "embed.csv"), "\n".join(lines) + "\n")
        _echo_config(cfg, out, "embed")
    return f"embedded {len(ds.ids)} parts into {dims}-d coordinates"


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "report": cmd_report, "reconstruct": cmd_reconstruct,
            "sweep-checkpoints": cmd_sweep_checkpoints, "embed": cmd_embed}


# --- entry point -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partlearn",
                     description="Part corpus generation, self-supervised "
                                 "pretraining, and few-shot evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__, add_help=True)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out")
        p.add_argument("--threads", type=int,
                       help="BLAS thread count (set before numpy loads)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"no config file at {args.config}")
        with open(args.config) as f:
            overrides.update(parse_config_text(f.read()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        pairs = parse_config_text(item)
        overrides.update(pairs)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.out"] = args.out
    return RunConfig(overrides)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    # Pin thread counts before numpy initializes its BLAS thread pool.
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            for var in THREAD_ENV_VARS:
                os.environ[var] = argv[i + 1]
        elif arg.startswith("--threads="):
            for var in THREAD_ENV_VARS:
                os.environ[var] = arg.split("=", 1)[1]
    try:
        args = build_parser().parse_args(argv)
        _ensure_imports()
        from .nncore import NonFiniteLossError
        cfg = resolve_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("error", downstream.SvrConvergenceWarning)
            try:
                print(COMMANDS[args.command](cfg))
                return 0
            except (NonFiniteLossError,
                    downstream.SvrConvergenceWarning) as exc:
                print(f"numerical failure: {exc}", file=sys.stderr)
                return 3
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
