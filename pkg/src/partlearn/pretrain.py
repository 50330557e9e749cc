"""Self-supervised pretraining of the part encoder.

Each training row pairs a part with one of the 48 axis-aligned augmentation
codes.  The encoder sees only the untransformed part (one latent per unique
part in the batch); the code is handed to two decoder heads:

- a bounding-box head regressing the extents of the augmented part (the code
  permutes the axes, flips leave lengths unchanged), and
- an SDF head predicting the augmented part's normalized-coordinate SDF at
  query points, supervised by trilinear reads of the part's baked grid pulled
  back through the inverse code.

Query points per row mix a fixed near-boundary pool (transformed forward by
the row's code) with fresh uniform draws.  Checkpoints are a self-contained
binary format carrying the config, step, last losses and all weights as f32;
resuming restores weights and step but starts a fresh optimizer.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore as nn
from .augmentation import (IDENTITY, AugCode, all_codes, apply_to_extents,
                           apply_to_uvw, code_to_features, inverse)
from .encoder import EncoderConfig, PartEncoder, PartGraph, extract_graph
from .geometry import (BoundingBox, CsgPart, SdfGrid, bake_grid,
                       near_surface_uvw, trilinear)

_MAGIC = b"VIRL"
_VERSION = 1


@dataclass
class PretrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder1_width: int = 128
    decoder2_width: int = 1024
    decoder2_layers: int = 4
    sdf_weight: float = 1.0
    batch_rows: int = 64
    points_per_row: int = 16
    near_fraction: float = 0.4
    pool_size: int = 256
    grid_n: int = 40
    lr_start: float = 1e-4
    lr_end: float = 1e-6
    total_steps: int = 100_000
    log_every: int = 50
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


class Mlp:
    """Plain fully-connected stack with relu between layers.  The final layer
    starts near zero so regression heads begin at the target mean instead of
    spending early steps undoing a large random output."""

    FINAL_SCALE = 0.05

    def __init__(self, dims, rng, name):
        self.name = name
        self.layers = [nn.Linear(dims[i], dims[i + 1], rng, f"{name}.lin{i}")
                       for i in range(len(dims) - 1)]
        self.layers[-1].w.data *= self.FINAL_SCALE

    def __call__(self, x: nn.Tensor) -> nn.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nn.relu(x)
        return x

    def params(self) -> dict:
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


class VirlModel:
    """Encoder plus the two pretraining decoder heads."""

    def __init__(self, config: PretrainConfig | None = None):
        self.config = config or PretrainConfig()
        cfg = self.config
        self.encoder = PartEncoder(cfg.encoder)
        rng = np.random.default_rng(cfg.seed + 1)
        latent = cfg.encoder.latent_width
        self.dec_bbox = Mlp([latent + 5, cfg.decoder1_width, 3], rng, "dec_bbox")
        dims = [latent + 8] + [cfg.decoder2_width] * (cfg.decoder2_layers - 1) + [1]
        self.dec_sdf = Mlp(dims, rng, "dec_sdf")

    def params(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.params().items()}
        out.update(self.dec_bbox.params())
        out.update(self.dec_sdf.params())
        return out

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params().values())


@dataclass
class PartRecord:
    """Per-part training assets: the boundary graph, the baked grid, a fixed
    pool of near-boundary query points, and the bbox extents target."""

    part: CsgPart
    graph: PartGraph
    grid: SdfGrid
    pool_uvw: np.ndarray
    extents: np.ndarray


def record_seed(base_seed: int, part_id: str) -> int:
    return (int(base_seed) * 1_000_003 + zlib.crc32(part_id.encode())) % (2 ** 31)


def build_record(part: CsgPart, config: PretrainConfig,
                 graph: PartGraph | None = None,
                 grid: SdfGrid | None = None) -> PartRecord:
    graph = extract_graph(part) if graph is None else graph
    grid = bake_grid(part, n=config.grid_n) if grid is None else grid
    pool, _ = near_surface_uvw(part, config.pool_size,
                               seed=record_seed(config.seed, part.part_id))
    return PartRecord(part, graph, grid, pool, part.bbox.extents.copy())


def _batch_rows(records, config, rng):
    codes = all_codes()
    return [(int(rng.integers(len(records))), codes[int(rng.integers(len(codes)))])
            for _ in range(config.batch_rows)]


def make_targets(records, rows, config, rng):
    """Pure target assembly for a list of (record_index, code) rows.

    Returns (gather, code_feats, bbox_targets, queries, sdf_targets) where
    ``gather`` maps each row to its position among the batch's unique records.
    Queries mix near-boundary pool points pushed forward by the row's code
    with fresh uniform draws whose targets are pulled back through the
    inverse code.
    """
    unique = sorted({r for r, _ in rows})
    row_of = {r: i for i, r in enumerate(unique)}
    gather = np.array([row_of[r] for r, _ in rows], dtype=np.int64)
    code_feats = np.stack([code_to_features(code) for _, code in rows])
    bbox_targets = np.stack([apply_to_extents(code, records[r].extents)
                             for r, code in rows])
    k = config.points_per_row
    n_near = int(round(config.near_fraction * k))
    queries = np.empty((len(rows), k, 3))
    targets = np.empty((len(rows), k))
    for i, (r, code) in enumerate(rows):
        rec = records[r]
        picks = rec.pool_uvw[rng.integers(0, len(rec.pool_uvw), n_near)]
        queries[i, :n_near] = apply_to_uvw(code, picks)
        targets[i, :n_near] = trilinear(rec.grid, picks)
        uni = rng.random((k - n_near, 3))
        queries[i, n_near:] = uni
        targets[i, n_near:] = trilinear(rec.grid, apply_to_uvw(inverse(code), uni))
    return unique, gather, code_feats, bbox_targets, queries, targets


def _assemble(model: VirlModel, records, rows, rng):
    """Forward losses for a list of (record_index, code) rows."""
    cfg = model.config
    unique, gather, code_feats, bbox_targets, queries, targets = make_targets(
        records, rows, cfg, rng)
    latents = model.encoder.encode_graphs([records[r].graph for r in unique])
    lat_rows = nn.take_rows(latents, gather)
    k = cfg.points_per_row

    pred_bbox = model.dec_bbox(nn.concat_cols([lat_rows, nn.Tensor(code_feats)]))
    loss_bbox = nn.mse_loss(pred_bbox, nn.Tensor(bbox_targets))

    lat_q = nn.take_rows(lat_rows, np.repeat(np.arange(len(rows)), k))
    code_q = np.repeat(code_feats, k, axis=0)
    sdf_in = nn.concat_cols([lat_q, nn.Tensor(code_q),
                             nn.Tensor(queries.reshape(-1, 3))])
    pred_sdf = model.dec_sdf(sdf_in)
    loss_sdf = nn.mse_loss(pred_sdf, nn.Tensor(targets.reshape(-1, 1)))
    total = nn.add(loss_bbox, nn.scale(loss_sdf, cfg.sdf_weight))
    return total, loss_bbox, loss_sdf


def evaluation_loss(model: VirlModel, records) -> tuple:
    """Losses on a fixed, seeded evaluation batch (forward only)."""
    cfg = model.config
    rng = np.random.default_rng([cfg.seed, 13])
    rows = _batch_rows(records, cfg, rng)
    total, lb, ls = _assemble(model, records, rows, rng)
    return total.item(), lb.item(), ls.item()


def train(model: VirlModel, records, *, start_step: int = 0,
          eval_records=None, on_row=None) -> list:
    """Run the pretraining loop from ``start_step`` to ``total_steps``.

    Returns the logged history rows; ``on_row`` (if given) sees each row as it
    is produced.  Deterministic for a given config: every step draws from its
    own seeded stream, so resuming at step t replays the same batches.
    """
    cfg = model.config
    if not records:
        raise ValueError("train needs at least one part record")
    params = model.params()
    opt = nn.Adam(params)
    sched = nn.CosineSchedule(cfg.lr_start, cfg.lr_end, cfg.total_steps)
    history = []
    for step in range(start_step, cfg.total_steps):
        rng = np.random.default_rng([cfg.seed, 7, step])
        rows = _batch_rows(records, cfg, rng)
        opt.zero_grad()
        total, loss_bbox, loss_sdf = _assemble(model, records, rows, rng)
        nn.check_finite(total.item(), f"pretrain step {step}")
        total.backward()
        lr = sched.lr(step)
        opt.step(lr)
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.total_steps or step == start_step:
            test_total, _, _ = evaluation_loss(
                model, records if eval_records is None else eval_records)
            row = {"step": step + 1, "lr": lr, "loss_total": total.item(),
                   "loss_bbox": loss_bbox.item(), "loss_sdf": loss_sdf.item(),
                   "test_loss": test_total}
            history.append(row)
            if on_row is not None:
                on_row(row)
    return history


_CSV_COLUMNS = ("step", "lr", "loss_total", "loss_bbox", "loss_sdf", "test_loss")


def write_loss_csv(rows, path) -> None:
    lines = [",".join(_CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(
            str(row["step"]) if c == "step" else repr(float(row[c]))
            for c in _CSV_COLUMNS))
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, str(path))


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: VirlModel, step: int, losses=(0.0, 0.0, 0.0)) -> None:
    cfg_json = json.dumps(model.config.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode()
    chunks = [_MAGIC, struct.pack("<H", _VERSION),
              struct.pack("<I", len(cfg_json)), cfg_json,
              struct.pack("<Q", int(step)), struct.pack("<3d", *losses)]
    params = model.params()
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, str(path))


def load_checkpoint(path) -> tuple:
    """Returns (model, step, losses).  The optimizer always starts fresh on
    resume; only weights, config and the step counter round-trip."""
    with open(path, "rb") as f:
        blob = f.read()

    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError("truncated checkpoint")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != _MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (json_len,) = struct.unpack("<I", take(4))
    config = PretrainConfig.from_dict(json.loads(take(json_len).decode()))
    (step,) = struct.unpack("<Q", take(8))
    losses = struct.unpack("<3d", take(24))
    (n_tensors,) = struct.unpack("<I", take(4))
    model = VirlModel(config)
    params = model.params()
    seen = set()
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        data = np.frombuffer(take(4 * int(np.prod(shape))), dtype="<f4")
        if name not in params:
            raise ValueError(f"checkpoint tensor {name!r} has no home in the model")
        if params[name].data.shape != tuple(shape):
            raise ValueError(f"checkpoint tensor {name!r} shape mismatch")
        params[name].data = data.astype(np.float64).reshape(shape)
        seen.add(name)
    if off != len(blob):
        raise ValueError("trailing bytes after checkpoint payload")
    if seen != set(params):
        raise ValueError("checkpoint is missing model tensors")
    return model, step, losses


# --- reconstruction --------------------------------------------------------------


def reconstruct_grid(model: VirlModel, graph: PartGraph, *, code: AugCode = IDENTITY,
                     center=(0.0, 0.0, 0.0), n: int = 40,
                     chunk: int = 4096) -> SdfGrid:
    """Decode a dense SDF grid from a part's latent.  The grid's bbox comes
    from the bbox head's predicted extents, centered at ``center``."""
    latent = model.encoder.encode_graphs([graph])
    feats = code_to_features(code)[None, :]
    extents = model.dec_bbox(
        nn.concat_cols([latent, nn.Tensor(feats)])).data[0]
    extents = np.maximum(extents, 1e-6)
    axes = np.linspace(0.0, 1.0, n)
    uu, vv, ww = np.meshgrid(axes, axes, axes, indexing="ij")
    uvw = np.stack([uu.ravel(), vv.ravel(), ww.ravel()], axis=1)
    values = np.empty(len(uvw))
    lat_row = latent.data[0]
    for lo in range(0, len(uvw), chunk):
        q = uvw[lo:lo + chunk]
        block = np.concatenate([
            np.tile(lat_row, (len(q), 1)), np.tile(feats, (len(q), 1)), q], axis=1)
        values[lo:lo + chunk] = model.dec_sdf(nn.Tensor(block)).data[:, 0]
    c = np.asarray(center, dtype=np.float64)
    bbox = BoundingBox(c - 0.5 * extents, c + 0.5 * extents)
    return SdfGrid(n, bbox, values.reshape(n, n, n))


def iou_grids(a: SdfGrid, b: SdfGrid) -> float:
    """Intersection-over-union of the solid masks on index-aligned lattices."""
    ma = a.values <= 0.0
    mb = b.values <= 0.0
    if ma.shape != mb.shape:
        raise ValueError("grids must share a resolution")
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(ma, mb).sum() / union)
