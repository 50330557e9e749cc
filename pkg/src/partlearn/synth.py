"""Seeded part generator and proxy manufacturability labels.

Parts are a rectangular base block with boolean features cut or added:
through-holes along any axis, rectangular pockets sunk into a face, and
cylindrical bosses on top.  Feature sizes stay above 0.1 model units and
every boolean overshoots its mating face, so boundary-graph extraction sees
clean faces.  Labels are openly synthetic but depend on volumetric and
overhang structure, and every one is an exact closed form of the features
recorded alongside the corpus — a regressor fit on those features is the
learnability ceiling.

All labels derive from one padded SDF lattice per part:

- additive time: deposited volume (sparse infill + wall shell + support
  under overhangs + an adhesion raft over the footprint) times a small
  part-seeded noise factor;
- subtractive time: machinable void of the bounding-box stock, split into
  bulk / near-surface / surface bands at coarse / medium / fine removal
  rates, plus a fine skin pass over the part surface;
- stress proxy: build height times the largest layer-to-layer area step,
  plus overhang volume;
- blade-hazard proxy: fraction of footprint columns containing an overhang.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import (AXES, CsgPart, CsgNode, PartValidationError, box,
                       cylinder, difference, lattice_mass_estimates,
                       rotation_index, sdf_lattice, trapped_mask, union)
from .heuristics import INFILL_FRACTION, WALL_THICKNESS, AmVolumeTerms

# additive-time constants: deposit rate, support factor b, adhesion raft
# thickness c, and the +/-3% noise half-width
AM_SUPPORT_FACTOR = 0.8
AM_ADHESION_THICKNESS = 0.3
AM_NOISE = 0.03

# subtractive-time constants: removal rates (volume/time) for the three tool
# bits, band widths as fractions of the longest extent, and the skin depth
# of the finishing pass
SM_RATE_COARSE = 1.0
SM_RATE_MEDIUM = 0.25
SM_RATE_FINE = 0.0625
SM_BAND_SURFACE = 0.015
SM_BAND_NEAR = 0.06
SM_SKIN_DEPTH = 0.01

# stress proxy: k1 * height * max layer-area step + k2 * overhang volume
STRESS_LAYER_FACTOR = 1.0
STRESS_OVERHANG_FACTOR = 2.0

_LATTICE_PAD = 3
_RETRY_BUDGET = 20

# cylinder axes: orientation indices whose rotation sends local z to world
# x, y, z respectively
_AXIS_ORIENTATION = {
    0: rotation_index(np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])),
    1: rotation_index(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])),
    2: 0,
}


@dataclass(frozen=True)
class PartSpec:
    """Recipe for one generated part: a seed and which feature kinds the
    generator may draw.  primitive_count includes the base block."""

    seed: int
    primitive_count: int = 4
    through_holes: bool = True
    pockets: bool = True
    bosses: bool = True

    def __post_init__(self):
        if not 2 <= self.primitive_count <= 8:
            raise ValueError("primitive_count must be in [2, 8]")
        if not (self.through_holes or self.pockets or self.bosses):
            raise ValueError("at least one feature kind must be enabled")


@dataclass(frozen=True)
class LabelRecord:
    sm_time: float
    am_time: float
    stress_proxy: float
    blade_proxy: float

    def __post_init__(self):
        if min(self.sm_time, self.am_time, self.stress_proxy) <= 0.0:
            raise ValueError("time and stress labels must be positive")
        if not 0.0 <= self.blade_proxy <= 1.0:
            raise ValueError("blade_proxy must lie in [0, 1]")


def _add_hole(tree: CsgNode, dims: np.ndarray, rng) -> CsgNode:
    axis = int(rng.integers(3))
    u, v = [k for k in range(3) if k != axis]
    r_hi = min(0.13, 0.25 * min(dims[u], dims[v]))
    r = float(rng.uniform(0.05, max(0.0501, r_hi)))
    at = np.empty(3)
    at[axis] = dims[axis] / 2
    at[u] = rng.uniform(r + 0.08, dims[u] - r - 0.08)
    at[v] = rng.uniform(r + 0.08, dims[v] - r - 0.08)
    drill = cylinder(r, dims[axis] + 0.2, at=tuple(at),
                     orientation=_AXIS_ORIENTATION[axis])
    return difference(tree, drill)


def _add_pocket(tree: CsgNode, dims: np.ndarray, rng) -> CsgNode:
    # face the pocket sinks into: top, or one of the four sides
    axis, side = [(2, +1), (0, +1), (0, -1), (1, +1), (1, -1)][int(rng.integers(5))]
    u, v = [k for k in range(3) if k != axis]
    su = float(rng.uniform(0.12, max(0.121, min(0.35, dims[u] - 0.2))))
    sv = float(rng.uniform(0.12, max(0.121, min(0.35, dims[v] - 0.2))))
    depth = float(rng.uniform(0.1, 0.45 * dims[axis]))
    size = np.empty(3)
    size[axis], size[u], size[v] = depth + 0.05, su, sv
    at = np.empty(3)
    face = dims[axis] if side > 0 else 0.0
    # cut spans [face - depth, face + 0.05] along the face normal (mirrored
    # for side = -1), overshooting the face so the difference never just touches
    at[axis] = face + side * (0.05 - depth) / 2
    at[u] = rng.uniform(su / 2 + 0.08, dims[u] - su / 2 - 0.08)
    at[v] = rng.uniform(sv / 2 + 0.08, dims[v] - sv / 2 - 0.08)
    return difference(tree, box(tuple(size), at=tuple(at)))


def _add_boss(tree: CsgNode, dims: np.ndarray, rng) -> CsgNode:
    r = float(rng.uniform(0.06, 0.12))
    height = float(rng.uniform(0.1, 0.3))
    at = (float(rng.uniform(r + 0.08, dims[0] - r - 0.08)),
          float(rng.uniform(r + 0.08, dims[1] - r - 0.08)),
          # embed 0.05 into the top face so the union never merely touches
          dims[2] + (height - 0.05) / 2)
    return union(tree, cylinder(r, height + 0.05, at=at))


def generate_part(spec: PartSpec, part_id: str | None = None) -> CsgPart:
    """Deterministic part for a spec; resamples degenerate draws, failing
    after a flat retry budget."""
    part_id = f"part-{spec.seed}" if part_id is None else part_id
    kinds = []
    if spec.through_holes:
        kinds.append(_add_hole)
    if spec.pockets:
        kinds.append(_add_pocket)
    if spec.bosses:
        kinds.append(_add_boss)
    for attempt in range(_RETRY_BUDGET):
        rng = np.random.default_rng([spec.seed, attempt])
        dims = rng.uniform(0.6, 1.2, size=3)
        tree = box(tuple(dims), at=tuple(dims / 2))
        for _ in range(spec.primitive_count - 1):
            tree = kinds[int(rng.integers(len(kinds)))](tree, dims, rng)
        try:
            part = CsgPart(part_id, tree)
            part.validate(resolution=24)
            return part
        except (PartValidationError, ValueError):
            continue
    raise RuntimeError(
        f"seed {spec.seed}: no valid part within {_RETRY_BUDGET} attempts")


@dataclass(frozen=True)
class PartMetrics:
    """Closed-form geometry features the labels are built from, all measured
    on one padded SDF lattice."""

    volume: float
    area: float
    height: float
    deposit_feature: float
    overhang_volume: float
    footprint_area: float
    max_layer_step: float
    blade_fraction: float
    sm_bulk: float
    sm_near: float
    sm_surface: float
    sm_skin: float
    resolution: int

    FEATURE_FIELDS = ("volume", "area", "height", "deposit_feature",
                      "overhang_volume", "footprint_area", "max_layer_step",
                      "blade_fraction", "sm_bulk", "sm_near", "sm_surface",
                      "sm_skin")

    def feature_vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FEATURE_FIELDS])


def part_metrics(part: CsgPart, resolution: int = 64) -> PartMetrics:
    values, h = sdf_lattice(part, resolution, pad_cells=_LATTICE_PAD)
    volume, area = lattice_mass_estimates(values, h)
    core = values[_LATTICE_PAD:-_LATTICE_PAD, _LATTICE_PAD:-_LATTICE_PAD,
                  _LATTICE_PAD:-_LATTICE_PAD]
    solid = core <= 0.0
    cellvol = float(np.prod(h))
    cell_xy = float(h[0] * h[1])
    scale = float(part.bbox.extents.max())

    overhang = trapped_mask(solid, "-z")
    overhang_volume = float(overhang.sum()) * cellvol
    footprint_cols = solid.any(axis=2)
    footprint_area = float(footprint_cols.sum()) * cell_xy
    overhang_cols = overhang.any(axis=2)
    blade_fraction = (float(overhang_cols.sum()) / float(footprint_cols.sum())
                      if footprint_cols.any() else 0.0)

    # layer areas along the build axis, with empty layers at both ends so the
    # first and last slices count as steps
    layer_areas = solid.sum(axis=(0, 1)).astype(np.float64) * cell_xy
    max_layer_step = float(np.abs(np.diff(np.concatenate(
        [[0.0], layer_areas, [0.0]]))).max())

    # machinable void: reachable along at least one of the six tool axes
    void = ~solid
    reachable = np.zeros_like(void)
    for axis in AXES:
        reachable |= void & ~trapped_mask(solid, axis)
    d = core[reachable]
    surf_thr = SM_BAND_SURFACE * scale
    near_thr = SM_BAND_NEAR * scale
    sm_surface = float((d <= surf_thr).sum()) * cellvol
    sm_near = float(((d > surf_thr) & (d <= near_thr)).sum()) * cellvol
    sm_bulk = float((d > near_thr).sum()) * cellvol
    sm_skin = area * SM_SKIN_DEPTH * scale

    return PartMetrics(
        volume=volume, area=area, height=float(part.bbox.extents[2]),
        deposit_feature=volume * INFILL_FRACTION + area * WALL_THICKNESS,
        overhang_volume=overhang_volume, footprint_area=footprint_area,
        max_layer_step=max_layer_step, blade_fraction=blade_fraction,
        sm_bulk=sm_bulk, sm_near=sm_near, sm_surface=sm_surface,
        sm_skin=sm_skin, resolution=resolution)


def _metrics(part, metrics, resolution):
    return part_metrics(part, resolution) if metrics is None else metrics


def label_am_time(part: CsgPart, metrics: PartMetrics | None = None,
                  resolution: int = 64) -> float:
    m = _metrics(part, metrics, resolution)
    terms = AmVolumeTerms.from_properties(
        m.volume, m.area,
        support=AM_SUPPORT_FACTOR * m.overhang_volume,
        adhesion=AM_ADHESION_THICKNESS * m.footprint_area)
    noise = 1.0 + AM_NOISE * (2.0 * np.random.default_rng(
        zlib.crc32(part.part_id.encode())).random() - 1.0)
    return float(terms.total * noise)


def label_sm_time(part: CsgPart, metrics: PartMetrics | None = None,
                  resolution: int = 64) -> float:
    m = _metrics(part, metrics, resolution)
    return float(m.sm_bulk / SM_RATE_COARSE + m.sm_near / SM_RATE_MEDIUM
                 + (m.sm_surface + m.sm_skin) / SM_RATE_FINE)


def label_stress_proxy(part: CsgPart, metrics: PartMetrics | None = None,
                       resolution: int = 64) -> float:
    m = _metrics(part, metrics, resolution)
    return float(STRESS_LAYER_FACTOR * m.height * m.max_layer_step
                 + STRESS_OVERHANG_FACTOR * m.overhang_volume)


def label_blade_proxy(part: CsgPart, metrics: PartMetrics | None = None,
                      resolution: int = 64) -> float:
    m = _metrics(part, metrics, resolution)
    return float(np.clip(m.blade_fraction, 0.0, 1.0))


def make_labels(part: CsgPart, metrics: PartMetrics | None = None,
                resolution: int = 64) -> LabelRecord:
    m = _metrics(part, metrics, resolution)
    return LabelRecord(
        sm_time=label_sm_time(part, m),
        am_time=label_am_time(part, m),
        stress_proxy=label_stress_proxy(part, m),
        blade_proxy=label_blade_proxy(part, m))


LABEL_FIELDS = ("sm_time", "am_time", "stress_proxy", "blade_proxy")


def generate_corpus(n_parts: int, base_seed: int = 0,
                    primitive_range: tuple[int, int] = (2, 8),
                    resolution: int = 64):
    """(parts, labels, metrics) for ``n_parts`` seeded specs.  Part i uses
    seed base_seed + i and a primitive count cycling over ``primitive_range``
    by seed, so corpora of different sizes share a prefix."""
    parts, labels, metrics = [], [], []
    lo, hi = primitive_range
    for i in range(n_parts):
        seed = base_seed + i
        count_rng = np.random.default_rng([seed, 991])
        spec = PartSpec(seed=seed,
                        primitive_count=int(count_rng.integers(lo, hi + 1)))
        part = generate_part(spec, part_id=f"part{i:06d}")
        m = part_metrics(part, resolution)
        parts.append(part)
        metrics.append(m)
        labels.append(make_labels(part, m))
    return parts, labels, metrics
