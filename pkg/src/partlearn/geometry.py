"""Analytic solid geometry for machine parts.

Parts are CSG trees over three axis-aligned primitives (box, sphere,
cylinder).  The signed distance convention is negative inside, positive
outside.  Boolean combinations use the min/max composition: exact on the
boundary and a conservative bound elsewhere, which is all the downstream
consumers need.  The module also owns dense SDF grids ("VSDF" files), the
part text format, biased point sampling, lattice mass properties, and the
tool-accessibility shadow analysis used to pick machining setups.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np


class PartValidationError(ValueError):
    """Raised for malformed primitives, empty solids, or bad part files."""


class SamplingBudgetError(RuntimeError):
    """Raised when near-surface rejection sampling exhausts its attempt budget."""


# ---------------------------------------------------------------------------
# axis-aligned orientations

def _signed_permutation_matrices() -> np.ndarray:
    """All 48 signed permutation matrices, in a fixed canonical order.

    Permutations are enumerated lexicographically and sign patterns in
    binary order with + first, so index 0 is the identity.
    """
    mats = []
    for perm in itertools.permutations(range(3)):
        base = np.zeros((3, 3), dtype=np.int64)
        for row, col in enumerate(perm):
            base[row, col] = 1
        for signs in itertools.product((1, -1), repeat=3):
            mats.append(np.diag(np.asarray(signs, dtype=np.int64)) @ base)
    return np.stack(mats)


SIGNED_PERMS_48 = _signed_permutation_matrices()
SIGNED_PERMS_48.setflags(write=False)

# the 24 proper rotations of the axis-aligned frame, identity first
ROTATIONS_24 = np.stack([m for m in SIGNED_PERMS_48 if round(np.linalg.det(m)) == 1])
ROTATIONS_24.setflags(write=False)


def rotation_index(matrix: np.ndarray) -> int:
    """Index of an integer rotation matrix in ``ROTATIONS_24``."""
    m = np.asarray(matrix, dtype=np.int64)
    for i, r in enumerate(ROTATIONS_24):
        if np.array_equal(r, m):
            return i
    raise ValueError("matrix is not one of the 24 axis-aligned rotations")


# ---------------------------------------------------------------------------
# bounding boxes

@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box given by its two extreme corners."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min_corner", np.asarray(self.min_corner, dtype=np.float64))
        object.__setattr__(self, "max_corner", np.asarray(self.max_corner, dtype=np.float64))
        if self.min_corner.shape != (3,) or self.max_corner.shape != (3,):
            raise PartValidationError("bounding box corners must be 3-vectors")

    @property
    def extents(self) -> np.ndarray:
        return self.max_corner - self.min_corner

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min_corner + self.max_corner)

    def is_valid(self) -> bool:
        return bool(np.all(self.extents > 0.0))

    def require_valid(self):
        if not self.is_valid():
            raise PartValidationError("bounding box has non-positive extent")

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(np.minimum(self.min_corner, other.min_corner),
                           np.maximum(self.max_corner, other.max_corner))

    def intersection(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(np.maximum(self.min_corner, other.min_corner),
                           np.minimum(self.max_corner, other.max_corner))

    def uvw_to_world(self, uvw: np.ndarray) -> np.ndarray:
        """Map normalized [0,1]^3 coordinates to world points."""
        return self.min_corner + np.asarray(uvw, dtype=np.float64) * self.extents

    def world_to_uvw(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.min_corner) / self.extents


# ---------------------------------------------------------------------------
# primitives

_PRIM_DIM_COUNT = {"box": 3, "sphere": 1, "cylinder": 2}


@dataclass(frozen=True)
class Primitive:
    """One analytic solid: ``box`` (full side lengths), ``sphere`` (radius) or
    ``cylinder`` (radius, height; axis along local z), with a rigid placement
    made of a translation and one of the 24 axis-aligned orientations."""

    kind: str
    dims: tuple
    translation: np.ndarray
    orientation: int = 0

    def __post_init__(self):
        if self.kind not in _PRIM_DIM_COUNT:
            raise PartValidationError(f"unknown primitive kind {self.kind!r}")
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != _PRIM_DIM_COUNT[self.kind]:
            raise PartValidationError(f"{self.kind} expects {_PRIM_DIM_COUNT[self.kind]} dims")
        if any(d <= 0.0 or not np.isfinite(d) for d in dims):
            raise PartValidationError("primitive dims must be positive and finite")
        if not 0 <= int(self.orientation) < 24:
            raise PartValidationError("orientation must index one of the 24 rotations")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "orientation", int(self.orientation))

    @property
    def rotation(self) -> np.ndarray:
        return ROTATIONS_24[self.orientation].astype(np.float64)

    def _local_points(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation  # == R.T applied to rows

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact Euclidean SDF of the primitive at (N,3) world points."""
        q = self._local_points(points)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.dims[0]
        if self.kind == "box":
            half = 0.5 * np.asarray(self.dims)
            d = np.abs(q) - half
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        # capped cylinder, axis along local z
        r, h = self.dims
        d_r = np.hypot(q[..., 0], q[..., 1]) - r
        d_z = np.abs(q[..., 2]) - 0.5 * h
        outside = np.hypot(np.maximum(d_r, 0.0), np.maximum(d_z, 0.0))
        inside = np.minimum(np.maximum(d_r, d_z), 0.0)
        return outside + inside

    def local_half_extents(self) -> np.ndarray:
        if self.kind == "sphere":
            r = self.dims[0]
            return np.array([r, r, r])
        if self.kind == "box":
            return 0.5 * np.asarray(self.dims)
        r, h = self.dims
        return np.array([r, r, 0.5 * h])

    def bbox(self) -> BoundingBox:
        # axis-aligned orientations map boxes to boxes, so this is exact
        half = np.abs(self.rotation) @ self.local_half_extents()
        return BoundingBox(self.translation - half, self.translation + half)


# ---------------------------------------------------------------------------
# CSG trees

_CSG_OPS = ("union", "difference", "intersection")


@dataclass(frozen=True)
class CsgNode:
    """Either a primitive leaf (``op == "prim"``) or a boolean combination."""

    op: str
    prim: Primitive | None = None
    left: "CsgNode | None" = None
    right: "CsgNode | None" = None

    def __post_init__(self):
        if self.op == "prim":
            if self.prim is None:
                raise PartValidationError("primitive node without a primitive")
        elif self.op in _CSG_OPS:
            if self.left is None or self.right is None:
                raise PartValidationError(f"{self.op} node needs two children")
        else:
            raise PartValidationError(f"unknown CSG op {self.op!r}")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        if self.op == "prim":
            return self.prim.sdf(points)
        a = self.left.sdf(points)
        b = self.right.sdf(points)
        if self.op == "union":
            return np.minimum(a, b)
        if self.op == "intersection":
            return np.maximum(a, b)
        return np.maximum(a, -b)

    def inside(self, points: np.ndarray) -> np.ndarray:
        """Boolean membership evaluated directly on the tree."""
        if self.op == "prim":
            return self.prim.sdf(points) <= 0.0
        a = self.left.inside(points)
        if self.op == "union":
            return a | self.right.inside(points)
        if self.op == "intersection":
            return a & self.right.inside(points)
        return a & ~self.right.inside(points)

    def bbox(self) -> BoundingBox:
        if self.op == "prim":
            return self.prim.bbox()
        if self.op == "union":
            return self.left.bbox().union(self.right.bbox())
        if self.op == "intersection":
            return self.left.bbox().intersection(self.right.bbox())
        return self.left.bbox()  # difference can only shrink the left solid

    def primitives(self):
        if self.op == "prim":
            yield self.prim
        else:
            yield from self.left.primitives()
            yield from self.right.primitives()


def box(size, at=(0.0, 0.0, 0.0), orientation=0) -> CsgNode:
    size = (size, size, size) if np.isscalar(size) else tuple(size)
    return CsgNode("prim", prim=Primitive("box", size, np.asarray(at, dtype=np.float64), orientation))


def sphere(radius, at=(0.0, 0.0, 0.0)) -> CsgNode:
    return CsgNode("prim", prim=Primitive("sphere", (radius,), np.asarray(at, dtype=np.float64)))


def cylinder(radius, height, at=(0.0, 0.0, 0.0), orientation=0) -> CsgNode:
    return CsgNode("prim", prim=Primitive("cylinder", (radius, height),
                                          np.asarray(at, dtype=np.float64), orientation))


def union(a: CsgNode, *rest: CsgNode) -> CsgNode:
    for b in rest:
        a = CsgNode("union", left=a, right=b)
    return a


def difference(a: CsgNode, b: CsgNode) -> CsgNode:
    return CsgNode("difference", left=a, right=b)


def intersection(a: CsgNode, b: CsgNode) -> CsgNode:
    return CsgNode("intersection", left=a, right=b)


@dataclass(frozen=True)
class CsgPart:
    """A named part: a non-empty CSG tree plus its cached bounding box."""

    part_id: str
    root: CsgNode
    _bbox: BoundingBox = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.part_id or any(c.isspace() for c in self.part_id):
            raise PartValidationError("part id must be non-empty and free of whitespace")
        bb = self.root.bbox()
        bb.require_valid()
        object.__setattr__(self, "_bbox", bb)

    @property
    def bbox(self) -> BoundingBox:
        return self._bbox

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return self.root.sdf(np.asarray(points, dtype=np.float64))

    def inside(self, points: np.ndarray) -> np.ndarray:
        return self.root.inside(np.asarray(points, dtype=np.float64))

    def validate(self, resolution: int = 24):
        """Cheap occupancy check that the solid is non-empty."""
        axes = [np.linspace(self.bbox.min_corner[k] + 0.5 * self.bbox.extents[k] / resolution,
                            self.bbox.max_corner[k] - 0.5 * self.bbox.extents[k] / resolution,
                            resolution) for k in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        if not np.any(self.sdf(pts) <= 0.0):
            raise PartValidationError(f"part {self.part_id!r} evaluates to an empty solid")


def sdf_eval(part: CsgPart, points: np.ndarray) -> np.ndarray | float:
    """SDF of a part at one (3,) point or a batch of (N,3) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape == (3,):
        return float(part.sdf(pts[None, :])[0])
    return part.sdf(pts)


def transform_part(part: CsgPart, matrix: np.ndarray, center: np.ndarray | None = None,
                   part_id: str | None = None) -> CsgPart:
    """Apply a signed permutation (one of the 48) about ``center`` (default:
    the part's bbox center).  Works for reflections too: every primitive is
    mirror-symmetric about its own local axis planes, so an improper matrix
    folds into a proper orientation index."""
    m = np.asarray(matrix, dtype=np.int64)
    c = part.bbox.center if center is None else np.asarray(center, dtype=np.float64)

    def map_node(node: CsgNode) -> CsgNode:
        if node.op != "prim":
            return CsgNode(node.op, left=map_node(node.left), right=map_node(node.right))
        p = node.prim
        t_new = m.astype(np.float64) @ (p.translation - c) + c
        r_new = m @ ROTATIONS_24[p.orientation]
        if round(np.linalg.det(r_new)) == -1:
            r_new = r_new @ np.diag(np.array([1, 1, -1], dtype=np.int64))
        return CsgNode("prim", prim=Primitive(p.kind, p.dims, t_new, rotation_index(r_new)))

    return CsgPart(part_id if part_id is not None else part.part_id, map_node(part.root))


# ---------------------------------------------------------------------------
# dense SDF grids

@dataclass
class SdfGrid:
    """An n^3 lattice of SDF values spanning exactly the part's bbox.

    ``values[i, j, k]`` is the SDF at lattice point (i, j, k) with i along x;
    lattice point i sits at ``min + extents * i / (n - 1)``.
    """

    n: int
    bbox: BoundingBox
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.n < 2:
            raise PartValidationError("grid needs at least 2 samples per axis")
        if self.values.shape != (self.n, self.n, self.n):
            raise PartValidationError("grid values must have shape (n, n, n)")
        if not np.all(np.isfinite(self.values)):
            raise PartValidationError("grid values must be finite")
        self.bbox.require_valid()

    def lattice_points(self) -> np.ndarray:
        """All lattice points as an (n^3, 3) array, x index fastest."""
        t = np.arange(self.n, dtype=np.float64) / (self.n - 1)
        axes = [self.bbox.min_corner[k] + t * self.bbox.extents[k] for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


def bake_grid(part: CsgPart, n: int = 40) -> SdfGrid:
    """Sample the analytic SDF on an n^3 lattice over the part's bbox."""
    t = np.arange(n, dtype=np.float64) / (n - 1)
    axes = [part.bbox.min_corner[k] + t * part.bbox.extents[k] for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = part.sdf(pts).reshape(n, n, n)
    return SdfGrid(n=n, bbox=part.bbox, values=values)


def trilinear(grid: SdfGrid, uvw: np.ndarray) -> np.ndarray | float:
    """Trilinear interpolation at normalized coordinates; queries outside
    [0,1]^3 are clamped to the boundary."""
    q = np.asarray(uvw, dtype=np.float64)
    single = q.shape == (3,)
    q = np.clip(q.reshape(-1, 3), 0.0, 1.0)
    t = q * (grid.n - 1)
    i0 = np.minimum(t.astype(np.int64), grid.n - 2)
    f = t - i0
    v = grid.values
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c = (v[ix, iy, iz] * (1 - fx) * (1 - fy) * (1 - fz)
         + v[ix + 1, iy, iz] * fx * (1 - fy) * (1 - fz)
         + v[ix, iy + 1, iz] * (1 - fx) * fy * (1 - fz)
         + v[ix, iy, iz + 1] * (1 - fx) * (1 - fy) * fz
         + v[ix + 1, iy + 1, iz] * fx * fy * (1 - fz)
         + v[ix + 1, iy, iz + 1] * fx * (1 - fy) * fz
         + v[ix, iy + 1, iz + 1] * (1 - fx) * fy * fz
         + v[ix + 1, iy + 1, iz + 1] * fx * fy * fz)
    return float(c[0]) if single else c


# --- "VSDF" binary format ---------------------------------------------------
# magic "VSDF", u16 version, u16 n, bbox as 6 little-endian f64
# (min xyz then max xyz), then n^3 f32 values, x index fastest.

_VSDF_MAGIC = b"VSDF"
_VSDF_VERSION = 1


def write_grid(grid: SdfGrid, path) -> None:
    header = _VSDF_MAGIC + struct.pack("<HH", _VSDF_VERSION, grid.n)
    corners = struct.pack("<6d", *grid.bbox.min_corner, *grid.bbox.max_corner)
    payload = grid.values.astype("<f4").flatten(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + corners + payload)


def read_grid(path) -> SdfGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _VSDF_MAGIC:
        raise PartValidationError(f"{path}: not a VSDF grid file")
    version, n = struct.unpack_from("<HH", blob, 4)
    if version != _VSDF_VERSION:
        raise PartValidationError(f"{path}: unsupported VSDF version {version}")
    lo = struct.unpack_from("<3d", blob, 8)
    hi = struct.unpack_from("<3d", blob, 32)
    expected = 56 + 4 * n ** 3
    if len(blob) != expected:
        raise PartValidationError(f"{path}: truncated VSDF payload")
    vals = np.frombuffer(blob, dtype="<f4", offset=56).astype(np.float64)
    values = vals.reshape((n, n, n), order="F")
    return SdfGrid(n=n, bbox=BoundingBox(np.asarray(lo), np.asarray(hi)), values=values)


# --- part text format -------------------------------------------------------
# One node per line, children referenced by earlier node indices:
#   # partlearn csg <version>
#   part <id>
#   node <idx> box <tx> <ty> <tz> <orientation> <sx> <sy> <sz>
#   node <idx> sphere <tx> <ty> <tz> <r>
#   node <idx> cylinder <tx> <ty> <tz> <orientation> <r> <h>
#   node <idx> union|difference|intersection <left> <right>
#   root <idx>

_PART_HEADER = "# partlearn csg 1"


def write_part(part: CsgPart, path) -> None:
    lines = [_PART_HEADER, f"part {part.part_id}"]
    index: dict[int, int] = {}

    def emit(node: CsgNode) -> int:
        if id(node) in index:
            return index[id(node)]
        if node.op == "prim":
            p = node.prim
            t = " ".join(repr(float(x)) for x in p.translation)
            d = " ".join(repr(float(x)) for x in p.dims)
            if p.kind == "sphere":
                body = f"sphere {t} {d}"
            else:
                body = f"{p.kind} {t} {p.orientation} {d}"
        else:
            li = emit(node.left)
            ri = emit(node.right)
            body = f"{node.op} {li} {ri}"
        idx = len(index)
        index[id(node)] = idx
        lines.append(f"node {idx} {body}")
        return idx

    root_idx = emit(part.root)
    lines.append(f"root {root_idx}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_part(path) -> CsgPart:
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    lines = [ln for ln in raw if ln and not ln.startswith("#")]
    try:
        nodes: dict[int, CsgNode] = {}
        part_id = None
        root_idx = None
        for ln in lines:
            tok = ln.split()
            if tok[0] == "part":
                part_id = tok[1]
            elif tok[0] == "node":
                idx = int(tok[1])
                kind = tok[2]
                if kind in _CSG_OPS:
                    nodes[idx] = CsgNode(kind, left=nodes[int(tok[3])], right=nodes[int(tok[4])])
                elif kind == "sphere":
                    nodes[idx] = CsgNode("prim", prim=Primitive(
                        "sphere", (float(tok[6]),), np.array([float(t) for t in tok[3:6]])))
                elif kind in ("box", "cylinder"):
                    dims = tuple(float(t) for t in tok[7:])
                    nodes[idx] = CsgNode("prim", prim=Primitive(
                        kind, dims, np.array([float(t) for t in tok[3:6]]), int(tok[6])))
                else:
                    raise PartValidationError(f"unknown node kind {kind!r}")
            elif tok[0] == "root":
                root_idx = int(tok[1])
            else:
                raise PartValidationError(f"unknown directive {tok[0]!r}")
        if part_id is None or root_idx is None:
            raise PartValidationError("part file missing part id or root")
        return CsgPart(part_id, nodes[root_idx])
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, PartValidationError):
            raise
        raise PartValidationError(f"{path}: malformed part file ({exc})") from exc


# ---------------------------------------------------------------------------
# biased point sampling

@dataclass(frozen=True)
class SamplePoint:
    uvw: tuple
    sdf: float
    near_boundary: bool


_SAMPLE_ATTEMPT_BUDGET = 10_000


def _project_to_surface(part: CsgPart, pts: np.ndarray, scale: float) -> np.ndarray:
    """A few Newton steps moving points onto the zero level set."""
    h = 1e-5 * scale
    offsets = np.array([[h, 0, 0], [-h, 0, 0], [0, h, 0], [0, -h, 0], [0, 0, h], [0, 0, -h]])
    p = pts.copy()
    for _ in range(8):
        d = part.sdf(p)
        probe = (p[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        dv = part.sdf(probe).reshape(-1, 6)
        g = np.stack([dv[:, 0] - dv[:, 1], dv[:, 2] - dv[:, 3], dv[:, 4] - dv[:, 5]], axis=1) / (2 * h)
        gn2 = np.sum(g * g, axis=1)
        step = np.where(gn2 > 1e-12, d / np.maximum(gn2, 1e-12), 0.0)
        p = p - step[:, None] * g
    return p


def near_surface_uvw(part: CsgPart, count: int, seed: int,
                     band: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``count`` points with |sdf| <= band * longest-extent.

    Surface points are found by projecting uniform bbox draws onto the zero
    level set, then jittered along the local normal and re-evaluated
    analytically.  Returns (uvw, sdf); raises SamplingBudgetError when the
    flat attempt budget runs out.
    """
    rng = np.random.default_rng(seed)
    bb = part.bbox
    scale = float(bb.extents.max())
    thr = band * scale
    got_uvw = np.empty((0, 3))
    got_sdf = np.empty(0)
    attempts = 0
    while len(got_sdf) < count:
        deficit = count - len(got_sdf)
        batch = max(256, 2 * deficit)
        if attempts + batch > _SAMPLE_ATTEMPT_BUDGET:
            batch = _SAMPLE_ATTEMPT_BUDGET - attempts
            if batch <= 0:
                raise SamplingBudgetError(
                    f"part {part.part_id!r}: near-surface sampling exceeded "
                    f"{_SAMPLE_ATTEMPT_BUDGET} attempts")
        attempts += batch
        cand = bb.min_corner + rng.random((batch, 3)) * bb.extents
        cand = _project_to_surface(part, cand, scale)
        h = 1e-5 * scale
        offs = np.array([[h, 0, 0], [-h, 0, 0], [0, h, 0], [0, -h, 0], [0, 0, h], [0, 0, -h]])
        dv = part.sdf((cand[:, None, :] + offs[None, :, :]).reshape(-1, 3)).reshape(-1, 6)
        g = np.stack([dv[:, 0] - dv[:, 1], dv[:, 2] - dv[:, 3], dv[:, 4] - dv[:, 5]], axis=1) / (2 * h)
        gn = np.linalg.norm(g, axis=1)
        normal = g / np.maximum(gn, 1e-12)[:, None]
        jitter = rng.uniform(-thr, thr, size=batch)
        cand = cand + jitter[:, None] * normal
        s = part.sdf(cand)
        uvw = bb.world_to_uvw(cand)
        keep = (np.abs(s) <= thr) & np.all(uvw >= 0.0, axis=1) & np.all(uvw <= 1.0, axis=1)
        got_uvw = np.concatenate([got_uvw, uvw[keep]])
        got_sdf = np.concatenate([got_sdf, s[keep]])
    return got_uvw[:count], got_sdf[:count]


def sample_points(part: CsgPart, grid: SdfGrid, count: int, seed: int) -> list[SamplePoint]:
    """Biased point set: exactly round(0.4 * count) points within the
    near-boundary band (|sdf| <= 0.01 of the longest bbox extent), the rest
    uniform in the bbox and re-drawn out of the band so the split is exact."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    bb = part.bbox
    scale = float(bb.extents.max())
    thr = 0.01 * scale
    n_near = int(round(0.4 * count))
    near_uvw, near_sdf = near_surface_uvw(part, n_near, seed=int(rng.integers(2 ** 31)))

    n_far = count - n_near
    far_uvw = np.empty((0, 3))
    far_sdf = np.empty(0)
    attempts = 0
    while len(far_sdf) < n_far:
        batch = max(256, 2 * (n_far - len(far_sdf)))
        if attempts > _SAMPLE_ATTEMPT_BUDGET:
            raise SamplingBudgetError(f"part {part.part_id!r}: uniform sampling budget exceeded")
        attempts += batch
        uvw = rng.random((batch, 3))
        s = part.sdf(bb.uvw_to_world(uvw))
        keep = np.abs(s) > thr
        far_uvw = np.concatenate([far_uvw, uvw[keep]])
        far_sdf = np.concatenate([far_sdf, s[keep]])
    far_uvw, far_sdf = far_uvw[:n_far], far_sdf[:n_far]

    out = [SamplePoint(tuple(u), float(s), True) for u, s in zip(near_uvw, near_sdf)]
    out += [SamplePoint(tuple(u), float(s), False) for u, s in zip(far_uvw, far_sdf)]
    return out


# ---------------------------------------------------------------------------
# lattice mass properties

@dataclass(frozen=True)
class MassProperties:
    volume: float
    area: float
    resolution: int


def sdf_lattice(part: CsgPart, resolution: int, pad_cells: int = 3):
    """Cell-center SDF values on a uniform lattice padded past the bbox, so
    level sets on the bbox itself stay interior.  Returns (values, cell size);
    the unpadded core (``[pad:-pad]`` on each axis) matches ``occupancy``'s
    sample points exactly."""
    bb = part.bbox
    h = bb.extents / resolution
    counts = np.array([resolution + 2 * pad_cells] * 3)
    axes = [bb.min_corner[k] + (np.arange(counts[k]) - pad_cells + 0.5) * h[k] for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = part.sdf(pts).reshape(*counts)
    return sdf, h


def lattice_mass_estimates(sdf: np.ndarray, h: np.ndarray) -> tuple[float, float]:
    """(volume, area) from a padded SDF lattice: volume by cell-center sign
    counting; area by the sign-change cell-face estimator with a local-normal
    weight (each axis crossing counts the cell face area times
    |grad|_2 / |grad|_1, which removes the axis-projection bias for tilted
    and curved surfaces)."""
    cellvol = float(np.prod(h))
    inside = sdf <= 0.0
    volume = float(inside.sum()) * cellvol

    gx, gy, gz = np.gradient(sdf, h[0], h[1], h[2])
    g1 = np.abs(gx) + np.abs(gy) + np.abs(gz)
    g2 = np.sqrt(gx * gx + gy * gy + gz * gz)
    w = np.where(g1 > 1e-9, g2 / np.maximum(g1, 1e-9), 1.0)

    area = 0.0
    for axis, face_area in ((0, h[1] * h[2]), (1, h[0] * h[2]), (2, h[0] * h[1])):
        lo = tuple(slice(0, -1) if k == axis else slice(None) for k in range(3))
        hi = tuple(slice(1, None) if k == axis else slice(None) for k in range(3))
        crossing = inside[lo] != inside[hi]
        w_mid = 0.5 * (w[lo] + w[hi])
        area += float(np.sum(crossing * w_mid)) * face_area
    return volume, area


def mass_properties(part: CsgPart, resolution: int = 96) -> MassProperties:
    """Lattice volume/area estimates (see ``lattice_mass_estimates``); the
    lattice is padded past the bbox so faces lying exactly on it are still
    seen.  Both estimates are documented to land within 5% on primitives at
    the default resolution."""
    if resolution < 64:
        raise ValueError("resolution must be at least 64 samples per axis")
    volume, area = lattice_mass_estimates(*sdf_lattice(part, resolution))
    return MassProperties(volume=volume, area=area, resolution=resolution)


# ---------------------------------------------------------------------------
# shadow volumes and setup orientation

AXES = ("+x", "-x", "+y", "-y", "+z", "-z")

_AXIS_VECTORS = {
    "+x": np.array([1, 0, 0]), "-x": np.array([-1, 0, 0]),
    "+y": np.array([0, 1, 0]), "-y": np.array([0, -1, 0]),
    "+z": np.array([0, 0, 1]), "-z": np.array([0, 0, -1]),
}


def occupancy(part: CsgPart, resolution: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center occupancy over the bbox; returns (solid mask, cell size)."""
    bb = part.bbox
    h = bb.extents / resolution
    axes = [bb.min_corner[k] + (np.arange(resolution) + 0.5) * h[k] for k in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = (part.sdf(pts) <= 0.0).reshape(resolution, resolution, resolution)
    return occ, h


def trapped_mask(occ: np.ndarray, axis_label: str) -> np.ndarray:
    """Void cells occluded by solid toward the tool's entry side.

    The tool travels along ``axis_label``; a void cell is trapped when solid
    material lies between it and the side the tool enters from.
    """
    axis = {"x": 0, "y": 1, "z": 2}[axis_label[1]]
    positive = axis_label[0] == "+"
    occ_work = occ if positive else np.flip(occ, axis=axis)
    # blocked[i] = any solid at index < i along the travel direction
    cum = np.cumsum(occ_work, axis=axis)
    any_before = (cum - occ_work.astype(cum.dtype)) > 0
    trapped = (~occ_work) & any_before
    return trapped if positive else np.flip(trapped, axis=axis)


def shadow_volume(part: CsgPart, axis: str, resolution: int = 64,
                  occ_cache: tuple[np.ndarray, np.ndarray] | None = None) -> float:
    """Trapped (tool-inaccessible) void volume for one approach direction."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    occ, h = occ_cache if occ_cache is not None else occupancy(part, resolution)
    return float(trapped_mask(occ, axis).sum()) * float(np.prod(h))


def shadow_volumes(part: CsgPart, resolution: int = 64,
                   occ_cache: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, float]:
    occ, h = occ_cache if occ_cache is not None else occupancy(part, resolution)
    cellvol = float(np.prod(h))
    return {a: float(trapped_mask(occ, a).sum()) * cellvol for a in AXES}


def choose_setup_orientation(part: CsgPart, resolution: int = 64) -> str:
    """Approach axis with the least trapped volume; ties resolve in the
    fixed order +x, -x, +y, -y, +z, -z."""
    vols = shadow_volumes(part, resolution)
    best = min(AXES, key=lambda a: (vols[a], AXES.index(a)))
    return best


def axis_after_rotation(axis: str, matrix: np.ndarray) -> str:
    """Label of a signed axis vector after applying an integer rotation."""
    v = matrix.astype(np.int64) @ _AXIS_VECTORS[axis]
    for label, vec in _AXIS_VECTORS.items():
        if np.array_equal(v, vec):
            return label
    raise ValueError("matrix does not map axes to axes")
