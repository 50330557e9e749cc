"""The 48-element axis-aligned symmetry group used for training augmentation.

A code is (flip_x, flip_y, flip_z, perm_major, perm_order): the permutation is
applied first, then per-axis flips about the center of the normalized unit
cube.  ``perm_major`` names the original axis that becomes the first output
axis; ``perm_order`` = 0 keeps the two remaining axes in ascending order,
1 swaps them.  Flips refer to output axes.  Identity is (0, 0, 0, 0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CsgPart, SdfGrid, trilinear


@dataclass(frozen=True)
class AugCode:
    flip_x: int
    flip_y: int
    flip_z: int
    perm_major: int
    perm_order: int

    def __post_init__(self):
        for f in (self.flip_x, self.flip_y, self.flip_z, self.perm_order):
            if f not in (0, 1):
                raise ValueError("flips and perm_order must be 0 or 1")
        if self.perm_major not in (0, 1, 2):
            raise ValueError("perm_major must be 0, 1 or 2")

    @property
    def flips(self) -> tuple:
        return (self.flip_x, self.flip_y, self.flip_z)

    @property
    def perm(self) -> tuple:
        """Axis permutation as a lookup: output axis j reads input axis perm[j]."""
        rest = [a for a in (0, 1, 2) if a != self.perm_major]
        if self.perm_order:
            rest.reverse()
        return (self.perm_major, rest[0], rest[1])


IDENTITY = AugCode(0, 0, 0, 0, 0)


def all_codes() -> list[AugCode]:
    """All 48 codes in a fixed order, identity first."""
    out = []
    for major in (0, 1, 2):
        for order in (0, 1):
            for fx in (0, 1):
                for fy in (0, 1):
                    for fz in (0, 1):
                        out.append(AugCode(fx, fy, fz, major, order))
    out.remove(IDENTITY)
    return [IDENTITY] + out


def to_matrix(code: AugCode) -> np.ndarray:
    """Signed permutation matrix of the code's action on centered coordinates
    (permute first, then flip output axes)."""
    m = np.zeros((3, 3), dtype=np.int64)
    for j, src in enumerate(code.perm):
        m[j, src] = -1 if code.flips[j] else 1
    return m


def code_from_matrix(matrix: np.ndarray) -> AugCode:
    """Inverse of ``to_matrix``; rejects anything but a signed permutation."""
    m = np.asarray(matrix, dtype=np.int64)
    if m.shape != (3, 3) or not np.array_equal(np.abs(m) @ np.abs(m).T, np.eye(3, dtype=np.int64)):
        raise ValueError("not a signed permutation matrix")
    perm = [int(np.argmax(np.abs(m[j]))) for j in range(3)]
    flips = [1 if m[j, perm[j]] < 0 else 0 for j in range(3)]
    major = perm[0]
    rest = [a for a in (0, 1, 2) if a != major]
    if perm[1:] == rest:
        order = 0
    elif perm[1:] == rest[::-1]:
        order = 1
    else:
        raise ValueError("rows do not form a permutation")
    return AugCode(flips[0], flips[1], flips[2], major, order)


def compose(a: AugCode, b: AugCode) -> AugCode:
    """The code acting as: apply ``b`` first, then ``a``."""
    return code_from_matrix(to_matrix(a) @ to_matrix(b))


def inverse(code: AugCode) -> AugCode:
    # signed permutations are orthogonal, so the inverse is the transpose
    return code_from_matrix(to_matrix(code).T)


def apply_to_uvw(code: AugCode, uvw: np.ndarray) -> np.ndarray:
    """Act on normalized [0,1]^3 coordinates: permute axes, then map
    u -> 1 - u on flipped output axes."""
    q = np.asarray(uvw, dtype=np.float64)
    single = q.shape == (3,)
    q = q.reshape(-1, 3)
    out = q[:, list(code.perm)].copy()
    for j, f in enumerate(code.flips):
        if f:
            out[:, j] = 1.0 - out[:, j]
    return out[0] if single else out


def apply_to_extents(code: AugCode, extents: np.ndarray) -> np.ndarray:
    """Bounding-box extents only permute; flips leave lengths unchanged."""
    e = np.asarray(extents, dtype=np.float64).reshape(3)
    return e[list(code.perm)].copy()


def augmented_sdf(part: CsgPart, grid: SdfGrid, code: AugCode,
                  uvw: np.ndarray) -> np.ndarray | float:
    """SDF of the transformed part at its normalized coordinates ``uvw``,
    read from the untransformed grid.  Signed permutations are isometries,
    so the grid value at the pulled-back location is exact (up to the grid's
    own interpolation error)."""
    return trilinear(grid, apply_to_uvw(inverse(code), uvw))


def apply_to_world(code: AugCode, part: CsgPart, points: np.ndarray) -> np.ndarray:
    """World-space action of a code: the signed permutation about the part's
    bbox center.  Useful for isometry checks against the analytic SDF."""
    c = part.bbox.center
    p = np.asarray(points, dtype=np.float64)
    return (p - c) @ to_matrix(code).astype(np.float64).T + c


def code_to_features(code: AugCode) -> np.ndarray:
    """The 5-scalar encoding fed to the decoders: flips as {-1,+1},
    perm_major as {0, 0.5, 1}, perm_order as {0, 1}."""
    return np.array([
        2.0 * code.flip_x - 1.0,
        2.0 * code.flip_y - 1.0,
        2.0 * code.flip_z - 1.0,
        code.perm_major / 2.0,
        float(code.perm_order),
    ])


def code_to_ints(code: AugCode) -> tuple:
    """The five raw integers, for dataset records."""
    return (code.flip_x, code.flip_y, code.flip_z, code.perm_major, code.perm_order)


def code_from_ints(vals) -> AugCode:
    fx, fy, fz, major, order = (int(v) for v in vals)
    return AugCode(fx, fy, fz, major, order)
