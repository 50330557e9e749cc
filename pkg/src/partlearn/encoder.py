"""Boundary graph extraction and a three-tier graph encoder.

A part's CSG tree is flattened to a set of canonical analytic surfaces
(axis-aligned planes, axis-aligned cylinders, spheres).  Each surface is
point-sampled; samples that lie on the part boundary and see void on at least
one side of the surface make it a *face*.  Pairs of faces are intersected
analytically into candidate curves (lines, arcs, circles); curve samples that
lie on the boundary with both parent surfaces locally active become *edges*,
and endpoints of line edges become *vertices*.  The result is a hierarchical
graph processed bottom-up: vertex states feed edge states feed face states,
and mean-pooled face states map to the latent code.

Conventions (documented, not configurable):
- only quadric/quadric intersections are skipped (cylinder-cylinder,
  cylinder-sphere, sphere-sphere); parts whose boundary hinges on those meet
  the encoder as faces without connecting edges.
- vertices come from line-edge endpoints only; circles and arcs aggregate a
  zero vertex state.
- coincident coplanar patches merge into a single face (surfaces deduplicate
  on rounded geometry).
- positions, lengths and areas are expressed relative to the part bounding
  box: positions as (p - center)/scale with scale = the largest extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .geometry import CsgPart, PartValidationError, sdf_eval

_PLANE_GRID = 20          # plane samples per axis of the bbox cross-section
_CYL_ANGLES = 24
_CYL_AXIAL = 10
_SPHERE_BANDS = 12        # equal-area latitude bands
_SPHERE_ANGLES = 16
_CURVE_SAMPLES = 24       # samples per candidate intersection curve
_REL_ON_SURFACE = 1e-8    # |sdf| <= this * scale counts as on the boundary
_REL_PROBE = 0.015        # probe offset as a fraction of scale
_VOID_FRACTION = 0.3      # a probe must clear this fraction of the offset
_ROUND_DECIMALS = 10      # canonical rounding of surface geometry
_KEY_DECIMALS = 6         # rounding for sort keys and vertex dedup

_FACE_KIND_RANK = {"plane": 0, "cylinder": 1, "sphere": 2}
_EDGE_KIND_RANK = {"line": 0, "arc": 1, "circle": 2}
_EYE = np.eye(3)


def _r(x):
    return float(np.round(x, _ROUND_DECIMALS))


@dataclass(frozen=True)
class _Surface:
    kind: str             # plane | cylinder | sphere
    axis: int             # plane normal axis / cylinder axis; -1 for spheres
    offset: float         # plane coordinate along axis; 0 otherwise
    center: tuple         # cylinder: axis point (axis coord 0); sphere: center
    radius: float

    def key(self):
        return (self.kind, self.axis, self.offset, self.center, self.radius)


def _collect_surfaces(part: CsgPart) -> list:
    """Canonical deduplicated surfaces of every primitive in the tree."""
    seen = {}
    for prim in part.root.primitives():
        rot = prim.rotation
        t = prim.translation
        if prim.kind == "sphere":
            surfs = [_Surface("sphere", -1, 0.0,
                              tuple(_r(c) for c in t), _r(prim.dims[0]))]
        elif prim.kind == "box":
            half = 0.5 * np.asarray(prim.dims)
            surfs = []
            for a in range(3):
                direction = rot[:, a]
                j = int(np.argmax(np.abs(direction)))
                for s in (-1.0, 1.0):
                    surfs.append(_Surface("plane", j, _r(t[j] + s * half[a]),
                                          (0.0, 0.0, 0.0), 0.0))
        else:  # cylinder: axis along local z
            r_cyl, h = prim.dims
            j = int(np.argmax(np.abs(rot[:, 2])))
            surfs = [_Surface("plane", j, _r(t[j] + s * 0.5 * h),
                              (0.0, 0.0, 0.0), 0.0) for s in (-1.0, 1.0)]
            c = t.copy()
            c[j] = 0.0
            surfs.append(_Surface("cylinder", j, 0.0,
                                  tuple(_r(x) for x in c), _r(r_cyl)))
        for s in surfs:
            seen.setdefault(s.key(), s)
    return list(seen.values())


def _plane_axes(axis: int):
    """The two in-plane axes, ascending."""
    return tuple(a for a in range(3) if a != axis)


def _sample_surface(surf: _Surface, bbox):
    """Sample points, per-sample weight (world area) and outward probe
    directions for one surface."""
    lo, hi = bbox.min_corner, bbox.max_corner
    if surf.kind == "plane":
        u_ax, v_ax = _plane_axes(surf.axis)
        nu = nv = _PLANE_GRID
        us = lo[u_ax] + (np.arange(nu) + 0.5) * (hi[u_ax] - lo[u_ax]) / nu
        vs = lo[v_ax] + (np.arange(nv) + 0.5) * (hi[v_ax] - lo[v_ax]) / nv
        uu, vv = np.meshgrid(us, vs, indexing="ij")
        pts = np.zeros((nu * nv, 3))
        pts[:, u_ax] = uu.ravel()
        pts[:, v_ax] = vv.ravel()
        pts[:, surf.axis] = surf.offset
        weight = (hi[u_ax] - lo[u_ax]) * (hi[v_ax] - lo[v_ax]) / (nu * nv)
        dirs = np.tile(_EYE[surf.axis], (len(pts), 1))
        return pts, weight, dirs
    if surf.kind == "cylinder":
        k = surf.axis
        ang = 2.0 * math.pi * np.arange(_CYL_ANGLES) / _CYL_ANGLES
        zs = lo[k] + (np.arange(_CYL_AXIAL) + 0.5) * (hi[k] - lo[k]) / _CYL_AXIAL
        u_ax, v_ax = _plane_axes(k)
        radial = np.zeros((_CYL_ANGLES, 3))
        radial[:, u_ax] = np.cos(ang)
        radial[:, v_ax] = np.sin(ang)
        pts = np.repeat(radial, _CYL_AXIAL, axis=0) * surf.radius
        pts += np.asarray(surf.center)
        pts[:, k] = np.tile(zs, _CYL_ANGLES)
        dirs = np.repeat(radial, _CYL_AXIAL, axis=0)
        weight = 2.0 * math.pi * surf.radius * (hi[k] - lo[k]) / (_CYL_ANGLES * _CYL_AXIAL)
        return pts, weight, dirs
    # sphere: equal-area bands x uniform angles
    c = np.asarray(surf.center)
    R = surf.radius
    zn = 2.0 * (np.arange(_SPHERE_BANDS) + 0.5) / _SPHERE_BANDS - 1.0
    ang = 2.0 * math.pi * np.arange(_SPHERE_ANGLES) / _SPHERE_ANGLES
    zz = np.repeat(zn, _SPHERE_ANGLES)
    aa = np.tile(ang, _SPHERE_BANDS)
    rho = np.sqrt(np.maximum(1.0 - zz * zz, 0.0))
    dirs = np.stack([rho * np.cos(aa), rho * np.sin(aa), zz], axis=1)
    pts = c + R * dirs
    weight = 4.0 * math.pi * R * R / (_SPHERE_BANDS * _SPHERE_ANGLES)
    return pts, weight, dirs


def _reproject_cylinder(q, surf: _Surface):
    k = surf.axis
    u = q - np.asarray(surf.center)
    perp = u.copy()
    perp[:, k] = 0.0
    norms = np.linalg.norm(perp, axis=1, keepdims=True)
    out = np.asarray(surf.center) + surf.radius * perp / norms
    out[:, k] = q[:, k]
    return out


def _reproject_sphere(q, surf: _Surface):
    u = q - np.asarray(surf.center)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    return np.asarray(surf.center) + surf.radius * u / norms


def _circle_frame(axis: int, center, radius, n):
    u_ax, v_ax = _plane_axes(axis)
    ang = 2.0 * math.pi * np.arange(n) / n
    radial = np.zeros((n, 3))
    radial[:, u_ax] = np.cos(ang)
    radial[:, v_ax] = np.sin(ang)
    pts = np.asarray(center) + radius * radial
    return pts, radial


def _curve_candidates(sa: _Surface, sb: _Surface, bbox, delta):
    """Candidate intersection curves between two surfaces, with probe points
    for the local-activity test precomputed for each parent."""
    if _FACE_KIND_RANK[sa.kind] > _FACE_KIND_RANK[sb.kind]:
        sa, sb, swapped = sb, sa, True
    else:
        swapped = False
    lo, hi = bbox.min_corner, bbox.max_corner
    out = []

    def emit(kind, pts, qa, qb, cyclic, radius=0.0):
        a_pair, b_pair = (qb, qa) if swapped else (qa, qb)
        out.append({"kind": kind, "pts": pts, "qa": a_pair, "qb": b_pair,
                    "cyclic": cyclic, "radius": radius})

    if sa.kind == "plane" and sb.kind == "plane":
        if sa.axis == sb.axis:
            return []
        m = 3 - sa.axis - sb.axis
        ts = np.linspace(lo[m], hi[m], _CURVE_SAMPLES)
        pts = np.zeros((_CURVE_SAMPLES, 3))
        pts[:, sa.axis] = sa.offset
        pts[:, sb.axis] = sb.offset
        pts[:, m] = ts
        da = np.tile(_EYE[sb.axis], (_CURVE_SAMPLES, 1))  # in plane a
        db = np.tile(_EYE[sa.axis], (_CURVE_SAMPLES, 1))  # in plane b
        emit("line", pts, (pts + delta * da, pts - delta * da),
             (pts + delta * db, pts - delta * db), cyclic=False)
        return out

    if sa.kind == "plane" and sb.kind == "cylinder":
        if sa.axis == sb.axis:
            center = np.asarray(sb.center).copy()
            center[sa.axis] = sa.offset
            pts, radial = _circle_frame(sa.axis, center, sb.radius, _CURVE_SAMPLES)
            axd = np.tile(_EYE[sa.axis], (_CURVE_SAMPLES, 1))
            emit("circle", pts, (pts + delta * radial, pts - delta * radial),
                 (pts + delta * axd, pts - delta * axd), cyclic=True,
                 radius=sb.radius)
            return out
        k_pl, k_cy = sa.axis, sb.axis
        m = 3 - k_pl - k_cy
        d = sa.offset - sb.center[k_pl]
        if abs(d) >= sb.radius * (1.0 - 1e-12):
            return []
        half = math.sqrt(sb.radius * sb.radius - d * d)
        for s in (-1.0, 1.0):
            ts = np.linspace(lo[k_cy], hi[k_cy], _CURVE_SAMPLES)
            pts = np.zeros((_CURVE_SAMPLES, 3))
            pts[:, k_pl] = sa.offset
            pts[:, m] = sb.center[m] + s * half
            pts[:, k_cy] = ts
            da = np.tile(_EYE[m], (_CURVE_SAMPLES, 1))
            circ = np.cross(_EYE[k_cy], pts - np.asarray(sb.center))
            circ /= np.linalg.norm(circ, axis=1, keepdims=True)
            qb_plus = _reproject_cylinder(pts + delta * circ, sb)
            qb_minus = _reproject_cylinder(pts - delta * circ, sb)
            emit("line", pts, (pts + delta * da, pts - delta * da),
                 (qb_plus, qb_minus), cyclic=False)
        return out

    if sa.kind == "plane" and sb.kind == "sphere":
        d = sa.offset - sb.center[sa.axis]
        if abs(d) >= sb.radius * (1.0 - 1e-12):
            return []
        rho = math.sqrt(sb.radius * sb.radius - d * d)
        center = np.asarray(sb.center).copy()
        center[sa.axis] = sa.offset
        pts, radial = _circle_frame(sa.axis, center, rho, _CURVE_SAMPLES)
        normal = (pts - np.asarray(sb.center)) / sb.radius
        u_ax, v_ax = _plane_axes(sa.axis)
        tangent = np.zeros_like(radial)
        tangent[:, u_ax] = -radial[:, v_ax]
        tangent[:, v_ax] = radial[:, u_ax]
        great = np.cross(normal, tangent)
        great /= np.linalg.norm(great, axis=1, keepdims=True)
        qb_plus = _reproject_sphere(pts + delta * great, sb)
        qb_minus = _reproject_sphere(pts - delta * great, sb)
        emit("circle", pts, (pts + delta * radial, pts - delta * radial),
             (qb_plus, qb_minus), cyclic=True, radius=rho)
        return out

    return []  # quadric/quadric intersections are out of scope


def _true_runs(mask):
    runs, start = [], None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def _cyclic_run_indices(mask):
    """Index lists of maximal surviving runs on a cyclic sample sequence;
    'full' when everything survives."""
    n = len(mask)
    if mask.all():
        return "full"
    if not mask.any():
        return []
    off = int(np.argmin(mask))  # first False index
    rolled = np.roll(mask, -off)
    return [[(s + off + k) % n for k in range(e - s + 1)]
            for s, e in _true_runs(rolled)]


class PartGraph:
    """Hierarchical boundary graph: vertices, edges, faces plus incidence."""

    def __init__(self, vertex_feats, edge_feats, face_feats, edge_verts, edge_faces):
        self.vertex_feats = np.asarray(vertex_feats, dtype=np.float64).reshape(-1, 3)
        self.edge_feats = np.asarray(edge_feats, dtype=np.float64).reshape(-1, 4)
        self.face_feats = np.asarray(face_feats, dtype=np.float64).reshape(-1, 10)
        self.edge_verts = np.asarray(edge_verts, dtype=np.int64).reshape(-1, 2)
        self.edge_faces = np.asarray(edge_faces, dtype=np.int64).reshape(-1, 2)
        nv, ne, nf = len(self.vertex_feats), len(self.edge_feats), len(self.face_feats)
        if len(self.edge_verts) != ne or len(self.edge_faces) != ne:
            raise ValueError("edge incidence arrays disagree with edge count")
        vset = [set() for _ in range(nv)]
        eset = [set() for _ in range(ne)]
        fset = [set() for _ in range(nf)]
        self.face_edges = [[] for _ in range(nf)]
        vert_edges = [[] for _ in range(nv)]
        for e in range(ne):
            v0, v1 = self.edge_verts[e]
            if v0 >= 0 and v1 >= 0:
                vset[v0].add(int(v1))
                vset[v1].add(int(v0))
            for v in (v0, v1):
                if v >= 0:
                    vert_edges[v].append(e)
            f0, f1 = self.edge_faces[e]
            fset[f0].add(int(f1))
            fset[f1].add(int(f0))
            self.face_edges[f0].append(e)
            self.face_edges[f1].append(e)
        for edges in vert_edges:
            for e in edges:
                eset[e].update(x for x in edges if x != e)
        self.vertex_adj = [sorted(s) for s in vset]
        self.edge_adj = [sorted(s) for s in eset]
        self.face_adj = [sorted(s) for s in fset]
        self.face_edges = [sorted(set(es)) for es in self.face_edges]

    @property
    def counts(self):
        return (len(self.vertex_feats), len(self.edge_feats), len(self.face_feats))

    def to_text(self) -> str:
        lines = ["boundary-graph v1"]
        nv, ne, nf = self.counts
        lines.append(f"counts {nv} {ne} {nf}")
        for v in self.vertex_feats:
            lines.append("v " + " ".join(repr(float(x)) for x in v))
        kinds_e = ["line", "arc", "circle"]
        for e in range(ne):
            feats = self.edge_feats[e]
            kind = kinds_e[int(np.argmax(feats[1:]))]
            lines.append(
                f"e {kind} {repr(float(feats[0]))} "
                f"{self.edge_verts[e, 0]} {self.edge_verts[e, 1]} "
                f"{self.edge_faces[e, 0]} {self.edge_faces[e, 1]}")
        kinds_f = ["plane", "cylinder", "sphere"]
        for f in range(nf):
            feats = self.face_feats[f]
            kind = kinds_f[int(np.argmax(feats[7:]))]
            nums = " ".join(repr(float(x)) for x in feats[:7])
            lines.append(f"f {kind} {nums}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PartGraph":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "boundary-graph v1":
            raise ValueError("not a boundary-graph payload")
        nv, ne, nf = (int(x) for x in lines[1].split()[1:4])
        if len(lines) != 2 + nv + ne + nf:
            raise ValueError("boundary-graph line count mismatch")
        verts, edges, edge_verts, edge_faces, faces = [], [], [], [], []
        kinds_e = {"line": 0, "arc": 1, "circle": 2}
        kinds_f = {"plane": 0, "cylinder": 1, "sphere": 2}
        for ln in lines[2:2 + nv]:
            verts.append([float(x) for x in ln.split()[1:4]])
        for ln in lines[2 + nv:2 + nv + ne]:
            tok = ln.split()
            onehot = [0.0, 0.0, 0.0]
            onehot[kinds_e[tok[1]]] = 1.0
            edges.append([float(tok[2])] + onehot)
            edge_verts.append([int(tok[3]), int(tok[4])])
            edge_faces.append([int(tok[5]), int(tok[6])])
        for ln in lines[2 + nv + ne:]:
            tok = ln.split()
            onehot = [0.0, 0.0, 0.0]
            onehot[kinds_f[tok[1]]] = 1.0
            faces.append([float(x) for x in tok[2:9]] + onehot)
        return cls(np.array(verts).reshape(-1, 3), np.array(edges).reshape(-1, 4),
                   np.array(faces).reshape(-1, 10),
                   np.array(edge_verts, dtype=np.int64).reshape(-1, 2),
                   np.array(edge_faces, dtype=np.int64).reshape(-1, 2))


def extract_graph(part: CsgPart) -> PartGraph:
    """Build the canonical boundary graph of a part."""
    bbox = part.bbox
    bbox.require_valid()
    center = np.round(bbox.center, _ROUND_DECIMALS)
    scale = float(np.round(np.max(bbox.extents), _ROUND_DECIMALS))
    tol = _REL_ON_SURFACE * scale
    delta = _REL_PROBE * scale
    void_min = _VOID_FRACTION * delta

    def norm(p):
        return (np.asarray(p) - center) / scale

    surfaces = _collect_surfaces(part)
    samples = [_sample_surface(s, bbox) for s in surfaces]
    blocks = []
    for pts, _, dirs in samples:
        blocks.extend([pts, pts + delta * dirs, pts - delta * dirs])
    values = sdf_eval(part, np.concatenate(blocks, axis=0))
    faces, face_surf = [], []
    pos = 0
    for surf, (pts, weight, dirs) in zip(surfaces, samples):
        n = len(pts)
        s0 = values[pos:pos + n]
        sp = values[pos + n:pos + 2 * n]
        sm = values[pos + 2 * n:pos + 3 * n]
        pos += 3 * n
        on = np.abs(s0) <= tol
        void = np.maximum(sp, sm) > void_min
        keep = on & void
        if not keep.any():
            continue
        area = weight * int(keep.sum()) / (scale * scale)
        centroid = norm(pts[keep]).mean(axis=0)
        side = 1.0 if int((sp[keep] > sm[keep]).sum()) * 2 >= int(keep.sum()) else -1.0
        if surf.kind == "plane":
            normal = side * _EYE[surf.axis]
        elif surf.kind == "cylinder":
            normal = side * _EYE[surf.axis]  # sign: void outward (boss) vs inward (bore)
        else:
            normal = np.zeros(3)
        onehot = np.zeros(3)
        onehot[_FACE_KIND_RANK[surf.kind]] = 1.0
        faces.append(np.concatenate([[area], centroid, normal, onehot]))
        face_surf.append(surf)

    if not faces:
        raise PartValidationError(f"part {part.part_id!r}: no boundary faces detected")

    # candidate curves between face pairs
    curves = []
    for i in range(len(face_surf)):
        for j in range(i + 1, len(face_surf)):
            for cand in _curve_candidates(face_surf[i], face_surf[j], bbox, delta):
                cand["fa"], cand["fb"] = i, j
                curves.append(cand)
    edges_raw = []
    if curves:
        blocks = []
        for c in curves:
            blocks.extend([c["pts"], c["qa"][0], c["qa"][1], c["qb"][0], c["qb"][1]])
        values = sdf_eval(part, np.concatenate(blocks, axis=0))
        pos = 0
        for c in curves:
            n = len(c["pts"])
            s0 = values[pos:pos + n]
            ap = values[pos + n:pos + 2 * n]
            am = values[pos + 2 * n:pos + 3 * n]
            bp = values[pos + 3 * n:pos + 4 * n]
            bm = values[pos + 4 * n:pos + 5 * n]
            pos += 5 * n
            keep = ((np.abs(s0) <= tol)
                    & (np.minimum(np.abs(ap), np.abs(am)) <= tol)
                    & (np.minimum(np.abs(bp), np.abs(bm)) <= tol))
            pts_n = norm(c["pts"])
            if c["cyclic"]:
                runs = _cyclic_run_indices(keep)
                if runs == "full":
                    edges_raw.append({
                        "kind": "circle", "fa": c["fa"], "fb": c["fb"],
                        "length": 2.0 * math.pi * c["radius"] / scale,
                        "mid": pts_n.mean(axis=0), "axis": -1, "ends": None})
                else:
                    dtheta = 2.0 * math.pi / n
                    for idx in runs:
                        if len(idx) < 2:
                            continue
                        edges_raw.append({
                            "kind": "arc", "fa": c["fa"], "fb": c["fb"],
                            "length": (len(idx) - 1) * dtheta * c["radius"] / scale,
                            "mid": pts_n[idx].mean(axis=0), "axis": -1, "ends": None})
            else:
                axis = int(np.argmax(np.abs(c["pts"][-1] - c["pts"][0])))
                for i0, i1 in _true_runs(keep):
                    if i1 == i0:
                        continue
                    p0, p1 = pts_n[i0], pts_n[i1]
                    edges_raw.append({
                        "kind": "line", "fa": c["fa"], "fb": c["fb"],
                        "length": float(np.linalg.norm(p1 - p0)),
                        "mid": pts_n[i0:i1 + 1].mean(axis=0), "axis": axis,
                        "ends": (p0, p1)})

    # vertices from line-edge endpoints, deduplicated on rounded position
    vert_ids, vert_pos = {}, []
    for e in edges_raw:
        if e["ends"] is None:
            e["verts"] = (-1, -1)
            continue
        ids = []
        for p in e["ends"]:
            key = tuple(np.round(p, _KEY_DECIMALS))
            if key not in vert_ids:
                vert_ids[key] = len(vert_pos)
                vert_pos.append(np.asarray(p))
            ids.append(vert_ids[key])
        if ids[0] == ids[1]:
            e["verts"] = (-1, -1)  # degenerate run shorter than dedup length
        else:
            e["verts"] = tuple(ids)

    # canonical orderings
    def face_key(idx):
        f = faces[idx]
        return (int(np.argmax(f[7:])), face_surf[idx].axis,
                tuple(np.round(f[1:4], _KEY_DECIMALS)),
                float(np.round(f[0], _KEY_DECIMALS)),
                tuple(np.round(f[4:7], _KEY_DECIMALS)))

    face_order = sorted(range(len(faces)), key=face_key)
    face_map = {old: new for new, old in enumerate(face_order)}

    def vert_key(idx):
        return tuple(np.round(vert_pos[idx], _KEY_DECIMALS))

    vert_order = sorted(range(len(vert_pos)), key=vert_key)
    vert_map = {old: new for new, old in enumerate(vert_order)}

    def edge_key(e):
        return (_EDGE_KIND_RANK[e["kind"]], e["axis"],
                tuple(np.round(e["mid"], _KEY_DECIMALS)),
                float(np.round(e["length"], _KEY_DECIMALS)))

    edges_sorted = sorted(edges_raw, key=edge_key)

    vertex_feats = np.array([vert_pos[old] for old in vert_order]).reshape(-1, 3)
    edge_feats, edge_verts, edge_faces = [], [], []
    for e in edges_sorted:
        onehot = [0.0, 0.0, 0.0]
        onehot[_EDGE_KIND_RANK[e["kind"]]] = 1.0
        edge_feats.append([e["length"]] + onehot)
        v0, v1 = e["verts"]
        edge_verts.append([vert_map.get(v0, -1) if v0 >= 0 else -1,
                           vert_map.get(v1, -1) if v1 >= 0 else -1])
        fa, fb = sorted((face_map[e["fa"]], face_map[e["fb"]]))
        edge_faces.append([fa, fb])
    face_feats = np.array([faces[old] for old in face_order]).reshape(-1, 10)

    return PartGraph(vertex_feats,
                     np.array(edge_feats, dtype=np.float64).reshape(-1, 4),
                     face_feats,
                     np.array(edge_verts, dtype=np.int64).reshape(-1, 2),
                     np.array(edge_faces, dtype=np.int64).reshape(-1, 2))


# --- encoder --------------------------------------------------------------------


@dataclass
class EncoderConfig:
    hidden_width: int = 1024
    latent_width: int = 64
    convs_per_tier: int = 2
    seed: int = 0

    @property
    def vertex_width(self) -> int:
        return max(1, self.hidden_width // 4)


class PartEncoder:
    """Three-tier graph network: vertex -> edge -> face states, mean-pooled
    face states projected to the latent code."""

    VERTEX_IN, EDGE_IN, FACE_IN = 3, 4, 10

    def __init__(self, config: EncoderConfig | None = None):
        self.config = config or EncoderConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        w4, w, n = cfg.vertex_width, cfg.hidden_width, cfg.convs_per_tier
        self.tier1 = [nn.GraphConvLayer(self.VERTEX_IN if i == 0 else w4, w4,
                                        rng, f"tier1.conv{i}") for i in range(n)]
        self.tier2 = [nn.GraphConvLayer(self.EDGE_IN + w4 if i == 0 else w, w,
                                        rng, f"tier2.conv{i}") for i in range(n)]
        self.tier3 = [nn.GraphConvLayer(self.FACE_IN + w if i == 0 else w, w,
                                        rng, f"tier3.conv{i}") for i in range(n)]
        self.out = nn.Linear(w, cfg.latent_width, rng, "latent")

    def params(self) -> dict:
        out = {}
        for layer in (*self.tier1, *self.tier2, *self.tier3):
            out.update(layer.params())
        out.update(self.out.params())
        return out

    def parameter_count(self) -> int:
        return sum(int(p.data.size) for p in self.params().values())

    def adapter_layers(self) -> list:
        """Layers targeted by low-rank adapters (the vertex tier)."""
        return list(self.tier1)

    @staticmethod
    def batch_graphs(graphs):
        nv = [g.counts[0] for g in graphs]
        ne = [g.counts[1] for g in graphs]
        nf = [g.counts[2] for g in graphs]
        ov = np.concatenate([[0], np.cumsum(nv)])
        oe = np.concatenate([[0], np.cumsum(ne)])
        of_ = np.concatenate([[0], np.cumsum(nf)])
        vfeat = np.concatenate([g.vertex_feats for g in graphs], axis=0) \
            if ov[-1] else np.zeros((0, 3))
        efeat = np.concatenate([g.edge_feats for g in graphs], axis=0) \
            if oe[-1] else np.zeros((0, 4))
        ffeat = np.concatenate([g.face_feats for g in graphs], axis=0)
        vadj, eadj, fadj, everts, fedges, pool = [], [], [], [], [], []
        for b, g in enumerate(graphs):
            vadj.extend([[x + ov[b] for x in row] for row in g.vertex_adj])
            eadj.extend([[x + oe[b] for x in row] for row in g.edge_adj])
            fadj.extend([[x + of_[b] for x in row] for row in g.face_adj])
            everts.extend([[v + ov[b] for v in row if v >= 0]
                           for row in g.edge_verts])
            fedges.extend([[e + oe[b] for e in row] for row in g.face_edges])
            pool.append([f + of_[b] for f in range(g.counts[2])])
        return {
            "vfeat": nn.Tensor(vfeat), "efeat": nn.Tensor(efeat),
            "ffeat": nn.Tensor(ffeat),
            "A_vv": nn.neighbor_mean_matrix(vadj, n_cols=int(ov[-1])),
            "A_ee": nn.neighbor_mean_matrix(eadj, n_cols=int(oe[-1])),
            "A_ff": nn.neighbor_mean_matrix(fadj, n_cols=int(of_[-1])),
            "M_ev": nn.neighbor_mean_matrix(everts, n_cols=int(ov[-1])),
            "M_fe": nn.neighbor_mean_matrix(fedges, n_cols=int(oe[-1])),
            "M_pool": nn.neighbor_mean_matrix(pool, n_cols=int(of_[-1])),
        }

    def encode_graphs(self, graphs: list, adapters: dict | None = None,
                      batch: dict | None = None) -> nn.Tensor:
        """Latent codes for a batch of graphs, shape (len(graphs), latent).

        ``adapters`` maps a layer name to ``(self_extra, nbr_extra)`` weight
        deltas added to that layer's matrices (used for low-rank adaptation).
        ``batch`` reuses a prior ``batch_graphs(graphs)`` result so repeated
        passes over one graph set skip feature assembly.
        """
        if not graphs:
            raise ValueError("encode_graphs needs at least one graph")
        adapters = adapters or {}
        b = batch if batch is not None else self.batch_graphs(graphs)

        def run_tier(layers, h, agg):
            for layer in layers:
                extra = adapters.get(layer.name)
                if extra is None:
                    h = layer(h, agg)
                else:
                    h = layer(h, agg, self_extra=extra[0], nbr_extra=extra[1])
            return h

        hv = run_tier(self.tier1, b["vfeat"], b["A_vv"])
        he_in = nn.concat_cols([b["efeat"], nn.spmm(b["M_ev"], hv)])
        he = run_tier(self.tier2, he_in, b["A_ee"])
        hf_in = nn.concat_cols([b["ffeat"], nn.spmm(b["M_fe"], he)])
        hf = run_tier(self.tier3, hf_in, b["A_ff"])
        pooled = nn.spmm(b["M_pool"], hf)
        return self.out(pooled)

    def encode_parts(self, parts: list, adapters: dict | None = None) -> nn.Tensor:
        return self.encode_graphs([extract_graph(p) for p in parts], adapters)
