"""Closed-form manufacturing-time estimators.

Two deliberately simple models provide the scalar task-dependent input used
by downstream normalization.  The additive model scores the volume a printer
actually deposits — sparse infill plus a solid wall shell — and fits
time = alpha * feature + beta by least squares; support and bed-adhesion
volumes are folded into the offset.  The subtractive model regresses log
time on the log volume machined away from a bounding-box stock block.  Both
stay strictly weaker than the label generator that scores them, which is
what makes comparing normalization schemes informative.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import CsgPart, MassProperties, mass_properties

INFILL_FRACTION = 0.20
WALL_THICKNESS = 0.8


@dataclass(frozen=True)
class AmVolumeTerms:
    """Printed-volume breakdown for one part: sparse infill, solid contour
    shell, support pillars and the bed-adhesion layer."""

    part_volume: float
    surface_area: float
    infill: float
    contour: float
    support: float
    adhesion: float

    @property
    def total(self) -> float:
        return self.infill + self.contour + self.support + self.adhesion

    @classmethod
    def from_properties(cls, volume: float, area: float, *,
                        support: float = 0.0, adhesion: float = 0.0,
                        infill_fraction: float = INFILL_FRACTION,
                        wall: float = WALL_THICKNESS) -> "AmVolumeTerms":
        if min(volume, area, support, adhesion) < 0:
            raise ValueError("volume terms must be non-negative")
        return cls(volume, area, volume * infill_fraction, area * wall,
                   support, adhesion)


def am_feature(part: CsgPart, *, properties: MassProperties | None = None,
               resolution: int = 96) -> float:
    """Deposited-volume feature V * infill_fraction + A * wall_thickness."""
    mp = mass_properties(part, resolution) if properties is None else properties
    return mp.volume * INFILL_FRACTION + mp.area * WALL_THICKNESS


@dataclass(frozen=True)
class AmTimeModel:
    """Print time as an affine function of the deposited-volume feature."""

    alpha: float
    beta: float

    def predict(self, feature) -> np.ndarray | float:
        out = self.alpha * np.asarray(feature, dtype=np.float64) + self.beta
        return float(out) if out.ndim == 0 else out

    def predict_part(self, part: CsgPart, **kwargs) -> float:
        return float(self.predict(am_feature(part, **kwargs)))

    def to_dict(self) -> dict:
        return asdict(self)


def fit_am_model(features, times) -> AmTimeModel:
    """Ordinary least squares for (alpha, beta); rejects degenerate inputs."""
    f = np.asarray(features, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if f.ndim != 1 or f.shape != t.shape:
        raise ValueError("features and times must be matching 1-d arrays")
    if len(f) < 2:
        raise ValueError("need at least two samples to fit a line")
    if np.ptp(f) <= 1e-12 * max(1.0, float(np.abs(f).max())):
        raise ValueError("features are constant; the slope is unidentifiable")
    alpha, beta = np.polyfit(f, t, 1)
    return AmTimeModel(alpha=float(alpha), beta=float(beta))


@dataclass(frozen=True)
class SmTdiModel:
    """Machining time as a log-log line in the subtracted stock volume."""

    slope: float
    intercept: float

    def predict(self, subtracted_volume) -> np.ndarray | float:
        sv = np.asarray(subtracted_volume, dtype=np.float64)
        if np.any(sv <= 0.0):
            raise ValueError("subtracted volume must be positive")
        out = np.exp(self.slope * np.log(sv) + self.intercept)
        return float(out) if out.ndim == 0 else out

    def degraded(self) -> "SmTdiModel":
        """Constant-output copy (slope zeroed), for sanity baselines."""
        return SmTdiModel(slope=0.0, intercept=self.intercept)

    def to_dict(self) -> dict:
        return asdict(self)


def subtracted_volume(part: CsgPart, *, properties: MassProperties | None = None,
                      resolution: int = 96) -> float:
    """Volume removed when machining the part from its bounding-box block."""
    mp = mass_properties(part, resolution) if properties is None else properties
    stock = float(np.prod(part.bbox.extents))
    sv = stock - mp.volume
    if sv <= 1e-9 * stock:
        raise ValueError(
            f"part {part.part_id!r} fills its stock block; no material removed")
    return sv


def sm_tdi(part: CsgPart, model: SmTdiModel, **kwargs) -> float:
    return float(model.predict(subtracted_volume(part, **kwargs)))


def fit_sm_model(subtracted_volumes, times, *,
                 force_zero_slope: bool = False) -> SmTdiModel:
    """Least squares on ln(time) vs ln(subtracted volume).

    ``force_zero_slope`` pins the slope at zero and fits only the intercept
    (the model collapses to the geometric-mean time), giving a deliberately
    uninformative baseline.
    """
    sv = np.asarray(subtracted_volumes, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if sv.ndim != 1 or sv.shape != t.shape:
        raise ValueError("volumes and times must be matching 1-d arrays")
    if np.any(sv <= 0.0) or np.any(t <= 0.0):
        raise ValueError("log-domain fit needs positive volumes and times")
    log_t = np.log(t)
    if force_zero_slope:
        return SmTdiModel(slope=0.0, intercept=float(log_t.mean()))
    if len(sv) < 2:
        raise ValueError("need at least two samples to fit a line")
    log_sv = np.log(sv)
    if np.ptp(log_sv) <= 1e-12:
        raise ValueError("subtracted volumes are constant; slope is unidentifiable")
    slope, intercept = np.polyfit(log_sv, log_t, 1)
    return SmTdiModel(slope=float(slope), intercept=float(intercept))
