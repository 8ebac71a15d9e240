"""Error metrics and force/moment integration from surface pressure.

The percentage error is area-weighted per timestep and normalized by that
timestep's max |true| value (avoids divide-by-near-zero at individual
nodes); absolute comparability with externally reported tables therefore
depends on this normalizer.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .graph import SurfaceMesh
from .signals import CHORD_DEFAULT


@dataclass
class CoefficientRefs:
    """Reference quantities for nondimensionalization; moments are taken
    about 30% chord, nose-up positive."""

    s_ref: float
    c_ref: float = CHORD_DEFAULT
    r_ref: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.s_ref <= 0:
            raise ValueError("reference area must be positive")
        if self.r_ref is None:
            self.r_ref = np.array([0.30 * self.c_ref, 0.0, 0.0])
        self.r_ref = np.asarray(self.r_ref, dtype=np.float64)


@dataclass
class CoefficientSet:
    c_l: float
    c_my: float


def moment_weights(mesh: SurfaceMesh, refs: CoefficientRefs) -> np.ndarray:
    """Linear functional m with C_My(field) = m . field (used by the loss)."""
    rel = mesh.points - refs.r_ref
    n = mesh.node_normal
    a = mesh.node_area
    # f_i = -cp_i * A_i * n_i; My contribution = rel_z f_x - rel_x f_z
    return -(rel[:, 2] * n[:, 0] - rel[:, 0] * n[:, 2]) * a / (refs.s_ref * refs.c_ref)


def lift_weights(mesh: SurfaceMesh, refs: CoefficientRefs) -> np.ndarray:
    return -mesh.node_normal[:, 2] * mesh.node_area / refs.s_ref


def integrate_coefficients(cp: np.ndarray, mesh: SurfaceMesh,
                           refs: CoefficientRefs) -> CoefficientSet:
    """Lift and pitching-moment coefficients from a nodal pressure field."""
    cp = np.asarray(cp, dtype=np.float64).reshape(-1)
    if cp.size != mesh.n_nodes:
        raise ValueError("field length does not match node count")
    c_l = float(lift_weights(mesh, refs) @ cp)
    c_my = float(moment_weights(mesh, refs) @ cp)
    return CoefficientSet(c_l, c_my)


def mape_area_weighted(pred: np.ndarray, true: np.ndarray,
                       mesh: SurfaceMesh) -> float:
    """Percent error, cell-area weighted, normalized per timestep by max |true|."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    true = np.atleast_2d(np.asarray(true, dtype=np.float64))
    if pred.shape != true.shape:
        raise ValueError("series are not aligned")
    area = mesh.node_area
    num = (np.abs(pred - true) * area).sum(axis=1)
    ranges = np.abs(true).max(axis=1)
    if np.any(ranges == 0):
        raise ValueError("zero normalization range at some timestep")
    return float(100.0 * (num / (area.sum() * ranges)).mean())


def mape_series(pred: np.ndarray, true: np.ndarray, mesh: SurfaceMesh) -> np.ndarray:
    """Per-timestep values of the area-weighted percentage error."""
    pred = np.atleast_2d(pred)
    true = np.atleast_2d(true)
    area = mesh.node_area
    num = (np.abs(pred - true) * area).sum(axis=1)
    ranges = np.abs(true).max(axis=1)
    if np.any(ranges == 0):
        raise ValueError("zero normalization range at some timestep")
    return 100.0 * num / (area.sum() * ranges)


def r2(pred: np.ndarray, true: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    true = np.asarray(true, dtype=np.float64).reshape(-1)
    ss_tot = float(((true - true.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("zero variance in the reference series")
    ss_res = float(((pred - true) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def rmse(pred: np.ndarray, true: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    return float(np.sqrt(((pred - true) ** 2).mean()))


@dataclass
class MetricsReport:
    """Headline metrics per signal plus its per-timestep error series."""

    signal: str
    mape: float
    r2: float
    rmse: float
    error_series: np.ndarray         # per-timestep area-weighted percent error
    coefficients: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rmse < 0 or self.mape < 0 or self.r2 > 1:
            raise ValueError("metric out of range")

    def save(self, stem) -> None:
        stem = str(stem)
        payload = {"signal": self.signal, "mape": self.mape,
                   "r2": self.r2, "rmse": self.rmse}
        with open(stem + ".json", "w") as fh:
            json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        with open(stem + ".csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            extra = sorted(self.coefficients)
            writer.writerow(["step", "mape_percent"] + extra)
            for k in range(self.error_series.size):
                row = [k, repr(float(self.error_series[k]))]
                row += [repr(float(self.coefficients[name][k])) for name in extra]
                writer.writerow(row)


def evaluate_series(signal: str, pred: np.ndarray, true: np.ndarray,
                    mesh: SurfaceMesh,
                    refs: Optional[CoefficientRefs] = None) -> MetricsReport:
    """Bundle the three headline metrics and coefficient traces for a signal."""
    series = mape_series(pred, true, mesh)
    coeffs: Dict[str, np.ndarray] = {}
    if refs is not None:
        lw = lift_weights(mesh, refs)
        mw = moment_weights(mesh, refs)
        coeffs = {
            "c_l_pred": np.atleast_2d(pred) @ lw,
            "c_l_true": np.atleast_2d(true) @ lw,
            "c_my_pred": np.atleast_2d(pred) @ mw,
            "c_my_true": np.atleast_2d(true) @ mw,
        }
    return MetricsReport(signal, float(series.mean()), r2(pred, true),
                         rmse(pred, true), series, coeffs)
