"""Desk-scale wing meshes, a synthetic unsteady-pressure oracle, and splits.

The oracle is an analytic stand-in for solver data: a steady base field
plus motion-coupled modes and a pseudo-shock whose chordwise position
tracks a first-order-lagged pitch state, so feedback of past pressures
carries real information.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .graph import SurfaceMesh
from .signals import CHORD_DEFAULT, U_INF_DEFAULT, MotionSample, SignalSpec


def generate_wing_mesh(span_panels: int = 19, chord_panels: int = 19,
                       chord: float = CHORD_DEFAULT, span: float = 2.0 * CHORD_DEFAULT,
                       thickness: float = 0.02, base_offset: float = 0.001) -> SurfaceMesh:
    """Rectangular two-sheet wing surface, stitched at both chordwise rims.

    Each sheet holds (span_panels+1) x (chord_panels+1) nodes; sheets carry
    a thin parabolic thickness profile (plus a small blunt offset so rim
    nodes never coincide) and outward-oriented triangles. Leading- and
    trailing-edge strips reuse the rim nodes, keeping the node count at
    2 (s+1)(c+1).
    """
    if span_panels < 4 or chord_panels < 4:
        raise ValueError("need at least 4 panels per direction")
    nc, ns = chord_panels + 1, span_panels + 1
    xs = np.linspace(0.0, chord, nc)
    ys = np.linspace(0.0, span, ns)
    xg, yg = np.meshgrid(xs, ys, indexing="ij")
    xhat = xg / chord
    bump = chord * (base_offset + thickness * xhat * (1.0 - xhat))
    upper = np.stack([xg.ravel(), yg.ravel(), bump.ravel()], axis=1)
    lower = np.stack([xg.ravel(), yg.ravel(), -bump.ravel()], axis=1)
    points = np.concatenate([upper, lower])

    def sheet_tris(offset: int, flip: bool) -> List[Tuple[int, int, int]]:
        tris = []
        for i in range(chord_panels):
            for j in range(span_panels):
                a = offset + i * ns + j
                b = a + ns
                c = a + 1
                d = b + 1
                if flip:
                    tris += [(a, c, b), (b, c, d)]
                else:
                    tris += [(a, b, c), (b, d, c)]
        return tris

    n_sheet = nc * ns
    tris = sheet_tris(0, flip=False) + sheet_tris(n_sheet, flip=True)
    # chordwise rim strips (leading edge i=0, trailing edge i=nc-1)
    for i in (0, chord_panels):
        for j in range(span_panels):
            up_a = i * ns + j
            up_b = up_a + 1
            lo_a = n_sheet + up_a
            lo_b = n_sheet + up_b
            if i == 0:
                tris += [(up_a, lo_a, up_b), (up_b, lo_a, lo_b)]
            else:
                tris += [(up_a, up_b, lo_a), (up_b, lo_b, lo_a)]
    return SurfaceMesh(points, np.asarray(tris, dtype=np.int64))


@dataclass
class SyntheticOracleConfig:
    """Analytic pressure law standing in for solver ground truth.

    C_P(node, t) = base + k_theta * theta_lag * mode1
                 + k_xi * (xi_dot / u_inf) * mode2
                 + shock_amp * tanh((x - x_s(t)) / shock_width),
    with x_s(t) = shock_x0 + shock_gain * theta_lag(t) and theta_lag the
    first-order lag of theta with time constant tau.
    """

    k_theta: float = 4.0
    k_xi: float = 2.0
    tau: float = 4e-3
    shock_amp: float = 0.25
    shock_x0: float = 0.55 * CHORD_DEFAULT
    shock_gain: float = 2.0 * CHORD_DEFAULT
    shock_width: float = 0.08 * CHORD_DEFAULT
    chord: float = CHORD_DEFAULT
    u_inf: float = U_INF_DEFAULT

    def __post_init__(self):
        if self.tau <= 0 or self.shock_width <= 0:
            raise ValueError("tau and shock width must be positive")

    def _shapes(self, mesh: SurfaceMesh):
        x = mesh.points[:, 0]
        y = mesh.points[:, 1]
        side = np.where(mesh.node_normal[:, 2] >= 0, 1.0, -1.0)
        xh = x / self.chord
        yh = y / y.max() if y.max() > 0 else y
        base = -0.2 - 0.6 * side * xh * (1.0 - xh) * (1.0 + 0.3 * yh)
        mode1 = side * np.sin(math.pi * xh) * (1.0 - 0.5 * yh)
        mode2 = side * np.cos(0.5 * math.pi * xh) * (1.0 - 0.3 * yh * yh)
        shock_mask = side * (1.0 - 0.4 * yh)
        return x, base, mode1, mode2, shock_mask

    def theta_lag_series(self, thetas: Sequence[float], dt: float) -> np.ndarray:
        """Exact zero-order-hold integration of the lag ODE."""
        decay = math.exp(-dt / self.tau)
        lag = np.empty(len(thetas))
        state = thetas[0]
        lag[0] = state
        for k in range(1, len(thetas)):
            state = thetas[k] + (state - thetas[k]) * decay
            lag[k] = state
        return lag

    def evaluate(self, mesh: SurfaceMesh, motions: Sequence[MotionSample],
                 dt: float) -> np.ndarray:
        """C_P frames (T, n_nodes) for a motion history."""
        x, base, mode1, mode2, shock_mask = self._shapes(mesh)
        thetas = [m.theta for m in motions]
        lag = self.theta_lag_series(thetas, dt)
        frames = np.empty((len(motions), mesh.n_nodes))
        for k, m in enumerate(motions):
            xs = self.shock_x0 + self.shock_gain * lag[k]
            shock = self.shock_amp * shock_mask * np.tanh((x - xs) / self.shock_width)
            frames[k] = (base + self.k_theta * lag[k] * mode1
                         + self.k_xi * (m.xi_dot / self.u_inf) * mode2 + shock)
        return frames


def synthetic_cp(oracle: SyntheticOracleConfig, mesh: SurfaceMesh,
                 motions: Sequence[MotionSample], dt: float) -> np.ndarray:
    return oracle.evaluate(mesh, motions, dt)


@dataclass
class Dataset:
    """One signal's (motion, pressure-field) time series plus its split tag."""

    name: str
    split: str                     # train | test | validation
    spec: SignalSpec
    dt: float
    motions: List[MotionSample]
    cp: np.ndarray                 # (T, n_nodes)
    mesh_path: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test", "validation"):
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.motions) != self.cp.shape[0]:
            raise ValueError("frame count mismatch between motion and pressure")

    @property
    def n_frames(self) -> int:
        return self.cp.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.cp.shape[1]

    def downsample(self, factor: int) -> "Dataset":
        """Keep every factor-th frame exactly (no resampling filter)."""
        if factor < 1:
            raise ValueError("factor must be >= 1")
        return Dataset(self.name, self.split, self.spec, self.dt * factor,
                       self.motions[::factor], self.cp[::factor].copy(),
                       self.mesh_path)


def save_dataset(ds: Dataset, stem) -> Tuple[str, str]:
    """Write <stem>.json manifest and <stem>.bin frame blob.

    Per frame: 6 little-endian f64 motion values (theta, theta_dot,
    theta_ddot, xi, xi_dot, xi_ddot) then n_nodes f64 pressure values.
    """
    stem = str(stem)
    manifest = {
        "name": ds.name, "split": ds.split, "mesh_path": ds.mesh_path,
        "dt": ds.dt, "frame_count": ds.n_frames, "n_nodes": ds.n_nodes,
        "spec": ds.spec.to_dict(),
    }
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    block = np.empty((ds.n_frames, 6 + ds.n_nodes))
    for k, m in enumerate(ds.motions):
        block[k, :6] = m.as_array()
        block[k, 6:] = ds.cp[k]
    with open(stem + ".bin", "wb") as fh:
        fh.write(block.astype("<f8").tobytes())
    return stem + ".json", stem + ".bin"


def load_dataset(stem) -> Dataset:
    stem = str(stem)
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    n_frames = manifest["frame_count"]
    n_nodes = manifest["n_nodes"]
    raw = np.fromfile(stem + ".bin", dtype="<f8")
    block = raw.reshape(n_frames, 6 + n_nodes)
    dt = manifest["dt"]
    motions = [MotionSample(k * dt, *block[k, :6]) for k in range(n_frames)]
    return Dataset(manifest["name"], manifest["split"],
                   SignalSpec.from_dict(manifest["spec"]), dt,
                   motions, np.ascontiguousarray(block[:, 6:]),
                   manifest["mesh_path"])


#: test-matrix mirror: (name, kind, kappa_theta, a_theta[deg], kappa_xi, a_xi[m], split)
SIGNAL_TABLE: List[Tuple[str, str, float, float, float, float, str]] = [
    ("training_1", "DS", 0.114, 0.80, 0.152, -0.098, "train"),
    ("training_2", "DS", 0.114, -0.80, 0.152, 0.098, "train"),
    ("training_3", "DS", 0.148, 1.00, 0.181, -0.123, "train"),
    ("training_4", "DS", 0.148, -1.00, 0.181, 0.123, "train"),
    ("test_1", "DS", 0.091, 0.70, 0.123, 0.074, "test"),
    ("test_2", "DS", 0.104, 0.90, 0.089, 0.061, "test"),
    ("test_3", "DS", 0.104, -0.90, 0.089, -0.061, "test"),
    ("test_4", "US", 0.092, 0.75, 0.081, -0.059, "test"),
    ("test_5", "DS", 0.147, -1.00, 0.000, 0.000, "test"),
    ("test_6", "DS", 0.000, 0.00, 0.072, 0.049, "test"),
    ("validation_1", "DS", 0.147, -1.00, 0.072, 0.049, "validation"),
    ("validation_2", "SH", 0.106, 3.00, 0.089, -0.246, "validation"),
]


def default_specs(duration: float = 2.0, dt: float = 2e-3) -> List[Tuple[SignalSpec, str]]:
    out = []
    for name, kind, kt, at, kx, ax, split in SIGNAL_TABLE:
        out.append((SignalSpec(name, kind, kt, at, kx, ax, duration, dt), split))
    return out


def build_splits(specs: Sequence[Tuple[SignalSpec, str]],
                 oracle: SyntheticOracleConfig, mesh: SurfaceMesh,
                 mesh_path: str = "") -> List[Dataset]:
    """Evaluate the oracle over each signal and tag the datasets."""
    out = []
    for spec, split in specs:
        motions = spec.sample_frames()
        cp = oracle.evaluate(mesh, motions, spec.dt)
        out.append(Dataset(spec.name, split, spec, spec.dt, motions, cp, mesh_path))
    return out
