"""Motion-signal factory: multisine excitations with flattening phases.

Pitch/plunge histories come in three kinds: undamped multisine (US),
linearly damped multisine (DS, envelope decaying to 10% of the initial
amplitude at the end time), and plain single harmonics (SH). All channels
carry analytic first and second derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

DEG = math.pi / 180.0
#: default freestream speed: Mach 0.74 at sea-level sound speed 340.3 m/s
U_INF_DEFAULT = 0.74 * 340.3
CHORD_DEFAULT = 0.4064


def phases(m_count: int) -> np.ndarray:
    """Flattening phases phi_m = -m(m+1)pi/M for m = 1..M."""
    if m_count < 1:
        raise ValueError("need at least one harmonic")
    m = np.arange(1, m_count + 1, dtype=np.float64)
    return -m * (m + 1.0) * math.pi / m_count


def kappa_to_omega(kappa: float, chord: float = CHORD_DEFAULT,
                   u_inf: float = U_INF_DEFAULT) -> float:
    """Reduced frequency to angular frequency, omega = 2 kappa U / c."""
    if chord <= 0 or u_inf <= 0:
        raise ValueError("chord and freestream speed must be positive")
    return 2.0 * kappa * u_inf / chord


@dataclass
class SchroederParams:
    """Multisine definition: M harmonics at (m+1) * omega0 with set phases.

    Amplitudes default to the uniform split a/M. The damped variant ramps
    every harmonic's amplitude linearly from a0 at t0 down to a_end =
    0.1 a0 at t_end.
    """

    m_count: int
    amplitude: float                  # peak parameter a; per-harmonic a/M
    omega0: float
    damped: bool = False
    t0: float = 0.0
    t_end: float = 2.0
    phi: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.m_count < 1:
            raise ValueError("m_count must be >= 1")
        if self.damped and self.t_end <= self.t0:
            raise ValueError("damped signal needs t_end > t0")
        self.phi = phases(self.m_count)

    @property
    def a0(self) -> float:
        return self.amplitude / self.m_count

    @property
    def a_end(self) -> float:
        return 0.1 * self.a0

    def envelope(self, t: float) -> float:
        """Per-harmonic amplitude at time t (the DS ramp; constant for US)."""
        if not self.damped:
            return self.a0
        slope = (self.a_end - self.a0) / (self.t_end - self.t0)
        return slope * (t - self.t0) + self.a0

    def _kernel(self, t: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = np.arange(1, self.m_count + 1, dtype=np.float64)
        w = (m + 1.0) * self.omega0
        arg = w * t + self.phi
        return np.sin(arg), np.cos(arg), w

    def value(self, t: float) -> float:
        s, _, _ = self._kernel(t)
        return float((self.envelope(t) * s).sum())

    def derivatives(self, t: float) -> Tuple[float, float, float]:
        """(value, first, second) with the product rule across the DS ramp."""
        s, c, w = self._kernel(t)
        r = self.envelope(t)
        if self.damped:
            rp = (self.a_end - self.a0) / (self.t_end - self.t0)
        else:
            rp = 0.0
        val = (r * s).sum()
        d1 = (rp * s + r * w * c).sum()
        d2 = (2.0 * rp * w * c - r * w * w * s).sum()
        return float(val), float(d1), float(d2)


def us_signal(params: SchroederParams, t: float) -> float:
    if params.damped:
        raise ValueError("params describe a damped signal")
    return params.value(t)


def ds_signal(params: SchroederParams, t: float) -> float:
    if not params.damped:
        raise ValueError("params describe an undamped signal")
    if t < params.t0 or t > params.t_end:
        raise ValueError("t outside [t0, t_end]")
    return params.value(t)


@dataclass
class Harmonic:
    """Single-harmonic channel a sin(omega t + phase)."""

    amplitude: float
    omega: float
    phase: float = 0.0

    def derivatives(self, t: float) -> Tuple[float, float, float]:
        arg = self.omega * t + self.phase
        a, w = self.amplitude, self.omega
        return (a * math.sin(arg), a * w * math.cos(arg), -a * w * w * math.sin(arg))


@dataclass
class MotionSample:
    """Pitch/plunge state at one instant, with analytic derivatives."""

    t: float
    theta: float
    theta_dot: float
    theta_ddot: float
    xi: float
    xi_dot: float
    xi_ddot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.theta_dot, self.theta_ddot,
                         self.xi, self.xi_dot, self.xi_ddot])


@dataclass
class SignalSpec:
    """One test-matrix row: kind plus per-axis reduced frequency/amplitude.

    Amplitudes follow the matrix units (pitch in degrees, plunge in
    metres); sampling converts pitch to radians.
    """

    name: str
    kind: str                      # "DS" | "US" | "SH"
    kappa_theta: float
    amp_theta_deg: float
    kappa_xi: float
    amp_xi: float
    duration: float = 2.0
    dt: float = 2e-3
    m_count: int = 9
    chord: float = CHORD_DEFAULT
    u_inf: float = U_INF_DEFAULT

    def __post_init__(self):
        if self.kind not in ("DS", "US", "SH"):
            raise ValueError(f"unknown signal kind {self.kind!r}")
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / self.dt))

    def _axis(self, kappa: float, amp: float):
        if amp == 0.0 or kappa == 0.0:
            return None
        omega = kappa_to_omega(kappa, self.chord, self.u_inf)
        if self.kind == "SH":
            return Harmonic(amp, omega)
        return SchroederParams(self.m_count, amp, omega,
                               damped=(self.kind == "DS"),
                               t0=0.0, t_end=self.duration)

    def sample(self, t: float) -> MotionSample:
        if t < 0 or t > self.duration:
            raise ValueError("t outside signal duration")
        th = self._axis(self.kappa_theta, self.amp_theta_deg * DEG)
        xi = self._axis(self.kappa_xi, self.amp_xi)
        tv = th.derivatives(t) if th is not None else (0.0, 0.0, 0.0)
        xv = xi.derivatives(t) if xi is not None else (0.0, 0.0, 0.0)
        return MotionSample(t, tv[0], tv[1], tv[2], xv[0], xv[1], xv[2])

    def sample_frames(self) -> list:
        return [self.sample(k * self.dt) for k in range(self.n_frames)]

    def to_dict(self) -> Dict:
        return {
            "name": self.name, "kind": self.kind,
            "kappa_theta": self.kappa_theta, "amp_theta_deg": self.amp_theta_deg,
            "kappa_xi": self.kappa_xi, "amp_xi": self.amp_xi,
            "duration": self.duration, "dt": self.dt, "m_count": self.m_count,
            "chord": self.chord, "u_inf": self.u_inf,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "SignalSpec":
        return cls(**d)


def sample_motion(spec: SignalSpec, t: float) -> MotionSample:
    return spec.sample(t)
