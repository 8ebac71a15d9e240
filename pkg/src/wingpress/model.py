"""Encoder/temporal/decoder assembly over a frozen reduction hierarchy.

Two variants: the motion-only feedforward net and the autoregressive net
that also encodes the three previous pressure fields through a second
branch and concatenates the latents. Either way a window of 3 frames is
encoded per frame with shared weights, collapsed to one latent frame by
the chosen temporal layer, and decoded back to a nodal pressure field,
with additive skip connections around each pooling stage.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, Tape, Var
from .datasets import Dataset
from .graph import ChebOperator, GcnOperator, Graph, SurfaceMesh, cheb_operator, \
    gcn_normalize, graph_from_mesh
from .layers import AttentionHead, GcGruCell, GcLstmCell, GcnLayer, StgcnLayer
from .reduction import ReductionHierarchy
from .signals import MotionSample

WINDOW = 3                      # frames per input window
MOTION_CHANNELS = 8             # x y z theta theta_dot theta_ddot xi_dot xi_ddot
ENC_WIDTHS_FULL = (256, 224, 96, 64, 368)
STGCN_WIDTHS_FULL = {False: (670, 289), True: (969, 1006)}   # keyed by armax
TEMPORAL_KINDS = ("gru", "lstm", "attn", "stgcn")


def scaled_width(full: int, scale: int) -> int:
    return max(1, int(round(full / scale)))


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; widths derive from the full-size table / scale."""

    temporal: str = "stgcn"
    armax: bool = False
    scale: int = 16
    cheb_order: int = 3
    attn_width: int = 16
    skip: bool = True

    def __post_init__(self):
        if self.temporal not in TEMPORAL_KINDS:
            raise ValueError(f"unknown temporal kind {self.temporal!r}")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")

    @property
    def enc_widths(self) -> Tuple[int, ...]:
        return tuple(scaled_width(w, self.scale) for w in ENC_WIDTHS_FULL)

    @property
    def latent(self) -> int:
        return self.enc_widths[-1]

    @property
    def temporal_in(self) -> int:
        return self.latent * (2 if self.armax else 1)

    @property
    def stgcn_widths(self) -> Tuple[int, int]:
        h, g = STGCN_WIDTHS_FULL[self.armax]
        return scaled_width(h, self.scale), scaled_width(g, self.scale)

    def to_dict(self) -> Dict:
        return {"temporal": self.temporal, "armax": self.armax,
                "scale": self.scale, "cheb_order": self.cheb_order,
                "attn_width": self.attn_width, "skip": self.skip}

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _stack_counts(in_ch: int, widths: Sequence[int]) -> int:
    total = 0
    prev = in_ch
    for w in widths:
        total += prev * w + w
        prev = w
    return total


def parameter_count(cfg: ModelConfig) -> int:
    """Trainable parameter count implied by a config (no build needed)."""
    w = cfg.enc_widths
    lat = cfg.latent
    total = _stack_counts(MOTION_CHANNELS, w)
    if cfg.armax:
        total += _stack_counts(1, w)
    total += _stack_counts(lat, (lat, w[3], w[2], w[1], w[0], 1))
    ci = cfg.temporal_in
    if cfg.temporal == "stgcn":
        h, g = cfg.stgcn_widths
        total += 2 * ci * 2 * h + h * g + 2 * g * 2 * lat
    elif cfg.temporal == "gru":
        total += 3 * (cfg.cheb_order * ci * lat + cfg.cheb_order * lat * lat + lat)
    elif cfg.temporal == "lstm":
        total += 4 * (cfg.cheb_order * ci * lat + cfg.cheb_order * lat * lat + lat)
        total += 3 * lat
    else:  # attn = gru backbone + score mlp
        total += 3 * (cfg.cheb_order * ci * lat + cfg.cheb_order * lat * lat + lat)
        total += lat * cfg.attn_width + cfg.attn_width + cfg.attn_width + 1
    return total


@dataclass
class Normalizer:
    """Per-channel affine input standardization, frozen from training data."""

    mean: np.ndarray                 # (8,)
    std: np.ndarray                  # (8,)
    cp_mean: float = 0.0
    cp_std: float = 1.0

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(np.zeros(MOTION_CHANNELS), np.ones(MOTION_CHANNELS))

    @classmethod
    def from_training(cls, datasets: Sequence[Dataset],
                      points: np.ndarray) -> "Normalizer":
        rows = np.concatenate([
            np.stack([[m.theta, m.theta_dot, m.theta_ddot, m.xi_dot, m.xi_ddot]
                      for m in ds.motions]) for ds in datasets])
        cp = np.concatenate([ds.cp.reshape(-1) for ds in datasets])
        mean = np.concatenate([points.mean(axis=0), rows.mean(axis=0)])
        std = np.concatenate([points.std(axis=0), rows.std(axis=0)])
        std = np.where(std > 0, std, 1.0)
        cp_std = float(cp.std())
        return cls(mean, std, float(cp.mean()), cp_std if cp_std > 0 else 1.0)

    def to_dict(self) -> Dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "cp_mean": self.cp_mean, "cp_std": self.cp_std}

    @classmethod
    def from_dict(cls, d: Dict) -> "Normalizer":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]),
                   d["cp_mean"], d["cp_std"])


@dataclass
class FeatureWindow:
    """Raw inputs for one prediction: 3 frames of per-node channels.

    motion is (3, n, 8) with constant coordinates across frames; pressure
    is (3, n, 1) and only present for the autoregressive variant.
    """

    motion: np.ndarray
    pressure: Optional[np.ndarray] = None

    def __post_init__(self):
        self.motion = np.asarray(self.motion, dtype=np.float64)
        if self.motion.ndim != 3 or self.motion.shape[0] != WINDOW \
                or self.motion.shape[2] != MOTION_CHANNELS:
            raise ValueError("motion must be (3, n, 8)")
        coords = self.motion[:, :, :3]
        if not (np.array_equal(coords[0], coords[1])
                and np.array_equal(coords[0], coords[2])):
            raise ValueError("coordinates must be constant across frames")
        if self.pressure is not None:
            self.pressure = np.asarray(self.pressure, dtype=np.float64)
            if self.pressure.shape != (WINDOW, self.motion.shape[1], 1):
                raise ValueError("pressure must be (3, n, 1)")


def make_window(points: np.ndarray, motions: Sequence[MotionSample],
                cp_frames: Optional[np.ndarray] = None) -> FeatureWindow:
    """Assemble a window from mesh coordinates and three motion samples."""
    if len(motions) != WINDOW:
        raise ValueError("a window needs exactly 3 motion samples")
    n = points.shape[0]
    frames = np.empty((WINDOW, n, MOTION_CHANNELS))
    for k, m in enumerate(motions):
        frames[k, :, :3] = points
        frames[k, :, 3:] = [m.theta, m.theta_dot, m.theta_ddot, m.xi_dot, m.xi_ddot]
    pressure = None
    if cp_frames is not None:
        pressure = np.asarray(cp_frames, dtype=np.float64).reshape(WINDOW, n, 1)
    return FeatureWindow(frames, pressure)


class PressureNet:
    """The assembled surrogate; owns parameters, operators, and normalizer."""

    def __init__(self, config: ModelConfig, mesh: SurfaceMesh,
                 hierarchy: ReductionHierarchy, seed: int = 42,
                 normalizer: Optional[Normalizer] = None,
                 graph: Optional[Graph] = None):
        if len(hierarchy.levels) != 2:
            raise ValueError("expected a two-level hierarchy")
        if hierarchy.n_fine != mesh.n_nodes:
            raise ValueError("hierarchy does not match the mesh")
        self.config = config
        self.mesh = mesh
        self.hierarchy = hierarchy
        self.normalizer = normalizer or Normalizer.identity()
        self.seed = seed
        graph = graph or graph_from_mesh(mesh)
        lvl1, lvl2 = hierarchy.levels
        self.ops = [gcn_normalize(graph), gcn_normalize(lvl1.graph),
                    gcn_normalize(lvl2.graph)]
        self.pools = [lvl1.pool, lvl2.pool]
        self.unpools = [lvl1.unpool, lvl2.unpool]
        self.cheb: Optional[ChebOperator] = None
        if config.temporal in ("gru", "lstm", "attn"):
            self.cheb = cheb_operator(lvl2.graph, config.cheb_order)
        rng = np.random.Generator(np.random.PCG64(seed))
        w = config.enc_widths
        lat = config.latent
        self.enc_a = self._make_stack("enc_a", MOTION_CHANNELS, w, rng)
        self.enc_b = self._make_stack("enc_b", 1, w, rng) if config.armax else None
        ci = config.temporal_in
        if config.temporal == "stgcn":
            h, g = config.stgcn_widths
            self.temporal = StgcnLayer("temporal", ci, h, g, lat, rng)
        elif config.temporal == "gru":
            self.temporal = GcGruCell("temporal", ci, lat, config.cheb_order, rng)
        elif config.temporal == "lstm":
            self.temporal = GcLstmCell("temporal", ci, lat, config.cheb_order, rng)
        else:
            self.temporal = GcGruCell("temporal.gru", ci, lat, config.cheb_order, rng)
            self.attention = AttentionHead("temporal.attn", lat, config.attn_width, rng)
        dec_widths = (lat, w[3], w[2], w[1], w[0])
        self.dec = []
        prev = lat
        for k, width in enumerate(dec_widths):
            self.dec.append(GcnLayer(f"dec.{k}", prev, width, rng))
            prev = width
        self.out_layer = GcnLayer("dec.out", prev, 1, rng, activation="identity")
        self.params: Dict[str, np.ndarray] = {}
        for m in self._modules():
            self.params.update(m.params)

    def _make_stack(self, prefix: str, in_ch: int, widths, rng) -> List[GcnLayer]:
        layers = []
        prev = in_ch
        for k, w in enumerate(widths):
            layers.append(GcnLayer(f"{prefix}.{k}", prev, w, rng))
            prev = w
        return layers

    def _modules(self):
        mods = list(self.enc_a)
        if self.enc_b is not None:
            mods += list(self.enc_b)
        mods.append(self.temporal)
        if self.config.temporal == "attn":
            mods.append(self.attention)
        mods += self.dec + [self.out_layer]
        return mods

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def bind(self, tape: Tape) -> Dict[str, Var]:
        return {name: tape.param(name, arr) for name, arr in self.params.items()}

    # ---- forward -----------------------------------------------------

    def _standardize_motion(self, frame: np.ndarray) -> np.ndarray:
        return (frame - self.normalizer.mean) / self.normalizer.std

    def _standardize_cp(self, cp: np.ndarray) -> np.ndarray:
        return (cp - self.normalizer.cp_mean) / self.normalizer.cp_std

    def _encode(self, tape: Tape, pv: Dict[str, Var], stack: List[GcnLayer],
                frames: Sequence[np.ndarray]):
        """Shared-weight per-frame encoding; returns latents + last skips."""
        latents, skip1, skip2 = [], None, None
        for frame in frames:
            h = frame if isinstance(frame, Var) else tape.constant(frame)
            for layer in stack[:3]:
                h = layer.forward(pv, self.ops[0], h)
            skip1 = h
            h = ad.spmv(self.pools[0], h)
            h = stack[3].forward(pv, self.ops[1], h)
            skip2 = h
            h = ad.spmv(self.pools[1], h)
            latents.append(stack[4].forward(pv, self.ops[2], h))
        return latents, skip1, skip2

    def _temporal(self, pv: Dict[str, Var], latents: Sequence[Var]) -> Var:
        cfg = self.config
        if cfg.temporal == "stgcn":
            return self.temporal.forward(pv, self.ops[2], latents)
        n2 = self.hierarchy.levels[1].n_nodes
        if cfg.temporal == "gru":
            h = latents[0].tape.constant(np.zeros((n2, cfg.latent)))
            for x in latents:
                h = self.temporal.step(pv, self.cheb, x, h)
            return h
        if cfg.temporal == "lstm":
            h = latents[0].tape.constant(np.zeros((n2, cfg.latent)))
            c = latents[0].tape.constant(np.zeros((n2, cfg.latent)))
            for x in latents:
                h, c = self.temporal.step(pv, self.cheb, x, h, c)
            return h
        h = latents[0].tape.constant(np.zeros((n2, cfg.latent)))
        hs = []
        for x in latents:
            h = self.temporal.step(pv, self.cheb, x, h)
            hs.append(h)
        return self.attention.context(pv, hs)

    def _decode(self, pv: Dict[str, Var], z: Var, skips) -> Var:
        skip1, skip2 = skips
        d = self.dec[0].forward(pv, self.ops[2], z)
        d = ad.spmv(self.unpools[1], d)
        d = self.dec[1].forward(pv, self.ops[1], d)
        if self.config.skip and skip2 is not None:
            d = ad.add(d, skip2)
        d = ad.spmv(self.unpools[0], d)
        d = self.dec[2].forward(pv, self.ops[0], d)
        if self.config.skip and skip1 is not None:
            d = ad.add(d, skip1)
        d = self.dec[3].forward(pv, self.ops[0], d)
        d = self.dec[4].forward(pv, self.ops[0], d)
        return self.out_layer.forward(pv, self.ops[0], d)

    def forward_std(self, tape: Tape, pv: Dict[str, Var],
                    motion_std: Sequence[np.ndarray],
                    cp_std: Optional[Sequence[np.ndarray]] = None) -> Var:
        """Forward pass on pre-standardized per-frame feature arrays."""
        lats_a, s1a, s2a = self._encode(tape, pv, self.enc_a, motion_std)
        if self.config.armax:
            if cp_std is None:
                raise ValueError("autoregressive variant needs pressure frames")
            lats_b, s1b, s2b = self._encode(tape, pv, self.enc_b, cp_std)
            latents = [ad.concat([a, b], axis=1) for a, b in zip(lats_a, lats_b)]
            skips = (s1b, s2b)
        else:
            latents, skips = lats_a, (s1a, s2a)
        z = self._temporal(pv, latents)
        return self._decode(pv, z, skips)

    def forward_window(self, tape: Tape, pv: Dict[str, Var],
                       window: FeatureWindow) -> Var:
        motion = [self._standardize_motion(window.motion[k]) for k in range(WINDOW)]
        cp = None
        if self.config.armax:
            if window.pressure is None:
                raise ValueError("autoregressive variant needs pressure frames")
            cp = [self._standardize_cp(window.pressure[k]) for k in range(WINDOW)]
        elif window.pressure is not None:
            raise ValueError("feedforward variant takes no pressure frames")
        return self.forward_std(tape, pv, motion, cp)

    def predict(self, window: FeatureWindow) -> np.ndarray:
        tape = Tape()
        pv = self.bind(tape)
        return self.forward_window(tape, pv, window).value.reshape(-1)


def feature_frames(model: PressureNet, dataset: Dataset) -> np.ndarray:
    """Pre-standardized motion features for every frame, (T, n, 8)."""
    points = model.mesh.points
    n = points.shape[0]
    out = np.empty((dataset.n_frames, n, MOTION_CHANNELS))
    coords_std = (points - model.normalizer.mean[:3]) / model.normalizer.std[:3]
    for k, m in enumerate(dataset.motions):
        out[k, :, :3] = coords_std
        row = np.array([m.theta, m.theta_dot, m.theta_ddot, m.xi_dot, m.xi_ddot])
        out[k, :, 3:] = (row - model.normalizer.mean[3:]) / model.normalizer.std[3:]
    return out


def rollout(model: PressureNet, dataset: Dataset, mode: str,
            teacher_fraction: float = 0.5) -> Tuple[np.ndarray, int]:
    """Predict the dataset's pressure series; returns (preds, start index).

    ``feedforward`` treats every step independently from motion history;
    ``armax_teacher_then_free`` feeds ground-truth pressures for the first
    ``teacher_fraction`` of the signal and the model's own predictions
    afterwards.
    """
    t_total = dataset.n_frames
    if t_total < WINDOW + 1:
        raise ValueError("dataset too short for a single window")
    feats = feature_frames(model, dataset)
    preds = np.empty((t_total - WINDOW, model.mesh.n_nodes))
    if mode == "feedforward":
        if model.config.armax:
            raise ValueError("feedforward rollout needs a feedforward model")
        for t in range(WINDOW, t_total):
            tape = Tape()
            pv = model.bind(tape)
            out = model.forward_std(tape, pv, list(feats[t - WINDOW:t]))
            preds[t - WINDOW] = out.value.reshape(-1)
        return preds, WINDOW
    if mode != "armax_teacher_then_free":
        raise ValueError(f"unknown rollout mode {mode!r}")
    if not model.config.armax:
        raise ValueError("autoregressive rollout needs an armax model")
    if not 0.0 <= teacher_fraction <= 1.0:
        raise ValueError("teacher fraction must lie in [0, 1]")
    switch_at = int(round(teacher_fraction * t_total))
    buffer = dataset.cp.copy()
    for t in range(WINDOW, t_total):
        tape = Tape()
        pv = model.bind(tape)
        cp_frames = [model._standardize_cp(buffer[s].reshape(-1, 1))
                     for s in range(t - WINDOW, t)]
        out = model.forward_std(tape, pv, list(feats[t - WINDOW:t]), cp_frames)
        preds[t - WINDOW] = out.value.reshape(-1)
        if t >= switch_at:
            buffer[t] = preds[t - WINDOW]
    return preds, WINDOW


# ---- autoencoder ------------------------------------------------------


class Autoencoder:
    """Pressure-in/pressure-out compressor sharing the model's shapes.

    Parameter names match the pressure branch ("enc_b.*") and decoder of
    the full model so pre-trained weights transfer by name.
    """

    def __init__(self, config: ModelConfig, mesh: SurfaceMesh,
                 hierarchy: ReductionHierarchy, seed: int = 42,
                 normalizer: Optional[Normalizer] = None,
                 graph: Optional[Graph] = None):
        base = replace(config, armax=True, temporal="stgcn")
        self._net = PressureNet(base, mesh, hierarchy, seed=seed,
                                normalizer=normalizer, graph=graph)
        self.config = config
        self.mesh = mesh
        self.params = {name: arr for name, arr in self._net.params.items()
                       if name.startswith(("enc_b.", "dec."))}
        self.normalizer = self._net.normalizer

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def bind(self, tape: Tape) -> Dict[str, Var]:
        return {name: tape.param(name, arr) for name, arr in self.params.items()}

    def forward(self, tape: Tape, pv: Dict[str, Var], cp: np.ndarray) -> Var:
        """Encode one standardized pressure snapshot and decode it back."""
        net = self._net
        frame = net._standardize_cp(np.asarray(cp, dtype=np.float64).reshape(-1, 1))
        latents, s1, s2 = net._encode(tape, pv, net.enc_b, [frame])
        return net._decode(pv, latents[0], (s1, s2))

    def reconstruct(self, cp: np.ndarray) -> np.ndarray:
        tape = Tape()
        pv = self.bind(tape)
        return self.forward(tape, pv, cp).value.reshape(-1)


def integrate_pretrained(model: PressureNet, ae: Autoencoder) -> int:
    """Copy every shape-matching autoencoder weight into the model.

    The decoder and (for the autoregressive variant) the pressure branch
    transfer directly; motion-branch layers past the first reuse the
    corresponding pressure-branch weights. Returns the number of arrays
    copied; the weights remain trainable afterwards.
    """
    copied = 0
    for name, arr in model.params.items():
        source = name
        if name.startswith("enc_a."):
            source = "enc_b." + name[len("enc_a."):]
        if source in ae.params and ae.params[source].shape == arr.shape:
            arr[...] = ae.params[source]
            copied += 1
    model.normalizer.cp_mean = ae.normalizer.cp_mean
    model.normalizer.cp_std = ae.normalizer.cp_std
    return copied


# ---- checkpoints -------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: PressureNet, path, seed: Optional[int] = None) -> None:
    names = list(model.params.keys())
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.digest(),
        "seed": model.seed if seed is None else seed,
        "normalizer": model.normalizer.to_dict(),
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(model.params[n].astype("<f8").tobytes())


def load_checkpoint(path, mesh: SurfaceMesh, hierarchy: ReductionHierarchy,
                    graph: Optional[Graph] = None) -> PressureNet:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        config = ModelConfig.from_dict(header["config"])
        if config.digest() != header["config_hash"]:
            raise ValueError("checkpoint/config mismatch")
        model = PressureNet(config, mesh, hierarchy, seed=header["seed"],
                            normalizer=Normalizer.from_dict(header["normalizer"]),
                            graph=graph)
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n_vals = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(8 * n_vals), dtype="<f8").reshape(shape)
            if entry["name"] not in model.params \
                    or model.params[entry["name"]].shape != shape:
                raise ValueError("checkpoint/config mismatch")
            model.params[entry["name"]][...] = raw
    return model
