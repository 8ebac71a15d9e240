"""Loss, optimizer, autoencoder pre-training, and mini-sequence training.

The loss is nodal mean absolute error plus a weighted penalty on the
pitching-moment error. Training walks the signals in seeded-shuffled
mini-sequences of three consecutive predictions; the autoregressive
variant feeds its own in-sequence predictions back through the pressure
branch, and the summed sequence loss backpropagates as one unit.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .datasets import Dataset
from .graph import SurfaceMesh
from .metrics import CoefficientRefs, moment_weights
from .model import WINDOW, Autoencoder, PressureNet, feature_frames


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossConfig:
    """Moment-penalty weight; 0.01 balances the dimensionless terms."""

    moment_weight: float = 0.01

    def __post_init__(self):
        if self.moment_weight < 0:
            raise ValueError("moment weight must be >= 0")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1
    epochs: int = 50
    bptt_length: int = 3
    seed: int = 42

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs,
               self.bptt_length) <= 0:
            raise ValueError("training settings must be positive")


@dataclass
class AugmentConfig:
    added_fraction: float = 0.30
    noise_std_fraction: float = 0.10

    def __post_init__(self):
        if not (0 <= self.added_fraction <= 1 and 0 <= self.noise_std_fraction <= 1):
            raise ValueError("fractions must lie in [0, 1]")


class AdamState:
    """First/second moment accumulators with bias correction."""

    def __init__(self, params: Dict[str, np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray], lr: float) -> None:
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def default_refs(mesh: SurfaceMesh) -> CoefficientRefs:
    """Planform-area reference for a closed two-sheet surface."""
    return CoefficientRefs(s_ref=mesh.total_area() / 2.0)


def composite_loss(pred: np.ndarray, true: np.ndarray, mesh: SurfaceMesh,
                   cfg: Optional[LossConfig] = None,
                   refs: Optional[CoefficientRefs] = None) -> float:
    """MAE over nodes plus moment_weight * |Delta C_My|."""
    cfg = cfg or LossConfig()
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    true = np.asarray(true, dtype=np.float64).reshape(-1)
    if pred.size != mesh.n_nodes or true.size != mesh.n_nodes:
        raise ValueError("field length does not match node count")
    mw = moment_weights(mesh, refs or default_refs(mesh))
    mae = float(np.abs(pred - true).mean())
    return mae + cfg.moment_weight * abs(float(mw @ (pred - true)))


def composite_loss_var(pred: Var, true: np.ndarray, mw_col: np.ndarray,
                       moment_weight: float) -> Tuple[Var, Var, Var]:
    """Tape-side loss; returns (total, mae term, |moment error| term)."""
    diff = ad.sub(pred, true.reshape(-1, 1))
    mae = ad.vmean(ad.vabs(diff))
    mom = ad.vabs(ad.vsum(ad.mul(diff, mw_col)))
    return ad.add(mae, ad.scale(mom, moment_weight)), mae, mom


def augment_snapshots(snapshots: np.ndarray, cfg: AugmentConfig,
                      seed: int) -> np.ndarray:
    """Extend a snapshot stack with noise-perturbed copies.

    Each added copy perturbs a uniformly drawn original with Gaussian
    noise whose std is noise_std_fraction times that snapshot's own std.
    """
    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 2 or snapshots.shape[0] == 0:
        raise ValueError("expected a non-empty (T, n) snapshot stack")
    n = snapshots.shape[0]
    n_added = math.ceil(cfg.added_fraction * n)
    rng = np.random.Generator(np.random.PCG64(seed))
    extra = np.empty((n_added, snapshots.shape[1]))
    for k in range(n_added):
        src = snapshots[rng.integers(0, n)]
        extra[k] = src + rng.normal(0.0, cfg.noise_std_fraction * src.std(),
                                    size=src.shape)
    return np.concatenate([snapshots, extra])


def pretrain_autoencoder(ae: Autoencoder, snapshots: np.ndarray,
                         aug: AugmentConfig, cfg: TrainConfig) -> List[float]:
    """Train the compressor on (possibly augmented) pressure snapshots.

    Reconstruction target is the raw snapshot; returns per-epoch mean MAE.
    """
    data = augment_snapshots(snapshots, aug, cfg.seed)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    adam = AdamState(ae.params)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(data.shape[0])
        epoch_losses = []
        for idx in order:
            tape = Tape()
            pv = ae.bind(tape)
            out = ae.forward(tape, pv, data[idx])
            loss = ad.vmean(ad.vabs(ad.sub(out, data[idx].reshape(-1, 1))))
            if not np.isfinite(loss.value):
                raise TrainingDiverged("non-finite autoencoder loss")
            grads = tape.backward(loss)
            adam_step(adam, ae.params, grads, cfg.learning_rate)
            epoch_losses.append(float(loss.value))
        history.append(float(np.mean(epoch_losses)))
    return history


def mini_sequences(datasets: Sequence[Dataset], length: int) -> List[Tuple[int, int]]:
    """Non-overlapping (dataset, first-target-frame) pairs in signal order."""
    out = []
    for d, ds in enumerate(datasets):
        t0 = WINDOW
        while t0 + length - 1 <= ds.n_frames - 1:
            out.append((d, t0))
            t0 += length
    return out


def train_bptt(model: PressureNet, datasets: Sequence[Dataset],
               cfg: TrainConfig, loss_cfg: Optional[LossConfig] = None,
               log_path: Optional[str] = None,
               refs: Optional[CoefficientRefs] = None) -> List[float]:
    """Mini-sequence training; returns per-epoch mean sequence loss.

    Each mini-sequence runs ``bptt_length`` consecutive predictions (the
    autoregressive variant feeding its own outputs forward within the
    sequence), sums their losses, and applies one optimizer step. The
    whole run is a pure function of (seed, datasets).
    """
    loss_cfg = loss_cfg or LossConfig()
    mw = moment_weights(model.mesh, refs or default_refs(model.mesh)).reshape(-1, 1)
    feats = [feature_frames(model, ds) for ds in datasets]
    seqs = mini_sequences(datasets, cfg.bptt_length)
    if not seqs:
        raise ValueError("datasets too short for any mini-sequence")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    adam = AdamState(model.params)
    history: List[float] = []
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(["epoch", "sequence", "loss", "mae", "moment", "wall_time"])
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(seqs))
            epoch_losses = []
            for seq_idx in order:
                d, t0 = seqs[seq_idx]
                ds = datasets[d]
                started = time.perf_counter()
                tape = Tape()
                pv = model.bind(tape)
                fed: Dict[int, Var] = {}
                total = mae_acc = mom_acc = None
                for t in range(t0, t0 + cfg.bptt_length):
                    cp_frames = None
                    if model.config.armax:
                        cp_frames = []
                        for s in range(t - WINDOW, t):
                            if s in fed:
                                scaled = ad.scale(
                                    ad.add(fed[s], -model.normalizer.cp_mean),
                                    1.0 / model.normalizer.cp_std)
                                cp_frames.append(scaled)
                            else:
                                cp_frames.append(model._standardize_cp(
                                    ds.cp[s].reshape(-1, 1)))
                    pred = model.forward_std(tape, pv, list(feats[d][t - WINDOW:t]),
                                             cp_frames)
                    if model.config.armax:
                        fed[t] = pred
                    loss, mae, mom = composite_loss_var(pred, ds.cp[t], mw,
                                                        loss_cfg.moment_weight)
                    total = loss if total is None else ad.add(total, loss)
                    mae_acc = mae if mae_acc is None else ad.add(mae_acc, mae)
                    mom_acc = mom if mom_acc is None else ad.add(mom_acc, mom)
                if not np.isfinite(total.value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, sequence {seq_idx}")
                grads = tape.backward(total)
                adam_step(adam, model.params, grads, cfg.learning_rate)
                epoch_losses.append(float(total.value))
                if writer:
                    writer.writerow([epoch, int(seq_idx), repr(float(total.value)),
                                     repr(float(mae_acc.value)),
                                     repr(float(mom_acc.value)),
                                     repr(time.perf_counter() - started)])
            history.append(float(np.mean(epoch_losses)))
    finally:
        if log_fh:
            log_fh.close()
    return history
