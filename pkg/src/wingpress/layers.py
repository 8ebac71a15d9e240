"""Differentiable graph layers: plain graph convolution, gated recurrent
and LSTM cells whose dense convolutions are replaced by Chebyshev graph
filters, a per-node temporal attention head, and gated temporal
convolution blocks.

Layers own named parameter arrays; ``bind`` puts them on a tape and the
``forward``/``step`` methods consume the bound vars, so one tape can run a
whole BPTT mini-sequence with shared weights.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .graph import ChebOperator, GcnOperator


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class ParamModule:
    """Base: a prefix plus an ordered dict of named arrays."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self.params: Dict[str, np.ndarray] = {}

    def _add(self, name: str, array: np.ndarray) -> str:
        key = f"{self.prefix}.{name}"
        self.params[key] = np.ascontiguousarray(array, dtype=np.float64)
        return key

    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())


class GcnLayer(ParamModule):
    """sigma(op H W + b) with a configurable activation."""

    def __init__(self, prefix: str, n_in: int, n_out: int,
                 rng: np.random.Generator, activation: str = "tanh",
                 bias: bool = True):
        super().__init__(prefix)
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.w = self._add("w", uniform_init(rng, (n_in, n_out), n_in))
        self.b = self._add("b", uniform_init(rng, (n_out,), n_in)) if bias else None

    def forward(self, pv: Dict[str, Var], op: GcnOperator, h: Var) -> Var:
        y = ad.matmul(ad.spmv(op.matrix, h), pv[self.w])
        if self.b is not None:
            y = ad.add(y, pv[self.b])
        return ad.activate(y, self.activation)


def cheb_basis(op: ChebOperator, x: Var) -> List[Var]:
    """[T_0 x, ..., T_{K-1} x] by the three-term recursion, on the tape."""
    ts = [x]
    if op.order > 1:
        ts.append(ad.spmv(op.matrix, x))
        for _ in range(2, op.order):
            ts.append(ad.sub(ad.scale(ad.spmv(op.matrix, ts[-1]), 2.0), ts[-2]))
    return ts


def cheb_filter(basis: Sequence[Var], pv: Dict[str, Var],
                keys: Sequence[str]) -> Var:
    acc = ad.matmul(basis[0], pv[keys[0]])
    for t, key in zip(basis[1:], keys[1:]):
        acc = ad.add(acc, ad.matmul(t, pv[key]))
    return acc


class GcGruCell(ParamModule):
    """Gated recurrent cell with K-order Chebyshev filters per gate."""

    def __init__(self, prefix: str, n_in: int, n_hidden: int, order: int,
                 rng: np.random.Generator):
        super().__init__(prefix)
        self.n_in, self.n_hidden, self.order = n_in, n_hidden, order
        self.banks: Dict[str, List[str]] = {}
        for gate in ("z", "r", "h"):
            self.banks[f"x{gate}"] = [
                self._add(f"wx{gate}{k}", uniform_init(rng, (n_in, n_hidden),
                                                       n_in * order))
                for k in range(order)]
            self.banks[f"h{gate}"] = [
                self._add(f"uh{gate}{k}", uniform_init(rng, (n_hidden, n_hidden),
                                                       n_hidden * order))
                for k in range(order)]
        self.biases = {g: self._add(f"b{g}", np.zeros(n_hidden)) for g in ("z", "r", "h")}

    def step(self, pv: Dict[str, Var], cheb: ChebOperator, x_t: Var,
             h_prev: Var) -> Var:
        if x_t.shape[1] != self.n_in or h_prev.shape[1] != self.n_hidden:
            raise ValueError("gru width mismatch")
        bx = cheb_basis(cheb, x_t)
        bh = cheb_basis(cheb, h_prev)
        z = ad.sigmoid(ad.add(ad.add(cheb_filter(bx, pv, self.banks["xz"]),
                                     cheb_filter(bh, pv, self.banks["hz"])),
                              pv[self.biases["z"]]))
        r = ad.sigmoid(ad.add(ad.add(cheb_filter(bx, pv, self.banks["xr"]),
                                     cheb_filter(bh, pv, self.banks["hr"])),
                              pv[self.biases["r"]]))
        brh = cheb_basis(cheb, ad.mul(r, h_prev))
        h_hat = ad.tanh(ad.add(ad.add(cheb_filter(bx, pv, self.banks["xh"]),
                                      cheb_filter(brh, pv, self.banks["hh"])),
                               pv[self.biases["h"]]))
        keep = ad.add(ad.scale(z, -1.0), 1.0)
        return ad.add(ad.mul(keep, h_prev), ad.mul(z, h_hat))


class GcLstmCell(ParamModule):
    """LSTM cell with Chebyshev graph filters and Hadamard peepholes."""

    def __init__(self, prefix: str, n_in: int, n_hidden: int, order: int,
                 rng: np.random.Generator):
        super().__init__(prefix)
        self.n_in, self.n_hidden, self.order = n_in, n_hidden, order
        self.banks: Dict[str, List[str]] = {}
        for gate in ("i", "f", "c", "o"):
            self.banks[f"x{gate}"] = [
                self._add(f"wx{gate}{k}", uniform_init(rng, (n_in, n_hidden),
                                                       n_in * order))
                for k in range(order)]
            self.banks[f"h{gate}"] = [
                self._add(f"wh{gate}{k}", uniform_init(rng, (n_hidden, n_hidden),
                                                       n_hidden * order))
                for k in range(order)]
        self.peep = {g: self._add(f"wc{g}", uniform_init(rng, (n_hidden,), n_hidden))
                     for g in ("i", "f", "o")}
        self.biases = {g: self._add(f"b{g}", np.zeros(n_hidden))
                       for g in ("i", "f", "c", "o")}

    def step(self, pv: Dict[str, Var], cheb: ChebOperator, x_t: Var,
             h_prev: Var, c_prev: Var) -> Tuple[Var, Var]:
        if x_t.shape[1] != self.n_in or h_prev.shape[1] != self.n_hidden:
            raise ValueError("lstm width mismatch")
        bx = cheb_basis(cheb, x_t)
        bh = cheb_basis(cheb, h_prev)

        def gate(name: str, c_term: Optional[Var]) -> Var:
            pre = ad.add(cheb_filter(bx, pv, self.banks[f"x{name}"]),
                         cheb_filter(bh, pv, self.banks[f"h{name}"]))
            if c_term is not None:
                pre = ad.add(pre, ad.mul(pv[self.peep[name]], c_term))
            return ad.add(pre, pv[self.biases[name]])

        i = ad.sigmoid(gate("i", c_prev))
        f = ad.sigmoid(gate("f", c_prev))
        c = ad.add(ad.mul(f, c_prev), ad.mul(i, ad.tanh(gate("c", None))))
        o = ad.sigmoid(gate("o", c))
        return ad.mul(o, ad.tanh(c)), c


class AttentionHead(ParamModule):
    """Per-node softmax weighting of a hidden-state sequence.

    Scores come from the two affine maps e_t = w2 (w1 h_t + b1) + b2,
    exactly as specified; the context is the alpha-weighted sum.
    """

    def __init__(self, prefix: str, n_hidden: int, n_attn: int,
                 rng: np.random.Generator):
        super().__init__(prefix)
        self.n_hidden, self.n_attn = n_hidden, n_attn
        self.w1 = self._add("w1", uniform_init(rng, (n_hidden, n_attn), n_hidden))
        self.b1 = self._add("b1", np.zeros(n_attn))
        self.w2 = self._add("w2", uniform_init(rng, (n_attn, 1), n_attn))
        self.b2 = self._add("b2", np.zeros(1))

    def context(self, pv: Dict[str, Var], hs: Sequence[Var]) -> Var:
        scores = []
        for h in hs:
            e = ad.add(ad.matmul(ad.add(ad.matmul(h, pv[self.w1]), pv[self.b1]),
                                 pv[self.w2]), pv[self.b2])
            scores.append(e)                        # (n, 1)
        alpha = ad.softmax(ad.concat(scores, axis=1), axis=1)
        weights = ad.split(alpha, [1] * len(hs), axis=1)
        ctx = ad.mul(weights[0], hs[0])
        for a, h in zip(weights[1:], hs[1:]):
            ctx = ad.add(ctx, ad.mul(a, h))
        return ctx


class StgcnBlock(ParamModule):
    """Gated temporal convolution: kernel (K_t, C_i, 2 C_o), no bias.

    A width-K_t causal convolution along time maps each node's sequence to
    [P Q]; the gated linear unit P * sigma(Q) halves the channels. Valid
    convolution only, so a length-M input yields M - K_t + 1 frames.
    """

    def __init__(self, prefix: str, kernel_width: int, n_in: int, n_out: int,
                 rng: np.random.Generator):
        super().__init__(prefix)
        if kernel_width < 1:
            raise ValueError("kernel width must be >= 1")
        self.kernel_width, self.n_in, self.n_out = kernel_width, n_in, n_out
        self.taps = [self._add(f"g{k}", uniform_init(rng, (n_in, 2 * n_out),
                                                     kernel_width * n_in))
                     for k in range(kernel_width)]

    def temporal_conv(self, pv: Dict[str, Var], frames: Sequence[Var]) -> List[Var]:
        m = len(frames)
        if m < self.kernel_width:
            raise ValueError("sequence shorter than the kernel width")
        out = []
        for t in range(m - self.kernel_width + 1):
            acc = ad.matmul(frames[t], pv[self.taps[0]])
            for k in range(1, self.kernel_width):
                acc = ad.add(acc, ad.matmul(frames[t + k], pv[self.taps[k]]))
            p, q = ad.split(acc, [self.n_out, self.n_out], axis=1)
            out.append(ad.mul(p, ad.sigmoid(q)))
        return out


class StgcnLayer(ParamModule):
    """Temporal GLU conv, spatial graph mix, temporal GLU conv.

    Collapses a 3-frame window to one frame: two width-2 valid
    convolutions take 3 -> 2 -> 1 with a relu graph mix in between. The
    mix is a bias-free linear map through the normalized graph operator.
    """

    def __init__(self, prefix: str, n_in: int, n_hidden: int, n_mix: int,
                 n_out: int, rng: np.random.Generator, kernel_width: int = 2):
        super().__init__(prefix)
        self.conv1 = StgcnBlock(f"{prefix}.conv1", kernel_width, n_in, n_hidden, rng)
        self.mix_w = self._add("mix", uniform_init(rng, (n_hidden, n_mix), n_hidden))
        self.conv2 = StgcnBlock(f"{prefix}.conv2", kernel_width, n_mix, n_out, rng)
        self.params.update(self.conv1.params)
        self.params.update(self.conv2.params)
        self.n_in, self.n_out = n_in, n_out

    def forward(self, pv: Dict[str, Var], op: GcnOperator,
                frames: Sequence[Var]) -> Var:
        mid = self.conv1.temporal_conv(pv, frames)
        mixed = [ad.relu(ad.matmul(ad.spmv(op.matrix, f), pv[self.mix_w]))
                 for f in mid]
        out = self.conv2.temporal_conv(pv, mixed)
        if len(out) != 1:
            raise ValueError("window length does not collapse to one frame")
        return out[0]
