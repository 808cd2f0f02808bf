"""Learnable pooling: one scalar LSTM unit scanned over each pooling region.

Each k×k region of each channel is read in row-major order as a length-k²
sequence.  A single LSTM neuron (input size 1, one hidden unit, 12
parameters total) consumes the sequence from state (h, c) = (0, 0); its
final hidden state is the pooled value.  Gate activations are logistic
sigmoids; the input/output modulation activation is configurable and
should match the activation family of the surrounding conv layers.

Training constraint: the input-modulation weight must stay strictly
positive and its bias non-negative, otherwise a ReLU-modulated unit fed
non-negative features is stuck at zero output forever (the gates then
pass no signal and no gradient).  `project_constraints` clamps both after
every optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, Tensor, region_stack

PARAM_NAMES = ("w_i", "r_i", "b_i", "w_f", "r_f", "b_f",
               "w_o", "r_o", "b_o", "w_g", "r_g", "b_g")

SHARING_MODES = ("per_region", "per_layer", "global_shared")


def resolve_activation(kind: str, alpha: float = 0.3):
    """Return the modulation activation ψ as a Tensor -> Tensor callable."""
    if kind == "tanh":
        return lambda t: t.tanh()
    if kind == "relu":
        return lambda t: t.relu()
    if kind == "leaky_relu":
        return lambda t: t.leaky_relu(alpha)
    raise ValueError(f"unknown activation kind {kind!r}")


@dataclass
class LstmPoolParams:
    """The 12 scalars of one pooling unit (or [H',W'] arrays in per_region mode)."""
    w_i: Tensor
    r_i: Tensor
    b_i: Tensor
    w_f: Tensor
    r_f: Tensor
    b_f: Tensor
    w_o: Tensor
    r_o: Tensor
    b_o: Tensor
    w_g: Tensor
    r_g: Tensor
    b_g: Tensor

    def tensors(self) -> list[Tensor]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def values(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n).data.copy() for n in PARAM_NAMES}

    def count(self) -> int:
        return sum(t.size for t in self.tensors())


def init_pool_params(rng: np.random.Generator, shape=(), dtype=np.float64) -> LstmPoolParams:
    """Gate weights ~ U(-0.1, 0.1) with all gate biases at 1.0 (gates start
    open, so signal flows from step 0), w_g ~ U(0.25, 0.75) with r_g = -w_g
    (the unit starts as a damped running max: new input up-weighted, previous
    output discounted), b_g = 0.  The constraints (w_g > 0, b_g >= 0) hold
    from the first step."""
    def u(lo, hi):
        return Tensor(rng.uniform(lo, hi, size=shape).astype(dtype), requires_grad=True)

    def const(v):
        return Tensor(np.full(shape, v, dtype=dtype), requires_grad=True)

    w_g = u(0.25, 0.75)
    r_g = Tensor(-w_g.data.copy(), requires_grad=True)
    return LstmPoolParams(
        w_i=u(-0.1, 0.1), r_i=u(-0.1, 0.1), b_i=const(1.0),
        w_f=u(-0.1, 0.1), r_f=u(-0.1, 0.1), b_f=const(1.0),
        w_o=u(-0.1, 0.1), r_o=u(-0.1, 0.1), b_o=const(1.0),
        w_g=w_g, r_g=r_g, b_g=const(0.0),
    )


def lstm_step(p: LstmPoolParams, psi, x, state, check_finite: bool = False):
    """One recurrence step: (h, c) -> (h', c') for input x.

    x may be a scalar Tensor or any array Tensor; params broadcast, so a
    single unit processes every batch element / channel / region at once.
    """
    h, c = state
    i = (p.w_i * x + p.r_i * h + p.b_i).sigmoid()
    f = (p.w_f * x + p.r_f * h + p.b_f).sigmoid()
    o = (p.w_o * x + p.r_o * h + p.b_o).sigmoid()
    g = psi(p.w_g * x + p.r_g * h + p.b_g)
    if check_finite:
        for name, t in (("input gate", i), ("forget gate", f),
                        ("output gate", o), ("input modulation", g)):
            t.assert_finite(name)
    c_new = i * g + f * c
    h_new = o * psi(c_new)
    return h_new, c_new


def lstm_pool_forward(feat: Tensor, k: int, stride: int,
                      params: LstmPoolParams, psi) -> Tensor:
    """Pool [B,C,H,W] (or [C,H,W]) down to [B,C,H',W'] with the LSTM unit.

    H' = (H-k)/stride + 1; the input must tile exactly (no padding).
    """
    squeeze = feat.ndim == 3
    if squeeze:
        feat = feat.reshape((1,) + feat.shape)
    rs = region_stack(feat, k, stride)  # [B,C,H',W',k*k]
    zero = Tensor(np.zeros((), dtype=feat.dtype))
    h, c = zero, zero
    for t in range(k * k):
        h, c = lstm_step(params, psi, rs[..., t], (h, c))
    out = h
    out.assert_finite("lstm pool output")
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


def project_constraints(p: LstmPoolParams, eps: float = 1e-6) -> LstmPoolParams:
    """Clamp w_g >= eps and b_g >= 0 in place; call after every optimizer step."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    np.maximum(p.w_g.data, eps, out=p.w_g.data)
    np.maximum(p.b_g.data, 0.0, out=p.b_g.data)
    return p


def max_pool_oracle(region) -> float:
    """Exact maximum of a pooling region (reference, not differentiable)."""
    region = np.asarray(region, dtype=np.float64)
    if region.size == 0:
        raise ValueError("empty pooling region")
    return float(region.max())


def avg_pool_oracle(region) -> float:
    """Exact arithmetic mean of a pooling region."""
    region = np.asarray(region, dtype=np.float64)
    if region.size == 0:
        raise ValueError("empty pooling region")
    return float(region.mean())


def fixed_pool_forward(feat: Tensor, k: int, stride: int, kind: str) -> Tensor:
    """Conventional max/avg pooling via the same region scan.

    Max ties route the gradient to the lowest row-major index.
    """
    rs = region_stack(feat, k, stride)
    if kind == "max":
        return rs.max(axis=-1)
    if kind == "avg":
        return rs.mean(axis=-1)
    raise ValueError(f"unknown fixed pool kind {kind!r}")


# -- fused layer --------------------------------------------------------------
#
# The composite graph above is the reference; the fused version below does
# the same recurrence with a hand-written backward pass so a training run
# is not dominated by per-step graph bookkeeping.  Tests pin the two
# implementations together and against finite differences.

def _psi_forward(kind: str, alpha: float, pre: np.ndarray):
    """Return (value, local derivative) of the modulation activation."""
    if kind == "relu":
        d = (pre > 0).astype(pre.dtype)
        return pre * d, d
    if kind == "leaky_relu":
        d = np.where(pre > 0, 1.0, alpha).astype(pre.dtype)
        return pre * d, d
    if kind == "tanh":
        v = np.tanh(pre)
        return v, 1.0 - v * v
    raise ValueError(f"unknown activation kind {kind!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5*(tanh(x/2)+1): stable and single vectorized call
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_pool_fused(feat: Tensor, k: int, stride: int, params: LstmPoolParams,
                    psi_kind: str, alpha: float = 0.3) -> Tensor:
    """Same contract as lstm_pool_forward, one tape node, vectorized BPTT."""
    rs = region_stack(feat, k, stride)
    x = rs.data                      # [B,C,H',W',T]
    T = k * k
    pv = {n: getattr(params, n).data for n in PARAM_NAMES}
    dtype = x.dtype
    shape = x.shape[:-1]

    hs = [np.zeros((1,) * len(shape), dtype=dtype)]  # h_{t-1} inputs, broadcastable
    cs = [np.zeros((1,) * len(shape), dtype=dtype)]
    gates = []                       # per step: (i, f, o, g, dpsi_g, psi_c, dpsi_c)
    for t in range(T):
        xt = x[..., t]
        h, c = hs[-1], cs[-1]
        i = _sigmoid(pv["w_i"] * xt + pv["r_i"] * h + pv["b_i"])
        f = _sigmoid(pv["w_f"] * xt + pv["r_f"] * h + pv["b_f"])
        o = _sigmoid(pv["w_o"] * xt + pv["r_o"] * h + pv["b_o"])
        g, dpsi_g = _psi_forward(psi_kind, alpha, pv["w_g"] * xt + pv["r_g"] * h + pv["b_g"])
        c_new = i * g + f * c
        psi_c, dpsi_c = _psi_forward(psi_kind, alpha, c_new)
        h_new = o * psi_c
        gates.append((i, f, o, g, dpsi_g, psi_c, dpsi_c))
        hs.append(h_new)
        cs.append(c_new)
    out = hs[-1]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("lstm pool output")

    cache: dict = {}

    def bptt(gout):
        if cache.get("gid") != id(gout):
            dx = np.empty_like(x)
            dp = {n: np.zeros(pv[n].shape, dtype=np.float64) for n in PARAM_NAMES}
            dh = gout.astype(dtype, copy=True)
            dc = np.zeros((1,) * len(shape), dtype=dtype)
            for t in range(T - 1, -1, -1):
                i, f, o, g, dpsi_g, psi_c, dpsi_c = gates[t]
                xt = x[..., t]
                hprev, cprev = hs[t], cs[t]
                do = dh * psi_c
                dc = dc + dh * o * dpsi_c
                di = dc * g
                dg = dc * i
                df = dc * cprev
                dc = dc * f
                dpre_i = di * i * (1.0 - i)
                dpre_f = df * f * (1.0 - f)
                dpre_o = do * o * (1.0 - o)
                dpre_g = dg * dpsi_g
                for n, dpre, src in (("w_i", dpre_i, xt), ("r_i", dpre_i, hprev),
                                     ("b_i", dpre_i, None),
                                     ("w_f", dpre_f, xt), ("r_f", dpre_f, hprev),
                                     ("b_f", dpre_f, None),
                                     ("w_o", dpre_o, xt), ("r_o", dpre_o, hprev),
                                     ("b_o", dpre_o, None),
                                     ("w_g", dpre_g, xt), ("r_g", dpre_g, hprev),
                                     ("b_g", dpre_g, None)):
                    contrib = dpre if src is None else dpre * src
                    dp[n] += _unbroadcast_np(np.broadcast_to(contrib, shape), dp[n].shape)
                dx[..., t] = (pv["w_i"] * dpre_i + pv["w_f"] * dpre_f
                              + pv["w_o"] * dpre_o + pv["w_g"] * dpre_g)
                dh = (pv["r_i"] * dpre_i + pv["r_f"] * dpre_f
                      + pv["r_o"] * dpre_o + pv["r_g"] * dpre_g)
            cache["gid"] = id(gout)
            cache["dx"] = dx
            for n in PARAM_NAMES:
                cache[n] = dp[n]
        return cache

    def make_param_vjp(name):
        return lambda g: bptt(g)[name]

    pvjps = [(rs, lambda g: bptt(g)["dx"])]
    pvjps += [(getattr(params, n), make_param_vjp(n)) for n in PARAM_NAMES]
    return Tensor._make(out, "lstm_pool", pvjps)


def _unbroadcast_np(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def lstm_sequence_eval(param_values: dict, x: np.ndarray, psi_kind: str,
                       alpha: float = 0.3) -> np.ndarray:
    """Tape-free forward over sequences x [N,T] -> final hidden state [N].

    `param_values` maps the 12 parameter names to scalars/arrays.  Used for
    cheap validation/test sweeps and analysis probes; matches the fused
    layer bit for bit.
    """
    pv = param_values
    h = np.zeros((), dtype=x.dtype)
    c = np.zeros((), dtype=x.dtype)
    for t in range(x.shape[1]):
        xt = x[:, t]
        i = _sigmoid(pv["w_i"] * xt + pv["r_i"] * h + pv["b_i"])
        f = _sigmoid(pv["w_f"] * xt + pv["r_f"] * h + pv["b_f"])
        o = _sigmoid(pv["w_o"] * xt + pv["r_o"] * h + pv["b_o"])
        g, _ = _psi_forward(psi_kind, alpha, pv["w_g"] * xt + pv["r_g"] * h + pv["b_g"])
        c = i * g + f * c
        pc, _ = _psi_forward(psi_kind, alpha, c)
        h = o * pc
    return np.broadcast_to(h, (x.shape[0],)).copy()
