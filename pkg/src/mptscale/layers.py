"""Neural building blocks of the MPT network.

Everything here operates on :class:`~mptscale.tensorcore.Tensor` and is
tape-aware. Layouts:

* sequences are ``(N, T, features)``;
* the ConvBlock takes feature maps ``(N, E, T, K)``.

GRU convention (frozen; closed-form tests rely on it)::

    r = sigmoid(x W_r + h U_r + b_r)
    z = sigmoid(x W_z + h U_z + b_z)
    n = tanh(x W_n + b_n + r * (h U_n))
    h' = (1 - z) * n + z * h

LSTM gate order is ``[i, f, g, o]`` with ``c' = f*c + i*g`` and
``h' = o * tanh(c')``. Both cells carry a single bias vector per gate block.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensorcore as tc
from .tensorcore import ShapeError, Tensor, make_op

GATES = {"gru": 3, "lstm": 4}


class Module:
    """Minimal parameter container with dotted names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = False

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.add_param("weight", uniform(rng, (n_in, n_out), n_in))
        self.bias = self.add_param("bias", uniform(rng, (n_out,), n_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0

    @staticmethod
    def count(n_in: int, n_out: int, bias: bool = True) -> int:
        return n_in * n_out + (n_out if bias else 0)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


# -- recurrent cells ----------------------------------------------------------
def _sig(a):
    # tanh form: stable for any input, one transcendental
    return 0.5 * np.tanh(0.5 * a) + 0.5


def rnn_sequence(x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, kind: str) -> Tensor:
    """Run a GRU/LSTM over the time axis as one fused, tape-aware op.

    ``x`` is ``lead + (N, T, i)``; weights are ``lead + (i, G*h)``,
    ``lead + (h, G*h)`` and ``lead + (G*h,)`` where ``lead`` is ``()`` for a
    shared cell or ``(groups,)`` for independent per-group cells. Returns
    all hidden states ``lead + (N, T, h)``; the initial state is zero.
    Backward is hand-written BPTT. Loops run on time-major copies so each
    step touches contiguous memory.
    """
    n_gates = GATES[kind]
    lead = w_x.ndim - 2
    if x.ndim != lead + 3 or x.shape[:lead] != w_x.shape[:lead] or x.shape[-1] != w_x.shape[-2]:
        raise ShapeError(f"rnn: input {x.shape} does not match input weights {w_x.shape}")
    hid = w_h.shape[-2]
    if w_x.shape[-1] != n_gates * hid or w_h.shape[-1] != n_gates * hid:
        raise ShapeError(f"rnn: {kind} needs {n_gates} gate blocks of {hid}, got {w_x.shape}")
    xd, wx, wh, bd = x.data, w_x.data, w_h.data, b.data
    *lead_shape, n, t_len, n_in = xd.shape
    dt = xd.dtype
    gh = n_gates * hid
    wx_b = wx.reshape(*lead_shape, 1, n_in, gh)
    xp = xd @ wx_b + bd.reshape(*lead_shape, 1, 1, gh)  # lead,N,T,G*h
    xp = np.ascontiguousarray(np.moveaxis(xp, -2, 0))  # T,lead,N,G*h

    hs = np.zeros((t_len + 1, *lead_shape, n, hid), dtype=dt)
    acts = np.empty((t_len, *lead_shape, n, gh), dtype=dt)
    if kind == "gru":
        hpn = np.empty((t_len, *lead_shape, n, hid), dtype=dt)
        for t in range(t_len):
            h = hs[t]
            hp = h @ wh
            a = acts[t]
            a[..., : 2 * hid] = _sig(xp[t, ..., : 2 * hid] + hp[..., : 2 * hid])
            r, z = a[..., :hid], a[..., hid: 2 * hid]
            hpn[t] = hp[..., 2 * hid:]
            nn = np.tanh(xp[t, ..., 2 * hid:] + r * hpn[t])
            a[..., 2 * hid:] = nn
            hs[t + 1] = nn + z * (h - nn)
    else:
        cs = np.zeros((t_len + 1, *lead_shape, n, hid), dtype=dt)
        for t in range(t_len):
            pre = xp[t] + hs[t] @ wh
            a = acts[t]
            a[...] = _sig(pre)
            a[..., 2 * hid: 3 * hid] = np.tanh(pre[..., 2 * hid: 3 * hid])
            i_, f_, g, o_ = (a[..., :hid], a[..., hid: 2 * hid],
                             a[..., 2 * hid: 3 * hid], a[..., 3 * hid:])
            c = f_ * cs[t] + i_ * g
            cs[t + 1] = c
            hs[t + 1] = o_ * np.tanh(c)

    out = np.ascontiguousarray(np.moveaxis(hs[1:], 0, -2))

    def bwd(gout):
        gout = np.ascontiguousarray(np.moveaxis(gout, -2, 0))
        dpre = np.empty_like(acts)
        dh = np.zeros((*lead_shape, n, hid), dtype=dt)
        wh_t = np.swapaxes(wh, -1, -2)
        if kind == "gru":
            dhp_all = np.empty_like(dpre)
            for t in range(t_len - 1, -1, -1):
                dh = dh + gout[t]
                a = acts[t]
                r, z, nn = a[..., :hid], a[..., hid: 2 * hid], a[..., 2 * hid:]
                d = dpre[t]
                dn = dh * (1.0 - z) * (1.0 - nn * nn)
                d[..., :hid] = dn * hpn[t] * r * (1.0 - r)
                d[..., hid: 2 * hid] = dh * (hs[t] - nn) * z * (1.0 - z)
                d[..., 2 * hid:] = dn
                dhp = dhp_all[t]
                dhp[..., : 2 * hid] = d[..., : 2 * hid]
                dhp[..., 2 * hid:] = dn * r
                dh = dh * z + dhp @ wh_t
        else:
            dc = np.zeros_like(dh)
            dhp_all = dpre
            for t in range(t_len - 1, -1, -1):
                dh = dh + gout[t]
                a = acts[t]
                i_, f_, g, o_ = (a[..., :hid], a[..., hid: 2 * hid],
                                 a[..., 2 * hid: 3 * hid], a[..., 3 * hid:])
                tc_ = np.tanh(cs[t + 1])
                dc = dc + dh * o_ * (1.0 - tc_ * tc_)
                d = dpre[t]
                d[..., :hid] = dc * g * i_ * (1.0 - i_)
                d[..., hid: 2 * hid] = dc * cs[t] * f_ * (1.0 - f_)
                d[..., 2 * hid: 3 * hid] = dc * i_ * (1.0 - g * g)
                d[..., 3 * hid:] = dh * tc_ * o_ * (1.0 - o_)
                dc = dc * f_
                dh = d @ wh_t
        dpre_b = np.ascontiguousarray(np.moveaxis(dpre, 0, -2))  # lead,N,T,G*h
        flat = (*lead_shape, n * t_len)
        dpre_f = dpre_b.reshape(*flat, gh)
        dx = dpre_b @ np.swapaxes(wx_b, -1, -2)
        dwx = np.swapaxes(xd.reshape(*flat, n_in), -1, -2) @ dpre_f
        hprev = np.moveaxis(hs[:-1], 0, -2).reshape(*flat, hid)
        dhp_b = np.moveaxis(dhp_all, 0, -2).reshape(*flat, gh)
        dwh = np.swapaxes(hprev, -1, -2) @ dhp_b
        db = dpre_f.sum(axis=-2)
        return dx, dwx, dwh, db

    return make_op(out, (x, w_x, w_h, b), bwd, f"{kind}_sequence")


def rnn_cell_step(cell: "RNNCell", x_t: Tensor, state):
    """One time step composed from tensorcore primitives.

    ``state`` is ``h`` for GRU or ``(h, c)`` for LSTM; returns
    ``(y_t, new_state)`` with ``y_t`` the new hidden vector.
    """
    hid = cell.hidden
    if x_t.shape[-1] != cell.n_in:
        raise ShapeError(f"cell expects input {cell.n_in}, got {x_t.shape}")
    if cell.kind == "gru":
        h = state
        xp = x_t @ cell.w_x + cell.b
        hp = h @ cell.w_h
        r = tc.sigmoid(xp[..., :hid] + hp[..., :hid])
        z = tc.sigmoid(xp[..., hid: 2 * hid] + hp[..., hid: 2 * hid])
        nn = tc.tanh(xp[..., 2 * hid:] + r * hp[..., 2 * hid:])
        h_new = (1.0 - z) * nn + z * h
        return h_new, h_new
    h, c = state
    pre = x_t @ cell.w_x + h @ cell.w_h + cell.b
    i_ = tc.sigmoid(pre[..., :hid])
    f_ = tc.sigmoid(pre[..., hid: 2 * hid])
    g = tc.tanh(pre[..., 2 * hid: 3 * hid])
    o_ = tc.sigmoid(pre[..., 3 * hid:])
    c_new = f_ * c + i_ * g
    h_new = o_ * tc.tanh(c_new)
    return h_new, (h_new, c_new)


class RNNCell(Module):
    """Single-direction GRU/LSTM cell; ``groups`` gives independent weight sets."""

    def __init__(self, kind: str, n_in: int, hidden: int, rng: np.random.Generator,
                 groups: int | None = None):
        super().__init__()
        if kind not in GATES:
            raise ValueError(f"unknown rnn kind {kind!r}")
        self.kind, self.n_in, self.hidden, self.groups = kind, n_in, hidden, groups
        g = GATES[kind] * hidden
        lead = () if groups is None else (groups,)
        self.w_x = self.add_param("w_x", uniform(rng, lead + (n_in, g), hidden))
        self.w_h = self.add_param("w_h", uniform(rng, lead + (hidden, g), hidden))
        self.b = self.add_param("b", uniform(rng, lead + (g,), hidden))

    def __call__(self, x: Tensor) -> Tensor:
        return rnn_sequence(x, self.w_x, self.w_h, self.b, self.kind)

    def unrolled(self, x: Tensor) -> Tensor:
        """Reference path: loop :func:`rnn_cell_step` over time (shared cells only)."""
        n, t_len, _ = x.shape
        zero = Tensor(np.zeros((n, self.hidden), dtype=x.dtype))
        state = zero if self.kind == "gru" else (zero, zero)
        outs = []
        for t in range(t_len):
            y, state = rnn_cell_step(self, x[:, t, :], state)
            outs.append(y)
        return tc.stack(outs, axis=1)

    @staticmethod
    def count(kind: str, n_in: int, hidden: int) -> int:
        g = GATES[kind]
        return g * hidden * (n_in + hidden) + g * hidden

    @staticmethod
    def macs(kind: str, n_in: int, hidden: int) -> int:
        return GATES[kind] * hidden * (n_in + hidden)


class RNN(Module):
    """Uni- or bi-directional RNN with output width ``hidden``.

    The bidirectional form runs a second cell on the time-reversed input,
    concatenates both passes (``2*hidden``) and merges them linearly back to
    ``hidden``.
    """

    def __init__(self, kind: str, n_in: int, hidden: int, bidirectional: bool,
                 rng: np.random.Generator):
        super().__init__()
        self.kind, self.n_in, self.hidden, self.bidirectional = kind, n_in, hidden, bidirectional
        self.fwd = self.add_child("fwd", RNNCell(kind, n_in, hidden, rng))
        if bidirectional:
            self.bwd = self.add_child("bwd", RNNCell(kind, n_in, hidden, rng))
            self.merge = self.add_child("merge", Linear(2 * hidden, hidden, rng))

    def __call__(self, x: Tensor) -> Tensor:
        y = self.fwd(x)
        if not self.bidirectional:
            return y
        yb = tc.flip(self.bwd(tc.flip(x, -2)), -2)
        return self.merge(tc.concat([y, yb], axis=-1))

    @staticmethod
    def count(kind: str, n_in: int, hidden: int, bidirectional: bool) -> int:
        one = RNNCell.count(kind, n_in, hidden)
        return 2 * one + Linear.count(2 * hidden, hidden) if bidirectional else one

    @staticmethod
    def macs(kind: str, n_in: int, hidden: int, bidirectional: bool) -> int:
        one = RNNCell.macs(kind, n_in, hidden)
        return 2 * one + 2 * hidden * hidden if bidirectional else one


# -- attention ----------------------------------------------------------------
ATTN_EPS = 1e-6


def feature_map(x: Tensor) -> Tensor:
    return tc.elu(x) + 1.0


def linear_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool,
                     eps: float = ATTN_EPS) -> Tensor:
    """Kernelised attention with ``phi = elu + 1`` over ``(..., T, d)`` inputs.

    Causal mode keeps running sums ``S_t = sum_{s<=t} phi(k_s) v_s^T`` and
    ``z_t = sum_{s<=t} phi(k_s)``; the output is
    ``phi(q_t)^T S_t / (phi(q_t)^T z_t + eps)``. Non-causal mode sums over
    the whole sequence.
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    if q.shape[-2] == 0:
        raise ShapeError("attention: empty sequence")
    fq, fk = feature_map(q), feature_map(k)
    *lead, t_len, d = q.shape
    dv = v.shape[-1]
    if causal:
        kv = fk.reshape(*lead, t_len, d, 1) * v.reshape(*lead, t_len, 1, dv)
        s = tc.cumsum(kv, axis=-3)
        num = (fq.reshape(*lead, t_len, 1, d) @ s).reshape(*lead, t_len, dv)
        z = tc.cumsum(fk, axis=-2)
        den = (fq * z).sum(axis=-1, keepdims=True) + eps
    else:
        s = fk.transpose(*range(len(lead)), len(lead) + 1, len(lead)) @ v
        num = fq @ s
        z = fk.sum(axis=-2, keepdims=True)
        den = (fq * z).sum(axis=-1, keepdims=True) + eps
    return num / den


def attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal: bool,
                     eps: float = ATTN_EPS) -> np.ndarray:
    """O(T^2) explicit-weight evaluation of :func:`linear_attention` (numpy)."""

    def phi(a):
        return np.where(a > 0, a + 1.0, np.exp(np.minimum(a, 0.0)))

    fq, fk = phi(q), phi(k)
    t_len = q.shape[-2]
    out = np.zeros(q.shape[:-1] + (v.shape[-1],))
    for t in range(t_len):
        hi = t + 1 if causal else t_len
        w = np.einsum("...d,...sd->...s", fq[..., t, :], fk[..., :hi, :])
        out[..., t, :] = np.einsum("...s,...sd->...d", w, v[..., :hi, :]) / (
            w.sum(axis=-1)[..., None] + eps)
    return out


def n_heads(dim: int) -> int:
    return 4 if dim % 4 == 0 else 1


class TransformerLayer(Module):
    """Pre-norm transformer with linear attention and an RNN feed-forward.

    ``x1 = x + Wo(Attn(LN1(x)))``; ``out = x1 + ff_lin(RNN(pre(LN2(x1))))``.
    ``pre`` is an ``E -> C*E`` projection present only when ``expand > 1``;
    with ``expand == 1`` the RNN runs at width ``E`` directly.
    ``bidirectional`` selects noncausal attention plus a bi-RNN.
    """

    def __init__(self, dim: int, expand: int, kind: str, bidirectional: bool,
                 rng: np.random.Generator):
        super().__init__()
        self.dim, self.expand, self.kind, self.bidirectional = dim, expand, kind, bidirectional
        self.heads = n_heads(dim)
        width = expand * dim
        self.ln1 = self.add_child("ln1", LayerNorm(dim))
        self.wq = self.add_child("wq", Linear(dim, dim, rng))
        self.wk = self.add_child("wk", Linear(dim, dim, rng))
        self.wv = self.add_child("wv", Linear(dim, dim, rng))
        self.wo = self.add_child("wo", Linear(dim, dim, rng))
        self.ln2 = self.add_child("ln2", LayerNorm(dim))
        self.ff_pre = self.add_child("ff_pre", Linear(dim, width, rng)) if expand > 1 else None
        self.ff_rnn = self.add_child("ff_rnn", RNN(kind, width, width, bidirectional, rng))
        self.ff_lin = self.add_child("ff_lin", Linear(width, dim, rng))

    @property
    def mode(self) -> str:
        return "bi" if self.bidirectional else "uni"

    def attention(self, x: Tensor) -> Tensor:
        n, t_len, e = x.shape
        h = self.heads
        dh = e // h

        def heads(y):
            return y.reshape(n, t_len, h, dh).transpose(0, 2, 1, 3)

        a = linear_attention(heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x)),
                             causal=not self.bidirectional)
        return self.wo(a.transpose(0, 2, 1, 3).reshape(n, t_len, e))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"transformer expects (N, T, {self.dim}), got {x.shape}")
        x1 = x + self.attention(self.ln1(x))
        h = self.ln2(x1)
        if self.ff_pre is not None:
            h = self.ff_pre(h)
        return x1 + self.ff_lin(self.ff_rnn(h))

    def zero_outputs_(self) -> None:
        self.wo.zero_()
        self.ff_lin.zero_()

    @staticmethod
    def count(dim: int, expand: int, kind: str, bidirectional: bool) -> int:
        width = expand * dim
        n = 4 * Linear.count(dim, dim) + 2 * 2 * dim
        if expand > 1:
            n += Linear.count(dim, width)
        return n + RNN.count(kind, width, width, bidirectional) + Linear.count(width, dim)

    @staticmethod
    def macs_per_token(dim: int, expand: int, kind: str, bidirectional: bool) -> int:
        width = expand * dim
        h = n_heads(dim)
        m = 4 * dim * dim + 2 * dim * (dim // h) * h
        if expand > 1:
            m += dim * width
        return m + RNN.macs(kind, width, width, bidirectional) + width * dim


# -- convolution ----------------------------------------------------------------
def depthwise_conv3x3_causal(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 3x3 conv on ``(N, E, T, K)``; past-only in time.

    Output frame ``t`` sees input frames ``t-2 .. t``; the band axis is padded
    by one on each side.
    """
    n, e, t_len, k = x.shape
    if w.shape != (e, 3, 3):
        raise ShapeError(f"depthwise weight {w.shape} does not match {e} channels")
    xp = np.zeros((n, e, t_len + 2, k + 2), dtype=x.dtype)
    xp[:, :, 2:, 1:-1] = x.data
    wd = w.data
    out = np.zeros(x.shape, dtype=x.dtype)
    for a in range(3):
        for b in range(3):
            out += wd[None, :, a, b, None, None] * xp[:, :, a: a + t_len, b: b + k]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for a in range(3):
            for b in range(3):
                gxp[:, :, a: a + t_len, b: b + k] += wd[None, :, a, b, None, None] * g
                gw[:, a, b] = (g * xp[:, :, a: a + t_len, b: b + k]).sum(axis=(0, 2, 3))
        return gxp[:, :, 2:, 1:-1], gw

    return make_op(out, (x, w), bwd, "depthwise_conv")


class ConvBlock(Module):
    """Causal depthwise-separable 3x3 conv followed by 2-D batch norm."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.depthwise = self.add_param("depthwise", uniform(rng, (dim, 3, 3), 9))
        self.pointwise = self.add_param("pointwise", uniform(rng, (dim, dim), dim))
        self.bn_gamma = self.add_param("bn.gamma", np.ones(dim))
        self.bn_beta = self.add_param("bn.beta", np.zeros(dim))
        self._buffers["bn.running_mean"] = np.zeros(dim)
        self._buffers["bn.running_var"] = np.ones(dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise ShapeError(f"ConvBlock expects (N, {self.dim}, T, K), got {x.shape}")
        y = depthwise_conv3x3_causal(x, self.depthwise)
        y = (y.transpose(0, 2, 3, 1) @ self.pointwise).transpose(0, 3, 1, 2)
        return tc.batch_norm(y, self.bn_gamma, self.bn_beta,
                             self._buffers["bn.running_mean"], self._buffers["bn.running_var"],
                             training=self.training)

    @staticmethod
    def count(dim: int) -> int:
        return 9 * dim + dim * dim + 2 * dim

    @staticmethod
    def macs_per_frame(dim: int, bands: int) -> int:
        return bands * (9 * dim + dim * dim)
