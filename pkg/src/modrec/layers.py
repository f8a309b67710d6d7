"""Differentiable layers on a recording tape (reverse-mode autodiff).

Every op accepts plain arrays or :class:`Var` nodes. With plain arrays it
just computes the forward value; when any input is a ``Var`` the result is
a ``Var`` recorded on the same :class:`GradTape`, and :func:`backward`
replays the tape in reverse to produce parameter gradients.

Layer inputs are batched, channels first: ``N x C x H x W`` for
convolutions, ``N x F`` for dense layers and ``N x T x F`` for the LSTM.
The unbatched forms (``C x H x W``, ``F``, ``T x F``) are accepted too.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericsError, ShapeError
from .tensor import Rng


class Var:
    """A value on a tape, with an accumulated gradient after :func:`backward`."""

    __slots__ = ("value", "grad", "tape", "name", "_parents", "_backward")

    def __init__(self, value, tape, parents=(), backward_fn=None, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.name = name
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    def _accumulate(self, g):
        # ops hand out gradients this node may own; siblings never share a buffer
        if self.grad is None:
            self.grad = g if g.dtype == self.value.dtype else g.astype(self.value.dtype)
        else:
            self.grad += g


class GradTape:
    """Records one forward pass. Parameters are leaves keyed by name."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            return self.params[name]
        v = Var(value, self, name=name)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return Var(np.asarray(value), self)

    def record(self, value, parents, backward_fn) -> Var:
        v = Var(value, self, parents, backward_fn)
        self.nodes.append(v)
        return v

    def release(self) -> None:
        """Drop recorded nodes. Nodes point back at the tape, so without this
        a finished tape lives until the cycle collector runs."""
        for node in self.nodes:
            node._parents, node._backward = (), None
        self.nodes.clear()
        self.params.clear()


def _val(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _needs(x):
    return isinstance(x, Var)


def backward(tape: GradTape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tape parameter.

    Parameters that did not influence the loss get zero gradients.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("loss must be a scalar node on the tape")
    for node in tape.nodes:
        node.grad = None
    for p in tape.params.values():
        p.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        node.grad = None  # fully propagated; free it early
        for parent, g in zip(node._parents, grads):
            if g is not None and isinstance(parent, Var):
                parent._accumulate(g)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for name, p in tape.params.items()
    }


# ---------------------------------------------------------------------------
# elementary ops


def add(a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"cannot add shapes {av.shape} and {bv.shape}")
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g, g.copy()))


def mul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"cannot multiply shapes {av.shape} and {bv.shape}")
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g * bv, g * av))


def sum_all(x):
    xv = _val(x)
    out = np.asarray(xv.sum(), dtype=xv.dtype)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (np.full(xv.shape, g, dtype=xv.dtype),))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"inner extents disagree: {av.shape} x {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def reshape(x, shape):
    xv = _val(x)
    out = xv.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g.reshape(xv.shape),))


def concat(parts, axis=1):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def back(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return tape.record(out, tuple(parts), back)


# ---------------------------------------------------------------------------
# parameter holders


@dataclass
class ConvParams:
    weights: np.ndarray  # outC x inC x fH x fW
    bias: np.ndarray  # outC
    pad_h: str = "valid"
    pad_w: str = "same"

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("conv bias length must equal filter count")
        for pad in (self.pad_h, self.pad_w):
            if pad not in ("same", "valid"):
                raise ConfigError(f"unknown padding policy {pad!r}")


@dataclass
class DenseParams:
    weights: np.ndarray  # in x out
    bias: np.ndarray  # out

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError("dense bias length must equal output width")


@dataclass
class LstmParams:
    """Gate rows are stacked (input, forget, cell candidate, output)."""

    w_input: np.ndarray  # 4U x F
    w_recurrent: np.ndarray  # 4U x U
    bias: np.ndarray  # 4U

    @property
    def units(self) -> int:
        return self.w_recurrent.shape[1]

    def __post_init__(self):
        u4 = self.w_input.shape[0]
        if u4 % 4 or self.w_recurrent.shape != (u4, u4 // 4) or self.bias.shape != (u4,):
            raise ShapeError("inconsistent LSTM parameter shapes")


def glorot_uniform(shape, fan_in, fan_out, rng: Rng, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution


def _pads(policy, size):
    if policy == "valid":
        return 0, 0
    total = size - 1
    return total // 2, total - total // 2


def conv2d(x, weights, bias, pad_h="valid", pad_w="same"):
    """2-D cross-correlation, stride 1, zero padding per axis policy.

    ``x`` is ``N x C x H x W`` or ``C x H x W``; weights are ``outC x inC x fH x fW``.
    """
    xv = _val(x)
    squeeze = xv.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + xv.shape)
    out = transpose(conv2d_nwhc(transpose(x, (0, 3, 2, 1)), weights, bias, pad_h, pad_w), (0, 3, 2, 1))
    if squeeze:
        out = reshape(out, _val(out).shape[1:])
    return out


def conv2d_nwhc(x, weights, bias, pad_h="valid", pad_w="same"):
    """Same convolution on the ``N x W x H x C`` layout used inside networks.

    Each kernel row is one GEMM over the padded width followed by shifted
    adds, so no im2col buffer is built.
    """
    xv, wv, bv = _val(x), _val(weights), _val(bias)
    n, w, h, c = xv.shape
    oc, ic, fh, fw = wv.shape
    if ic != c:
        raise ShapeError(f"input has {c} channels, filters expect {ic}")
    (pt, pb), (pl, pr) = _pads(pad_h, fh), _pads(pad_w, fw)
    hp, wp = h + pt + pb, w + pl + pr
    oh, ow = hp - fh + 1, wp - fw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"filter {fh}x{fw} larger than padded input {hp}x{wp}")
    xp = np.pad(xv, ((0, 0), (pl, pr), (pt, pb), (0, 0))) if pt + pb + pl + pr else xv
    if c * fh * fw <= _IM2COL_MAX:
        return _conv_im2col(x, weights, bias, xp, (pt, pl), (oh, ow))
    out = np.empty((n, ow, oh, oc), dtype=xv.dtype)
    out[...] = bv
    rows, kernels = [], []
    for i in range(fh):
        xs = xp if oh == hp else np.ascontiguousarray(xp[:, :, i : i + oh, :])
        xs = xs.reshape(-1, c)
        wi = np.ascontiguousarray(wv[:, :, i, :].transpose(1, 2, 0)).reshape(c, fw * oc)
        y = (xs @ wi).reshape(n, wp, oh, fw, oc)
        for j in range(fw):
            out += y[:, j : j + ow, :, j, :]
        rows.append(xs)
        kernels.append(wi)
    tape = _tape_of(x, weights, bias)
    if tape is None:
        return out

    def back(g):
        db = g.sum(axis=(0, 1, 2))
        dw = np.empty_like(wv)
        dxp = np.zeros(xp.shape, dtype=g.dtype) if _needs(x) else None
        dy = np.zeros((n, wp, oh, fw, oc), dtype=g.dtype)
        for i in range(fh):
            for j in range(fw):
                dy[:, j : j + ow, :, j, :] = g
            dyf = dy.reshape(-1, fw * oc)
            dw[:, :, i, :] = (rows[i].T @ dyf).reshape(c, fw, oc).transpose(2, 0, 1)
            if dxp is not None:
                dxp[:, :, i : i + oh, :] += (dyf @ kernels[i].T).reshape(n, wp, oh, c)
        dx = None if dxp is None else dxp[:, pl : pl + w, pt : pt + h, :]
        return dx, dw, db

    return tape.record(out, (x, weights, bias), back)


_IM2COL_MAX = 32


def _conv_im2col(x, weights, bias, xp, offsets, out_hw):
    # few input channels: an explicit patch matrix is small and avoids a
    # rank-deficient GEMM with a huge output
    xv, wv, bv = _val(x), _val(weights), _val(bias)
    n, w, h, c = xv.shape
    oc, _, fh, fw = wv.shape
    oh, ow = out_hw
    pt, pl = offsets
    cols = np.empty((n, ow, oh, fh, fw, c), dtype=xv.dtype)
    for i in range(fh):
        for j in range(fw):
            cols[:, :, :, i, j, :] = xp[:, j : j + ow, i : i + oh, :]
    cols = cols.reshape(-1, fh * fw * c)
    wmat = wv.transpose(2, 3, 1, 0).reshape(fh * fw * c, oc)
    out = (cols @ wmat + bv).reshape(n, ow, oh, oc)
    tape = _tape_of(x, weights, bias)
    if tape is None:
        return out

    def back(g):
        g2 = g.reshape(-1, oc)
        dw = (cols.T @ g2).reshape(fh, fw, c, oc).transpose(3, 2, 0, 1)
        db = g2.sum(axis=0)
        dx = None
        if _needs(x):
            dcols = (g2 @ wmat.T).reshape(n, ow, oh, fh, fw, c)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(fh):
                for j in range(fw):
                    dxp[:, j : j + ow, i : i + oh, :] += dcols[:, :, :, i, j, :]
            dx = dxp[:, pl : pl + w, pt : pt + h, :]
        return dx, np.ascontiguousarray(dw), db

    return tape.record(out, (x, weights, bias), back)


def transpose(x, axes):
    xv = _val(x)
    out = np.ascontiguousarray(xv.transpose(axes))
    tape = _tape_of(x)
    if tape is None:
        return out
    inverse = np.argsort(axes)
    return tape.record(out, (x,), lambda g: (g.transpose(inverse),))


def conv2d_layer(x, p: ConvParams):
    return conv2d(x, p.weights, p.bias, p.pad_h, p.pad_w)


def dense(x, weights, bias):
    xv, wv = _val(x), _val(weights)
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"input width {xv.shape[-1]} does not match layer input {wv.shape[0]}")
    return add_bias(matmul(x, weights), bias)


def dense_layer(x, p: DenseParams):
    return dense(x, p.weights, p.bias)


def add_bias(x, bias):
    xv, bv = _val(x), _val(bias)
    out = xv + bv
    tape = _tape_of(x, bias)
    if tape is None:
        return out
    axes = tuple(range(xv.ndim - 1))
    return tape.record(out, (x, bias), lambda g: (g, g.sum(axis=axes) if axes else g))


# ---------------------------------------------------------------------------
# activations, dropout, loss


_relu_masks = None


@contextlib.contextmanager
def relu_mask_log():
    """Collect every ReLU activation mask computed inside the block."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(x):
    xv = _val(x)
    mask = xv > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    out = xv * mask
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * mask,))


def softmax(x):
    """Softmax over the last axis with max subtraction."""
    xv = _val(x)
    z = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return tape.record(out, (x,), back)


def activation(x, kind: str):
    if kind == "relu":
        return relu(x)
    if kind == "softmax":
        return softmax(x)
    if kind in ("linear", "none"):
        return x
    raise ConfigError(f"unknown activation {kind!r}")


def log(x, floor=1e-12):
    xv = _val(x)
    clipped = np.maximum(xv, floor)
    out = np.log(clipped)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * (xv > floor) / clipped,))


def softmax_cross_entropy(logits, labels):
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    lv = _val(logits)
    labels = np.asarray(labels)
    n = lv.shape[0]
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    out = np.asarray(-logp[np.arange(n), labels].mean(), dtype=lv.dtype)
    tape = _tape_of(logits)
    if tape is None:
        return out

    def back(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return tape.record(out, (logits,), back)


def dropout(x, rate: float, mode: str = "train", rng: Rng | None = None):
    """Inverted dropout; identity in eval mode. The mask is kept on the tape."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an Rng")
    xv = _val(x)
    # keep probability is quantized to 1/65536
    keep = rng.generator.integers(0, 65536, xv.shape, dtype=np.uint16) >= round(rate * 65536)
    mask = keep.astype(xv.dtype) / xv.dtype.type(1.0 - rate)
    out = xv * mask
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# LSTM


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm(seq, w_input, w_recurrent, bias):
    """Run an LSTM from zero state and return the final hidden state.

    ``seq`` is ``N x T x F`` (or ``T x F``); the result is ``N x U`` (or ``U``).
    """
    sv, wx, wh, bv = _val(seq), _val(w_input), _val(w_recurrent), _val(bias)
    squeeze = sv.ndim == 2
    if squeeze:
        sv = sv[None]
    n, t_len, f = sv.shape
    u = wh.shape[1]
    if wx.shape[1] != f:
        raise ShapeError(f"sequence feature size {f} does not match LSTM input {wx.shape[1]}")
    if t_len < 1:
        raise ShapeError("sequence must have at least one step")
    xw = (sv.reshape(n * t_len, f) @ wx.T).reshape(n, t_len, 4 * u) + bv
    h = np.zeros((n, u), dtype=sv.dtype)
    c = np.zeros((n, u), dtype=sv.dtype)
    cache = []
    for t in range(t_len):
        z = xw[:, t] + h @ wh.T
        i = _sigmoid(z[:, :u])
        fg = _sigmoid(z[:, u : 2 * u])
        g = np.tanh(z[:, 2 * u : 3 * u])
        o = _sigmoid(z[:, 3 * u :])
        c_prev, h_prev = c, h
        c = fg * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((i, fg, g, o, c_prev, h_prev, tc))
    out = h[0] if squeeze else h
    tape = _tape_of(seq, w_input, w_recurrent, bias)
    if tape is None:
        return out

    def back(gh):
        dh = gh[None] if squeeze else gh
        dc = np.zeros_like(dh)
        dz_all = np.empty((n, t_len, 4 * u), dtype=dh.dtype)
        dwh = np.zeros_like(wh)
        for t in range(t_len - 1, -1, -1):
            i, fg, g, o, c_prev, h_prev, tc = cache[t]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :u] = dc * g * i * (1.0 - i)
            dz[:, u : 2 * u] = dc * c_prev * fg * (1.0 - fg)
            dz[:, 2 * u : 3 * u] = dc * i * (1.0 - g * g)
            dz[:, 3 * u :] = do * o * (1.0 - o)
            dwh += dz.T @ h_prev
            dh = dz @ wh
            dc = dc * fg
        flat = dz_all.reshape(n * t_len, 4 * u)
        dwx = flat.T @ sv.reshape(n * t_len, f)
        db = flat.sum(axis=0)
        dseq = None
        if _needs(seq):
            dseq = (flat @ wx).reshape(n, t_len, f)
            if squeeze:
                dseq = dseq[0]
        return dseq, dwx, dwh, db

    return tape.record(out, (seq, w_input, w_recurrent, bias), back)


def lstm_layer(seq, p: LstmParams):
    return lstm(seq, p.w_input, p.w_recurrent, p.bias)


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))


def gradient_check(f, params, eps=1e-5, coords=None):
    """Largest relative error between backprop and central differences.

    ``f(tape, vars)`` builds a scalar loss from ``vars`` (a dict of tape
    parameters). ``params`` is a dict of float64 arrays, or one array which is
    exposed as ``vars["theta"]``. ``coords`` optionally restricts the probed
    flat indices per parameter name; by default every coordinate is probed.
    """
    if not isinstance(params, dict):
        params = {"theta": params}
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def evaluate(with_grad):
        tape = GradTape()
        handles = {k: tape.param(k, v) for k, v in params.items()}
        loss = f(tape, handles)
        value = float(np.asarray(_val(loss)))
        if not np.isfinite(value):
            raise NumericsError("objective is not finite")
        if with_grad:
            return value, backward(tape, loss)
        return value, None

    _, analytic = evaluate(True)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        probe = range(flat.size) if coords is None or name not in coords else coords[name]
        ga = analytic[name].reshape(-1)
        for k in probe:
            orig = flat[k]
            flat[k] = orig + eps
            plus, _ = evaluate(False)
            flat[k] = orig - eps
            minus, _ = evaluate(False)
            flat[k] = orig
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, float(relative_error(ga[k], numeric)))
    return worst
