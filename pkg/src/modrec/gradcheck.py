"""Finite-difference gradient suite over every layer and every architecture."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .arch import ARCH_IDS, Network, build, default_spec, forward, residual_block
from .tensor import Rng

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    seconds: float
    skipped: int = 0  # candidate coordinates rejected because they straddle a ReLU kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def informative_coords(grads: dict, per_tensor: int, rng: Rng, floor=1e-3, accept=None) -> dict:
    """Sample up to ``per_tensor`` flat indices per parameter whose gradient is not negligible.

    Coordinates below ``floor`` times the tensor's largest gradient are
    skipped: for them the relative error measures rounding noise, not a bug.
    The largest-magnitude coordinate is tried first. ``accept(name, k)``
    can veto a candidate, in which case the next one is drawn.
    """
    out = {}
    for k, (name, g) in enumerate(grads.items()):
        flat = np.abs(g.reshape(-1))
        top = float(flat.max()) if flat.size else 0.0
        chosen = []
        if top > 0.0:
            pool = np.flatnonzero(flat >= floor * top)
            order = pool[rng.split(k).permutation(len(pool))]
            for idx in [int(np.argmax(flat))] + [int(i) for i in order]:
                if len(chosen) == per_tensor:
                    break
                if idx not in chosen and (accept is None or accept(name, idx)):
                    chosen.append(idx)
        out[name] = sorted(chosen)
    return out


def relu_pattern(f, params):
    with L.relu_mask_log() as masks:
        f(params)
    return masks


def kink_free(f, params, name, k, eps=EPS, base=None):
    """True when no ReLU switches state between ``theta - eps`` and ``theta + eps``.

    Central differences straddling a kink do not estimate the gradient.
    """
    base = relu_pattern(f, params) if base is None else base
    flat = params[name].reshape(-1)
    orig = flat[k]
    try:
        for delta in (eps, -eps):
            flat[k] = orig + delta
            if not all(np.array_equal(a, b) for a, b in zip(base, relu_pattern(f, params))):
                return False
    finally:
        flat[k] = orig
    return True


def _run(name, f, params, coords=None):
    start = time.perf_counter()
    err = L.gradient_check(f, params, eps=EPS, coords=coords)
    if coords is None:
        count = sum(np.asarray(v).size for v in params.values())
    else:
        count = sum(len(c) for c in coords.values())
    return CheckResult(name, err, count, time.perf_counter() - start)


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = Rng(seed)
    g = rng.split(0)

    def rnd(*shape, scale=1.0):
        return g.normal(0.0, scale, size=shape)

    results = []

    x = rnd(3, 4)
    labels = np.array([0, 2, 1])
    results.append(
        _run(
            "dense+softmax+xent",
            lambda t, v: L.softmax_cross_entropy(L.dense(x, v["w"], v["b"]), labels),
            {"w": rnd(4, 3), "b": rnd(3)},
        )
    )

    def conv_case(name, c_in, c_out, fh, fw, h, w, pad_h, pad_w):
        xc = rnd(2, c_in, h, w)
        r = rnd(2, c_out, h if pad_h == "same" else h - fh + 1, w if pad_w == "same" else w - fw + 1)
        f = lambda t, v: L.sum_all(L.mul(L.conv2d(v["x"], v["w"], v["b"], pad_h, pad_w), r))
        results.append(_run(name, f, {"x": xc, "w": rnd(c_out, c_in, fh, fw), "b": rnd(c_out)}))

    conv_case("conv2d 1x3 same", 1, 3, 1, 3, 2, 8, "valid", "same")
    conv_case("conv2d 2x3 valid-h", 3, 4, 2, 3, 2, 8, "valid", "same")
    conv_case("conv2d 2x3 same-h", 6, 2, 2, 3, 2, 7, "same", "same")
    conv_case("conv2d 1x1 valid", 4, 3, 1, 1, 2, 5, "valid", "valid")

    # keep inputs away from the kink so the central difference is smooth
    xr = rnd(5, 6)
    xr = np.where(np.abs(xr) < 0.05, 0.5, xr)
    r = rnd(5, 6)
    results.append(_run("relu", lambda t, v: L.sum_all(L.mul(L.relu(v["x"]), r)), {"x": xr}))
    results.append(_run("softmax", lambda t, v: L.sum_all(L.mul(L.softmax(v["x"]), r)), {"x": rnd(5, 6)}))
    results.append(
        _run("log", lambda t, v: L.sum_all(L.mul(L.log(v["x"]), r)), {"x": np.abs(rnd(5, 6)) + 0.5})
    )
    results.append(
        _run(
            "dropout (frozen mask)",
            lambda t, v: L.sum_all(L.mul(L.dropout(v["x"], 0.5, "train", Rng(seed + 1)), r)),
            {"x": rnd(5, 6)},
        )
    )
    rf = rnd(15)
    results.append(
        _run(
            "matmul+add+reshape",
            lambda t, v: L.sum_all(L.mul(L.reshape(L.add(L.matmul(v["a"], v["b"]), v["c"]), (15,)), rf)),
            {"a": rnd(3, 4), "b": rnd(4, 5), "c": rnd(3, 5)},
        )
    )
    rc = rnd(6, 3)
    results.append(
        _run(
            "concat+transpose",
            lambda t, v: L.sum_all(L.mul(L.transpose(L.concat([v["a"], v["b"]], axis=1), (1, 0)), rc)),
            {"a": rnd(3, 2), "b": rnd(3, 4)},
        )
    )

    units, feats = 3, 2
    seq = rnd(2, 3, feats)
    rl = rnd(2, units)
    results.append(
        _run(
            "lstm T=3",
            lambda t, v: L.sum_all(L.mul(L.lstm(v["x"], v["wx"], v["wh"], v["b"]), rl)),
            {"x": seq, "wx": rnd(4 * units, feats), "wh": rnd(4 * units, units), "b": rnd(4 * units)},
        )
    )

    xb = rnd(1, 2, 2, 6)
    rb = rnd(1, 3, 2, 6)

    def res(t, v):
        branch = [L.ConvParams(v["w0"], v["b0"], "same", "same"), L.ConvParams(v["w1"], v["b1"], "same", "same")]
        return L.sum_all(L.mul(residual_block(v["x"], branch, v["ws"]), rb))

    results.append(
        _run(
            "residual block",
            res,
            {
                "x": xb,
                "w0": rnd(3, 2, 2, 3),
                "b0": rnd(3),
                "w1": rnd(3, 3, 2, 3),
                "b1": rnd(3),
                "ws": rnd(3, 2, 1, 1),
            },
        )
    )
    return results


def architecture_check(arch: str, seed: int = 0, batch: int = 2, per_tensor: int = 6) -> CheckResult:
    """Float64 check of a full network's loss with sampled informative coordinates."""
    rng = Rng(seed)
    net = build(default_spec(arch, dropout=0.0), seed, dtype=np.float64)
    frames = rng.split(1).normal(size=(batch, 2, 128))
    labels = rng.split(2).integers(0, net.num_classes, size=batch)

    def f(tape, v):
        probe = Network(net.spec, {k: h.value for k, h in v.items()})
        return L.softmax_cross_entropy(forward(probe, frames, mode="eval", tape=tape), labels)

    tape = L.GradTape()
    handles = {k: tape.param(k, p) for k, p in net.params.items()}
    grads = L.backward(tape, f(tape, handles))

    params = {k: v.copy() for k, v in net.params.items()}
    plain = lambda p: forward(Network(net.spec, p), frames, mode="eval")
    base = relu_pattern(plain, params)
    rejected = []

    def accept(name, k):
        ok = kink_free(plain, params, name, k, base=base)
        if not ok:
            rejected.append((name, k))
        return ok

    coords = informative_coords(grads, per_tensor, rng.split(3), accept=accept)
    result = _run(f"arch {arch}", f, params, coords)
    result.skipped = len(rejected)
    return result


def run_suite(seed: int = 0, archs=ARCH_IDS) -> list[CheckResult]:
    return layer_checks(seed) + [architecture_check(a, seed) for a in archs]
