"""Declarative architecture specs, network construction and forward pass.

Five preset architectures are provided: ``cnn2``, ``cnn4``, ``resnet4``,
``densenet4`` and ``cldnn``. A spec is an ordered list of conv, lstm and
dense layers plus optional shortcut connections; ``connectivity="dense"``
feeds every conv layer the channel concatenation of the raw input and all
earlier conv outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError
from .tensor import Rng

FRAME_SHAPE = (2, 128)
ARCH_IDS = ("cnn2", "cnn4", "resnet4", "densenet4", "cldnn")
LSTM_UNITS = 50
HIDDEN_UNITS = 128


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | lstm | dense
    units: int  # filters, LSTM units or neurons
    kernel: tuple = (1, 1)
    pad_h: str = "valid"
    pad_w: str = "same"
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))


@dataclass(frozen=True)
class ShortcutSpec:
    """Adds the output of conv ``source`` to the pre-activation of conv ``dest``."""

    source: int
    dest: int
    projection: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    arch: str
    layers: tuple
    shortcuts: tuple = ()
    num_classes: int = 10
    connectivity: str = "sequential"  # sequential | dense
    input_shape: tuple = FRAME_SHAPE

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "shortcuts", tuple(self.shortcuts))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    def with_dropout(self, rate: float) -> "ArchitectureSpec":
        """Same spec with every nonzero dropout rate replaced by ``rate``."""
        new = tuple(replace(l, dropout=rate) if l.dropout > 0 else l for l in self.layers)
        return replace(self, layers=new)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchitectureSpec":
        doc = json.loads(text) if isinstance(text, (str, bytes)) else text
        try:
            return cls(
                arch=doc["arch"],
                layers=[LayerSpec(**l) for l in doc["layers"]],
                shortcuts=[ShortcutSpec(**s) for s in doc.get("shortcuts", [])],
                num_classes=doc.get("num_classes", 10),
                connectivity=doc.get("connectivity", "sequential"),
                input_shape=doc.get("input_shape", FRAME_SHAPE),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed architecture document: {exc}") from exc


def _conv(n, kh, kw, dropout, pad_h="valid"):
    return LayerSpec("conv", n, (kh, kw), pad_h=pad_h, pad_w="same", dropout=dropout)


def _head(num_classes, dropout):
    return (
        LayerSpec("dense", HIDDEN_UNITS, dropout=dropout),
        LayerSpec("dense", num_classes, activation="linear"),
    )


def default_spec(arch: str, num_classes: int = 10, dropout: float = 0.6) -> ArchitectureSpec:
    """Preset layer geometry for one of :data:`ARCH_IDS`."""
    d = dropout
    if arch == "cnn2":
        convs = (_conv(256, 1, 3, d), _conv(80, 2, 3, d))
        return ArchitectureSpec(arch, convs + _head(num_classes, d), num_classes=num_classes)
    if arch == "cnn4":
        convs = (_conv(256, 1, 3, d), _conv(256, 2, 3, d), _conv(80, 1, 3, d), _conv(80, 1, 3, d))
        return ArchitectureSpec(arch, convs + _head(num_classes, d), num_classes=num_classes)
    if arch == "resnet4":
        convs = tuple(
            _conv(n, kh, 3, d, pad_h="same") for n, kh in ((256, 1), (256, 2), (80, 1), (80, 1))
        )
        return ArchitectureSpec(
            arch,
            convs + _head(num_classes, d),
            shortcuts=(ShortcutSpec(0, 2, projection=True),),
            num_classes=num_classes,
        )
    if arch == "densenet4":
        convs = tuple(
            _conv(n, kh, 3, d, pad_h="same") for n, kh in ((256, 1), (128, 2), (80, 1), (80, 1))
        )
        return ArchitectureSpec(
            arch, convs + _head(num_classes, d), num_classes=num_classes, connectivity="dense"
        )
    if arch == "cldnn":
        trunk = default_spec("cnn4", num_classes, dropout).layers[:4]
        rnn = (LayerSpec("lstm", LSTM_UNITS, activation="linear"),)
        return ArchitectureSpec(arch, trunk + rnn + _head(num_classes, d), num_classes=num_classes)
    raise ConfigError(f"unknown architecture {arch!r}; choose from {', '.join(ARCH_IDS)}")


# ---------------------------------------------------------------------------
# shape inference and validation


def _conv_out(shape, layer):
    c, h, w = shape
    kh, kw = layer.kernel
    oh = h if layer.pad_h == "same" else h - kh + 1
    ow = w if layer.pad_w == "same" else w - kw + 1
    if oh < 1 or ow < 1:
        raise ConfigError(f"filter {kh}x{kw} does not fit a {h}x{w} input")
    return (layer.units, oh, ow)


def param_shapes(spec: ArchitectureSpec) -> dict[str, tuple]:
    """Ordered parameter names and shapes; also validates the layer list."""
    validate(spec)
    shapes: dict[str, tuple] = {}
    raw = (1,) + spec.input_shape
    cur = raw
    conv_out: list[tuple] = []
    flat = None
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            if spec.connectivity == "dense" and conv_out:
                cin = raw[0] + sum(s[0] for s in conv_out)
                src = (cin,) + raw[1:]
            else:
                src = cur
            kh, kw = layer.kernel
            shapes[f"conv{i}.w"] = (layer.units, src[0], kh, kw)
            shapes[f"conv{i}.b"] = (layer.units,)
            out = _conv_out(src, layer)
            if spec.connectivity == "dense" and out[1:] != raw[1:]:
                raise ConfigError("densely connected convs need same padding on both axes")
            for sc in spec.shortcuts:
                if sc.dest == len(conv_out):
                    s_shape = conv_out[sc.source]
                    if s_shape[1:] != out[1:]:
                        raise ConfigError(f"shortcut {sc} joins maps of different extent")
                    if sc.projection:
                        shapes[f"proj{sc.source}_{sc.dest}.w"] = (out[0], s_shape[0], 1, 1)
                    elif s_shape[0] != out[0]:
                        raise ConfigError(f"identity shortcut {sc} needs equal channel counts")
            conv_out.append(out)
            cur = out
        elif layer.kind == "lstm":
            c, h, w = cur
            feat = c * h
            u = layer.units
            shapes[f"lstm{i}.wx"] = (4 * u, feat)
            shapes[f"lstm{i}.wh"] = (4 * u, u)
            shapes[f"lstm{i}.b"] = (4 * u,)
            cur = (u,)
        elif layer.kind == "dense":
            flat = int(np.prod(cur))
            shapes[f"dense{i}.w"] = (flat, layer.units)
            shapes[f"dense{i}.b"] = (layer.units,)
            cur = (layer.units,)
    return shapes


def validate(spec: ArchitectureSpec) -> None:
    layers = spec.layers
    if not layers:
        raise ConfigError("architecture has no layers")
    kinds = [l.kind for l in layers]
    for l in layers:
        if l.kind not in ("conv", "lstm", "dense"):
            raise ConfigError(f"unknown layer kind {l.kind!r}")
        if l.units < 1:
            raise ConfigError("layer widths must be positive")
        if not 0.0 <= l.dropout < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {l.dropout}")
        if l.kind == "conv" and not (l.kernel[0] in (1, 2) and l.kernel[1] >= 1):
            raise ConfigError(f"conv kernel {l.kernel} outside supported geometry")
    order = {"conv": 0, "lstm": 1, "dense": 2}
    if [order[k] for k in kinds] != sorted(order[k] for k in kinds):
        raise ConfigError("layers must be ordered conv..., lstm?, dense...")
    if kinds.count("lstm") > 1:
        raise ConfigError("at most one recurrent layer is supported")
    if kinds[-1] != "dense" or layers[-1].units != spec.num_classes:
        raise ConfigError("last layer must be a dense layer with num_classes units")
    if spec.connectivity not in ("sequential", "dense"):
        raise ConfigError(f"unknown connectivity {spec.connectivity!r}")
    n_conv = kinds.count("conv")
    for sc in spec.shortcuts:
        if not 0 <= sc.source < sc.dest < n_conv:
            raise ConfigError(f"shortcut {sc} does not connect two conv layers")
    if spec.arch == "resnet4":
        if len(spec.shortcuts) != 1 or spec.shortcuts[0].dest - spec.shortcuts[0].source != 2:
            raise ConfigError("resnet4 needs exactly one shortcut spanning two conv layers")
    if spec.arch == "densenet4" and spec.connectivity != "dense":
        raise ConfigError("densenet4 must use dense connectivity")
    if spec.arch == "cldnn":
        if kinds.count("lstm") != 1 or layers[kinds.index("lstm")].units != LSTM_UNITS:
            raise ConfigError(f"cldnn needs exactly one {LSTM_UNITS}-unit LSTM layer")
        if "conv" not in kinds:
            raise ConfigError("cldnn needs a convolutional trunk")


def param_count(spec: ArchitectureSpec) -> int:
    return int(sum(int(np.prod(s)) for s in param_shapes(spec).values()))


# ---------------------------------------------------------------------------
# networks


@dataclass
class Network:
    spec: ArchitectureSpec
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def astype(self, dtype) -> "Network":
        return Network(self.spec, {k: v.astype(dtype) for k, v in self.params.items()}, self.seed)

    def predict(self, frames, batch_size=256) -> np.ndarray:
        """Class probabilities (eval mode) for a stack of frames."""
        frames = np.asarray(frames)
        out = []
        for lo in range(0, len(frames), batch_size):
            logits = forward(self, frames[lo : lo + batch_size], mode="eval")
            out.append(L.softmax(logits))
        if not out:
            return np.zeros((0, self.num_classes), dtype=self.dtype)
        return np.concatenate(out)


def _fans(name, shape):
    if name.startswith(("conv", "proj")):
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    if name.startswith("dense"):
        return shape[0], shape[1]
    return shape[1], shape[0]  # lstm matrices are (4U x in)


def build(spec: ArchitectureSpec, seed: int = 0, dtype=np.float32) -> Network:
    """Instantiate parameters: Glorot-uniform weights, zero biases, forget bias 1."""
    shapes = param_shapes(spec)
    root = Rng(seed)
    params = {}
    for k, (name, shape) in enumerate(shapes.items()):
        if name.endswith(".b"):
            b = np.zeros(shape, dtype=dtype)
            if name.startswith("lstm"):
                u = shape[0] // 4
                b[u : 2 * u] = 1.0
            params[name] = b
        else:
            fan_in, fan_out = _fans(name, shape)
            params[name] = L.glorot_uniform(shape, fan_in, fan_out, root.split(k), dtype)
    return Network(spec, params, seed)


def conv_params(net: Network, index: int) -> L.ConvParams:
    layer = net.spec.layers[index]
    return L.ConvParams(net.params[f"conv{index}.w"], net.params[f"conv{index}.b"], layer.pad_h, layer.pad_w)


def lstm_params(net: Network) -> list[L.LstmParams]:
    return [
        L.LstmParams(net.params[f"lstm{i}.wx"], net.params[f"lstm{i}.wh"], net.params[f"lstm{i}.b"])
        for i, l in enumerate(net.spec.layers)
        if l.kind == "lstm"
    ]


def forward(net: Network, frames, mode="eval", rng: Rng | None = None, tape: L.GradTape | None = None):
    """Logits for a batch of ``N x 2 x 128`` frames (or a single ``2 x 128`` frame).

    With a tape, parameters are registered on it and the result is a ``Var``.
    """
    x = np.asarray(frames, dtype=net.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != net.spec.input_shape:
        raise ShapeError(f"expected frames of shape {net.spec.input_shape}, got {x.shape[1:]}")
    p = {k: tape.param(k, v) for k, v in net.params.items()} if tape is not None else net.params
    spec = net.spec
    # internal layout is N x W x H x C: time-major, channels last
    x = np.ascontiguousarray(x.transpose(0, 2, 1))[..., None]
    raw = x
    cur = x
    conv_out = []
    drop_k = 0

    def drop(v, rate):
        nonlocal drop_k
        if mode == "eval" or rate == 0.0:
            return v
        drop_k += 1
        return L.dropout(v, rate, mode, rng.split(drop_k))

    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            if spec.connectivity == "dense" and conv_out:
                src = L.concat([raw] + conv_out, axis=3)
            else:
                src = cur
            z = L.conv2d_nwhc(src, p[f"conv{i}.w"], p[f"conv{i}.b"], layer.pad_h, layer.pad_w)
            j = len(conv_out)
            for sc in spec.shortcuts:
                if sc.dest == j:
                    s = conv_out[sc.source]
                    if sc.projection:
                        w = p[f"proj{sc.source}_{sc.dest}.w"]
                        zero = np.zeros(L._val(w).shape[0], net.dtype)
                        s = L.conv2d_nwhc(s, w, zero, "valid", "valid")
                    z = L.add(z, s)
            cur = drop(L.activation(z, layer.activation), layer.dropout)
            conv_out.append(cur)
        elif layer.kind == "lstm":
            n, w, h, c = L._val(cur).shape
            seq = L.reshape(cur, (n, w, h * c))  # time = sample axis
            cur = L.lstm(seq, p[f"lstm{i}.wx"], p[f"lstm{i}.wh"], p[f"lstm{i}.b"])
            cur = drop(L.activation(cur, layer.activation), layer.dropout)
        else:
            v = L._val(cur)
            if v.ndim > 2:
                cur = L.reshape(cur, (v.shape[0], -1))
            z = L.dense(cur, p[f"dense{i}.w"], p[f"dense{i}.b"])
            cur = drop(L.activation(z, layer.activation), layer.dropout)
    if single:
        cur = L.reshape(cur, (spec.num_classes,))
    return cur


def forward_classify(net: Network, frame, mode="eval", rng: Rng | None = None) -> np.ndarray:
    """Softmax class probabilities for one ``2 x 128`` frame."""
    frame = np.asarray(frame)
    if frame.shape != net.spec.input_shape:
        raise ShapeError(f"expected a {net.spec.input_shape} frame, got {frame.shape}")
    if mode == "train" and rng is None:
        raise ConfigError("train mode needs an Rng for dropout")
    return L.softmax(forward(net, frame, mode=mode, rng=rng))


def residual_block(x, branch, shortcut_weight=None, activation="relu"):
    """``act(F(x) + x)`` where ``F`` is a list of ConvParams, the last one linear.

    ``shortcut_weight`` is an optional 1x1 projection applied to ``x``;
    ``activation="linear"`` returns the bare sum ``H(x) = F(x) + x``.
    """
    h = x
    for k, p in enumerate(branch):
        h = L.conv2d_layer(h, p)
        if k < len(branch) - 1:
            h = L.relu(h)
    s = x
    if shortcut_weight is not None:
        zero = np.zeros(shortcut_weight.shape[0], dtype=L._val(shortcut_weight).dtype)
        s = L.conv2d(x, shortcut_weight, zero, "valid", "valid")
    return L.activation(L.add(h, s), activation)
