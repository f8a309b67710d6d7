"""Labeled IQ-frame datasets: generation, stratified splits, binary files.

Dataset file layout (all little-endian)::

    "RML1" | u32 version=1 | u32 num_examples | u32 frame_len | u16 num_classes
    class table: per class u8 name length + ASCII name
    per example: i8 snr_db | u8 class_idx | frame_len f32 I | frame_len f32 Q

Model file layout::

    "RMLM" | u32 version=1 | u32 spec JSON length | spec JSON | u32 tensor count
    per tensor: u8 name length + name | u8 rank | rank x u32 dims | f32 data
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchitectureSpec, Network, param_shapes
from .errors import ConfigError, FormatError, IoError
from .synth import CLASS_NAMES, SNR_MAX, SNR_MIN, Modulation, SynthConfig, apply_channel, synthesize
from .tensor import Rng

FRAME_LEN = 128
DEFAULT_SNRS = tuple(range(SNR_MIN, SNR_MAX + 1, 2))
GUARD = 64  # leading samples dropped to skip filter start-up
PROFILES = {"paper": 800, "smoke-paper": 100, "smoke": 5}

DATASET_MAGIC = b"RML1"
MODEL_MAGIC = b"RMLM"
VERSION = 1


@dataclass
class GenerationConfig:
    classes: tuple = CLASS_NAMES
    snrs: tuple = DEFAULT_SNRS
    frames_per_cell: int = 800
    frame_len: int = FRAME_LEN
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def profile(cls, name: str, impaired=False, **overrides) -> "GenerationConfig":
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
        synth = SynthConfig.impaired() if impaired else SynthConfig()
        return cls(frames_per_cell=PROFILES[name], synth=synth, **overrides)

    @property
    def size(self) -> int:
        return len(self.classes) * len(self.snrs) * self.frames_per_cell


@dataclass
class LabeledExample:
    iq: np.ndarray  # 2 x frame_len, row 0 = I, row 1 = Q
    label: int
    snr: int


@dataclass
class Dataset:
    frames: np.ndarray  # N x 2 x frame_len, float32
    labels: np.ndarray  # N, uint8
    snrs: np.ndarray  # N, int8
    class_names: tuple
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, k) -> LabeledExample:
        return LabeledExample(self.frames[k], int(self.labels[k]), int(self.snrs[k]))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.frames[idx], self.labels[idx], self.snrs[idx], self.class_names, dict(self.meta))

    def cell_counts(self) -> dict:
        keys, counts = np.unique(np.stack([self.labels, self.snrs], axis=1), axis=0, return_counts=True)
        return {(int(c), int(s)): int(n) for (c, s), n in zip(keys, counts)}

    def equals(self, other: "Dataset") -> bool:
        return (
            tuple(self.class_names) == tuple(other.class_names)
            and self.frames.dtype == other.frames.dtype
            and np.array_equal(self.frames.view(np.uint32), other.frames.view(np.uint32))
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.snrs, other.snrs)
        )


def dataset_hash(d: Dataset) -> str:
    h = hashlib.sha256()
    h.update("\n".join(d.class_names).encode("ascii"))
    h.update(np.ascontiguousarray(d.labels, dtype=np.uint8).tobytes())
    h.update(np.ascontiguousarray(d.snrs, dtype=np.int8).tobytes())
    h.update(np.ascontiguousarray(d.frames, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# generation


def frame_windows(n_frames: int, frame_len: int = FRAME_LEN, offset: int = GUARD):
    """Non-overlapping rectangular windows ``[start, stop)`` into the source signal."""
    return [(offset + k * frame_len, offset + (k + 1) * frame_len) for k in range(n_frames)]


def normalize_frames(iq: np.ndarray) -> np.ndarray:
    """Scale each complex frame (rows) to unit mean power."""
    power = np.mean(np.abs(iq) ** 2, axis=1, keepdims=True)
    return iq / np.sqrt(np.where(power > 0, power, 1.0))


def _cell(cfg: GenerationConfig, scheme: Modulation, snr: int, rng: Rng) -> np.ndarray:
    n, flen = cfg.frames_per_cell, cfg.frame_len
    total = GUARD + n * flen
    sig = synthesize(scheme, total, rng.split(0), cfg.synth)
    noisy = apply_channel(sig, cfg.synth, snr, rng.split(1)).samples
    windows = frame_windows(n, flen)
    iq = noisy[windows[0][0] : windows[-1][1]].reshape(n, flen)
    iq = normalize_frames(iq)
    return np.stack([iq.real, iq.imag], axis=1).astype(np.float32)


def build_dataset(cfg: GenerationConfig, seed: int, workers: int = 1) -> Dataset:
    """Synthesize ``frames_per_cell`` frames for every (class, SNR) cell.

    Each cell draws from ``Rng(seed).split(cell_index)``, so the result does
    not depend on ``workers``.
    """
    if not cfg.classes:
        raise ConfigError("generation config has no classes")
    if not cfg.snrs:
        raise ConfigError("generation config has no SNR values")
    if cfg.frames_per_cell < 1:
        raise ConfigError("frames_per_cell must be at least 1")
    schemes = [Modulation.parse(c) for c in cfg.classes]
    root = Rng(seed)
    cells = [(ci, si) for ci in range(len(schemes)) for si in range(len(cfg.snrs))]

    def work(cell):
        ci, si = cell
        return _cell(cfg, schemes[ci], cfg.snrs[si], root.split(ci * len(cfg.snrs) + si))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(work, cells))
    else:
        blocks = [work(c) for c in cells]
    n = cfg.frames_per_cell
    labels = np.repeat(np.array([ci for ci, _ in cells], dtype=np.uint8), n)
    snrs = np.repeat(np.array([cfg.snrs[si] for _, si in cells], dtype=np.int8), n)
    meta = {
        "seed": int(seed),
        "frames_per_cell": n,
        "snrs": list(cfg.snrs),
        "impaired": cfg.synth.channel.any_enabled,
    }
    return Dataset(np.concatenate(blocks), labels, snrs, tuple(s.value for s in schemes), meta)


def split(d: Dataset, seed: int, ratios=(0.6, 0.2, 0.2)):
    """Seeded, per-(class, SNR)-cell stratified train/validation/test split."""
    rng = Rng(seed)
    parts = ([], [], [])
    keys = np.stack([d.labels.astype(np.int64), d.snrs.astype(np.int64)], axis=1)
    cells, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for k in range(len(cells)):
        idx = np.flatnonzero(inverse == k)
        n = len(idx)
        n_val = int(round(ratios[1] * n))
        n_test = int(round(ratios[2] * n))
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) < 1:
            raise ConfigError(f"cell {tuple(cells[k])} has {n} examples, too few to stratify")
        idx = idx[rng.split(k).permutation(n)]
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train : n_train + n_val])
        parts[2].append(idx[n_train + n_val :])
    return tuple(d.subset(np.sort(np.concatenate(p))) for p in parts)


# ---------------------------------------------------------------------------
# dataset files


def _record_dtype(frame_len):
    return np.dtype([("snr", "i1"), ("cls", "u1"), ("i", "<f4", (frame_len,)), ("q", "<f4", (frame_len,))])


def write_dataset(d: Dataset, path) -> None:
    flen = d.frames.shape[2]
    head = bytearray(DATASET_MAGIC)
    head += struct.pack("<IIIH", VERSION, len(d), flen, len(d.class_names))
    for name in d.class_names:
        raw = name.encode("ascii")
        head += struct.pack("<B", len(raw)) + raw
    rec = np.empty(len(d), dtype=_record_dtype(flen))
    rec["snr"] = d.snrs
    rec["cls"] = d.labels
    rec["i"] = d.frames[:, 0]
    rec["q"] = d.frames[:, 1]
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(rec.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc}") from exc
    if blob[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {DATASET_MAGIC!r}", offset=0)
    if len(blob) < 18:
        raise FormatError("truncated header", offset=len(blob))
    version, count, flen, ncls = struct.unpack_from("<IIIH", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    pos = 18
    names = []
    for _ in range(ncls):
        if pos >= len(blob):
            raise FormatError("truncated class table", offset=pos)
        size = blob[pos]
        name = blob[pos + 1 : pos + 1 + size]
        if len(name) != size:
            raise FormatError("truncated class table", offset=pos)
        names.append(name.decode("ascii"))
        pos += 1 + size
    dtype = _record_dtype(flen)
    expected = count * dtype.itemsize
    actual = len(blob) - pos
    if actual != expected:
        raise FormatError(
            f"example region holds {actual} bytes, expected {expected} for {count} examples", offset=pos
        )
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    frames = np.stack([rec["i"], rec["q"]], axis=1).astype(np.float32)
    labels = rec["cls"].copy()
    if count and int(labels.max()) >= ncls:
        raise FormatError("class index outside the class table", offset=pos)
    return Dataset(frames, labels, rec["snr"].copy(), tuple(names), {})


# ---------------------------------------------------------------------------
# model files


def write_model(net: Network, path) -> None:
    spec = net.spec.to_json().encode("utf-8")
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<II", VERSION, len(spec)) + spec
    out += struct.pack("<I", len(net.params))
    for name, arr in net.params.items():
        raw = name.encode("ascii")
        out += struct.pack("<B", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(out)
    except OSError as exc:
        raise IoError(f"cannot write model {path}: {exc}") from exc


def read_model(path) -> Network:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MODEL_MAGIC!r}", offset=0)

    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise FormatError("unexpected end of model file", offset=pos)
        return struct.unpack_from(fmt, blob, pos), pos + size

    (version, spec_len), pos = take("<II", 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if pos + spec_len > len(blob):
        raise FormatError("truncated spec JSON", offset=pos)
    try:
        spec = ArchitectureSpec.from_json(blob[pos : pos + spec_len].decode("utf-8"))
        shapes = param_shapes(spec)
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"invalid architecture spec: {exc}", offset=pos) from exc
    pos += spec_len
    (count,), pos = take("<I", pos)
    if count != len(shapes):
        raise FormatError(f"model holds {count} tensors, spec needs {len(shapes)}", offset=pos - 4)
    params = {}
    for _ in range(count):
        (nlen,), pos = take("<B", pos)
        name = blob[pos : pos + nlen].decode("ascii")
        pos += nlen
        (rank,), pos = take("<B", pos)
        dims, pos = take(f"<{rank}I", pos)
        if name not in shapes or tuple(dims) != tuple(shapes[name]):
            raise FormatError(f"tensor {name!r} with shape {dims} does not fit the architecture", offset=pos)
        size = int(np.prod(dims)) * 4
        if pos + size > len(blob):
            raise FormatError(f"tensor {name!r} truncated", offset=pos)
        params[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += size
    params = {k: params[k] for k in shapes}
    return Network(spec, params)
