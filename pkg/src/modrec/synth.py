"""Complex-baseband signal synthesis for the ten modulation classes.

Digital schemes take whitened text bits; analog schemes take a synthetic
voice-like audio track. :func:`apply_channel` adds optional impairments
and calibrated complex AWGN.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Rng, splitmix64

SNR_MIN, SNR_MAX = -20, 18


class Modulation(enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "8PSK"
    QAM16 = "QAM16"
    QAM64 = "QAM64"
    GFSK = "GFSK"
    CPFSK = "CPFSK"
    PAM4 = "PAM4"
    WBFM = "WBFM"
    AMDSB = "AM-DSB"

    @property
    def is_analog(self) -> bool:
        return self in (Modulation.WBFM, Modulation.AMDSB)

    @property
    def bits_per_symbol(self) -> int:
        return _BITS_PER_SYMBOL[self]

    @classmethod
    def parse(cls, name: str) -> "Modulation":
        key = name.strip().upper().replace("-", "").replace("_", "")
        if key in _ALIASES:
            return _ALIASES[key]
        raise ConfigError(f"unknown modulation {name!r}")


_BITS_PER_SYMBOL = {
    Modulation.BPSK: 1,
    Modulation.QPSK: 2,
    Modulation.PSK8: 3,
    Modulation.QAM16: 4,
    Modulation.QAM64: 6,
    Modulation.GFSK: 1,
    Modulation.CPFSK: 1,
    Modulation.PAM4: 2,
}

_ALIASES = {m.value.replace("-", "").upper(): m for m in Modulation}
_ALIASES.update({m.name: m for m in Modulation})
_ALIASES["BFSK"] = Modulation.GFSK
_ALIASES["WBFM"] = Modulation.WBFM
_ALIASES["PSK8"] = Modulation.PSK8

CLASS_ORDER = tuple(Modulation)
CLASS_NAMES = tuple(m.value for m in CLASS_ORDER)


@dataclass(frozen=True)
class AudioConfig:
    cutoff_hz: float = 4000.0
    low_hz: float = 100.0
    syllable_hz: tuple = (2.0, 6.0)
    silence_fraction: tuple = (0.2, 0.4)
    silence_spacing: int = 50_000  # samples between silence gaps
    ramp: int = 400  # fade length next to a silence, samples


@dataclass(frozen=True)
class ChannelConfig:
    cfo: bool = False
    cfo_max_hz: float = 500.0
    sample_rate_offset: bool = False
    sro_max_ppm: float = 50.0
    multipath: bool = False
    multipath_scale: tuple = (0.3, 0.15)  # rms gain of the two delayed taps

    @property
    def any_enabled(self) -> bool:
        return self.cfo or self.sample_rate_offset or self.multipath


@dataclass(frozen=True)
class SynthConfig:
    samples_per_symbol: int = 8
    rolloff: float = 0.35
    span: int = 8
    sample_rate: float = 200e3
    fm_deviation: float = 75e3
    am_index: float = 0.5
    gfsk_bt: float = 0.35
    gfsk_index: float = 1.0
    cpfsk_index: float = 0.5
    audio: AudioConfig = field(default_factory=AudioConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def __post_init__(self):
        if self.samples_per_symbol < 2:
            raise ConfigError("samples per symbol must be at least 2")
        if not 0.0 < self.rolloff < 1.0:
            raise ConfigError("rolloff must lie in (0, 1)")

    @classmethod
    def impaired(cls, **kw) -> "SynthConfig":
        return cls(channel=ChannelConfig(cfo=True, sample_rate_offset=True, multipath=True), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        doc = dict(doc)
        fix = lambda d: {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            audio = AudioConfig(**fix(doc.pop("audio", {})))
            channel = ChannelConfig(**fix(doc.pop("channel", {})))
            return cls(audio=audio, channel=channel, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class BasebandSignal:
    samples: np.ndarray  # complex128
    sample_rate: float
    snr_db: int | None = None

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------------------
# bit source


@functools.lru_cache(maxsize=1)
def _lfsr_period():
    """One full period of the 16-bit Fibonacci LFSR x^16 + x^14 + x^13 + x^11 + 1."""
    state = 1
    bits = np.empty(65535, dtype=np.uint8)
    where = np.zeros(65536, dtype=np.int64)
    for k in range(65535):
        where[state] = k
        bits[k] = state & 1
        fb = (state ^ (state >> 2) ^ (state >> 3) ^ (state >> 5)) & 1
        state = (state >> 1) | (fb << 15)
    return bits, where


def lfsr_bits(n: int, state: int) -> np.ndarray:
    """``n`` output bits of the whitening LFSR started from a nonzero 16-bit state."""
    state &= 0xFFFF
    if state == 0:
        raise ConfigError("LFSR state must be nonzero")
    bits, where = _lfsr_period()
    return bits[(where[state] + np.arange(n)) % 65535]


@functools.lru_cache(maxsize=1)
def corpus_bits() -> np.ndarray:
    text = resources.files("modrec").joinpath("data/corpus.txt").read_bytes()
    return np.unpackbits(np.frombuffer(text, dtype=np.uint8))


def generate_bits(n: int, seed: int) -> np.ndarray:
    """Text bits XOR-whitened by the LFSR; both start points derive from ``seed``."""
    if n < 1:
        raise ConfigError("need at least one bit")
    source = corpus_bits()
    offset = splitmix64(seed) % source.size
    text = source[(offset + np.arange(n)) % source.size]
    state = splitmix64(seed ^ 0x5EED) % 65535 + 1
    return text ^ lfsr_bits(n, state)


# ---------------------------------------------------------------------------
# analog source


def synthesize_audio(duration: int, rng: Rng, cfg: SynthConfig | None = None) -> np.ndarray:
    """Band-limited noise shaped by a syllabic envelope, with silent gaps.

    Peak-normalized to ``|a| <= 1``; silent gaps are exactly zero.
    """
    if duration < 1:
        raise ConfigError("duration must be at least one sample")
    cfg = cfg or SynthConfig()
    ac, fs = cfg.audio, cfg.sample_rate
    spectrum = np.fft.rfft(rng.normal(size=duration))
    freqs = np.fft.rfftfreq(duration, d=1.0 / fs)
    band = (freqs >= ac.low_hz) & (freqs <= ac.cutoff_hz)
    spectrum *= band / (1.0 + freqs / 800.0)
    voice = np.fft.irfft(spectrum, n=duration)

    t = np.arange(duration) / fs
    rate = rng.uniform(*ac.syllable_hz)
    envelope = 0.25 + 0.75 * np.sin(np.pi * rate * t + rng.uniform(0, np.pi)) ** 2

    gate = _silence_gate(duration, rng, ac)
    audio = voice * envelope * gate
    peak = np.abs(audio).max()
    return audio / peak if peak > 0 else audio


def silence_intervals(duration: int, rng: Rng, ac: AudioConfig):
    """Silent ``[start, stop)`` spans, one per slot of ``silence_spacing`` samples."""
    fraction = rng.uniform(*ac.silence_fraction)
    slots = max(1, int(round(duration / ac.silence_spacing)))
    edges = np.linspace(0, duration, slots + 1).astype(int)
    spans = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        length = int(round(fraction * (hi - lo)))
        if length < 1:
            continue
        start = lo + int(rng.integers(0, hi - lo - length + 1))
        spans.append((start, start + length))
    return spans


def _silence_gate(duration, rng, ac):
    spans = silence_intervals(duration, rng, ac)
    idx = np.arange(duration)
    dist = np.full(duration, np.inf)
    for start, stop in spans:
        d = np.where(idx < start, start - idx, np.where(idx >= stop, idx - stop + 1, 0))
        dist = np.minimum(dist, d)
    ramp = max(1, ac.ramp)
    x = np.minimum(dist, ramp) / ramp
    return 0.5 - 0.5 * np.cos(np.pi * x)


# ---------------------------------------------------------------------------
# constellations and pulse shapes


def _gray_levels(bits_per_axis: int) -> np.ndarray:
    """Amplitude level for each Gray-coded index: index g maps to level 2*m-(L-1)."""
    size = 1 << bits_per_axis
    levels = np.empty(size)
    for m in range(size):
        levels[m ^ (m >> 1)] = 2 * m - (size - 1)
    return levels


def constellation(scheme: Modulation) -> np.ndarray:
    """Symbol table indexed by the integer value of each bit group (MSB first)."""
    if scheme == Modulation.BPSK:
        return np.array([1.0 + 0j, -1.0 + 0j])
    if scheme == Modulation.QPSK:
        axis = _gray_levels(1)
        pts = np.array([axis[k >> 1] + 1j * axis[k & 1] for k in range(4)])
        return pts / np.sqrt(2.0)
    if scheme == Modulation.PSK8:
        pts = np.empty(8, dtype=complex)
        for m in range(8):
            pts[m ^ (m >> 1)] = np.exp(2j * np.pi * m / 8)
        return pts
    if scheme in (Modulation.QAM16, Modulation.QAM64):
        half = scheme.bits_per_symbol // 2
        axis = _gray_levels(half)
        size = 1 << half
        pts = np.array([axis[k >> half] + 1j * axis[k & (size - 1)] for k in range(size * size)])
        return pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    if scheme == Modulation.PAM4:
        pts = _gray_levels(2).astype(complex)
        return pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    raise ConfigError(f"{scheme.value} has no constellation table")


def bits_to_symbols(bits: np.ndarray, k: int) -> np.ndarray:
    n = len(bits) // k
    groups = np.asarray(bits[: n * k], dtype=np.int64).reshape(n, k)
    weights = 1 << np.arange(k - 1, -1, -1)
    return groups @ weights


def rrc_taps(sps: int, rolloff: float, span: int) -> np.ndarray:
    """Root-raised-cosine taps (``span*sps + 1`` of them) with unit energy."""
    n = span * sps
    t = (np.arange(n + 1) - n / 2) / sps
    b = rolloff
    h = np.empty_like(t)
    for k, tk in enumerate(t):
        if abs(tk) < 1e-12:
            h[k] = 1.0 - b + 4.0 * b / np.pi
        elif abs(abs(tk) - 1.0 / (4.0 * b)) < 1e-9:
            h[k] = (b / np.sqrt(2.0)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * b)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b))
            )
        else:
            h[k] = (np.sin(np.pi * tk * (1 - b)) + 4 * b * tk * np.cos(np.pi * tk * (1 + b))) / (
                np.pi * tk * (1 - (4 * b * tk) ** 2)
            )
    return h / np.sqrt(np.sum(h * h))


def gaussian_taps(sps: int, bt: float, span: int = 4) -> np.ndarray:
    """Gaussian frequency-smoothing filter normalized to unit DC gain."""
    n = span * sps
    t = (np.arange(n + 1) - n / 2) / sps
    sigma = np.sqrt(np.log(2.0)) / (2.0 * np.pi * bt)
    h = np.exp(-0.5 * (t / sigma) ** 2)
    return h / h.sum()


def pulse_shape(symbols: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Upsample and RRC-filter; sample ``k*sps`` is aligned with symbol ``k``."""
    sps = cfg.samples_per_symbol
    up = np.zeros(len(symbols) * sps, dtype=complex)
    up[::sps] = symbols
    taps = rrc_taps(sps, cfg.rolloff, cfg.span)
    delay = (len(taps) - 1) // 2
    return np.convolve(up, taps)[delay : delay + len(up)] * np.sqrt(sps)


def _cpm(bits, sps, index, smoothing=None):
    freq = np.repeat(1.0 - 2.0 * np.asarray(bits, dtype=float), sps)
    if smoothing is not None:
        delay = (len(smoothing) - 1) // 2
        freq = np.convolve(freq, smoothing)[delay : delay + len(freq)]
    phase = np.cumsum(np.pi * index * freq / sps)
    return np.exp(1j * phase)


# ---------------------------------------------------------------------------
# modulation


def modulate(scheme: Modulation, payload, cfg: SynthConfig | None = None) -> BasebandSignal:
    """Map bits (digital schemes) or audio (analog schemes) to baseband samples."""
    cfg = cfg or SynthConfig()
    scheme = Modulation.parse(scheme) if isinstance(scheme, str) else scheme
    payload = np.asarray(payload)
    is_bits = payload.dtype.kind in "biu"
    if scheme.is_analog == is_bits:
        want = "float audio" if scheme.is_analog else "integer bits"
        raise ConfigError(f"{scheme.value} needs {want} as payload, got dtype {payload.dtype}")
    sps = cfg.samples_per_symbol
    if scheme == Modulation.WBFM:
        phase = 2.0 * np.pi * cfg.fm_deviation / cfg.sample_rate * np.cumsum(payload)
        samples = np.exp(1j * phase)
    elif scheme == Modulation.AMDSB:
        env = 1.0 + cfg.am_index * payload.astype(float)
        samples = (env / np.sqrt(np.mean(env * env))).astype(complex)
    elif scheme == Modulation.CPFSK:
        samples = _cpm(payload, sps, cfg.cpfsk_index)
    elif scheme == Modulation.GFSK:
        samples = _cpm(payload, sps, cfg.gfsk_index, gaussian_taps(sps, cfg.gfsk_bt))
    else:
        table = constellation(scheme)
        symbols = table[bits_to_symbols(payload, scheme.bits_per_symbol)]
        samples = pulse_shape(symbols, cfg)
    return BasebandSignal(np.asarray(samples, dtype=complex), cfg.sample_rate)


def synthesize(scheme: Modulation, n_samples: int, rng: Rng, cfg: SynthConfig | None = None) -> BasebandSignal:
    """Draw a payload for ``scheme`` and modulate at least ``n_samples`` samples."""
    cfg = cfg or SynthConfig()
    if scheme.is_analog:
        payload = synthesize_audio(n_samples, rng, cfg)
    else:
        sps = cfg.samples_per_symbol
        n_sym = -(-n_samples // sps)
        payload = generate_bits(n_sym * scheme.bits_per_symbol, rng.next_u64())
    sig = modulate(scheme, payload, cfg)
    sig.samples = sig.samples[:n_samples]
    return sig


# ---------------------------------------------------------------------------
# channel


def measure_power(sig) -> float:
    x = sig.samples if isinstance(sig, BasebandSignal) else np.asarray(sig)
    if x.size == 0:
        raise ContractError("cannot measure the power of an empty signal")
    return float(np.mean(np.abs(x) ** 2))


def apply_channel(sig: BasebandSignal, cfg: SynthConfig, snr_db, rng: Rng, check_range=True) -> BasebandSignal:
    """Impair (per enabled knob) then add complex AWGN at ``snr_db``.

    The noise variance is the post-impairment signal power divided by
    ``10**(snr_db/10)``, split equally between I and Q.
    """
    if check_range and not SNR_MIN <= snr_db <= SNR_MAX:
        raise ConfigError(f"SNR {snr_db} dB outside [{SNR_MIN}, {SNR_MAX}]")
    ch = cfg.channel
    x = np.asarray(sig.samples, dtype=complex)
    n = len(x)
    if ch.sample_rate_offset:
        ppm = rng.uniform(-ch.sro_max_ppm, ch.sro_max_ppm)
        t = np.arange(n) * (1.0 + ppm * 1e-6)
        grid = np.arange(n)
        x = np.interp(t, grid, x.real) + 1j * np.interp(t, grid, x.imag)
    if ch.cfo:
        df = rng.uniform(-ch.cfo_max_hz, ch.cfo_max_hz)
        x = x * np.exp(2j * np.pi * df * np.arange(n) / sig.sample_rate)
    if ch.multipath:
        scale = np.asarray(ch.multipath_scale)
        taps = np.concatenate(([1.0], scale * (rng.normal(size=2) + 1j * rng.normal(size=2)) / np.sqrt(2)))
        taps /= np.sqrt(np.sum(np.abs(taps) ** 2))
        x = np.convolve(x, taps)[:n]
    power = measure_power(x)
    variance = power / 10.0 ** (snr_db / 10.0)
    noise = np.sqrt(variance / 2.0) * (rng.normal(size=n) + 1j * rng.normal(size=n))
    return BasebandSignal(x + noise, sig.sample_rate, snr_db)
