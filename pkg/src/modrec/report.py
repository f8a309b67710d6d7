"""Accuracy-vs-SNR curves, per-SNR confusion matrices and report rendering.

CSV and SVG output is written by hand so that it is a pure function of the
report. :func:`render_png` additionally draws matplotlib figures.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .arch import Network, forward
from .errors import ConfigError, IoError

HIGH_SNR = (10, 18)  # inclusive range averaged for the high-SNR figure
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


@dataclass
class MisclassRow:
    true_class: str
    predicted: str
    percent: float


@dataclass
class EvalReport:
    class_names: tuple
    confusion: dict  # snr -> C x C int64 counts, rows = true class
    model: str = "model"
    meta: dict = field(default_factory=dict)

    @property
    def snrs(self):
        return sorted(self.confusion)

    @property
    def counts(self) -> dict:
        return {s: int(self.confusion[s].sum()) for s in self.snrs}

    @property
    def accuracy(self) -> dict:
        return {s: float(np.trace(m)) / max(1, int(m.sum())) for s, m in sorted(self.confusion.items())}

    @property
    def overall_accuracy(self) -> float:
        total = sum(int(m.sum()) for m in self.confusion.values())
        hits = sum(int(np.trace(m)) for m in self.confusion.values())
        return hits / max(1, total)

    @property
    def high_snr_accuracy(self) -> float:
        """Unweighted mean of per-SNR accuracy over +10..+18 dB (NaN if none present)."""
        vals = [a for s, a in self.accuracy.items() if HIGH_SNR[0] <= s <= HIGH_SNR[1]]
        return float(np.mean(vals)) if vals else float("nan")

    def accuracy_at(self, snr: int) -> float:
        if snr not in self.confusion:
            raise IndexError(f"SNR {snr} dB not in report")
        return self.accuracy[snr]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "class_names": list(self.class_names),
            "overall_accuracy": self.overall_accuracy,
            "high_snr_accuracy": self.high_snr_accuracy,
            "accuracy": {str(s): a for s, a in self.accuracy.items()},
            "counts": {str(s): n for s, n in self.counts.items()},
            "confusion": {str(s): self.confusion[s].tolist() for s in self.snrs},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        try:
            conf = {int(s): np.asarray(m, dtype=np.int64) for s, m in doc["confusion"].items()}
            return cls(tuple(doc["class_names"]), conf, doc.get("model", "model"), doc.get("meta", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed report document: {exc}") from exc


def confusion_from_predictions(labels, preds, snrs, num_classes) -> dict:
    labels, preds, snrs = (np.asarray(a, dtype=np.int64) for a in (labels, preds, snrs))
    out = {}
    for s in np.unique(snrs):
        m = snrs == s
        mat = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(mat, (labels[m], preds[m]), 1)
        out[int(s)] = mat
    return out


def predict_labels(net: Network, frames, batch_size=512) -> np.ndarray:
    """Argmax class per frame with dropout off; ties go to the lowest index."""
    out = np.empty(len(frames), dtype=np.int64)
    for lo in range(0, len(frames), batch_size):
        logits = forward(net, np.asarray(frames[lo : lo + batch_size], dtype=net.dtype), mode="eval")
        out[lo : lo + batch_size] = np.argmax(logits, axis=1)
    return out


def evaluate(net: Network, test, model: str | None = None, batch_size=512) -> EvalReport:
    if net.num_classes != len(test.class_names):
        raise ConfigError(
            f"model has {net.num_classes} classes but dataset has {len(test.class_names)}"
        )
    preds = predict_labels(net, test.frames, batch_size)
    conf = confusion_from_predictions(test.labels, preds, test.snrs, net.num_classes)
    return EvalReport(tuple(test.class_names), conf, model or net.spec.arch)


def misclass_table(report: EvalReport, snr: int, threshold: float) -> list[MisclassRow]:
    """Off-diagonal (true, predicted) pairs at ``snr`` with at least ``threshold`` percent."""
    if snr not in report.confusion:
        raise IndexError(f"SNR {snr} dB not in report")
    mat = report.confusion[snr]
    names = report.class_names
    totals = mat.sum(axis=1)
    rows = []
    for t in range(len(names)):
        for p in range(len(names)):
            if t == p:
                continue
            pct = 100.0 * mat[t, p] / totals[t] if totals[t] else 0.0
            if pct >= threshold:
                rows.append(MisclassRow(names[t], names[p], float(pct)))
    rows.sort(key=lambda r: -r.percent)
    return rows


# ---------------------------------------------------------------------------
# rendering


def _write(path, text):
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def accuracy_csv(report: EvalReport) -> str:
    lines = ["snr,accuracy,n"]
    counts = report.counts
    for s, a in report.accuracy.items():
        lines.append(f"{s},{a:.6f},{counts[s]}")
    return "\n".join(lines) + "\n"


def confusion_csv(report: EvalReport, snr: int) -> str:
    names = report.class_names
    lines = ["true\\pred," + ",".join(names)]
    for name, row in zip(names, report.confusion[snr]):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def accuracy_svg(reports, width=640, height=420) -> str:
    """Line chart of accuracy against SNR, one polyline per report."""
    left, right, top, bottom = 64, 150, 24, 52
    pw, ph = width - left - right, height - top - bottom
    snrs = sorted({s for r in reports for s in r.snrs})
    lo, hi = (snrs[0], snrs[-1]) if snrs else (0, 1)
    if hi == lo:
        lo, hi = lo - 1, hi + 1

    def sx(s):
        return left + (s - lo) / (hi - lo) * pw

    def sy(a):
        return top + (1.0 - a) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(11):
        a = k / 10
        y = sy(a)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{a:.1f}</text>')
    for s in snrs:
        x = sx(s)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">{s}</text>')
    out.append(
        f'<text x="{left + pw / 2:.2f}" y="{height - 12}" text-anchor="middle" font-size="13">SNR (dB)</text>'
    )
    out.append(
        f'<text x="16" y="{top + ph / 2:.2f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {top + ph / 2:.2f})">Classification accuracy</text>'
    )
    for k, rep in enumerate(reports):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{sx(s):.2f},{sy(a):.2f}" for s, a in rep.accuracy.items())
        out.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}">'
            f"<title>{escape(rep.model)}</title></polyline>"
        )
        ly = top + 14 + 18 * k
        lx = left + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(rep.model)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def confusion_svg(report: EvalReport, snr: int, cell=36) -> str:
    """Row-normalized confusion heat map with class labels and percentages."""
    names = report.class_names
    n = len(names)
    mat = report.confusion[snr].astype(float)
    rows = mat.sum(axis=1, keepdims=True)
    frac = np.divide(mat, rows, out=np.zeros_like(mat), where=rows > 0)
    left, top = 76, 40
    width, height = left + n * cell + 16, top + n * cell + 76
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + n * cell / 2:.1f}" y="20" text-anchor="middle" font-size="13">'
        f"{escape(report.model)} confusion at {snr} dB</text>",
    ]
    for t in range(n):
        for p in range(n):
            v = frac[t, p]
            shade = int(round(255 * (1.0 - v)))
            x, y = left + p * cell, top + t * cell
            out.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="#999999"/>'
            )
            ink = "white" if v > 0.5 else "black"
            out.append(
                f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" text-anchor="middle" '
                f'fill="{ink}">{100 * v:.0f}</text>'
            )
    for k, name in enumerate(names):
        label = escape(name)
        out.append(f'<text x="{left - 4}" y="{top + k * cell + cell / 2 + 4:.1f}" text-anchor="end">{label}</text>')
        x = left + k * cell + cell / 2
        y = top + n * cell + 8
        out.append(f'<text x="{x:.1f}" y="{y}" text-anchor="end" transform="rotate(-60 {x:.1f} {y})">{label}</text>')
    out.append(f'<text x="12" y="{top + n * cell / 2:.1f}" transform="rotate(-90 12 {top + n * cell / 2:.1f})" '
               f'text-anchor="middle">true class</text>')
    out.append(f'<text x="{left + n * cell / 2:.1f}" y="{height - 6}" text-anchor="middle">predicted class</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def confusion_snr(report: EvalReport, preferred=18) -> int:
    return preferred if preferred in report.confusion else report.snrs[-1]


def render(report: EvalReport, out_dir) -> list[str]:
    """Write report.json, accuracy.csv, confusion_<snr>.csv and the two SVG charts."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    files = {"report.json": report.to_json() + "\n", "accuracy.csv": accuracy_csv(report)}
    for s in report.snrs:
        files[f"confusion_{s}.csv"] = confusion_csv(report, s)
    files["accuracy.svg"] = accuracy_svg([report])
    snr = confusion_snr(report)
    files[f"confusion_{snr}.svg"] = confusion_svg(report, snr)
    paths = []
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        _write(path, text)
        paths.append(path)
    return paths


def summary_csv(reports) -> str:
    lines = ["model,overall_accuracy,high_snr_accuracy,accuracy_at_18"]
    for r in reports:
        at18 = r.accuracy.get(18, float("nan"))
        lines.append(f"{r.model},{r.overall_accuracy:.6f},{r.high_snr_accuracy:.6f},{at18:.6f}")
    return "\n".join(lines) + "\n"


def render_comparison(reports, out_dir, png=True) -> list[str]:
    """Overlay several models: accuracy.svg, summary.csv and per-model confusion charts."""
    if not reports:
        raise ConfigError("no reports to render")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out_dir}: {exc}") from exc
    files = {"accuracy.svg": accuracy_svg(reports), "summary.csv": summary_csv(reports)}
    labels = unique_labels([r.model for r in reports])
    for label, rep in zip(labels, reports):
        snr = confusion_snr(rep)
        suffix = "" if len(reports) == 1 else f"_{label}"
        files[f"confusion_{snr}{suffix}.svg"] = confusion_svg(rep, snr)
        files[f"accuracy{suffix}.csv" if suffix else "accuracy.csv"] = accuracy_csv(rep)
    paths = []
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        _write(path, text)
        paths.append(path)
    if png:
        paths += render_png(reports, out_dir)
    return paths


def unique_labels(names):
    seen, out = {}, []
    for name in names:
        k = seen.get(name, 0)
        seen[name] = k + 1
        out.append(name if k == 0 else f"{name}-{k + 1}")
    return out


def render_png(reports, out_dir) -> list[str]:
    """Matplotlib versions of the accuracy curve and the first report's confusion map."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for rep in reports:
        acc = rep.accuracy
        ax.plot(list(acc), list(acc.values()), marker="o", ms=3, label=rep.model)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("Classification accuracy")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "accuracy.png")
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    paths.append(path)

    rep = reports[0]
    snr = confusion_snr(rep)
    mat = rep.confusion[snr].astype(float)
    mat /= np.maximum(mat.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(6, 5.5))
    im = ax.imshow(mat, cmap="Blues", vmin=0, vmax=1)
    ticks = range(len(rep.class_names))
    ax.set_xticks(ticks, rep.class_names, rotation=60, ha="right")
    ax.set_yticks(ticks, rep.class_names)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(f"{rep.model} at {snr} dB")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = os.path.join(out_dir, f"confusion_{snr}.png")
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    paths.append(path)
    return paths


def load_report(path) -> EvalReport:
    """Read a report from a ``report.json`` file or a directory containing one."""
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"report {path} is not valid JSON: {exc}") from exc
    return EvalReport.from_dict(doc)
