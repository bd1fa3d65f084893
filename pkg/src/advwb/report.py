"""Accuracy-versus-epsilon curves and their CSV / SVG renderings."""

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .attacks import AttackConfig, EpsilonSchedule, attack_sweep


def unweighted_accuracy(predictions, labels):
    """Per-sample (micro) accuracy; no class weighting."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape} predictions vs {labels.shape} labels")
    return float(np.mean(predictions == labels))


def macro_accuracy(predictions, labels):
    """Mean of per-class recalls (class-balanced accuracy)."""
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean([np.mean(predictions[labels == c] == c) for c in np.unique(labels)]))


@dataclass
class RobustnessCurve:
    epsilons: list
    accuracies: list
    counts: list
    model_id: str = ""
    head_kind: str = ""
    metric: str = "micro"
    attack_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.epsilons) == len(self.accuracies) == len(self.counts)):
            raise ValueError("curve columns must have equal length")
        if any(b <= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("curve epsilons must be strictly increasing")

    @property
    def points(self):
        return list(zip(self.epsilons, self.accuracies, self.counts))

    @property
    def clean_accuracy(self):
        return self.accuracies[0] if self.epsilons and self.epsilons[0] == 0 else float("nan")

    def is_monotone(self):
        return all(b <= a for a, b in zip(self.accuracies, self.accuracies[1:]))

    def metadata(self):
        return {
            "model_id": self.model_id,
            "head_kind": self.head_kind,
            "metric": self.metric,
            "attack_config": self.attack_config,
        }


def curve_from_results(results, labels, model_id="", head_kind="", attack_config=None, macro=False):
    labels = np.asarray(labels)
    score = macro_accuracy if macro else unweighted_accuracy
    return RobustnessCurve(
        [r.epsilon for r in results],
        [score(r.predictions, labels) for r in results],
        [len(labels)] * len(results),
        model_id,
        head_kind,
        "macro" if macro else "micro",
        attack_config or {},
    )


def robustness_curve(model, images, labels, schedule=None, attack_config=None, workers=1, macro=False,
                     model_id="", return_results=False):
    if len(labels) == 0:
        raise ValueError("robustness_curve needs a non-empty test set")
    schedule = EpsilonSchedule(schedule) if schedule is not None else EpsilonSchedule()
    attack_config = attack_config or AttackConfig()
    results = attack_sweep(model, images, labels, schedule, attack_config, workers=workers)
    meta = attack_config.to_dict()
    meta.pop("epsilon", None)
    meta["schedule"] = list(schedule)
    curve = curve_from_results(results, labels, model_id, getattr(model, "head_kind", ""), meta, macro)
    return (curve, results) if return_results else curve


def content_hash(path):
    """git-style blob hash (sha1 over ``b"blob <len>\\0" + bytes``) of a file."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# CSV


def _fmt(v):
    return f"{v:.6g}"


def write_curve_csv(curve, path, sidecar=True):
    """CSV with header ``epsilon,accuracy,n``; metadata goes to ``<path>.json``."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "accuracy", "n"])
            for eps, acc, n in curve.points:
                w.writerow([_fmt(eps), _fmt(acc), int(n)])
        if sidecar:
            with open(str(path) + ".json", "w", encoding="utf-8") as fh:
                json.dump(curve.metadata(), fh, indent=2, sort_keys=True)
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write curve to {path}: {exc}") from exc


def read_curve_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"epsilon", "accuracy", "n"}:
        raise ValueError(f"{path}: expected columns epsilon,accuracy,n")
    meta = {}
    try:
        with open(str(path) + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    return RobustnessCurve(
        [float(r["epsilon"]) for r in rows],
        [float(r["accuracy"]) for r in rows],
        [int(r["n"]) for r in rows],
        meta.get("model_id", ""),
        meta.get("head_kind", ""),
        meta.get("metric", "micro"),
        meta.get("attack_config", {}),
    )


# ---------------------------------------------------------------------------
# SVG

WIDTH, HEIGHT = 800, 500
_MARGIN = dict(left=80, right=200, top=40, bottom=70)
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass
class Report:
    curves: list
    metadata: dict = field(default_factory=dict)
    title: str = "Accuracy under l-inf PGD"
    log_x: bool = False

    def __post_init__(self):
        if self.curves:
            first = list(self.curves[0].epsilons)
            for c in self.curves[1:]:
                if list(c.epsilons) != first:
                    raise ValueError("all curves in a report must share the same epsilon schedule")


def _x_mapper(epsilons, log_x, x0, x1):
    if not log_x:
        hi = max(epsilons) or 1.0
        return lambda e: x0 + (x1 - x0) * e / hi
    positive = [e for e in epsilons if e > 0] or [1.0]
    lo, hi = math.log10(min(positive)) - 1.0, math.log10(max(positive))
    span = hi - lo or 1.0
    # epsilon = 0 sits one decade left of the smallest positive radius
    return lambda e: x0 + (x1 - x0) * ((math.log10(e) if e > 0 else lo) - lo) / span


def render_svg_string(report):
    left, right, top, bottom = (_MARGIN[k] for k in ("left", "right", "top", "bottom"))
    x0, x1, y0, y1 = left, WIDTH - right, HEIGHT - bottom, top
    eps = list(report.curves[0].epsilons) if report.curves else [0.0, 1.0]
    fx = _x_mapper(eps, report.log_x, x0, x1)

    def fy(a):
        return y0 + (y1 - y0) * a

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        "<metadata>" + escape(json.dumps(report.metadata, sort_keys=True)) + "</metadata>",
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{(x0 + x1) / 2:.1f}" y="24" text-anchor="middle" font-size="16">{escape(report.title)}</text>',
        f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = fy(tick)
        out.append(f'<line x1="{x0 - 5}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="11">{tick:.2f}</text>')
    for e in eps:
        x = fx(e)
        out.append(f'<line x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(
            f'<text x="{x:.2f}" y="{y0 + 18}" text-anchor="end" font-size="10" '
            f'transform="rotate(-35 {x:.2f} {y0 + 18})">{_fmt(e)}</text>'
        )
    xlabel = "epsilon (l-inf radius" + (", log scale)" if report.log_x else ")")
    out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">{xlabel}</text>')
    out.append(
        f'<text x="20" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 20 {(y0 + y1) / 2:.1f})">unweighted accuracy</text>'
    )
    for i, curve in enumerate(report.curves):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{fx(e):.2f},{fy(a):.2f}" for e, a in zip(curve.epsilons, curve.accuracies))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = top + 20 + 22 * i
        name = curve.head_kind or curve.model_id or f"curve {i + 1}"
        out.append(f'<line x1="{x1 + 20}" y1="{ly}" x2="{x1 + 45}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 52}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_svg(report, path):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_svg_string(report))
    except OSError as exc:
        raise OSError(f"cannot write SVG to {path}: {exc}") from exc
