"""Confusion counts and the three rates the search optimises.

AF is the positive class. NORMAL and NOISE windows are negatives, but NOISE
windows are kept out of the overall counts and scored separately as noise
specificity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, UndefinedMetricError

__all__ = [
    "ConfusionCounts",
    "sensitivity",
    "specificity",
    "noise_specificity",
    "confusion",
    "evaluate",
    "predict_logits",
    "format_report",
    "parse_report",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: no positive windows")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: no negative windows")
    return c.tn / (c.tn + c.fp)


def noise_specificity(c_noise: ConfusionCounts) -> float:
    if c_noise.tn + c_noise.fp == 0:
        raise UndefinedMetricError("noise specificity undefined: no noise windows")
    return c_noise.tn / (c_noise.tn + c_noise.fp)


def confusion(predicted_af, is_af) -> ConfusionCounts:
    p = np.asarray(predicted_af, dtype=bool)
    t = np.asarray(is_af, dtype=bool)
    return ConfusionCounts(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
        tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t)),
    )


def predict_logits(net, windows, batch_size=64):
    """Eval-mode logits of ``net`` (a network or a callable on ``(N, H, C)``)."""
    from .nn import QuantizedNetwork, network_forward

    if isinstance(net, QuantizedNetwork):
        fn = lambda xb: network_forward(net, xb, mode="eval")  # noqa: E731
    else:
        fn = net
    out = []
    for i in range(0, len(windows), batch_size):
        xb = np.stack([w.samples for w in windows[i : i + batch_size]])
        out.append(np.asarray(fn(xb), dtype=np.float64).reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(net, windows, logits=None):
    """``(overall, noise)`` confusion counts for a window collection.

    ``logits`` may be supplied to skip inference (e.g. streamed predictions).
    """
    from .data import Label

    windows = list(windows)
    if not windows:
        raise ContractError("evaluate() needs at least one window")
    if logits is None:
        logits = predict_logits(net, windows)
    logits = np.asarray(logits, dtype=np.float64)
    pred = logits > 0
    labels = np.array([Label(w.label).value for w in windows])
    noise = labels == Label.NOISE.value
    is_af = labels == Label.AF.value
    overall = confusion(pred[~noise], is_af[~noise])
    noisy = confusion(pred[noise], is_af[noise])
    return overall, noisy


def _rate_or_none(fn, c):
    try:
        return fn(c)
    except UndefinedMetricError:
        return None


def format_report(overall: ConfusionCounts, noise: ConfusionCounts) -> str:
    """One ``key=value`` line per metric."""
    rows = {
        "tp": overall.tp, "fp": overall.fp, "tn": overall.tn, "fn": overall.fn,
        "noise_tn": noise.tn, "noise_fp": noise.fp,
        "sensitivity": _rate_or_none(sensitivity, overall),
        "specificity": _rate_or_none(specificity, overall),
        "noise_specificity": _rate_or_none(noise_specificity, noise),
    }
    lines = []
    for k, v in rows.items():
        if v is None:
            v = "undefined"
        elif isinstance(v, float):
            v = f"{v:.6f}"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" not in line:
            continue
        k, v = line.split("=", 1)
        if v == "undefined":
            out[k] = None
        elif "." in v:
            out[k] = float(v)
        else:
            out[k] = int(v)
    return out
