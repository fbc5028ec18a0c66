"""Quantization-aware training: Nesterov SGD, global-norm clipping, step LR.

Targets are binary (AF vs. everything else). Every batch is drawn with equal
expected class frequency, each window freshly augmented.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import AugmentConfig, augment
from .errors import ContractError, FormatError, TrainingFailure, UndefinedMetricError
from .fxp import FxpFormat, QuantPair
from .metrics import evaluate, noise_specificity, predict_logits, sensitivity, specificity
from .nn import (
    BatchNormParams,
    DsConvLayer,
    QuantizedNetwork,
    bce_with_logits,
    loss_and_grads,
    output_shapes,
    param_arrays,
    recalibrate_bn,
    update_running_stats,
)

__all__ = [
    "TrainConfig",
    "lr_for_epoch",
    "clip_by_global_norm",
    "NesterovSGD",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr_initial: float = 0.01
    # (epoch, divisor): from the epoch after ``epoch`` on, the LR is divided
    lr_drops: tuple = ((15, 10.0), (25, 10.0))
    momentum: float = 0.9
    nesterov: bool = True
    grad_clip_norm: float = 1.0
    batch_size: int = 32
    seed: int = 0
    bn_momentum: float = 0.99
    steps_per_epoch: int | None = None
    # swap the moving batchnorm averages for population statistics after training
    recalibrate_bn: bool = True
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if not self.lr_initial >= 0:
            raise ContractError("lr_initial must be non-negative")
        if not self.grad_clip_norm > 0:
            raise ContractError("grad_clip_norm must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def lr_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate of a 1-based epoch."""
    lr = cfg.lr_initial
    for drop_epoch, factor in cfg.lr_drops:
        if epoch > drop_epoch:
            lr /= factor
    return lr


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns ``(clipped, pre_norm, post_norm)``.
    """
    pre = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if pre > max_norm:
        scale = max_norm / pre
        grads = [g * scale for g in grads]
        return grads, pre, max_norm
    return list(grads), pre, pre


class NesterovSGD:
    """SGD with (optionally Nesterov) momentum, updating arrays in place."""

    def __init__(self, params, momentum=0.9, nesterov=True):
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, lr):
        mu = self.momentum
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= mu
            v += g
            update = g + mu * v if self.nesterov else v
            p -= lr * update


def _targets(windows):
    return np.array([1.0 if w.is_af else 0.0 for w in windows])


def _balanced_probs(targets):
    pos = targets.sum()
    neg = targets.size - pos
    if pos == 0 or neg == 0:
        return np.full(targets.size, 1.0 / targets.size)
    p = np.where(targets > 0, 0.5 / pos, 0.5 / neg)
    return p / p.sum()


def _batches(windows, size):
    return [np.stack([w.samples for w in windows[i : i + size]]) for i in range(0, len(windows), size)]


def _safe(fn, c):
    try:
        return fn(c)
    except UndefinedMetricError:
        return None


def _validation_summary(net, windows):
    if not windows:
        return {}
    logits = predict_logits(net, windows)
    loss, _ = bce_with_logits(logits, _targets(windows))
    overall, noise = evaluate(net, windows, logits=logits)
    return {
        "val_loss": loss,
        "val_sensitivity": _safe(sensitivity, overall),
        "val_specificity": _safe(specificity, overall),
        "val_noise_specificity": _safe(noise_specificity, noise),
    }


def train(net: QuantizedNetwork, split, cfg: TrainConfig, progress=None):
    """Train a copy of ``net``. Returns ``(trained_net, history)``.

    ``history`` has one dict per epoch (lr, losses, validation rates, largest
    pre- and post-clip gradient norm).
    """
    train_w = list(split.train)
    if not train_w:
        raise ContractError("training partition is empty")
    h = train_w[0].length
    output_shapes(net, h, net.input_channels)  # raises InfeasibleShapeError
    net = net.copy()
    params = param_arrays(net)
    opt = NesterovSGD(params, cfg.momentum, cfg.nesterov)
    rng = np.random.default_rng(cfg.seed)
    targets = _targets(train_w)
    probs = _balanced_probs(targets)
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(train_w) / cfg.batch_size))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        losses, pre_max, post_max = [], 0.0, 0.0
        for _ in range(steps):
            idx = rng.choice(len(train_w), size=cfg.batch_size, replace=True, p=probs)
            if cfg.augment is not None:
                batch = [augment(train_w[i], cfg.augment, rng).samples for i in idx]
            else:
                batch = [train_w[i].samples for i in idx]
            x = np.stack(batch)
            loss, grads, tape = loss_and_grads(net, x, targets[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingFailure(f"non-finite loss or gradient at epoch {epoch}")
            grads, pre, post = clip_by_global_norm(grads, cfg.grad_clip_norm)
            opt.step(grads, lr)
            update_running_stats(net, tape, cfg.bn_momentum)
            losses.append(loss)
            pre_max, post_max = max(pre_max, pre), max(post_max, post)
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "max_grad_norm": pre_max,
            "max_clipped_grad_norm": post_max,
        }
        if cfg.recalibrate_bn and epoch == cfg.epochs:
            recalibrate_bn(net, _batches(train_w, cfg.batch_size))
        rec.update(_validation_summary(net, list(split.validation)))
        history.append(rec)
        if progress is not None:
            progress(rec)
    return net, history


# --- checkpoints -------------------------------------------------------------

_CK_MAGIC = b"AFCK"
_CK_VERSION = 1


def _fmt_tuple(f: FxpFormat | None):
    return None if f is None else [f.width_bits, f.precision_bits, bool(f.saturate_to_code)]


def _fmt_from(t):
    return None if t is None else FxpFormat(int(t[0]), int(t[1]), bool(t[2]))


def _net_arrays(net):
    for layer in net.layers:
        yield layer.depthwise
        yield layer.pointwise
        if layer.bn is not None:
            yield layer.bn.mean
            yield layer.bn.variance
            yield layer.bn.scale
            yield layer.bn.bias
        if layer.bias is not None:
            yield layer.bias
    yield net.head_weights
    yield net.head_bias.reshape(1)


def save_checkpoint(path, net: QuantizedNetwork, genome=None, history=None):
    """Versioned binary: magic, u16 version, u32 JSON-header length, header,
    then every parameter as little-endian float64."""
    q = net.quant
    header = {
        "quant": None if q is None else [_fmt_tuple(q.weights), _fmt_tuple(q.activations)],
        "input_channels": net.input_channels,
        "layers": [
            {
                "kernel": l.kernel, "in_channels": l.in_channels, "out_channels": l.out_channels,
                "stride": l.stride, "relu": bool(l.relu),
                "bn_epsilon": None if l.bn is None else l.bn.epsilon,
                "has_bias": l.bias is not None,
                "acc_formats": None if l.acc_formats is None else [_fmt_tuple(f) for f in l.acc_formats],
            }
            for l in net.layers
        ],
        "genome": genome,
        "history": history or [],
        "meta": net.meta,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in _net_arrays(net))
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC + struct.pack("<HI", _CK_VERSION, len(blob)) + blob + payload)


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``: returns ``(net, header)``."""
    raw = open(path, "rb").read()
    if raw[:4] != _CK_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    if len(raw) < 10:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _CK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if len(raw) < 10 + hlen:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    header = json.loads(raw[10 : 10 + hlen])
    pos = 10 + hlen

    def take(n):
        nonlocal pos
        if pos + 8 * n > len(raw):
            raise FormatError("truncated checkpoint payload", offset=len(raw))
        out = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return out

    q = header["quant"]
    quant = None if q is None else QuantPair(_fmt_from(q[0]), _fmt_from(q[1]))
    layers = []
    for spec in header["layers"]:
        k, ci, co = spec["kernel"], spec["in_channels"], spec["out_channels"]
        dw = take(k * ci).reshape(k, ci)
        pw = take(ci * co).reshape(ci, co)
        bn = None
        if spec["bn_epsilon"] is not None:
            bn = BatchNormParams(take(co), take(co), take(co), take(co), spec["bn_epsilon"])
        bias = take(co) if spec["has_bias"] else None
        acc = spec["acc_formats"]
        layers.append(
            DsConvLayer(k, ci, co, spec["stride"], dw, pw, bn, spec["relu"], bias,
                        None if acc is None else tuple(_fmt_from(f) for f in acc))
        )
    c_last = layers[-1].out_channels
    head_w = take(c_last)
    head_b = take(1)[0]
    if pos != len(raw):
        raise FormatError("trailing bytes after checkpoint payload", offset=pos)
    net = QuantizedNetwork(layers, head_w, head_b, quant, header["input_channels"], header.get("meta") or {})
    return net, header
