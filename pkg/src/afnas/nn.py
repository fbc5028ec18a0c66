"""Quantized 1D depthwise-separable CNN with hand-written backpropagation.

Feature maps are float64 arrays shaped ``(N, H, C)`` (a single ``(H, C)`` map
is accepted everywhere and promoted). A layer is

    depthwise conv (kernel K, stride S, valid padding)
    -> pointwise 1x1 conv to C_out
    -> batchnorm (or a folded bias)
    -> optional ReLU

with the activation quantizer applied on the layer input, after the depthwise
stage, after the pointwise stage and after batchnorm, and the weight quantizer
applied to every trainable tensor and to the batchnorm statistics. The network
ends in a fused global-average-pool + linear head producing one logit.

Quantizers are routed through a ``quantizer`` callable ``(x, fmt) -> (xq, mask)``
where ``mask`` is the straight-through derivative. Passing ``quant=None`` on a
network turns every quantizer into the identity (float reference network).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InfeasibleShapeError
from .fxp import FxpFormat, QuantPair, quantize, ste_mask

__all__ = [
    "GENEROUS",
    "BatchNormParams",
    "DsConvLayer",
    "QuantizedNetwork",
    "ste_quantizer",
    "dsconv_forward",
    "batchnorm_forward",
    "gap_fc_forward",
    "network_forward",
    "forward_train",
    "network_backward",
    "loss_and_grads",
    "bce_with_logits",
    "param_arrays",
    "param_names",
    "param_count",
    "output_shapes",
    "output_length",
    "dsconv_macs",
    "build_network",
    "update_running_stats",
    "recalibrate_bn",
]

GENEROUS = QuantPair.of(32, 16)


@dataclass
class BatchNormParams:
    mean: np.ndarray
    variance: np.ndarray
    scale: np.ndarray
    bias: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("mean", "variance", "scale", "bias"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(-1))
        n = self.mean.shape[0]
        if any(getattr(self, k).shape[0] != n for k in ("variance", "scale", "bias")):
            raise ContractError("batchnorm parameter vectors differ in length")
        if np.any(self.variance < 0):
            raise ContractError("batchnorm variance must be non-negative")
        if not self.epsilon > 0:
            raise ContractError("batchnorm epsilon must be positive")

    @classmethod
    def identity(cls, channels, epsilon=1e-5):
        return cls(
            mean=np.zeros(channels),
            variance=np.full(channels, 1.0 - epsilon),
            scale=np.ones(channels),
            bias=np.zeros(channels),
            epsilon=epsilon,
        )

    @property
    def channels(self):
        return self.mean.shape[0]


@dataclass
class DsConvLayer:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int
    depthwise: np.ndarray  # (K, C_in)
    pointwise: np.ndarray  # (C_in, C_out)
    bn: BatchNormParams | None = None
    relu: bool = True
    # set instead of ``bn`` on a folded layer
    bias: np.ndarray | None = None
    # accumulator formats of the depthwise and pointwise MACs; None = exact
    acc_formats: tuple[FxpFormat, FxpFormat] | None = None

    def __post_init__(self):
        self.depthwise = np.array(self.depthwise, dtype=np.float64).reshape(self.kernel, self.in_channels)
        self.pointwise = np.array(self.pointwise, dtype=np.float64).reshape(self.in_channels, self.out_channels)
        if min(self.kernel, self.in_channels, self.out_channels, self.stride) < 1:
            raise ContractError("kernel, channels and stride must be positive")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64).reshape(self.out_channels)
        if self.bn is not None and self.bn.channels != self.out_channels:
            raise ContractError("batchnorm channel count differs from out_channels")


@dataclass
class QuantizedNetwork:
    layers: list
    head_weights: np.ndarray
    head_bias: np.ndarray
    quant: QuantPair | None
    input_channels: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise ContractError("a network needs at least one layer")
        self.head_weights = np.array(self.head_weights, dtype=np.float64).reshape(-1)
        self.head_bias = np.array(self.head_bias, dtype=np.float64).reshape(())
        c = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != c:
                raise ContractError(f"layer {i} expects {layer.in_channels} channels, predecessor gives {c}")
            c = layer.out_channels
        if self.head_weights.shape[0] != c:
            raise ContractError("head weight count differs from final channel count")

    def copy(self):
        return copy.deepcopy(self)

    @property
    def folded(self):
        return all(layer.bn is None for layer in self.layers)


# --- quantizer plumbing ------------------------------------------------------


def ste_quantizer(x, fmt):
    """Default quantizer: value from ``quantize``, clipped-STE mask."""
    if fmt is None:
        return x, 1.0
    return quantize(x, fmt), ste_mask(x, fmt)


def _formats(quant):
    if quant is None:
        return None, None
    return quant.weights, quant.activations


def _batched(x, channels=None):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ContractError(f"feature map must be (H, C) or (N, H, C), got shape {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ContractError("empty feature map")
    if channels is not None and x.shape[2] != channels:
        raise ContractError(f"expected {channels} channels, got {x.shape[2]}")
    return x, squeeze


def output_length(length, kernel, stride):
    if length < kernel:
        raise InfeasibleShapeError(f"input length {length} shorter than kernel {kernel}")
    return (length - kernel) // stride + 1


def dsconv_macs(out_length, in_channels, kernel, out_channels):
    """Multiply-accumulates of one depthwise-separable layer per window."""
    return out_length * in_channels * (kernel + out_channels)


# --- layer pieces ------------------------------------------------------------


def _dsconv_fwd(x, layer, quant, qz, counter):
    wf, af = _formats(quant)
    acc_dw, acc_pw = layer.acc_formats or (None, None)
    n, h, _ = x.shape
    k, s = layer.kernel, layer.stride
    h_out = output_length(h, k, s)
    span = s * (h_out - 1) + 1

    a, m_a = qz(x, af)
    wd, m_wd = qz(layer.depthwise, wf)
    y = np.zeros((n, h_out, layer.in_channels))
    for i in range(k):
        tap = a[:, i : i + span : s, :]
        y += tap * wd[i]
        if counter is not None:
            counter["macs"] = counter.get("macs", 0) + tap.size
    if counter is not None and "peaks" in counter:
        peaks = counter["peaks"].setdefault(id(layer), [0.0, 0.0])
        peaks[0] = max(peaks[0], float(np.max(np.abs(y))))
    y_acc, m_yacc = qz(y, acc_dw)
    d, m_d = qz(y_acc, af)

    wp, m_wp = qz(layer.pointwise, wf)
    z = d @ wp
    if counter is not None:
        counter["macs"] = counter.get("macs", 0) + d.size * layer.out_channels
    m_b = None
    if layer.bias is not None:
        bq, m_b = qz(layer.bias, wf)
        z = z + bq
    if counter is not None and "peaks" in counter:
        peaks[1] = max(peaks[1], float(np.max(np.abs(z))))
    z_acc, m_zacc = qz(z, acc_pw)
    zq, m_z = qz(z_acc, af)
    cache = dict(
        a=a, m_a=m_a, wd=wd, m_wd=m_wd, m_y=m_yacc * m_d, d=d,
        wp=wp, m_wp=m_wp, m_b=m_b, m_z=m_zacc * m_z, in_len=h,
    )
    return zq, cache


def _dsconv_bwd(g, layer, c):
    n, h_out, _ = g.shape
    k, s = layer.kernel, layer.stride
    span = s * (h_out - 1) + 1
    g_z = g * c["m_z"]
    grads = {}
    if layer.bias is not None:
        grads["bias"] = g_z.sum(axis=(0, 1)) * c["m_b"]
    d = c["d"]
    grads["pointwise"] = (d.reshape(-1, d.shape[2]).T @ g_z.reshape(-1, g_z.shape[2])) * c["m_wp"]
    g_y = (g_z @ c["wp"].T) * c["m_y"]
    a = c["a"]
    g_wd = np.empty_like(c["wd"])
    g_a = np.zeros_like(a)
    for i in range(k):
        g_wd[i] = np.einsum("ntc,ntc->c", a[:, i : i + span : s, :], g_y)
        g_a[:, i : i + span : s, :] += g_y * c["wd"][i]
    grads["depthwise"] = g_wd * c["m_wd"]
    return g_a * c["m_a"], grads


def _bn_fwd(x, bn, quant, mode, qz):
    wf, af = _formats(quant)
    xq, m_x = qz(x, af)
    if mode == "train":
        mu = xq.mean(axis=(0, 1))
        var = xq.var(axis=(0, 1))
    elif mode == "eval":
        mu, var = bn.mean, bn.variance
    else:
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    sig = np.sqrt(var)
    mu_q, m_mu = qz(mu, wf)
    sig_q, m_sig = qz(sig, wf)
    denom = np.sqrt(sig_q**2 + bn.epsilon)
    xc = xq - mu_q
    xhat = xc / denom
    gamma, m_gamma = qz(bn.scale, wf)
    beta, m_beta = qz(bn.bias, wf)
    u = xhat * gamma + beta
    cache = dict(
        mode=mode, xq=xq, m_x=m_x, mu=mu, var=var, sig=sig, m_mu=m_mu,
        sig_q=sig_q, m_sig=m_sig, denom=denom, xc=xc, xhat=xhat,
        gamma=gamma, m_gamma=m_gamma, m_beta=m_beta,
    )
    return u, cache


def _bn_bwd(g_u, c):
    grads = {
        "bn.bias": g_u.sum(axis=(0, 1)) * c["m_beta"],
        "bn.scale": (g_u * c["xhat"]).sum(axis=(0, 1)) * c["m_gamma"],
    }
    g_xhat = g_u * c["gamma"]
    denom = c["denom"]
    g_xq = g_xhat / denom
    if c["mode"] == "train":
        m = g_u.shape[0] * g_u.shape[1]
        g_mu_q = -(g_xhat.sum(axis=(0, 1))) / denom
        g_denom = -(g_xhat * c["xc"]).sum(axis=(0, 1)) / denom**2
        g_sig = g_denom * c["sig_q"] / denom * c["m_sig"]
        sig = c["sig"]
        g_var = np.divide(g_sig, 2.0 * sig, out=np.zeros_like(sig), where=sig > 0)
        g_mu = g_mu_q * c["m_mu"]
        g_xq = g_xq + g_mu / m + g_var * 2.0 * (c["xq"] - c["mu"]) / m
    return g_xq * c["m_x"], grads


def _layer_fwd(x, layer, quant, mode, qz, counter=None):
    z, c_conv = _dsconv_fwd(x, layer, quant, qz, counter)
    c_bn = None
    if layer.bn is not None:
        u, c_bn = _bn_fwd(z, layer.bn, quant, mode, qz)
    else:
        u = z
    _, af = _formats(quant)
    b, m_b = qz(u, af)
    out = np.maximum(b, 0.0) if layer.relu else b
    return out, dict(conv=c_conv, bn=c_bn, m_out=m_b, b=b)


def _layer_bwd(g, layer, c):
    if layer.relu:
        g = g * (c["b"] > 0)
    g = g * c["m_out"]
    grads = {}
    if c["bn"] is not None:
        g, bn_grads = _bn_bwd(g, c["bn"])
        grads.update(bn_grads)
    g_x, conv_grads = _dsconv_bwd(g, layer, c["conv"])
    grads.update(conv_grads)
    return g_x, grads


def _head_fwd(x, w, b, quant, qz):
    wf, _ = _formats(quant)
    wq, m_w = qz(w, wf)
    bq, m_b = qz(b, wf)
    # running per-channel sums and one dot product; on grid values the
    # numerator is exact in float64, so the sign of the logit is exact too
    h = x.shape[1]
    sums = x.sum(axis=1)
    logit = (sums @ wq + bq * h) / h
    return logit, dict(mean=sums / x.shape[1], wq=wq, m_w=m_w, m_b=m_b, h=x.shape[1])


def _head_bwd(g_logit, c):
    grads = {
        "head_weights": (c["mean"].T @ g_logit) * c["m_w"],
        "head_bias": np.asarray(g_logit.sum() * c["m_b"]),
    }
    g_mean = g_logit[:, None] * c["wq"][None, :]
    g_x = np.repeat(g_mean[:, None, :] / c["h"], c["h"], axis=1)
    return g_x, grads


# --- public single-op entry points -------------------------------------------


def dsconv_forward(x, layer: DsConvLayer, quant: QuantPair | None, counter=None):
    """Quantized depthwise + pointwise convolution (no batchnorm, no ReLU).

    ``counter``, if a dict, receives the number of multiply-accumulates
    actually executed under key ``"macs"``. If it holds a ``"peaks"`` dict,
    the largest absolute depthwise and pointwise accumulator values are
    recorded there under ``id(layer)``.
    """
    xb, squeeze = _batched(x, layer.in_channels)
    out, _ = _dsconv_fwd(xb, layer, quant, ste_quantizer, counter)
    return out[0] if squeeze else out


def batchnorm_forward(x, bn: BatchNormParams, quant: QuantPair | None, mode="eval"):
    """Quantized batchnorm followed by activation quantization."""
    xb, squeeze = _batched(x, bn.channels)
    u, _ = _bn_fwd(xb, bn, quant, mode, ste_quantizer)
    out, _ = ste_quantizer(u, None if quant is None else quant.activations)
    return out[0] if squeeze else out


def gap_fc_forward(x, head_weights, head_bias, quant: QuantPair | None):
    head_weights = np.asarray(head_weights, dtype=np.float64).reshape(-1)
    xb, squeeze = _batched(x, head_weights.shape[0])
    logit, _ = _head_fwd(xb, head_weights, np.asarray(head_bias, dtype=np.float64), quant, ste_quantizer)
    return float(logit[0]) if squeeze else logit


# --- whole network -----------------------------------------------------------


def network_forward(net: QuantizedNetwork, x, mode="eval", quantizer=None, counter=None):
    """Logit(s) of ``net`` on one ``(H, C)`` window or a batch ``(N, H, C)``."""
    xb, squeeze = _batched(x, net.input_channels)
    qz = quantizer or ste_quantizer
    h = xb
    for layer in net.layers:
        h, _ = _layer_fwd(h, layer, net.quant, mode, qz, counter)
    logit, _ = _head_fwd(h, net.head_weights, net.head_bias, net.quant, qz)
    return float(logit[0]) if squeeze else logit


def forward_train(net: QuantizedNetwork, x, quantizer=None, mode="train"):
    """Forward pass keeping everything backward needs. Returns (logits, tape)."""
    xb, _ = _batched(x, net.input_channels)
    qz = quantizer or ste_quantizer
    caches = []
    h = xb
    for layer in net.layers:
        h, c = _layer_fwd(h, layer, net.quant, mode, qz)
        caches.append(c)
    logit, c_head = _head_fwd(h, net.head_weights, net.head_bias, net.quant, qz)
    return logit, dict(layers=caches, head=c_head)


def bce_with_logits(logits, targets):
    """Mean sigmoid cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad = (1.0 / (1.0 + np.exp(-z)) - t) / z.shape[0]
    return float(loss.mean()), grad


def network_backward(net: QuantizedNetwork, tape, logits, targets):
    """Loss and gradients (aligned with ``param_arrays``) from a training tape."""
    loss, g_logit = bce_with_logits(logits, targets)
    g, head_grads = _head_bwd(g_logit, tape["head"])
    per_layer = []
    for layer, c in zip(reversed(net.layers), reversed(tape["layers"])):
        g, grads = _layer_bwd(g, layer, c)
        per_layer.append(grads)
    per_layer.reverse()
    flat = []
    for layer, grads in zip(net.layers, per_layer):
        for name in _layer_param_keys(layer):
            flat.append(grads[name])
    flat.append(head_grads["head_weights"])
    flat.append(head_grads["head_bias"])
    return loss, flat


def loss_and_grads(net: QuantizedNetwork, x, targets, quantizer=None, mode="train"):
    logits, tape = forward_train(net, x, quantizer, mode)
    loss, grads = network_backward(net, tape, logits, targets)
    return loss, grads, tape


def update_running_stats(net: QuantizedNetwork, tape, momentum=0.99):
    """Fold the batch statistics of a training tape into the moving averages."""
    for layer, c in zip(net.layers, tape["layers"]):
        if layer.bn is None or c["bn"] is None:
            continue
        bn, cb = layer.bn, c["bn"]
        m = cb["xq"].shape[0] * cb["xq"].shape[1]
        unbiased = cb["var"] * m / max(m - 1, 1)
        bn.mean = momentum * bn.mean + (1.0 - momentum) * cb["mu"]
        bn.variance = momentum * bn.variance + (1.0 - momentum) * unbiased


def recalibrate_bn(net: QuantizedNetwork, batches):
    """Replace moving batchnorm statistics by exact population statistics.

    ``batches`` is a re-iterable of ``(N, H, C)`` arrays. Layers are processed
    in order so each layer sees inputs produced with already-recalibrated
    predecessors.
    """
    for i, layer in enumerate(net.layers):
        if layer.bn is None:
            continue
        total, s1, s2 = 0, 0.0, 0.0
        for xb in batches:
            h, _ = _batched(xb, net.input_channels)
            for prev in net.layers[:i]:
                h, _ = _layer_fwd(h, prev, net.quant, "eval", ste_quantizer)
            z, _ = _dsconv_fwd(h, layer, net.quant, ste_quantizer, None)
            zq, _ = ste_quantizer(z, None if net.quant is None else net.quant.activations)
            total += zq.shape[0] * zq.shape[1]
            s1 = s1 + zq.sum(axis=(0, 1))
            s2 = s2 + (zq * zq).sum(axis=(0, 1))
        if total == 0:
            continue
        mean = s1 / total
        layer.bn.mean = mean
        layer.bn.variance = np.maximum(s2 / total - mean * mean, 0.0) * total / max(total - 1, 1)


# --- parameters and shapes ---------------------------------------------------


def _layer_param_keys(layer):
    keys = ["depthwise", "pointwise"]
    if layer.bn is not None:
        keys += ["bn.scale", "bn.bias"]
    if layer.bias is not None:
        keys.append("bias")
    return keys


def _get(layer, key):
    if key.startswith("bn."):
        return getattr(layer.bn, key[3:])
    return getattr(layer, key)


def param_names(net: QuantizedNetwork):
    names = []
    for i, layer in enumerate(net.layers):
        names += [f"layers.{i}.{k}" for k in _layer_param_keys(layer)]
    return names + ["head_weights", "head_bias"]


def param_arrays(net: QuantizedNetwork):
    """Trainable arrays in a fixed order; mutating them mutates the network."""
    arrays = []
    for layer in net.layers:
        arrays += [_get(layer, k) for k in _layer_param_keys(layer)]
    return arrays + [net.head_weights, net.head_bias]


def param_count(net_or_layers, input_channels=2):
    """Trainable parameters: per layer K*C_in + C_in*C_out + 2*C_out, plus the head.

    Accepts a network or a list of ``(K, C_out, S)`` layer specs.
    """
    if isinstance(net_or_layers, QuantizedNetwork):
        specs = [(l.kernel, l.out_channels, l.stride) for l in net_or_layers.layers]
        input_channels = net_or_layers.input_channels
    else:
        specs = list(net_or_layers)
    if not specs:
        raise ContractError("a network needs at least one layer")
    total, c_in = 0, input_channels
    for k, c_out, _ in specs:
        total += k * c_in + c_in * c_out + 2 * c_out
        c_in = c_out
    return total + c_in + 1


def output_shapes(net_or_layers, input_length, input_channels=2):
    """``[(H_i, C_i)]`` after each layer; raises on infeasible shapes."""
    if isinstance(net_or_layers, QuantizedNetwork):
        specs = [(l.kernel, l.out_channels, l.stride) for l in net_or_layers.layers]
    else:
        specs = list(net_or_layers)
    if not specs:
        raise ContractError("a network needs at least one layer")
    shapes, h = [], input_length
    for k, c_out, s in specs:
        h = output_length(h, k, s)
        shapes.append((h, c_out))
    return shapes


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_network(layer_specs, quant: QuantPair | None, seed=0, input_channels=2, relu_last=False, epsilon=1e-5):
    """Freshly initialised network from ``[(K, C_out, S), ...]``.

    Weights are Glorot-uniform and quantized once with the weight format.
    """
    rng = np.random.default_rng(seed)
    wf = None if quant is None else quant.weights
    q = (lambda v: v) if wf is None else (lambda v: quantize(v, wf))
    layers, c_in = [], input_channels
    specs = list(layer_specs)
    if not specs:
        raise ContractError("a network needs at least one layer")
    for i, (k, c_out, s) in enumerate(specs):
        layers.append(
            DsConvLayer(
                kernel=k, in_channels=c_in, out_channels=c_out, stride=s,
                depthwise=q(_glorot(rng, (k, c_in), k, k)),
                pointwise=q(_glorot(rng, (c_in, c_out), c_in, c_out)),
                bn=BatchNormParams(
                    mean=np.zeros(c_out), variance=np.ones(c_out),
                    scale=np.ones(c_out), bias=np.zeros(c_out), epsilon=epsilon,
                ),
                relu=relu_last or i < len(specs) - 1,
            )
        )
        c_in = c_out
    head = q(_glorot(rng, (c_in,), c_in, 1))
    return QuantizedNetwork(layers, head, 0.0, quant, input_channels)
