"""Platform constraints and proxy resource figures for candidate architectures.

``validate`` encodes the hardware rules as data: power-of-two kernel, channel
and stride sizes, stride <= kernel, at most five layers, a kernel-size cap and a
parameter budget, plus shape feasibility on a given input length. ``report``
turns a valid architecture into the quantities the search minimises and a few
memory figures that stand in for block-RAM usage.

Both functions take a genome-like object (``.layers`` of ``(K, C_out, S)`` and
``.quant``) or a bare list of layer tuples.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .errors import ContractError
from .nn import dsconv_macs, param_count

__all__ = [
    "Violation",
    "ConstraintConfig",
    "CostReport",
    "validate",
    "report",
    "is_pow2",
    "NO_LAYERS",
    "TOO_MANY_LAYERS",
    "KERNEL_NOT_POW2",
    "CHANNELS_NOT_POW2",
    "STRIDE_NOT_POW2",
    "STRIDE_EXCEEDS_KERNEL",
    "KERNEL_TOO_LARGE",
    "TOO_MANY_PARAMS",
    "SHAPE_INFEASIBLE",
    "TOO_MANY_MACS",
]

NO_LAYERS = "no_layers"
TOO_MANY_LAYERS = "too_many_layers"
KERNEL_NOT_POW2 = "kernel_not_pow2"
CHANNELS_NOT_POW2 = "channels_not_pow2"
STRIDE_NOT_POW2 = "stride_not_pow2"
STRIDE_EXCEEDS_KERNEL = "stride_exceeds_kernel"
KERNEL_TOO_LARGE = "kernel_too_large"
TOO_MANY_PARAMS = "too_many_params"
SHAPE_INFEASIBLE = "shape_infeasible"
TOO_MANY_MACS = "too_many_macs"


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    layer: int | None = None


@dataclass(frozen=True)
class ConstraintConfig:
    max_params: int = 10**6
    max_layers: int = 5
    max_kernel: int = 32
    metric_floor: float = 0.7
    require_pow2: bool = True
    require_stride_le_kernel: bool = True
    # optional per-window MAC budget; None disables the check
    max_macs: int | None = None

    def __post_init__(self):
        if min(self.max_params, self.max_layers, self.max_kernel) <= 0 or self.metric_floor <= 0:
            raise ContractError("constraint limits must be positive")
        if self.max_macs is not None and self.max_macs <= 0:
            raise ContractError("max_macs must be positive")


@dataclass(frozen=True)
class CostReport:
    params: int
    weight_bytes: int
    macs_per_window: int
    max_layer_output: int
    activation_bytes: int
    linebuffer_bytes: int
    total_bits: int

    def as_dict(self):
        return asdict(self)


def is_pow2(n) -> bool:
    return isinstance(n, int) and n > 0 and n & (n - 1) == 0


def _unpack(genome):
    layers = getattr(genome, "layers", genome)
    return [tuple(int(v) for v in layer) for layer in layers], getattr(genome, "quant", None)


def _shape_chain(layers, input_length):
    """Per-layer output lengths, or the index of the first infeasible layer."""
    h, lengths = input_length, []
    for i, (k, _, s) in enumerate(layers):
        if h < k:
            return lengths, i
        h = (h - k) // s + 1
        lengths.append(h)
    return lengths, None


def validate(genome, cfg: ConstraintConfig | None = None, input_length=None, input_channels=2):
    """All constraint violations of ``genome`` (empty list when valid)."""
    cfg = cfg or ConstraintConfig()
    layers, _ = _unpack(genome)
    out = []
    if not layers:
        return [Violation(NO_LAYERS, "architecture has no layers")]
    if len(layers) > cfg.max_layers:
        out.append(Violation(TOO_MANY_LAYERS, f"{len(layers)} layers exceeds {cfg.max_layers}"))
    for i, (k, c, s) in enumerate(layers):
        if min(k, c, s) < 1:
            raise ContractError(f"layer {i}: sizes must be positive, got {(k, c, s)}")
        if cfg.require_pow2:
            if not is_pow2(k):
                out.append(Violation(KERNEL_NOT_POW2, f"kernel {k} is not a power of two", i))
            if not is_pow2(c):
                out.append(Violation(CHANNELS_NOT_POW2, f"channels {c} is not a power of two", i))
            if not is_pow2(s):
                out.append(Violation(STRIDE_NOT_POW2, f"stride {s} is not a power of two", i))
        if cfg.require_stride_le_kernel and s > k:
            out.append(Violation(STRIDE_EXCEEDS_KERNEL, f"stride {s} exceeds kernel {k}", i))
        if k > cfg.max_kernel:
            out.append(Violation(KERNEL_TOO_LARGE, f"kernel {k} exceeds limit {cfg.max_kernel}", i))
    params = param_count(layers, input_channels)
    if params > cfg.max_params:
        out.append(Violation(TOO_MANY_PARAMS, f"{params} parameters exceeds {cfg.max_params}"))
    if input_length is not None:
        lengths, bad = _shape_chain(layers, input_length)
        if bad is not None:
            h = lengths[-1] if lengths else input_length
            out.append(Violation(SHAPE_INFEASIBLE, f"length {h} shorter than kernel {layers[bad][0]}", bad))
        elif cfg.max_macs is not None:
            macs = _macs(layers, lengths, input_channels)
            if macs > cfg.max_macs:
                out.append(Violation(TOO_MANY_MACS, f"{macs} MACs per window exceeds {cfg.max_macs}"))
    return out


def _macs(layers, lengths, input_channels):
    total, c_in = 0, input_channels
    for (k, c, _), h in zip(layers, lengths):
        total += dsconv_macs(h, c_in, k, c)
        c_in = c
    return total


def report(genome, input_length, input_channels=2, quant=None) -> CostReport:
    """Proxy resource figures; ``genome.quant`` supplies the word widths."""
    layers, gq = _unpack(genome)
    quant = quant or gq
    if not layers:
        raise ContractError("cannot cost an architecture without layers")
    if quant is None:
        raise ContractError("word widths needed: pass a genome with .quant or quant=")
    lengths, bad = _shape_chain(layers, input_length)
    if bad is not None:
        raise ContractError(f"layer {bad} is infeasible for input length {input_length}")
    w_w = quant.weights.width_bits
    a_bytes = math.ceil(quant.activations.width_bits / 8)
    params = param_count(layers, input_channels)
    outputs = [h * c for h, (_, c, _) in zip(lengths, layers)]
    out_bytes = [n * a_bytes for n in outputs]
    if len(out_bytes) == 1:
        act = out_bytes[0]
    else:
        act = max(a + b for a, b in zip(out_bytes, out_bytes[1:]))
    c_ins = [input_channels] + [c for _, c, _ in layers[:-1]]
    linebuf = sum(k * c_in * a_bytes for (k, _, _), c_in in zip(layers, c_ins))
    return CostReport(
        params=params,
        weight_bytes=math.ceil(params * w_w / 8),
        macs_per_window=_macs(layers, lengths, input_channels),
        max_layer_output=max(outputs),
        activation_bytes=act,
        linebuffer_bytes=linebuf,
        total_bits=quant.total_bits,
    )
