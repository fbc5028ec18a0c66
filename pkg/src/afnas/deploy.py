"""Folding, integer-only streaming inference and the export blob.

A trained network is folded into integer codes: each batchnorm is absorbed
into the pointwise weights and a bias, everything lands on the weight grid.
``stream_infer`` then runs the folded model as a pipeline of stages (source,
one stage per layer, pooled head) joined by bounded FIFOs, using nothing but
integer arithmetic. It reproduces ``network_forward`` on the folded network
bit for bit, whatever order the stages are fired in.
"""

from __future__ import annotations

import csv
import math
import queue
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import CodeRangeError, ContractError, DeadlockError, FormatError, InfeasibleShapeError, NumericError
from .fxp import FxpFormat, QuantPair, div_round, from_code, quantize, round_shift, saturate_code, to_code
from .nn import DsConvLayer, QuantizedNetwork, network_forward, output_length

__all__ = [
    "ACC_FRAC_BITS",
    "FoldedLayer",
    "FoldedModel",
    "StreamResult",
    "fold_batchnorm",
    "profile_accumulators",
    "stream_infer",
    "stream_predictions",
    "write_predictions",
    "encode",
    "decode",
    "export",
    "load",
    "MAGIC",
    "VERSION",
]

ACC_FRAC_BITS = 12
MAGIC = b"AFNN"
VERSION = 1


def _codes(a, shape):
    arr = np.asarray(a)
    if arr.dtype != object:
        arr = arr.astype(np.int64)
    return arr.reshape(shape)


def _fits(codes, fmt: FxpFormat):
    if codes.size == 0:
        return True
    return int(codes.min()) >= fmt.code_min and int(codes.max()) <= fmt.code_max


@dataclass(eq=False)
class FoldedLayer:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int
    relu: bool
    depthwise: np.ndarray  # (K, C_in) weight codes
    pointwise: np.ndarray  # (C_in, C_out) weight codes, batchnorm absorbed
    bias: np.ndarray  # (C_out,) weight codes
    # integer bits of the depthwise and pointwise accumulators; None = exact
    acc_int_bits: tuple[int, int] | None = None

    def __post_init__(self):
        self.depthwise = _codes(self.depthwise, (self.kernel, self.in_channels))
        self.pointwise = _codes(self.pointwise, (self.in_channels, self.out_channels))
        self.bias = _codes(self.bias, (self.out_channels,))
        if self.acc_int_bits is not None:
            self.acc_int_bits = tuple(int(b) for b in self.acc_int_bits)
            if len(self.acc_int_bits) != 2 or min(self.acc_int_bits) < 1:
                raise ContractError("acc_int_bits needs two positive widths")

    @property
    def code_count(self):
        return self.depthwise.size + self.pointwise.size + self.bias.size


@dataclass(eq=False)
class FoldedModel:
    layers: list
    head: np.ndarray  # (C_last,) weight codes
    head_bias: int
    quant: QuantPair
    acc_frac_bits: int = ACC_FRAC_BITS
    input_channels: int = 2

    def __post_init__(self):
        if not self.layers:
            raise ContractError("a folded model needs at least one layer")
        self.head = _codes(self.head, (-1,))
        self.head_bias = int(self.head_bias)
        c = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != c:
                raise ContractError(f"layer {i} expects {layer.in_channels} channels, predecessor gives {c}")
            c = layer.out_channels
        if self.head.shape[0] != c:
            raise ContractError("head code count differs from final channel count")
        wf = self.quant.weights
        for i, layer in enumerate(self.layers):
            for name in ("depthwise", "pointwise", "bias"):
                if not _fits(getattr(layer, name), wf):
                    raise CodeRangeError(f"layer {i} {name} code outside {wf}")
        if not _fits(self.head, wf) or not wf.code_min <= self.head_bias <= wf.code_max:
            raise CodeRangeError(f"head code outside {wf}")

    @property
    def code_count(self):
        return sum(layer.code_count for layer in self.layers) + self.head.size + 1

    @property
    def payload_bytes(self):
        return self.code_count * _code_bytes(self.quant.weights)

    def acc_formats(self, layer: FoldedLayer):
        if layer.acc_int_bits is None:
            return None
        return tuple(_acc_format(b, self.acc_frac_bits) for b in layer.acc_int_bits)

    def to_network(self) -> QuantizedNetwork:
        """The folded model as a float network on the same grid points."""
        wf = self.quant.weights
        layers = [
            DsConvLayer(
                l.kernel, l.in_channels, l.out_channels, l.stride,
                from_code(l.depthwise, wf), from_code(l.pointwise, wf),
                bn=None, relu=l.relu, bias=from_code(l.bias, wf),
                acc_formats=self.acc_formats(l),
            )
            for l in self.layers
        ]
        return QuantizedNetwork(
            layers, from_code(self.head, wf), from_code(self.head_bias, wf), self.quant, self.input_channels
        )

    def with_acc_bits(self, bits):
        layers = [
            FoldedLayer(l.kernel, l.in_channels, l.out_channels, l.stride, l.relu,
                        l.depthwise, l.pointwise, l.bias, b)
            for l, b in zip(self.layers, bits)
        ]
        return FoldedModel(layers, self.head, self.head_bias, self.quant, self.acc_frac_bits, self.input_channels)

    def __eq__(self, other):
        if not isinstance(other, FoldedModel):
            return NotImplemented
        head = (self.quant, self.acc_frac_bits, self.input_channels, self.head_bias, len(self.layers))
        if head != (other.quant, other.acc_frac_bits, other.input_channels, other.head_bias, len(other.layers)):
            return False
        if not np.array_equal(self.head, other.head):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.kernel, a.in_channels, a.out_channels, a.stride, a.relu, a.acc_int_bits) != (
                b.kernel, b.in_channels, b.out_channels, b.stride, b.relu, b.acc_int_bits
            ):
                return False
            if not all(np.array_equal(getattr(a, n), getattr(b, n)) for n in ("depthwise", "pointwise", "bias")):
                return False
        return True


def _acc_format(int_bits, frac_bits):
    # an accumulator wider than 32 bits is clamped; saturation then covers it
    return FxpFormat(min(32, int_bits + frac_bits), frac_bits)


# --- folding ---------------------------------------------------------------


def fold_batchnorm(net: QuantizedNetwork, acc_frac_bits=ACC_FRAC_BITS) -> FoldedModel:
    """Absorb every batchnorm into its layer and convert to weight codes.

    The statistics go through the weight quantizer exactly as in the eval
    forward pass; the per-channel factor ``gamma / sqrt(sigma^2 + eps)``
    scales the quantized pointwise weights, and the products are quantized
    again.
    """
    if net.quant is None:
        raise ContractError("folding needs a quantized network (quant is None)")
    wf = net.quant.weights
    layers = []
    for i, layer in enumerate(net.layers):
        wd = quantize(layer.depthwise, wf)
        wp = quantize(layer.pointwise, wf)
        bias = np.zeros(layer.out_channels) if layer.bias is None else quantize(layer.bias, wf)
        if layer.bn is not None:
            bn = layer.bn
            var_eps = bn.variance + bn.epsilon
            if np.any(~np.isfinite(var_eps)) or np.any(var_eps <= 0):
                raise NumericError(f"layer {i}: batchnorm variance + epsilon must be positive")
            mu = quantize(bn.mean, wf)
            sig = quantize(np.sqrt(bn.variance), wf)
            denom = np.sqrt(sig**2 + bn.epsilon)
            scale = quantize(bn.scale, wf) / denom
            beta = quantize(bn.bias, wf)
            wp = quantize(wp * scale, wf)
            bias = quantize(beta - mu * scale + bias * scale, wf)
        acc = None
        if layer.acc_formats is not None:
            acc = tuple(f.width_bits - f.precision_bits for f in layer.acc_formats)
        layers.append(
            FoldedLayer(
                layer.kernel, layer.in_channels, layer.out_channels, layer.stride, layer.relu,
                to_code(wd, wf), to_code(wp, wf), to_code(bias, wf), acc,
            )
        )
    return FoldedModel(
        layers, to_code(quantize(net.head_weights, wf), wf), to_code(quantize(float(net.head_bias), wf), wf),
        net.quant, acc_frac_bits, net.input_channels,
    )


def _int_bits_for(peak, margin):
    # sign bit plus enough integer bits for |v| <= 2**(n-1) - 1
    need = 1 + max(1, math.ceil(math.log2(peak + 1.0)))
    return need + margin


def profile_accumulators(model: FoldedModel, windows, margin_bits=1, batch_size=64) -> FoldedModel:
    """Size every accumulator from the largest value seen on ``windows``."""
    net = model.with_acc_bits([None] * len(model.layers)).to_network()
    counter = {"peaks": {}}
    xs = [w.samples if hasattr(w, "samples") else np.asarray(w) for w in windows]
    if not xs:
        raise ContractError("profiling needs at least one window")
    for i in range(0, len(xs), batch_size):
        network_forward(net, np.stack(xs[i : i + batch_size]), counter=counter)
    bits = []
    for layer in net.layers:
        dw, pw = counter["peaks"][id(layer)]
        bits.append((_int_bits_for(dw, margin_bits), _int_bits_for(pw, margin_bits)))
    return model.with_acc_bits(bits)


# --- integer streaming engine ---------------------------------------------


def _bits(v):
    return max(1, int(v).bit_length())


def _dtype_for(bound_bits):
    return np.int64 if bound_bits <= 62 else object


class _Fifo:
    """Bounded row queue holding 2D blocks; ``capacity`` counts rows."""

    def __init__(self, name, capacity, width, dtype):
        self.name = name
        self.capacity = capacity
        self.width = width
        self.dtype = dtype
        self.blocks = deque()
        self.rows = 0
        self.total_in = 0

    @property
    def free(self):
        return self.capacity - self.rows

    def push(self, block):
        if block.shape[0] > self.free:
            raise DeadlockError(f"{self.name}: push of {block.shape[0]} rows exceeds free space {self.free}")
        if block.shape[0]:
            self.blocks.append(block)
            self.rows += block.shape[0]
            self.total_in += block.shape[0]

    def pop(self, n):
        out = []
        while n > 0:
            b = self.blocks[0]
            if b.shape[0] <= n:
                out.append(self.blocks.popleft())
                n -= b.shape[0]
                self.rows -= b.shape[0]
            else:
                out.append(b[:n])
                self.blocks[0] = b[n:]
                self.rows -= n
                n = 0
        if not out:
            return np.zeros((0, self.width), dtype=self.dtype)
        return out[0] if len(out) == 1 else np.concatenate(out)

    def state(self):
        return f"{self.name}: {self.rows}/{self.capacity} rows ({self.total_in} total)"


class _LayerEngine:
    """Depthwise line buffer plus pointwise stage of one folded layer."""

    def __init__(self, index, layer: FoldedLayer, model: FoldedModel, strict, counter):
        self.index = index
        self.layer = layer
        self.k, self.s = layer.kernel, layer.stride
        q = model.quant
        self.p_w, self.p_a = q.weights.precision_bits, q.activations.precision_bits
        self.act = q.activations
        acc = model.acc_formats(layer) or (None, None)
        frac = self.p_a + self.p_w
        self.plans = (self._plan(acc[0], frac), self._plan(acc[1], frac))
        wa, ww = q.activations.width_bits, q.weights.width_bits
        dw_bits = wa + ww - 2 + _bits(layer.kernel)
        pw_bits = wa + ww - 2 + _bits(layer.in_channels + 1)
        self.dtype = _dtype_for(max(dw_bits, pw_bits))
        self.dw = layer.depthwise.astype(self.dtype)
        self.taps = np.arange(layer.kernel)[None, :]
        self.pw = layer.pointwise.astype(self.dtype)
        self.bias = layer.bias.astype(self.dtype) * (1 << self.p_a)
        self.strict = strict
        self.counter = counter
        self.buf = np.zeros((0, layer.in_channels), dtype=self.dtype)
        self.base = 0  # absolute index of buf[0]
        self.skip = 0  # rows still to discard (stride wider than kernel)
        self.consumed = 0
        self.produced = 0

    def n_out(self, consumed):
        return 0 if consumed < self.k else (consumed - self.k) // self.s + 1

    def max_consumable(self, out_free):
        """Rows that can be taken without producing more than ``out_free`` outputs."""
        return self.k - 1 + (self.produced + out_free) * self.s - self.consumed

    def _plan(self, acc_fmt, frac):
        """Shifts and bounds taking a product sum at ``frac`` bits to an activation."""
        act = self.act
        if acc_fmt is None:
            return None, (frac - self.p_a, act.code_lo, act.code_hi)
        p = acc_fmt.precision_bits
        return (frac - p, acc_fmt.code_lo, acc_fmt.code_hi, acc_fmt), (p - self.p_a, act.code_lo, act.code_hi)

    def _requant(self, acc, plan, where):
        first, (shift, lo, hi) = plan
        if first is not None:
            s0, alo, ahi, fmt = first
            acc = round_shift(acc, s0)
            if self.strict and acc.size and (acc.min() < alo or acc.max() > ahi):
                raise CodeRangeError(f"layer {self.index} {where} accumulator leaves {fmt}")
            acc = saturate_code(acc, alo, ahi)
        return saturate_code(round_shift(acc, shift), lo, hi)

    def push(self, rows):
        rows = rows.astype(self.dtype, copy=False)
        n = rows.shape[0]
        self.consumed += n
        if self.skip:
            drop = min(self.skip, n)
            rows = rows[drop:]
            self.skip -= drop
            self.base += drop
        self.buf = np.concatenate([self.buf, rows]) if self.buf.shape[0] else rows
        target = self.n_out(self.consumed)
        t0, t1 = self.produced, target
        if t1 == t0:
            return np.zeros((0, self.layer.out_channels), dtype=self.dtype)
        k, s = self.k, self.s
        start = t0 * s - self.base
        rows = start + s * np.arange(t1 - t0)[:, None] + self.taps
        acc = (self.buf[rows] * self.dw).sum(axis=1)
        d = self._requant(acc, self.plans[0], "depthwise")
        z = d @ self.pw + self.bias
        out = self._requant(z, self.plans[1], "pointwise")
        if self.layer.relu:
            out = np.where(out > 0, out, 0).astype(self.dtype)
        if self.counter is not None:
            self.counter["macs"] = self.counter.get("macs", 0) + (t1 - t0) * self.layer.in_channels * (
                k + self.layer.out_channels
            )
        self.produced = t1
        drop = t1 * s - self.base
        if drop >= self.buf.shape[0]:
            self.skip = drop - self.buf.shape[0]
            self.base += self.buf.shape[0]
            self.buf = self.buf[:0]
        elif drop > 0:
            self.buf = self.buf[drop:]
            self.base += drop
        return out


class _HeadEngine:
    def __init__(self, model: FoldedModel, length):
        q = model.quant
        self.p_a = q.activations.precision_bits
        bound = q.activations.width_bits + q.weights.width_bits - 2 + _bits((length + 1) * (model.head.size + 1))
        self.dtype = _dtype_for(bound)
        self.w = model.head.astype(self.dtype)
        self.b = model.head_bias
        self.sums = np.zeros(model.head.size, dtype=self.dtype)
        self.rows = 0

    def push(self, rows):
        if rows.shape[0]:
            self.sums = self.sums + rows.astype(self.dtype).sum(axis=0)
            self.rows += rows.shape[0]

    def finish(self):
        if self.rows == 0:
            raise InfeasibleShapeError("head received no rows")
        den = self.rows << self.p_a
        num = int((self.sums * self.w).sum()) + self.b * den
        return num > 0, int(div_round(num, den))


@dataclass
class StreamResult:
    is_af: bool
    logit_code: int
    macs: int
    firings: int = 0
    trace: list = field(default_factory=list)


def _input_codes(model, window):
    x = np.asarray(getattr(window, "samples", window), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_channels:
        raise ContractError(f"window must be (H, {model.input_channels}), got {x.shape}")
    act = model.quant.activations
    return to_code(quantize(x, act), act)


def _check_length(model, h):
    for i, layer in enumerate(model.layers):
        if h < layer.kernel:
            raise InfeasibleShapeError(f"layer {i}: length {h} shorter than kernel {layer.kernel}")
        h = output_length(h, layer.kernel, layer.stride)
    return h


def _default_capacities(model):
    # one depthwise line buffer (K rows of C_in) in front of every layer,
    # a single-row hand-off into the pooled head
    return [l.kernel for l in model.layers] + [1]


def stream_infer(model: FoldedModel, window, *, schedule="sequential", seed=None, capacities=None,
                 strict=False, max_burst=None) -> StreamResult:
    """Integer-only pipelined inference of one window.

    ``schedule`` is ``"sequential"`` (round-robin, greedy bursts), ``"random"``
    (a stage and burst size drawn from ``seed`` at every step) or
    ``"threaded"`` (one thread per stage, blocking queues). ``capacities``
    overrides the FIFO sizes in rows, one entry per layer plus the head.
    ``strict`` turns accumulator saturation into ``CodeRangeError``.
    """
    codes = _input_codes(model, window)
    _check_length(model, codes.shape[0])
    caps = list(capacities) if capacities is not None else _default_capacities(model)
    if len(caps) != len(model.layers) + 1:
        raise ContractError("capacities need one entry per layer plus one for the head")
    if schedule == "threaded":
        return _run_threaded(model, codes, caps, strict)
    if schedule not in ("sequential", "random"):
        raise ContractError(f"unknown schedule {schedule!r}")
    rng = np.random.default_rng(seed) if schedule == "random" else None
    return _run_discrete(model, codes, caps, strict, rng, max_burst)


def _build(model, codes, strict):
    counter = {}
    engines = [_LayerEngine(i, l, model, strict, counter) for i, l in enumerate(model.layers)]
    head = _HeadEngine(model, codes.shape[0])
    return counter, engines, head


def _run_discrete(model, codes, caps, strict, rng, max_burst):
    counter, engines, head = _build(model, codes, strict)
    src_dtype = engines[0].dtype
    codes = codes.astype(src_dtype)
    fifos = [
        _Fifo(f"fifo{i}", caps[i], l.in_channels, e.dtype) for i, (l, e) in enumerate(zip(model.layers, engines))
    ]
    fifos.append(_Fifo(f"fifo{len(engines)}", caps[-1], model.layers[-1].out_channels, engines[-1].dtype))
    sent = 0
    h = codes.shape[0]

    def room_source():
        return min(h - sent, fifos[0].free)

    def room_layer(i):
        return min(fifos[i].rows, engines[i].max_consumable(fifos[i + 1].free))

    def room_head():
        return fifos[-1].rows

    def fire(stage, burst):
        nonlocal sent
        if stage == 0:
            n = min(room_source(), burst)
            fifos[0].push(codes[sent : sent + n])
            sent += n
        elif stage <= len(engines):
            i = stage - 1
            n = min(room_layer(i), burst)
            if n > 0:
                fifos[i + 1].push(engines[i].push(fifos[i].pop(n)))
        else:
            n = min(room_head(), burst)
            if n > 0:
                head.push(fifos[-1].pop(n))
        return n

    n_stages = len(engines) + 2

    def room(stage):
        if stage == 0:
            return room_source()
        if stage <= len(engines):
            return room_layer(stage - 1)
        return room_head()

    def done():
        return sent == h and all(f.rows == 0 for f in fifos)

    def stalled():
        trace = [f"source: {sent}/{h} rows sent"]
        for i, e in enumerate(engines):
            trace.append(f"layer{i}: consumed={e.consumed} produced={e.produced} kernel={e.k} stride={e.s}")
        trace += [f.state() for f in fifos]
        return DeadlockError("streaming pipeline stalled", trace)

    firings = 0
    limit = max_burst or h
    while not done():
        if rng is None:
            moved = 0
            for st in range(n_stages):
                n = fire(st, limit)
                moved += n
                firings += n > 0
            if not moved:
                raise stalled()
            continue
        ready = [st for st in range(n_stages) if room(st) > 0]
        if not ready:
            raise stalled()
        st = ready[int(rng.integers(len(ready)))]
        burst = int(rng.integers(1, limit + 1)) if rng.random() < 0.5 else 1
        fire(st, burst)
        firings += 1
    is_af, code = head.finish()
    return StreamResult(is_af, code, counter.get("macs", 0), firings)


_STOP = object()


def _run_threaded(model, codes, caps, strict, timeout=30.0):
    bad = [i for i, c in enumerate(caps) if c < 1]
    if bad:
        raise DeadlockError("threaded pipeline needs every queue to hold at least one row",
                            [f"fifo{i}: capacity {caps[i]}" for i in bad])
    counter, engines, head = _build(model, codes, strict)
    queues = [queue.Queue(maxsize=c) for c in caps]
    errors = []

    def put(q, item):
        q.put(item, timeout=timeout)

    def source():
        for row in codes.astype(engines[0].dtype):
            put(queues[0], row[None, :])
        put(queues[0], _STOP)

    def layer_worker(i):
        while True:
            item = queues[i].get(timeout=timeout)
            if item is _STOP:
                put(queues[i + 1], _STOP)
                return
            out = engines[i].push(item)
            for row in out:
                put(queues[i + 1], row[None, :])

    def head_worker():
        while True:
            item = queues[-1].get(timeout=timeout)
            if item is _STOP:
                return
            head.push(item)

    def guard(fn, *args):
        def run():
            try:
                fn(*args)
            except queue.Empty:
                errors.append(DeadlockError("pipeline stage starved", [f"{fn.__name__}{args}"]))
            except queue.Full:
                errors.append(DeadlockError("pipeline stage blocked", [f"{fn.__name__}{args}"]))
            except Exception as exc:  # re-raised in the caller
                errors.append(exc)
        return threading.Thread(target=run, daemon=True)

    threads = [guard(source)] + [guard(layer_worker, i) for i in range(len(engines))] + [guard(head_worker)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    is_af, code = head.finish()
    return StreamResult(is_af, code, counter.get("macs", 0), len(codes))


def stream_predictions(model: FoldedModel, windows, **kwargs):
    return [stream_infer(model, w, **kwargs) for w in windows]


def write_predictions(path, window_ids, results, labels=None):
    """CSV of ``window_id,logit_code,label`` (label = AF / not-AF prediction)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["window_id", "logit_code", "label"])
        for wid, res in zip(window_ids, results):
            wr.writerow([wid, res.logit_code, "AF" if res.is_af else "not-AF"])


# --- export blob -----------------------------------------------------------

_GLOBAL = struct.Struct("<4sHBBBB")  # magic, version, layers, input channels, acc frac bits, flags
_LAYER = struct.Struct("<HHHHBBBBBBB")


def _code_bytes(fmt: FxpFormat):
    return (fmt.width_bits + 7) // 8


def _pack_codes(codes, nbytes):
    arr = np.asarray(codes, dtype=np.int64).reshape(-1)
    raw = arr.astype("<i8").view(np.uint8).reshape(-1, 8)[:, :nbytes]
    return raw.tobytes()


def _unpack_codes(buf, n, nbytes):
    raw = np.frombuffer(buf, dtype=np.uint8, count=n * nbytes).reshape(n, nbytes)
    full = np.zeros((n, 8), dtype=np.uint8)
    full[:, :nbytes] = raw
    vals = full.view("<i8").reshape(n).astype(np.int64)
    shift = 64 - 8 * nbytes
    return (vals << shift) >> shift  # sign-extend


def encode(model: FoldedModel) -> bytes:
    q = model.quant
    wf, af = q.weights, q.activations
    if len(model.layers) > 255:
        raise ContractError("at most 255 layers fit the blob header")
    flags = int(wf.saturate_to_code) | int(af.saturate_to_code) << 1
    parts = [_GLOBAL.pack(MAGIC, VERSION, len(model.layers), model.input_channels, model.acc_frac_bits, flags)]
    for l in model.layers:
        dw_b, pw_b = l.acc_int_bits or (0, 0)
        parts.append(
            _LAYER.pack(
                l.kernel, l.in_channels, l.out_channels, l.stride,
                wf.width_bits, wf.precision_bits, af.width_bits, af.precision_bits,
                int(l.relu), dw_b, pw_b,
            )
        )
    nb = _code_bytes(wf)
    for l in model.layers:
        parts += [_pack_codes(l.depthwise, nb), _pack_codes(l.pointwise, nb), _pack_codes(l.bias, nb)]
    parts += [_pack_codes(model.head, nb), _pack_codes([model.head_bias], nb)]
    return b"".join(parts)


def decode(blob: bytes) -> FoldedModel:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not an AFNN blob", offset=0)
    if len(blob) < _GLOBAL.size:
        raise FormatError("truncated header", offset=len(blob))
    _, version, n_layers, c_in, frac, flags = _GLOBAL.unpack_from(blob, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if n_layers == 0:
        raise FormatError("blob declares no layers", offset=6)
    pos = _GLOBAL.size
    heads = []
    for _ in range(n_layers):
        if pos + _LAYER.size > len(blob):
            raise FormatError("truncated layer header", offset=len(blob))
        heads.append((pos, _LAYER.unpack_from(blob, pos)))
        pos += _LAYER.size
    first = heads[0][1][4:8]
    for off, h in heads:
        if h[4:8] != first:
            raise FormatError("layers disagree on word formats", offset=off)
    try:
        wf = FxpFormat(first[0], first[1], bool(flags & 1))
        af = FxpFormat(first[2], first[3], bool(flags & 2))
    except ContractError as exc:
        raise FormatError(f"invalid word format: {exc}", offset=heads[0][0] + 8) from None
    nb = _code_bytes(wf)

    def take(n):
        nonlocal pos
        if pos + n * nb > len(blob):
            raise FormatError("truncated code payload", offset=len(blob))
        out = _unpack_codes(blob[pos : pos + n * nb], n, nb)
        pos += n * nb
        return out

    layers = []
    for off, (k, ci, co, s, _, _, _, _, relu, dw_b, pw_b) in heads:
        if min(k, ci, co, s) < 1:
            raise FormatError("layer sizes must be positive", offset=off)
        acc = None if dw_b == 0 and pw_b == 0 else (dw_b, pw_b)
        layers.append(FoldedLayer(k, ci, co, s, bool(relu), take(k * ci), take(ci * co), take(co), acc))
    head = take(layers[-1].out_channels)
    head_bias = int(take(1)[0])
    if pos != len(blob):
        raise FormatError("trailing bytes after payload", offset=pos)
    try:
        return FoldedModel(layers, head, head_bias, QuantPair(wf, af), frac, c_in)
    except ContractError as exc:
        raise FormatError(f"inconsistent model: {exc}", offset=_GLOBAL.size) from None


def export(model: FoldedModel, path) -> int:
    """Write the blob; returns the number of bytes written."""
    blob = encode(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load(path) -> FoldedModel:
    with open(path, "rb") as fh:
        return decode(fh.read())
