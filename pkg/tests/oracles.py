"""Independent reference implementations used by the tests."""

import itertools

import numpy as np

from afnas.fxp import quantize, ste_mask
from afnas.nas import Genome, Individual, ObjectiveVector
from afnas.nn import bce_with_logits, build_network, forward_train, loss_and_grads, param_arrays


class SteSurrogate:
    """Linearise every quantizer around a fixed parameter point.

    The first pass records, per call site, the pre-quantizer value ``u0``,
    ``Q(u0)`` and the clipped-STE mask. Later passes return
    ``Q(u0) + (u - u0) * mask(u0)``: a smooth function whose exact derivative
    at ``u0`` is the straight-through gradient, so plain finite differences of
    it check the analytic backward pass of the quantized network.
    """

    def __init__(self):
        self.sites = []
        self.recording = True
        self.i = 0

    def __call__(self, u, fmt):
        if fmt is None:
            return u, 1.0
        if self.recording:
            u0 = np.array(u, dtype=np.float64, copy=True)
            q0, m0 = quantize(u0, fmt), ste_mask(u0, fmt)
            self.sites.append((u0, q0, m0))
            return q0, m0
        u0, q0, m0 = self.sites[self.i]
        self.i += 1
        return q0 + (u - u0) * m0, m0

    def replay(self):
        self.recording = False
        self.i = 0
        return self


def _loss(net, x, t, quantizer):
    logits, _ = forward_train(net, x, quantizer)
    return bce_with_logits(logits, t)[0]


def finite_difference_check(net, x, t, h=1e-5, surrogate=False):
    """Relative error between analytic and central-difference gradients."""
    if surrogate:
        sur = SteSurrogate()
        _, grads, _ = loss_and_grads(net, x, t, quantizer=sur)
        quantizer = sur.replay
    else:
        _, grads, _ = loss_and_grads(net, x, t)
        quantizer = lambda: None  # noqa: E731
    num = []
    for p in param_arrays(net):
        g = np.zeros(p.shape)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = _loss(net, x, t, quantizer())
            flat[i] = old - h
            down = _loss(net, x, t, quantizer())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        num.append(g)
    a = np.concatenate([np.ravel(g) for g in grads])
    n = np.concatenate([np.ravel(g) for g in num])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale), a, n


def relu_kinks(net, x):
    """Count ReLU inputs sitting exactly on the kink in the quantized forward."""
    _, tape = forward_train(net, x)
    return sum(int(np.count_nonzero(c["b"] == 0)) for layer, c in zip(net.layers, tape["layers"]) if layer.relu)


def random_small_net(rng, quant, h_max=256):
    """1-3 layers, small kernels/channels, length <= h_max, random batchnorm."""
    n_layers = int(rng.integers(1, 4))
    specs = []
    for _ in range(n_layers):
        k = int(rng.choice([1, 2, 3, 4]))
        specs.append((k, int(rng.integers(1, 5)), int(rng.integers(1, k + 1))))
    net = build_network(specs, quant, seed=int(rng.integers(2**31)), relu_last=bool(rng.integers(2)))
    for layer in net.layers:
        c = layer.out_channels
        layer.bn.scale[:] = rng.uniform(0.5, 1.5, c)
        layer.bn.bias[:] = rng.uniform(-0.3, 0.3, c)
        layer.bn.mean[:] = rng.uniform(-0.2, 0.2, c)
        layer.bn.variance[:] = rng.uniform(0.5, 1.5, c)
    length = int(rng.integers(32, h_max + 1))
    return net, length


def dominates_brute(a, b):
    """Constraint domination written out case by case."""
    if a.failed:
        return False
    if b.failed:
        return True
    fa, fb = a.violation == 0, b.violation == 0
    if fa and not fb:
        return True
    if fb and not fa:
        return False
    if not fa:
        return a.violation < b.violation
    x, y = a.objectives.as_tuple(), b.objectives.as_tuple()
    no_worse = all(x[i] <= y[i] for i in range(len(x)))
    better = any(x[i] < y[i] for i in range(len(x)))
    return no_worse and better


def front_brute(population):
    pop = [p for p in population if not p.failed]
    return [p for p in pop if not any(dominates_brute(q, p) for q in pop if q is not p)]


def hypervolume_inclusion_exclusion(points, ref):
    pts = [tuple(p) for p in points if all(v < r for v, r in zip(p, ref))]
    total = 0.0
    for r in range(1, len(pts) + 1):
        for subset in itertools.combinations(pts, r):
            corner = np.max(np.array(subset), axis=0)
            total += (-1) ** (r + 1) * float(np.prod(np.array(ref) - corner))
    return total


def ind(obj, violation=0.0, failed=False, key=0):
    g = Genome(((4, 8, 2),), (16, 8))
    o = None if obj is None else ObjectiveVector(*obj)
    return Individual(g, o, violation, 0, failed, 0, key)


def random_population(rng, n):
    """Coarse objective grid so ties, duplicates and infeasible mixes are common."""
    pop = []
    for i in range(n):
        o = (rng.integers(0, 5) / 4, rng.integers(0, 5) / 4, rng.integers(0, 5) / 4, int(rng.integers(1, 4)),
             int(rng.integers(100, 104)), int(rng.choice([24, 32])), int(rng.integers(10, 13)))
        r = rng.random()
        viol = 0.0 if r < 0.6 else float(rng.integers(1, 4)) / 10
        pop.append(ind(o, viol, failed=r > 0.97, key=i))
    return pop
