"""Evolutionary multi-objective architecture search.

Genomes are up to five depthwise-separable layers ``(K, C_out, S)`` plus one
fixed-point pair shared by weights and activations. Each candidate is trained
briefly and scored on seven minimised objectives. Selection is elitist: the
archive keeps every evaluated individual and the front is recomputed from it
under constraint domination (feasible beats infeasible, smaller violation
beats larger, Pareto dominance among feasibles).

Every generation is appended to a JSON-lines run log, which is enough to
resume a search or plot the front afterwards.
"""

from __future__ import annotations

import csv
import json
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import cost
from .errors import ContractError, GenerationError, TrainingFailure, UndefinedMetricError
from .fxp import SEARCH_QUANT_PAIRS, QuantPair
from .metrics import evaluate as evaluate_counts
from .metrics import noise_specificity, sensitivity, specificity
from .nn import build_network, param_count
from .train import TrainConfig, train

__all__ = [
    "KERNELS",
    "CHANNELS",
    "STRIDES",
    "HV_REFERENCE",
    "Genome",
    "ObjectiveVector",
    "Individual",
    "SearchConfig",
    "random_genome",
    "mutate",
    "crossover",
    "repair",
    "evaluate",
    "rate_violation",
    "dominates",
    "pareto_front",
    "crowding_distance",
    "hypervolume",
    "run_search",
    "read_log",
    "write_pareto_csv",
]

KERNELS = tuple(2**i for i in range(9))  # 1 .. 256
CHANNELS = tuple(2**i for i in range(2, 11))  # 4 .. 1024
STRIDES = tuple(2**i for i in range(7))  # 1 .. 64
HV_REFERENCE = (1.0, 1.0, 1.0, 5.0, 1e6, 64.0, 1e7)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class Genome:
    layers: tuple
    quant: QuantPair

    def __post_init__(self):
        layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        if not 1 <= len(layers) <= 5:
            raise ContractError(f"a genome has 1..5 layers, got {len(layers)}")
        for k, c, s in layers:
            if k not in KERNELS or c not in CHANNELS or s not in STRIDES:
                raise ContractError(f"layer {(k, c, s)} outside the search space")
        object.__setattr__(self, "layers", layers)
        if isinstance(self.quant, tuple):
            object.__setattr__(self, "quant", QuantPair.of(*self.quant))
        w = self.quant.weights
        if (w.width_bits, w.precision_bits) not in SEARCH_QUANT_PAIRS or self.quant.activations != w:
            raise ContractError(f"quant pair {self.quant.as_tuple()} outside the search space")

    @property
    def quant_tuple(self):
        w = self.quant.weights
        return (w.width_bits, w.precision_bits)

    def to_dict(self):
        return {"layers": [list(l) for l in self.layers], "quant": list(self.quant_tuple)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(l) for l in d["layers"]), tuple(d["quant"]))

    def __str__(self):
        body = "-".join(f"k{k}c{c}s{s}" for k, c, s in self.layers)
        return f"{body}@q{self.quant_tuple[0]}.{self.quant_tuple[1]}"

    @classmethod
    def parse(cls, text):
        """Inverse of ``str``: ``k16c16s8-k8c32s4@q16.8``."""
        m = _GENOME_RE.fullmatch(text.strip())
        if not m:
            raise ContractError(f"cannot parse genome {text!r} (expected e.g. k16c16s8-k8c32s4@q16.8)")
        layers = tuple(tuple(int(v) for v in lm) for lm in _LAYER_RE.findall(m.group(1)))
        return cls(layers, (int(m.group(2)), int(m.group(3))))


_LAYER_RE = re.compile(r"k(\d+)c(\d+)s(\d+)")
_GENOME_RE = re.compile(r"((?:k\d+c\d+s\d+)(?:-k\d+c\d+s\d+)*)@q(\d+)\.(\d+)")


@dataclass(frozen=True)
class ObjectiveVector:
    fnr: float
    fpr: float
    noise_fpr: float
    n_layers: int
    params: int
    total_bits: int
    max_layer_output: int

    def __post_init__(self):
        for name in ("fnr", "fpr", "noise_fpr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")

    def as_tuple(self):
        return (self.fnr, self.fpr, self.noise_fpr, self.n_layers, self.params, self.total_bits,
                self.max_layer_output)


@dataclass
class Individual:
    genome: Genome
    objectives: ObjectiveVector | None
    violation: float
    train_seed: int
    failed: bool = False
    generation: int = 0
    index: int = 0
    test_metrics: dict = field(default_factory=dict)

    @property
    def feasible(self):
        return not self.failed and self.violation == 0.0

    @property
    def key(self):
        return f"g{self.generation}i{self.index}"

    def to_dict(self):
        return {
            "generation": self.generation,
            "index": self.index,
            "genome": self.genome.to_dict(),
            "objectives": None if self.objectives is None else asdict(self.objectives),
            "violation": self.violation,
            "feasible": self.feasible,
            "failed": self.failed,
            "train_seed": self.train_seed,
            "test_metrics": self.test_metrics,
        }

    @classmethod
    def from_dict(cls, d):
        obj = d.get("objectives")
        return cls(
            genome=Genome.from_dict(d["genome"]),
            objectives=None if obj is None else ObjectiveVector(**obj),
            violation=float(d["violation"]),
            train_seed=int(d["train_seed"]),
            failed=bool(d.get("failed", False)),
            generation=int(d.get("generation", 0)),
            index=int(d.get("index", 0)),
            test_metrics=dict(d.get("test_metrics") or {}),
        )


@dataclass(frozen=True)
class SearchConfig:
    generations: int = 190
    offspring: int = 8
    seed: int = 0
    mutation_prob: float = 0.2
    tournament_size: int = 2
    constraints: cost.ConstraintConfig = field(default_factory=cost.ConstraintConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    max_retries: int = 10_000
    workers: int = 1

    def __post_init__(self):
        if self.generations < 1 or self.offspring < 1:
            raise ContractError("generations and offspring must be >= 1")
        if not 0.0 <= self.mutation_prob <= 1.0:
            raise ContractError("mutation_prob must lie in [0, 1]")
        if self.tournament_size < 1:
            raise ContractError("tournament_size must be >= 1")


# --- operators ---------------------------------------------------------------


def _is_valid(genome, cfg, input_length):
    return not cost.validate(genome, cfg, input_length)


def _draw_layer(rng):
    return (KERNELS[rng.integers(len(KERNELS))], CHANNELS[rng.integers(len(CHANNELS))],
            STRIDES[rng.integers(len(STRIDES))])


def _draw_quant(rng):
    return SEARCH_QUANT_PAIRS[rng.integers(len(SEARCH_QUANT_PAIRS))]


def random_genome(seed, cfg: cost.ConstraintConfig | None = None, input_length=None, max_retries=10_000) -> Genome:
    """Random valid genome with a uniformly drawn layer count.

    Layers are redrawn for a fixed count until the genome validates. Plain
    rejection over the whole space would mostly return one-layer genomes,
    since deeper draws fail the shape and MAC limits far more often.
    """
    cfg = cfg or cost.ConstraintConfig()
    rng = _rng(seed)
    counts = list(rng.permutation(np.arange(1, cfg.max_layers + 1)))
    per_count = max(1, max_retries // len(counts))
    for n in counts:
        for _ in range(per_count):
            g = Genome(tuple(_draw_layer(rng) for _ in range(int(n))), _draw_quant(rng))
            if _is_valid(g, cfg, input_length):
                return g
    raise GenerationError(f"no valid genome after {per_count * len(counts)} draws")


def _step(choices, value, up):
    i = choices.index(value) + (1 if up else -1)
    return choices[min(max(i, 0), len(choices) - 1)]


def mutate(g: Genome, seed, prob=0.2, max_layers=5) -> Genome:
    """Each field moves one step in its allowed set with probability ``prob``."""
    rng = _rng(seed)
    layers = []
    for k, c, s in g.layers:
        if rng.random() < prob:
            k = _step(KERNELS, k, rng.random() < 0.5)
        if rng.random() < prob:
            c = _step(CHANNELS, c, rng.random() < 0.5)
        if rng.random() < prob:
            s = _step(STRIDES, s, rng.random() < 0.5)
        layers.append((k, c, s))
    quant = g.quant
    if rng.random() < prob:
        quant = _draw_quant(rng)
    if rng.random() < prob:
        grow = rng.random() < 0.5
        if grow and len(layers) < max_layers:
            layers.insert(int(rng.integers(len(layers) + 1)), _draw_layer(rng))
        elif not grow and len(layers) > 1:
            del layers[int(rng.integers(len(layers)))]
    return Genome(tuple(layers), quant)


def crossover(a: Genome, b: Genome, seed) -> Genome:
    """Single-point splice: head of ``a``, tail of ``b``; quant pair from either."""
    rng = _rng(seed)
    cut = int(rng.integers(1, min(len(a.layers), len(b.layers)) + 1))
    quant = a.quant if rng.random() < 0.5 else b.quant
    return Genome(a.layers[:cut] + b.layers[cut:], quant)


def repair(g: Genome, cfg: cost.ConstraintConfig | None = None) -> Genome:
    """Clamp kernels to ``max_kernel`` and strides to their kernel."""
    cfg = cfg or cost.ConstraintConfig()
    k_max = max(k for k in KERNELS if k <= cfg.max_kernel)
    layers = []
    for k, c, s in g.layers[: cfg.max_layers]:
        k = min(k, k_max)
        s = min(s, k)
        layers.append((k, c, s))
    return Genome(tuple(layers), g.quant)


def make_offspring(parents, seed, cfg: SearchConfig, input_length=None, avoid=()) -> Genome:
    """Crossover + mutation + repair, redrawn until the child validates.

    Children whose string form is in ``avoid`` are redrawn too, so the budget
    is not spent retraining architectures that were already evaluated.
    """
    rng = _rng(seed)
    c = cfg.constraints
    for _ in range(cfg.max_retries // 10 or 1):
        i, j = rng.integers(len(parents)), rng.integers(len(parents))
        child = crossover(parents[i], parents[j], rng)
        child = repair(mutate(child, rng, cfg.mutation_prob, c.max_layers), c)
        if _is_valid(child, c, input_length) and str(child) not in avoid:
            return child
    for _ in range(cfg.max_retries):
        child = random_genome(rng, c, input_length, cfg.max_retries)
        if str(child) not in avoid:
            return child
    return child


# --- evaluation --------------------------------------------------------------


def rate_violation(sens, spec, noise_spec, floor=0.7):
    return sum(max(0.0, floor - m) for m in (sens, spec, noise_spec))


def _rate(fn, counts):
    try:
        return fn(counts)
    except UndefinedMetricError:
        return 0.0


def _rates(net, windows):
    overall, noise = evaluate_counts(net, windows)
    return _rate(sensitivity, overall), _rate(specificity, overall), _rate(noise_specificity, noise)


def evaluate(g: Genome, data, budget: TrainConfig, cfg: cost.ConstraintConfig | None = None,
             train_seed=0, generation=0, index=0) -> Individual:
    """Train ``g`` and score it on the validation partition."""
    cfg = cfg or cost.ConstraintConfig()
    h = data.train[0].length
    hard = cost.validate(g, cfg, h)
    if hard:
        worst = ObjectiveVector(1.0, 1.0, 1.0, len(g.layers), param_count(g.layers), g.quant.total_bits,
                                int(HV_REFERENCE[-1]))
        return Individual(g, worst, 3 * cfg.metric_floor + len(hard), train_seed, False, generation, index)
    rep = cost.report(g, h)
    net = build_network(list(g.layers), g.quant, seed=train_seed)
    try:
        net, _ = train(net, data, replace(budget, seed=train_seed))
    except TrainingFailure:
        return Individual(g, None, float("inf"), train_seed, True, generation, index)
    sens, spec, nspec = _rates(net, list(data.validation))
    obj = ObjectiveVector(1.0 - sens, 1.0 - spec, 1.0 - nspec, len(g.layers), rep.params, rep.total_bits,
                          rep.max_layer_output)
    test = {}
    if data.test:
        t = _rates(net, list(data.test))
        test = {"sensitivity": t[0], "specificity": t[1], "noise_specificity": t[2]}
    return Individual(g, obj, rate_violation(sens, spec, nspec, cfg.metric_floor), train_seed, False,
                      generation, index, test)


# --- dominance and fronts ----------------------------------------------------


def _pareto_dominates(a, b):
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def dominates(a: Individual, b: Individual) -> bool:
    """Constraint domination."""
    if a.failed or b.failed:
        return not a.failed and b.failed
    if a.feasible != b.feasible:
        return a.feasible
    if not a.feasible:
        return a.violation < b.violation
    return _pareto_dominates(a.objectives.as_tuple(), b.objectives.as_tuple())


def _nondominated_rows(f):
    """Indices of the rows of ``f`` not Pareto-dominated by any other row."""
    order = np.lexsort(f.T[::-1])
    kept = []
    for i in order:
        if kept:
            m = f[kept]
            if np.any(np.all(m <= f[i], axis=1) & np.any(m < f[i], axis=1)):
                continue
        kept.append(i)
    return sorted(kept)


def pareto_front(population):
    """Members of ``population`` not constraint-dominated by any other member."""
    pop = [p for p in population if not p.failed]
    feas = [p for p in pop if p.feasible]
    if not feas:
        if not pop:
            return []
        best = min(p.violation for p in pop)
        return [p for p in pop if p.violation == best]
    f = np.array([p.objectives.as_tuple() for p in feas], dtype=np.float64)
    return [feas[i] for i in _nondominated_rows(f)]


def crowding_distance(front):
    """Per-member crowding distance (boundary members get ``inf``)."""
    n = len(front)
    if n == 0:
        return np.zeros(0)
    if n <= 2:
        return np.full(n, np.inf)
    f = np.array(
        [p.objectives.as_tuple() if p.objectives is not None else (1.0,) * 7 for p in front], dtype=np.float64
    )
    d = np.zeros(n)
    for j in range(f.shape[1]):
        order = np.argsort(f[:, j], kind="stable")
        span = f[order[-1], j] - f[order[0], j]
        d[order[0]] = d[order[-1]] = np.inf
        if span > 0:
            d[order[1:-1]] += (f[order[2:], j] - f[order[:-2], j]) / span
    return d


def hypervolume(points, reference=HV_REFERENCE) -> float:
    """Exact dominated hypervolume of minimisation ``points`` below ``reference``."""
    ref = np.asarray(reference, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, ref.size)
    pts = pts[np.all(pts < ref, axis=1)]
    if pts.shape[0] == 0:
        return 0.0
    pts = np.unique(pts, axis=0)
    pts = pts[_nondominated_rows(pts)]
    return _wfg(pts, ref)


def _wfg(pts, ref):
    if pts.shape[0] == 0:
        return 0.0
    if pts.shape[1] == 1:
        return float(ref[0] - pts[:, 0].min())
    # sort by the last objective so the limit sets shrink quickly
    pts = pts[np.argsort(pts[:, -1])[::-1]]
    total = 0.0
    for i in range(pts.shape[0]):
        p = pts[i]
        rest = pts[i + 1 :]
        incl = float(np.prod(ref - p))
        if rest.shape[0]:
            limited = np.unique(np.maximum(rest, p), axis=0)
            limited = limited[_nondominated_rows(limited)]
            total += incl - _wfg(limited, ref)
        else:
            total += incl
    return total


def front_hypervolume(front):
    pts = [p.objectives.as_tuple() for p in front if p.feasible]
    return hypervolume(pts) if pts else 0.0


# --- search loop -------------------------------------------------------------


def _tournament(front, crowd, rng, size):
    idx = rng.integers(len(front), size=size)
    best = max(idx, key=lambda i: (crowd[i], -i))
    return front[best].genome


def _violation_tournament(pool, rng, size):
    # nothing feasible yet: draw from everything evaluated, lower violation wins
    idx = rng.integers(len(pool), size=size)
    return pool[min(idx, key=lambda i: (pool[i].violation, i))].genome


def _evaluate_task(args):
    genome, data, budget, constraints, seed, gen, idx = args
    return evaluate(genome, data, budget, constraints, seed, gen, idx)


def _workers(cfg):
    cap = os.environ.get("AFNAS_THREADS")
    n = cfg.workers
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ContractError(f"AFNAS_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n, cfg.offspring))


def read_log(path):
    """Header and generation records of a run log."""
    header, gens = None, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "header":
                header = rec
            elif rec.get("kind") == "generation":
                gens.append(rec)
    return header, gens


def _dump(rec):
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def _config_record(cfg: SearchConfig, input_length):
    return {
        "kind": "header",
        "generations": cfg.generations,
        "offspring": cfg.offspring,
        "seed": cfg.seed,
        "mutation_prob": cfg.mutation_prob,
        "tournament_size": cfg.tournament_size,
        "constraints": asdict(cfg.constraints),
        "train": {k: v for k, v in asdict(cfg.train).items() if k != "augment"},
        "augment": None if cfg.train.augment is None else asdict(cfg.train.augment),
        "input_length": input_length,
    }


def run_search(cfg: SearchConfig, data, log_path=None, progress=None):
    """Run (or resume) a search. Returns ``(front, archive)``.

    With ``log_path`` set, every generation is appended to that JSON-lines
    file; an existing log with a matching header is replayed first and the
    search continues after its last generation.
    """
    h = data.train[0].length
    header = _config_record(cfg, h)
    archive, start = [], 1
    if log_path is not None and os.path.exists(log_path) and os.path.getsize(log_path) > 0:
        old_header, gens = read_log(log_path)
        if old_header is not None and {k: v for k, v in old_header.items() if k != "generations"} != {
            k: v for k, v in json.loads(_dump(header)).items() if k != "generations"
        }:
            raise ContractError(f"{log_path} was written with a different configuration")
        for rec in gens:
            archive.extend(Individual.from_dict(d) for d in rec["offspring"])
        start = len(gens) + 1
        if old_header is None:
            with open(log_path, "a") as fh:
                fh.write(_dump(header) + "\n")
    elif log_path is not None:
        with open(log_path, "w") as fh:
            fh.write(_dump(header) + "\n")

    workers = _workers(cfg)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for gen in range(start, cfg.generations + 1):
            rng = np.random.default_rng([cfg.seed, gen])
            front = pareto_front(archive)
            genomes = []
            seen = {str(p.genome) for p in archive}
            for idx in range(cfg.offspring):
                child_seed = derive_seed(cfg.seed, gen, idx, 1)
                if not front:
                    genomes.append(random_genome(child_seed, cfg.constraints, h, cfg.max_retries))
                elif not front[0].feasible:
                    ranked = [p for p in archive if not p.failed]
                    parents = [_violation_tournament(ranked, rng, cfg.tournament_size) for _ in range(2)]
                else:
                    crowd = crowding_distance(front)
                    parents = [_tournament(front, crowd, rng, cfg.tournament_size) for _ in range(2)]
                if front:
                    genomes.append(make_offspring(parents, child_seed, cfg, h, seen))
                seen.add(str(genomes[-1]))
            tasks = [
                (g, data, cfg.train, cfg.constraints, derive_seed(cfg.seed, gen, idx, 2), gen, idx)
                for idx, g in enumerate(genomes)
            ]
            if pool is None:
                children = [_evaluate_task(t) for t in tasks]
            else:
                children = list(pool.map(_evaluate_task, tasks))
            archive.extend(children)
            front = pareto_front(archive)
            rec = {
                "kind": "generation",
                "generation": gen,
                "offspring": [c.to_dict() for c in children],
                "front": [p.key for p in front],
                "hypervolume": front_hypervolume(front),
            }
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(_dump(rec) + "\n")
            if progress is not None:
                progress(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return pareto_front(archive), archive


PARETO_COLUMNS = ("id", "generation", "genome", "feasible", "violation", "fnr", "fpr", "noise_fpr", "n_layers",
                  "params", "total_bits", "max_layer_output", "test_sensitivity", "test_specificity",
                  "test_noise_specificity")


def write_pareto_csv(path, individuals):
    """One row per individual; FNR and FPR columns give the scatter axes."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PARETO_COLUMNS)
        for p in individuals:
            o = p.objectives
            vals = o.as_tuple() if o is not None else ("",) * 7
            t = p.test_metrics
            wr.writerow([p.key, p.generation, str(p.genome), int(p.feasible), repr(p.violation), *map(repr, vals),
                         *(repr(t[k]) if k in t else "" for k in ("sensitivity", "specificity", "noise_specificity"))])
