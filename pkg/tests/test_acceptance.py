"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed straight to the terminal even under output capture. The desk-scale
search (criterion 6) takes about eleven minutes on one core.
"""

import csv
import subprocess
import sys
import time

import numpy as np
import pytest

from afnas import cli, cost, deploy, nas
from afnas.data import make_split, synthesize_dataset
from afnas.fxp import SEARCH_QUANT_PAIRS, FxpFormat, QuantPair, quantize
from afnas.nn import DsConvLayer, build_network, dsconv_forward, network_forward
from afnas.train import TrainConfig, train
from oracles import finite_difference_check, front_brute, random_population, random_small_net, relu_kinks


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail

    return emit


def test_01_quantizer_laws(verdict):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    n_per = 100_000 // len(SEARCH_QUANT_PAIRS) + 1
    worst_err, bad = 0.0, []
    for w, p in SEARCH_QUANT_PAIRS:
        fmt = FxpFormat(w, p)
        span = fmt.hi - fmt.lo
        x = np.concatenate([
            rng.uniform(fmt.lo - span / 4, fmt.hi + span / 4, n_per // 2),
            rng.normal(0, 2.0 ** -(p // 2), n_per // 4),
            # exact ties and grid points
            rng.integers(-(2 ** min(w - 1, 40)), 2 ** min(w - 1, 40), n_per - n_per // 2 - n_per // 4) * 2.0 ** -(p + 1),
        ])
        q = quantize(x, fmt)
        if not np.array_equal(quantize(q, fmt), q):
            bad.append(f"{fmt} idempotence")
        if q.min() < fmt.lo or q.max() > fmt.hi:
            bad.append(f"{fmt} bounds")
        order = np.argsort(x, kind="stable")
        if np.any(np.diff(q[order]) < 0):
            bad.append(f"{fmt} monotonicity")
        inside = (x >= fmt.lo) & (x <= fmt.hi)
        err = np.max(np.abs(q[inside] - x[inside])) * 2.0 ** (p + 1)
        worst_err = max(worst_err, err)
        if err > 1.0:
            bad.append(f"{fmt} error")
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 5.0
    verdict(1, "quantizer laws", ok,
            f"{n_per * len(SEARCH_QUANT_PAIRS)} pairs, worst in-range error {worst_err:.3f} half-LSB, "
            f"{elapsed:.2f} s, failures {bad or 'none'}")


def test_02_gradient_oracle(verdict):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    float_worst, ste_worst = 0.0, 0.0
    for i in range(20):
        net, h = random_small_net(rng, None)
        x = rng.normal(size=(2, h, 2))
        t = rng.integers(0, 2, 2).astype(float)
        float_worst = max(float_worst, finite_difference_check(net, x, t, h=1e-5)[0])

        pair = QuantPair.of(*[(32, 16), (24, 16)][i % 2])
        qnet, h = random_small_net(rng, pair)
        for _ in range(50):
            x = rng.normal(size=(2, h, 2))
            if relu_kinks(qnet, x) == 0:
                break
        t = rng.integers(0, 2, 2).astype(float)
        ste_worst = max(ste_worst, finite_difference_check(qnet, x, t, h=1e-8, surrogate=True)[0])
    elapsed = time.perf_counter() - t0
    ok = float_worst < 1e-4 and ste_worst < 1e-4 and elapsed < 120
    verdict(2, "gradient oracle", ok,
            f"20 nets, float rel err {float_worst:.2e}, quantized (STE) rel err {ste_worst:.2e}, {elapsed:.1f} s")


def test_03_mac_count(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        k, s = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        h = k + int(rng.integers(0, 200))
        layer = DsConvLayer(k, cin, cout, s, rng.normal(size=(k, cin)), rng.normal(size=(cin, cout)))
        counter = {}
        out = dsconv_forward(rng.normal(size=(h, cin)), layer, QuantPair.of(16, 8), counter)
        h_out = (h - k) // s + 1
        formula = h_out * cin * (k + cout)
        modelled = cost.report([(k, cout, s)], h, input_channels=cin, quant=QuantPair.of(16, 8)).macs_per_window
        mismatches += not (out.shape[0] == h_out and counter["macs"] == formula == modelled)
    verdict(3, "MAC count exactness", mismatches == 0, f"{100 - mismatches}/100 configurations exact")


def test_04_footprint(verdict, tmp_path):
    net = build_network([(16, 21, 1), (64, 256, 1)], QuantPair.of(16, 8), seed=0)
    m = deploy.fold_batchnorm(net)
    size = deploy.export(m, tmp_path / "m.afnn")
    header = size - m.payload_bytes
    ok = m.code_count == 7328 and m.payload_bytes == 14_656 and header == deploy._GLOBAL.size + 2 * deploy._LAYER.size
    verdict(4, "footprint arithmetic", ok,
            f"{m.code_count} parameters -> payload {m.payload_bytes} bytes (+{header} header bytes)")


def _logit_code(value, quant):
    p = quant.weights.precision_bits
    return int(np.sign(value) * np.floor(abs(value) * 2**p + 0.5))


def test_05_fold_stream_equivalence(verdict):
    fs = 32.0
    train_split = make_split(synthesize_dataset(10, 12, fs, 50), 50)
    probe = synthesize_dataset(100, 10, fs, 51)  # 1000 windows, 100 per model
    ccfg = cost.ConstraintConfig(max_macs=200_000)
    h = probe[0].length
    labels_agree = codes_within = windows = 0
    worst_code, sched_runs, sched_bad = 0, 0, 0
    unfolded_agree = 0
    for m_i in range(10):
        g = nas.random_genome(1000 + m_i, ccfg, h)
        net = build_network(list(g.layers), g.quant, seed=m_i)
        net, _ = train(net, train_split, TrainConfig(epochs=2, batch_size=8, seed=m_i))
        model = deploy.profile_accumulators(deploy.fold_batchnorm(net), list(train_split.train))
        mine = probe[m_i * 100 : (m_i + 1) * 100]
        xs = np.stack([w.samples for w in mine])
        ref = network_forward(model.to_network(), xs)
        qat = network_forward(net, xs)
        for w, r, u in zip(mine, ref, qat):
            res = deploy.stream_infer(model, w)
            windows += 1
            labels_agree += res.is_af == (r > 0)
            unfolded_agree += res.is_af == (u > 0)
            d = abs(res.logit_code - _logit_code(r, g.quant))
            worst_code = max(worst_code, d)
            codes_within += d <= 1
        base = deploy.stream_infer(model, mine[0])
        for s in range(10):
            r = deploy.stream_infer(model, mine[0], schedule="random", seed=s, max_burst=7)
            sched_runs += 1
            sched_bad += (r.logit_code, r.is_af) != (base.logit_code, base.is_af)
        t = deploy.stream_infer(model, mine[0], schedule="threaded")
        sched_runs += 1
        sched_bad += (t.logit_code, t.is_af) != (base.logit_code, base.is_af)
    ok = labels_agree == windows and codes_within == windows and sched_bad == 0 and sched_runs >= 100
    verdict(5, "fold/stream equivalence", ok,
            f"{windows} windows x 10 trained models: labels {labels_agree}/{windows}, "
            f"codes within 1 LSB {codes_within}/{windows} (worst {worst_code}), "
            f"{sched_runs - sched_bad}/{sched_runs} schedules identical; "
            f"label agreement with the unfolded network {unfolded_agree}/{windows}")


def test_06_desk_search(verdict, tmp_path):
    out = tmp_path / "desk"
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "afnas", "search", "--profile", "desk", "--seed", "7", "--out", str(out)],
                          capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    front = []
    if (out / "pareto.csv").exists():
        _, gens = nas.read_log(out / "run_log.jsonl")
        by_key = {f"g{d['generation']}i{d['index']}": d for rec in gens for d in rec["offspring"]}
        with open(out / "pareto.csv", newline="") as fh:
            front = [by_key[row["id"]] for row in csv.DictReader(fh)]
    feasible = [d for d in front if d["feasible"]]
    for d in feasible:
        d["genome"] = nas.Genome.from_dict(d["genome"])
    shapes_ok = all(
        not cost.validate(d["genome"], cost.ConstraintConfig(max_macs=200_000), 3840)
        and len(d["genome"].layers) <= 5
        and all(s <= k and cost.is_pow2(k) and cost.is_pow2(c) and cost.is_pow2(s) for k, c, s in d["genome"].layers)
        and cost.report(d["genome"], 3840).params <= 10**6
        for d in feasible
    )
    best = max(
        (min(d["test_metrics"].values()) for d in feasible if None not in d["test_metrics"].values()),
        default=0.0,
    )
    ok = proc.returncode == 0 and elapsed < 1800 and bool(feasible) and shapes_ok and best >= 0.9
    verdict(6, "desk-scale search", ok,
            f"exit {proc.returncode}, {elapsed / 60:.1f} min, front {len(front)} ({len(feasible)} feasible), "
            f"constraints {'met' if shapes_ok else 'VIOLATED'}, best worst-of-three test metric {best:.3f}")


def test_07_training_recipe(verdict):
    split = make_split(synthesize_dataset(6, 4, 4.0, 7), 7)
    cfg = TrainConfig(steps_per_epoch=2, batch_size=4, seed=7)
    net = build_network([(4, 8, 2), (2, 8, 2)], QuantPair.of(16, 8), seed=7)
    _, hist = train(net, split, cfg)
    lrs = [e["lr"] for e in hist]
    want = [0.01] * 15 + [0.001] * 10 + [0.0001] * 5
    worst = max(e["max_clipped_grad_norm"] for e in hist)
    ok = lrs == want and worst <= cfg.grad_clip_norm
    verdict(7, "training recipe", ok,
            f"{len(lrs)} epochs, schedule {'exact' if lrs == want else lrs}, "
            f"largest post-clip norm {worst:.4f} (bound {cfg.grad_clip_norm})")


def test_08_pareto_correctness(verdict):
    rng = np.random.default_rng(8)
    equal = sum(
        {p.index for p in nas.pareto_front(pop)} == {p.index for p in front_brute(pop)}
        for pop in (random_population(rng, 200) for _ in range(50))
    )
    verdict(8, "Pareto correctness", equal == 50, f"{equal}/50 populations of 200 match the brute-force front")


SMALL = ["--sample-rate-hz", "8", "--probands", "6", "--windows-per-proband", "4", "--epochs", "2",
         "--batch-size", "4", "--genome", "k8c8s4-k4c16s2@q12.8", "--seed", "9"]


def _run_all(root):
    steps = [
        ["synth-data", *SMALL, "--out", str(root / "data")],
        ["train", *SMALL, "--out", str(root / "train")],
        ["export", *SMALL, "--checkpoint", str(root / "train" / "checkpoint.afck"), "--out", str(root / "export")],
        ["infer", *SMALL, "--blob", str(root / "export" / "model.afnn"), "--out", str(root / "infer")],
        ["search", "--profile", "desk", "--generations", "2", "--offspring", "3", *SMALL[:8],
         "--out", str(root / "search")],
    ]
    codes = [cli.main(argv) for argv in steps]
    codes.append(cli.main(["report", "--log", str(root / "search" / "run_log.jsonl"), "--out", str(root / "report")]))
    return codes


def test_09_determinism(verdict, tmp_path, capsys):
    codes_a, codes_b = _run_all(tmp_path / "a"), _run_all(tmp_path / "b")
    capsys.readouterr()
    files = sorted(
        p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file() and p.name != "manifest.json"
    )
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    # manifests record input and output paths, which differ by construction
    for man in (tmp_path / "a").rglob("manifest.json"):
        rel = man.relative_to(tmp_path / "a")
        a = man.read_text().replace(str(tmp_path / "a"), "<root>")
        b = (tmp_path / "b" / rel).read_text().replace(str(tmp_path / "b"), "<root>")
        if a != b:
            differ.append(str(rel))
    ok = codes_a == codes_b and not differ and all(c in (0, 3) for c in codes_a)
    verdict(9, "determinism", ok,
            f"{len(files)} artefacts compared (logs, checkpoints, blobs, predictions), exit codes {codes_a}, "
            f"differences {differ or 'none'}")


def test_10_constraint_regression(verdict):
    cfg = cost.ConstraintConfig(max_kernel=32)
    cases = {
        cost.STRIDE_EXCEEDS_KERNEL: [(4, 8, 8)],
        cost.KERNEL_NOT_POW2: [(3, 8, 1)],
        cost.CHANNELS_NOT_POW2: [(4, 6, 1)],
        cost.STRIDE_NOT_POW2: [(8, 8, 3)],
        cost.TOO_MANY_LAYERS: [(2, 4, 1)] * 6,
        cost.KERNEL_TOO_LARGE: [(64, 8, 1)],
        cost.TOO_MANY_PARAMS: [(2, 1024, 1), (2, 1024, 1)],
    }
    got = {}
    for expected, layers in cases.items():
        got[expected] = {v.code for v in cost.validate(layers, cfg)}
    ok = all(got[e] == {e} for e in cases) and len({frozenset(v) for v in got.values()}) == len(cases)
    verdict(10, "constraint regression", ok,
            ", ".join(f"{e}->{sorted(v)}" for e, v in got.items()))
