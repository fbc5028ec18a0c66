"""A three-generation architecture search on a small synthetic set.

    python demos/tiny_search.py [out_dir]

Prints the per-generation summary, then the final Pareto front with the
proxy hardware costs of each member. Takes a few minutes on one core.
"""

import sys
import tempfile
from pathlib import Path

from afnas import cost
from afnas.data import make_split, synthesize_dataset
from afnas.nas import SearchConfig, run_search, write_pareto_csv
from afnas.train import TrainConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp())
out.mkdir(parents=True, exist_ok=True)

fs = 32.0
split = make_split(synthesize_dataset(30, 12, fs, seed=11), seed=11)
cfg = SearchConfig(
    generations=3, offspring=8, seed=11,
    constraints=cost.ConstraintConfig(max_macs=200_000),
    train=TrainConfig(epochs=10, batch_size=8, seed=11),
)


def progress(rec):
    done = [d for d in rec["offspring"] if d["feasible"]]
    print(f"generation {rec['generation']}: {len(done)}/{len(rec['offspring'])} feasible, "
          f"front {len(rec['front'])}, hypervolume {rec['hypervolume']:.4g}")


front, _ = run_search(cfg, split, out / "run_log.jsonl", progress)
write_pareto_csv(out / "pareto.csv", front)

h = split.train[0].length
print(f"\nfront ({len(front)} members), costs at H={h}:")
for p in front:
    o, c = p.objectives, cost.report(p.genome, h)
    print(f"  {str(p.genome):32s} fnr {o.fnr:.2f} fpr {o.fpr:.2f} noise fpr {o.noise_fpr:.2f} | "
          f"{c.params} params, {c.macs_per_window} MACs, {c.weight_bytes} weight bytes")
print(f"\nrun log and pareto.csv in {out}")
