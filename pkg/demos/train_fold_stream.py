"""Train one small genome, fold it to integers, and stream windows through it.

    python demos/train_fold_stream.py

Takes about a minute at 32 Hz.
"""

import tempfile
from pathlib import Path

import numpy as np

from afnas import deploy
from afnas.data import make_split, synthesize_dataset
from afnas.metrics import evaluate, format_report
from afnas.nas import Genome
from afnas.nn import build_network, network_forward
from afnas.train import TrainConfig, train

genome = Genome.parse("k16c4s8-k4c4s2-k8c16s4@q12.8")
split = make_split(synthesize_dataset(20, 12, 32.0, seed=3), seed=3)
print(f"{genome}: {len(split.train)} train / {len(split.validation)} val / {len(split.test)} test windows")

net = build_network(list(genome.layers), genome.quant, seed=3)
net, history = train(net, split, TrainConfig(epochs=10, batch_size=8, seed=3))
for h in history:
    print(f"epoch {h['epoch']:2d} lr {h['lr']:<7g} train loss {h['train_loss']:.4f}")

print("\nQAT network on the test split")
print(format_report(*evaluate(net, split.test)), end="")

# fold batchnorm, size accumulators from the data the model was trained on
model = deploy.fold_batchnorm(net)
model = deploy.profile_accumulators(model, list(split.train) + list(split.validation))
blob = Path(tempfile.mkdtemp()) / "model.afnn"
size = deploy.export(model, blob)
print(f"\nblob {blob}: {size} bytes, {model.code_count} codes, payload {model.payload_bytes} bytes")

loaded = deploy.load(blob)
results = deploy.stream_predictions(loaded, split.test)
ref = network_forward(loaded.to_network(), np.stack([w.samples for w in split.test]))
agree = sum(r.is_af == (v > 0) for r, v in zip(results, ref))
print(f"integer stream agrees with the folded float reference on {agree}/{len(results)} labels")

print("\nstreamed predictions on the test split")
print(format_report(*evaluate(None, split.test, logits=[1.0 if r.is_af else -1.0 for r in results])), end="")

w = split.test[0]
orders = {deploy.stream_infer(loaded, w, schedule="random", seed=s, max_burst=5).logit_code for s in range(20)}
print(f"20 random stage schedules on one window -> logit codes {sorted(orders)}")
