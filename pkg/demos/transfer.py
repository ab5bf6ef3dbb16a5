"""Train on one road network and forecast on a different, larger one without retraining.

The local-spacetime input has a fixed shape whatever the network size, so a
checkpoint loads and runs unchanged on a grid with a different sensor count.
"""

import tempfile
from pathlib import Path

from stnn import io, sim
from stnn.context import estimate_theta
from stnn.model import ModelConfig, STNNModel
from stnn.training import (Normalizer, TrainConfig, chronological_split, evaluate, evaluate_baseline,
                           make_examples, train)

ALPHA = 8
a = sim.build_grid(1, 3, seed=0)
ds_a = sim.run(a, sim.default_schedule(a, 500, seed=1), 500, seed=1)
tr, va, _ = chronological_split(500)
theta = estimate_theta(ds_a.q.window(tr.start, len(tr)))
norm = Normalizer.fit(ds_a.x, tr)
model = STNNModel(ModelConfig(alpha=ALPHA, channels=[16, 32], input_proj_channels=8, dtype="float32"))
train(model, make_examples(ds_a.x, ds_a.q, "all", tr, theta=theta, alpha=ALPHA, subsample=0.15),
      TrainConfig(epochs=3, normalization=norm))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "a.npz"
    io.save_checkpoint(path, model, norm, theta)
    frozen, meta = io.load_checkpoint(path)

b = sim.build_grid(2, 4, seed=5)
ds_b = sim.run(b, sim.default_schedule(b, 500, seed=2), 500, seed=2)
_, _, te = chronological_split(500)
test_b = make_examples(ds_b.x, ds_b.q, "all", te, theta=meta["theta"], alpha=ALPHA)
print(f"trained on {len(a.sensor_ids)} sensors, evaluated on {len(b.sensor_ids)}")
print("stnn MAE on B:", round(evaluate(frozen, test_b, meta["normalizer"], exclude_zero=True).overall["mae"], 3))
print("HA   MAE on B:", round(evaluate_baseline("ha", test_b, exclude_zero=True).overall["mae"], 3))
