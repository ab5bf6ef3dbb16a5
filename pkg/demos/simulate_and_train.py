"""Simulate a small grid with road closures, train a compact model, compare with baselines.

Runs in about a minute on one core. Scale ``STEPS``, ``SUBSAMPLE`` and ``EPOCHS``
up for a real experiment.
"""

from stnn import sim
from stnn.context import estimate_theta
from stnn.model import ModelConfig, STNNModel
from stnn.training import (Normalizer, TrainConfig, chronological_split, evaluate, evaluate_baseline,
                           make_examples, train)

STEPS, SUBSAMPLE, EPOCHS, ALPHA = 600, 0.1, 3, 8

net = sim.build_grid(2, 3, seed=0)
schedule = sim.default_schedule(net, STEPS, seed=1)
ds = sim.run(net, schedule, STEPS, seed=1)
print(f"{len(net.sensor_ids)} sensors, {STEPS} steps, closures: {schedule.closures}")

tr, va, te = chronological_split(STEPS)
theta = estimate_theta(ds.q.window(tr.start, len(tr)))  # frozen from the training window
norm = Normalizer.fit(ds.x, tr)
common = dict(theta=theta, alpha=ALPHA)
train_set = make_examples(ds.x, ds.q, "all", tr, subsample=SUBSAMPLE, seed=1, **common)
val_set = make_examples(ds.x, ds.q, "all", va, **common)
test_set = make_examples(ds.x, ds.q, "all", te, **common)

model = STNNModel(ModelConfig(alpha=ALPHA, channels=[16, 32], input_proj_channels=8, dtype="float32"))
train(model, train_set, TrainConfig(epochs=EPOCHS, normalization=norm), val=val_set,
      on_epoch=lambda e: print(f"epoch {e['epoch']}: train {e['train_loss']:.3f}  val MAE {e['val_mae']:.3f}"))

report = evaluate(model, test_set, norm, exclude_zero=True)
print(f"\n{'model':<12}{'MAE':>8}{'RMSE':>8}{'MAPE%':>8}")
for name, r in [("stnn", report), *((k, evaluate_baseline(k, test_set, exclude_zero=True))
                                   for k in ("ha", "persistence"))]:
    o = r.overall
    print(f"{name:<12}{o['mae']:8.3f}{o['rmse']:8.3f}{o['mape']:8.2f}")
print("per horizon (stnn):", {h: round(v["mae"], 3) for h, v in report.horizons.items()})
