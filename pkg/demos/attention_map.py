"""Show which neighbours and time steps the attention stage weights for one sensor.

Trains briefly on a closure-free grid, then prints the attention map of the
first sensor as a heat grid (rows are neighbours in distance order).
"""

import numpy as np

from stnn import sim
from stnn.context import DUMMY, build_local_spacetime, estimate_theta
from stnn.model import ModelConfig, STNNModel, extract_attention
from stnn.training import Normalizer, TrainConfig, chronological_split, make_examples, train

ALPHA = 6
net = sim.build_grid(1, 3, seed=0)
ds = sim.run(net, sim.ClosureSchedule(), 400, seed=3)
tr, va, _ = chronological_split(400)
theta = estimate_theta(ds.q.window(tr.start, len(tr)))
norm = Normalizer.fit(ds.x, tr)
model = STNNModel(ModelConfig(alpha=ALPHA, channels=[8, 16], input_proj_channels=8))
train(model, make_examples(ds.x, ds.q, "all", tr, theta=theta, alpha=ALPHA, subsample=0.2),
      TrainConfig(epochs=2, normalization=norm))

target = net.sensor_ids[len(net.sensor_ids) // 2]
ls = build_local_spacetime(ds.x.window(va.start, 12), ds.q.window(va.start, 12), target,
                           alpha=ALPHA, theta=theta)
inp = ls.tensor.copy()
real = ls.neighbor_set.indices >= 0
inp[real, 0, :] = norm.normalize(inp[real, 0, :])
amap = extract_attention(model, inp)

shades = " .:-=+*#%@"
lo, span = amap.min(), max(amap.max() - amap.min(), 1e-12)
print(f"attention of {target}; weights span [{amap.min():.5f}, {amap.max():.5f}]; darker is heavier\n")
print(" " * 9 + "".join(f"{t:>3}" for t in range(amap.shape[1])))
for member, row in zip(ls.neighbor_set.members, amap):
    label = "dummy" if member is DUMMY else member
    cells = "".join(f"  {shades[min(9, int((v - lo) / span * 9.999))]}" for v in row)
    print(f"{label:>8} {cells}   {row.sum():.3f}")
print("\nweight on the most recent step:", np.round(amap[:, -1].sum(), 3))
