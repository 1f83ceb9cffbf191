"""Search sketch sizes for an MLP under an output-error budget."""

import numpy as np

from randsketch.nn import DenseLinear, Model, ReLU
from randsketch.tuner import AutoTuner, ByType, GridSearch, LayerConfig

model = Model([
    ("fc1", DenseLinear.init(64, 128, seed=1)),
    ("act", ReLU()),
    ("fc2", DenseLinear.init(128, 64, seed=2)),
])
x = np.random.default_rng(0).standard_normal((64, 50))
target = model.forward(x)


def rel_error(m):
    return float(np.linalg.norm(m.forward(x) - target) / np.linalg.norm(target))


def stored(m):
    return float(m.param_count().total_stored)


tuner = AutoTuner(
    model,
    [LayerConfig(ByType("Linear"), [(1, 4), (2, 4), (1, 8), (2, 8)], separate=False)],
    accuracy_eval=rel_error,
    threshold=6.0,  # single-draw sketches of copied weights are noisy at this size
    objective_eval=stored,
    higher_is_better=False,
    algo=GridSearch(),
    master_seed=7,
)
for r in tuner.tune():
    print(r.trial_index, r.assignment, f"err={r.accuracy:.2f}", f"stored={int(r.objective)}")
best = tuner.best_trial()
print("best:", best.assignment, "dense stored", int(stored(model)))
small = tuner.apply_best_params()
print("applied model stores", small.param_count().total_stored)
