"""
Learning y = exp(sin(pi x1) + x2^2)
===================================

A 2 -> 1 -> 1 GP-KAN fits a smooth function of two inputs.  The first
layer learns one univariate function per input, the second composes their
sum.  After training we read out both the prediction and its uncertainty.
"""
import numpy as np

from gpkan import Network, TrainConfig, train
from gpkan.cli import read_spec, toy_sets
from gpkan.data_io import toy_target

data, val = toy_sets(0)
model = Network(read_spec("toy"), seed=0)
config = TrainConfig(objective="mse", learning_rate=1e-3, batch_size=32, epochs=100, max_steps=2000)
records = train(model, data, config, val=val)

curve = np.asarray(model.loss_curve)
blocks = curve[: len(curve) // 100 * 100].reshape(-1, 100).mean(axis=1)
print("training loss, mean of each 100 steps:")
print(np.array2string(blocks, precision=4, max_line_width=88))
print(f"validation MSE after {model.train_state.step} steps: {records[-1]['val_metric']:.2e}")

grid = np.array([[x1, 0.25] for x1 in np.linspace(-0.5, 0.5, 5)])
mean, var = model.predict(grid)
print("\n   x1   target  predicted   sd")
for (x1, x2), m, v in zip(grid, mean[:, 0], var[:, 0]):
    print(f"{x1:5.2f} {toy_target(x1, x2):8.4f} {m:10.4f} {np.sqrt(v):6.3f}")
