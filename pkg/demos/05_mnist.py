"""
Digit classification with the reference network
===============================================

Trains the shipped ``mnist_reference`` spec on a subset of MNIST and
reports test accuracy and a confusion matrix.  Labels are one-hot targets
for ten independent Gaussian likelihoods; the predicted class is the
output with the largest mean.

    python3 demos/05_mnist.py /path/to/mnist [train_size] [epochs]

The directory must hold the four uncompressed (or .gz) IDX files.  The
defaults (5000 images, 2 epochs) take several minutes on one core; 10000
images for 5 epochs is the full desk-scale run.
"""
import sys
import time
from pathlib import Path

import numpy as np

from gpkan import Network, TrainConfig, train
from gpkan.cli import read_spec
from gpkan.data_io import load_mnist, split
from gpkan.training import confusion_matrix

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/root/data/mnist")
n_train = int(sys.argv[2]) if len(sys.argv) > 2 else 5000
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 2


def find(stem):
    return next(p for p in (root / stem, root / (stem + ".gz")) if p.exists())


pool = load_mnist(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
test_file = load_mnist(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
train_set, val_set, test_set = split(pool, (n_train, 1000, 2000), seed=0, test_set=test_file)

model = Network(read_spec("mnist_reference"), seed=0)
print(f"{model.n_parameters()} parameters, {n_train} training images, {epochs} epoch(s)")
t0 = time.perf_counter()
config = TrainConfig(objective="nll", learning_rate=1e-3, batch_size=32, epochs=epochs)
train(model, train_set.to_dataset(), config, val=val_set.to_dataset(),
      on_record=lambda r: print(f"  epoch {r['epoch']} step {r['step']} val accuracy {r['val_metric']:.3f}"))
print(f"trained in {time.perf_counter() - t0:.0f} s")

mean, var = model.predict(test_set.images)
pred = mean.argmax(axis=1)
print(f"test accuracy {np.mean(pred == test_set.labels):.4f} on {len(test_set)} images")
print(confusion_matrix(pred, test_set.labels, 10))

# Output variances say how sure the model is; wrong answers tend to be less sure
chosen_sd = np.sqrt(var[np.arange(len(pred)), pred])
print(f"mean sd of the chosen output: right {chosen_sd[pred == test_set.labels].mean():.3f}, "
      f"wrong {chosen_sd[pred != test_set.labels].mean():.3f}")
