"""
Reverse-mode gradients and a finite-difference audit
====================================================

Training needs gradients of the loss with respect to every inducing point,
inducing value, kernel scale and noise level.  The forward pass is recorded
on a tape and replayed backwards.  ``check_gradients`` compares each
parameter block with central differences.
"""
import numpy as np

from gpkan import Network
from gpkan.cli import read_spec
from gpkan.gradcheck import check_gradients, random_batch
from gpkan.training import backward, record_forward

model = Network(read_spec("toy"), seed=0)
batch = random_batch(model, 16, seed=0)

loss, tape = record_forward(model, batch, "mse")
grads = backward(tape)
print("loss", float(loss))
for name, g in grads.items():
    print(f"  d loss / d {name:14s} shape {str(np.shape(g)):8s} norm {np.linalg.norm(g):.3e}")

print("\nblock           entries  max rel error")
for r in check_gradients(model, batch, "mse"):
    print(f"{r.name:15s} {r.checked:7d}  {r.max_rel:.2e}  {'pass' if r.passed else 'FAIL'}")

# A deliberately broken block is caught
bad = [r.name for r in check_gradients(model, batch, "mse", corrupt="1.h") if not r.passed]
print("\nwith 1.h perturbed, failing blocks:", bad)
