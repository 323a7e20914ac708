"""
A single GP neuron under input uncertainty
==========================================

A neuron is a 1-d Gaussian process conditioned on a few inducing points.
Feeding it a Gaussian input gives a Gaussian output whose mean and
variance have a closed form.  Here we compare that closed form with a
brute-force Monte-Carlo estimate and look at what happens as the input
gets noisier.
"""
import numpy as np

from gpkan import GaussianScalar, GPNeuronParams, gp_posterior, neuron_forward
from gpkan.mc_oracle import finite_n_variance, mc_neuron_moments

# A neuron shaped like a sine over the normalized range [-1, 1]
z = np.linspace(-1, 1, 10)
neuron = GPNeuronParams(z=z, h=np.sin(np.pi * z), l=z[1] - z[0], s=1.0, sn2=1e-2)

# With zero input variance the neuron is ordinary GP regression
point = gp_posterior(neuron, 0.3)
exact = neuron_forward(neuron, GaussianScalar(0.3, 0.0))
print(f"posterior at 0.3:     mean {point.mean:.6f}  var {point.variance:.3e}")
print(f"moments at N(0.3, 0): mean {exact.mean:.6f}  var {exact.variance:.3e}")

# Widening the input blurs the sine: the mean shrinks toward 0 and the variance grows
print("\ninput variance   output mean   output variance")
for v in (0.0, 0.01, 0.05, 0.2, 1.0):
    y = neuron_forward(neuron, GaussianScalar(0.3, v))
    print(f"{v:14.2f} {y.mean:13.5f} {y.variance:17.5f}")

# Monte-Carlo check: draw n input locations, sample the GP jointly there,
# and average.  The average has an extra O(1/n) variance, so the sample
# variance is compared with both the limit and the finite-n value.
x = GaussianScalar(0.3, 0.05)
est = mc_neuron_moments(neuron, x, n=1000, n_trials=4000, seed=0)
y = neuron_forward(neuron, x)
print(f"\nMC mean {est.mean_hat:.5f} +- {est.se_mean:.5f}   closed form {y.mean:.5f}")
print(f"MC var  {est.var_hat:.3e} +- {est.se_var:.1e}   closed form {y.variance:.3e}"
      f"   at n=1000 {finite_n_variance(neuron, x, 1000):.3e}")
