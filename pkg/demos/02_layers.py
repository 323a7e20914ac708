"""
Layers: fully connected, convolutional, pooling
===============================================

Every edge of a GP-KAN layer carries its own GP neuron; outputs are sums
of neuron outputs, so means and variances add.  The convolutional layer
applies one small fully connected GP-KAN to every patch, via im2col.
"""
import numpy as np

from gpkan import (AvgPoolLayer, ConvGPLayer, FCGPLayer, GaussianImage, GaussianVector, Network, avgpool_forward, col2im,
                   convgp_forward, fcgp_forward, im2col)

rng = np.random.default_rng(0)

# A 3 -> 2 fully connected layer on one Gaussian vector
fc = FCGPLayer(3, 2, n_inducing=10).initialize(rng)
out = fcgp_forward(fc, GaussianVector([0.1, -0.4, 0.7], [0.02, 0.02, 0.02]))
print("FCGP output means", out.mean, "variances", out.variance)

# im2col cuts an image into one Gaussian vector per patch; col2im puts
# stride-1 1x1 patches back exactly
img = GaussianImage(rng.normal(size=(2, 4, 4)), rng.uniform(0, 0.1, (2, 4, 4)))
patches = im2col(img, 3, 3, 1, 1)
print(f"\n3x3 patches of a 2x4x4 image: {len(patches)} vectors of length {len(patches[0])}")
back = col2im(im2col(img, 1, 1, 1, 1), 2, 4, 4)
print("1x1 round trip exact:", np.array_equal(back.mean, img.mean))

# A convolution whose kernel covers the whole image is a fully connected layer
conv = ConvGPLayer((4, 4), (1, 1), 2, 3, n_inducing=10).initialize(rng)
print("\nfull-image ConvGP output shape:", convgp_forward(conv, img).mean.shape)

# Average pooling divides means by the window size and variances by its square
pooled = avgpool_forward(AvgPoolLayer((2, 2)), img)
print("pooled variance of the top-left window:", pooled.variance[0, 0, 0],
      "=", img.variance[0, :2, :2].sum() / 16)

# Whole networks come from a JSON-style layer list
spec = {"input": [1, 8, 8], "classes": 3, "layers": [
    {"convgp": {"kernel": [3, 3], "stride": [1, 1], "in_ch": 1, "out_ch": 4, "inducing": 10}},
    {"normalize": {}},
    {"avgpool": {"window": [2, 2]}},
    {"flatten": {}},
    {"fcgp": {"in": 36, "out": 3, "inducing": 10}},
]}
net = Network(spec, seed=1)
m, v = net.predict(rng.uniform(0, 1, (5, 1, 8, 8)))
print(f"\nnetwork with {net.n_parameters()} parameters; output means\n", m, "\noutput variances\n", v)
