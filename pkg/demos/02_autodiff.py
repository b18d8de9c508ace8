"""The gradient engine, from a dot product to a convolution.

Everything trainable in this package runs on a small reverse-mode tape:
float64 Tensors, explicit ops, one backward() call.  Here we take a few
gradients and confirm them against finite differences by hand.
"""

import numpy as np

from casskit.ndgrad import (
    Tensor, add, backward, conv2d, grad_check, matmul, mul, relu, tmean, tsum,
)

rng = np.random.default_rng(0)

# scalar chain rule: f = mean(relu(A @ x + b)^2)
A = Tensor(rng.standard_normal((3, 4)))
x = Tensor(rng.standard_normal((4, 2)))
b = Tensor(rng.standard_normal((3, 2)))

h = relu(add(matmul(A, x), b))
f = tmean(mul(h, h))
backward(f)
print(f"f = {f.data:.6f}")
print("df/dA row 0:", np.round(A.grad[0], 4))

# check one entry against a central difference
eps = 1e-6
orig = A.data[0, 0]
A.data[0, 0] = orig + eps
f_plus = float(tmean(mul(relu(add(matmul(A, x), b)), relu(add(matmul(A, x), b)))).data)
A.data[0, 0] = orig - eps
f_minus = float(tmean(mul(relu(add(matmul(A, x), b)), relu(add(matmul(A, x), b)))).data)
A.data[0, 0] = orig
fd = (f_plus - f_minus) / (2 * eps)
print(f"dA[0,0]: tape {A.grad[0, 0]:.8f}  finite diff {fd:.8f}")

# the same machinery drives convolutions (channels-first, same padding)
img = Tensor(rng.standard_normal((2, 8, 8)))
k = Tensor(rng.standard_normal((4, 2, 3, 3)) * 0.1)
bias = Tensor(np.zeros(4))
out = conv2d(img, k, bias)
print(f"\nconv2d: {img.data.shape} -> {out.data.shape}")

# grad_check sweeps every parameter with central differences and returns
# the worst relative error; anything below ~1e-6 is a healthy tape
worst = grad_check(lambda ps: tsum(conv2d(ps[0], ps[1], ps[2])), [img, k, bias])
print(f"grad_check worst relative error: {worst:.2e}")
