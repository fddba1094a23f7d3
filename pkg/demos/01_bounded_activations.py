#!/usr/bin/env python3
# How the bounded activations treat the same inputs.
#
# A neuron whose output goes far past its usual range is most likely
# carrying a corrupted value. ReLU lets it through, a global bound cuts it
# for the whole layer, and fitrelu cuts it per neuron with a smooth gate
# whose sharpness is set by the slope k.

import numpy as np

from fitact.activations import fitrelu, fitrelu_grad_lambda, fitrelu_naive, gbrelu, relu

x = np.array([-1.0, 0.5, 1.5, 1.9, 2.0, 2.1, 3.0, 50.0])
lam = 2.0

print("x        " + " ".join(f"{v:>8.2f}" for v in x))
print("relu     " + " ".join(f"{v:>8.3f}" for v in relu(x)))
print("squash   " + " ".join(f"{v:>8.3f}" for v in gbrelu(x, lam, "squash_to_zero")))
print("clamp    " + " ".join(f"{v:>8.3f}" for v in gbrelu(x, lam, "clamp_to_bound")))
print("naive    " + " ".join(f"{v:>8.3f}" for v in fitrelu_naive(x, lam)))
for k in (2.0, 10.0, 100.0):
    print(f"k={k:<6g} " + " ".join(f"{v:>8.3f}" for v in fitrelu(x, lam, k)))

# The gradient with respect to the bound is what post-training follows:
# it is largest for activations sitting right at the bound.
print()
print("d fitrelu / d lambda at k=10:")
for v in (1.0, 1.8, 2.0, 2.2, 3.0):
    print(f"  x={v:<4} {float(fitrelu_grad_lambda(v, lam, 10.0)):8.4f}")
