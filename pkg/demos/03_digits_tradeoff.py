#!/usr/bin/env python3
# Why one bound per layer is not enough, on the digit CNN.
#
# The sweep puts a single bound on the second conv layer. Small bounds cut
# healthy activations and clean accuracy falls; huge bounds let corrupted
# values through. The histogram shows why no single value suits every
# neuron: per-neuron maxima are spread widely.

import numpy as np

from fitact.harness import neuron_max_histogram, rates_for_flips, sweep_global_bound
from fitact.training import TrainConfig, evaluate_accuracy, train_accuracy
from fitact.workloads import digits_splits, init_cnn

data = digits_splits()
net = train_accuracy(init_cnn(seed=0), data["train"], TrainConfig(epochs=15, learning_rate=3e-3))
print("clean test accuracy", evaluate_accuracy(net, data["test"]))

rate = rates_for_flips(net, [10])[0]
rows = sweep_global_bound(net, 2, [1e-6, 2, 4, 8, 16, 1e4], rate, 30, data["test"])
print("\nbound      clean   faulted")
for r in rows:
    print(f"{r['bound']:<9g} {r['clean_accuracy']:.3f}   {r['mean_faulted_accuracy']:.3f}")

h = neuron_max_histogram(net, 2, data["train"], bins=12)
print(f"\n{h.maxima.size} neurons, max {h.maxima.max():.2f}, coefficient of variation {h.cv:.2f}")
scale = 50 / h.counts.max()
for lo, c in zip(h.edges[:-1], h.counts):
    print(f"{lo:6.2f} {'#' * int(np.ceil(c * scale)) if c else ''}")
