#!/usr/bin/env python3
# The whole two-stage workflow on the 2-D blob data.
#
#   1. train weights and biases of a plain ReLU MLP
#   2. swap hidden ReLUs for fitrelu, bounds set to each neuron's max
#   3. shrink the bounds while validation accuracy stays within delta
#   4. compare faulted accuracy with a short campaign

import numpy as np

from fitact.harness import ExperimentSpec, rates_for_flips, run_campaign
from fitact.network import parameter_census
from fitact.training import (
    PostTrainConfig, TrainConfig, evaluate_accuracy, modify_architecture, post_train_bounds,
    train_accuracy,
)
from fitact.workloads import blobs_splits, init_mlp

data = blobs_splits(seed=0)
net = train_accuracy(init_mlp(seed=0), data["train"], TrainConfig(epochs=20))
print("relu test accuracy", evaluate_accuracy(net, data["test"]))

fit = modify_architecture(net, data["train"], k=10.0)
print("bounds after calibration: mean %.3f" % fit.bound_store().flat().mean())

history = []
fit = post_train_bounds(fit, data["train"],
                        PostTrainConfig(zeta=1.0, epochs=10, learning_rate=1e-2, evals_per_epoch=4),
                        validation=data["val"], history=history)
for rec in history:
    print("  epoch %(epoch)2d  val acc %(clean_accuracy).3f  mean bound %(mean_bound).3f" % rec)

print("census bits: relu %d, fitact %d" % (sum(c[2] for c in parameter_census(net)),
                                           sum(c[2] for c in parameter_census(fit))))

rates = rates_for_flips(net, [1, 10, 50])
report = run_campaign(ExperimentSpec(("unprotected", "fitact"), rates, 30, seed=0),
                      {"unprotected": net, "fitact": fit}, data["test"])
for r, flips in zip(rates, (1, 10, 50)):
    print(f"~{flips:>3} flips  unprotected {report.mean('unprotected', r):.3f}  fitact {report.mean('fitact', r):.3f}")
