"""Fault-hardened small neural networks with per-neuron trainable bounded activations."""
