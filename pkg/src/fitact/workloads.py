"""Desk-scale reference models and datasets."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .activations import IDENTITY, RELU
from .data import Dataset, load_image_dir, make_blobs, render_digits, write_image_dir
from .network import Network, conv, dense, flatten, maxpool

DIGITS_DIR = Path(__file__).resolve().parents[2] / "data" / "digits"


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_mlp(sizes=(2, 512, 512, 4), seed: int = 0) -> Network:
    """Dense ReLU stack; the last layer produces logits."""
    rng = np.random.default_rng(seed)
    layers = []
    for j, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = j == len(sizes) - 2
        layers.append(dense(_he(rng, (n_out, n_in), n_in), np.zeros(n_out),
                            IDENTITY if last else RELU))
    return Network(layers, (sizes[0],))


def init_cnn(input_shape=(1, 12, 12), channels=(32, 64), num_classes: int = 10,
             kernel: int = 3, pools=(2, 6), seed: int = 0) -> Network:
    """conv-relu-pool, conv-relu-pool, dense.

    Both convolutions use 'same' padding; ``pools`` gives the window (and
    stride) of the pooling after each convolution.
    """
    rng = np.random.default_rng(seed)
    c0 = input_shape[0]
    c1, c2 = channels
    pad = kernel // 2
    layers = [
        conv(_he(rng, (c1, c0, kernel, kernel), c0 * kernel * kernel), np.zeros(c1), 1, pad),
        maxpool(pools[0]),
        conv(_he(rng, (c2, c1, kernel, kernel), c1 * kernel * kernel), np.zeros(c2), 1, pad),
        maxpool(pools[1]),
        flatten(),
    ]
    probe = Network(layers, input_shape)
    feat = probe.shapes[-1][0]
    layers.append(dense(_he(rng, (num_classes, feat), feat), np.zeros(num_classes), IDENTITY))
    return Network(layers, input_shape)


def blobs_splits(seed: int = 0, n_train=2000, n_val=500, n_test=1000) -> dict[str, Dataset]:
    return {
        "train": make_blobs(n_train, seed=seed),
        "val": make_blobs(n_val, seed=seed + 1),
        "test": make_blobs(n_test, seed=seed + 2),
    }


def digits_splits(path=None) -> dict[str, Dataset]:
    path = DIGITS_DIR if path is None else Path(path)
    return {s: load_image_dir(path, s) for s in ("train", "val", "test")}


DIGIT_SPLITS = {"train": (2000, 0), "val": (500, 1), "test": (500, 2)}  # (count, seed)


def generate_digits(path=None) -> Path:
    """(Re)create the shipped digit image set; output is deterministic."""
    path = DIGITS_DIR if path is None else Path(path)
    return write_image_dir(path, {s: render_digits(n, seed=seed) for s, (n, seed) in DIGIT_SPLITS.items()})
