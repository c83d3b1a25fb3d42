"""Seeded synthetic datasets and the named-stream seed splitter."""
from __future__ import annotations

import zlib

import numpy as np

from .netspec import NetworkSpec


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per (seed, subsystem name), so one stream never perturbs another."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])


def blobs(rng: np.random.Generator, n: int, dim: int, classes: int = 2, sep: float = 1.0, noise: float = 1.0):
    """Gaussian clusters at random unit-direction centers scaled by ``sep``; returns (x, labels)."""
    centers = rng.normal(size=(classes, dim))
    centers *= sep / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.integers(0, classes, size=n)
    x = centers[y] + noise * rng.normal(size=(n, dim))
    return x, y


def make_dataset(net: NetworkSpec, seed: int, batches: int, test: int = 512, sep: float = 2.5,
                 noise: float = 1.0, offset: float = 0.0):
    """Minibatches shaped for ``net`` plus a held-out set.

    softmax_ce nets get labels from class clusters; mse nets regress a
    fixed random linear map of the input squashed by tanh. ``offset`` shifts
    every input feature (nonnegative-feature data such as intensities).
    """
    rng = stream(seed, "data")
    k = net.batch
    shape = tuple(net.input_shape)
    dim = int(np.prod(shape))
    loss = net.layers[-1]
    out = int(np.prod(loss.in_shape))
    n = batches * k + test
    if loss.fn == "softmax_ce":
        x, y = blobs(rng, n, dim, out, sep, noise)
        x = x * (1.0 / np.sqrt(dim))
    else:
        x = rng.normal(size=(n, dim)) * 0.5
        m = rng.normal(size=(dim, out)) / np.sqrt(dim)
        y = 0.5 * np.tanh(x @ m)
    x = (x + offset).reshape((n,) + shape)
    train = [(x[b * k:(b + 1) * k], y[b * k:(b + 1) * k]) for b in range(batches)]
    return train, (x[batches * k:], y[batches * k:])


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores.reshape(len(labels), -1), axis=1) == labels))
