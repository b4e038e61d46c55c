"""Seed-deterministic synthetic tasks for desk-scale adapter training.

The regression task plants a random sparse, higher-than-adapter-rank
perturbation on a frozen random base network and labels inputs with the
perturbed network, so recovering the labels means expressing an update the
plain rank-r product cannot. The classification task is Gaussian blobs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import numerical_rank


@dataclass
class SynthDataset:
    kind: str
    x: np.ndarray
    y: np.ndarray
    base_weights: list
    loss: str
    meta: dict = field(default_factory=dict)
    attention: dict | None = None


def _base_network(rng: np.random.Generator, layer_dims, bias: bool):
    weights = []
    for n_in, n_out in zip(layer_dims, layer_dims[1:]):
        w0 = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        b = rng.normal(0.0, 0.05, size=n_out) if bias else None
        weights.append((w0, b))
    return weights


def _forward_numpy(weights, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(weights):
        h = h @ w.T
        if b is not None:
            h = h + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _sparse_perturbation(rng: np.random.Generator, shape, density: float,
                         scale: float, min_rank: int) -> np.ndarray:
    """Random sparse matrix with numerical rank above min_rank (when feasible)."""
    for _ in range(64):
        mask = rng.random(shape) < density
        pert = rng.normal(0.0, scale, size=shape) * mask
        if min_rank <= 0 or numerical_rank(pert, 1e-9) > min_rank:
            return pert
    raise RuntimeError(
        f"could not draw a density-{density} perturbation of rank > {min_rank} on {shape}"
    )


def high_rank_regression(seed: int, layer_dims=(16, 16), samples: int = 96,
                         density: float = 0.1, min_rank: int | None = None,
                         perturb_layers=None, perturb_scale: float = 2.5,
                         noise_std: float = 0.0, bias: bool = True) -> SynthDataset:
    rng = np.random.default_rng([seed, 0xD5])
    base = _base_network(rng, layer_dims, bias)
    n_layers = len(base)
    if perturb_layers is None:
        perturb_layers = list(range(n_layers))
    perturbations = {}
    target = []
    for i, (w0, b) in enumerate(base):
        if i in perturb_layers and density > 0.0:
            # min_rank defaults to half the layer's smaller dimension, well
            # above the desk-scale adapter ranks
            floor_rank = min_rank if min_rank is not None else max(1, min(w0.shape) // 2)
            pert = _sparse_perturbation(
                rng, w0.shape, density, perturb_scale / np.sqrt(w0.shape[1]), floor_rank
            )
            perturbations[i] = pert
            target.append((w0 + pert, b))
        else:
            target.append((w0, b))
    x = rng.normal(size=(samples, layer_dims[0]))
    y = _forward_numpy(target, x)
    if noise_std > 0.0:
        y = y + rng.normal(0.0, noise_std, size=y.shape)
    return SynthDataset(
        kind="high-rank-regression",
        x=x,
        y=y,
        base_weights=base,
        loss="mse",
        meta={
            "density": density,
            "perturb_layers": list(perturb_layers),
            "perturbation_ranks": {
                str(i): numerical_rank(p, 1e-9) for i, p in perturbations.items()
            },
            "noise_std": noise_std,
        },
    )


def blob_classification(seed: int, features: int = 8, classes: int = 3,
                        samples: int = 240, spread: float = 0.6,
                        hidden: int = 16, bias: bool = True) -> SynthDataset:
    rng = np.random.default_rng([seed, 0xB1])
    centers = rng.normal(0.0, 2.0, size=(classes, features))
    labels = rng.integers(0, classes, size=samples)
    x = centers[labels] + rng.normal(0.0, spread, size=(samples, features))
    onehot = np.zeros((samples, classes))
    onehot[np.arange(samples), labels] = 1.0
    base = _base_network(rng, (features, hidden, classes), bias)
    return SynthDataset(
        kind="blob-classification",
        x=x,
        y=onehot,
        base_weights=base,
        loss="cross-entropy",
        meta={"classes": classes, "spread": spread},
    )


_KINDS = {
    "high-rank-regression": high_rank_regression,
    "highrankregression": high_rank_regression,
    "blob-classification": blob_classification,
    "blobclassification": blob_classification,
}


def synth_dataset(kind: str, seed: int, **sizes) -> SynthDataset:
    key = str(kind).strip().lower().replace("_", "-")
    if key not in _KINDS:
        known = "high-rank-regression, blob-classification"
        raise ValueError(f"unknown dataset kind {kind!r} (known: {known})")
    return _KINDS[key](seed=seed, **sizes)
