"""Gradient checks of whole models on micro-scale inputs (64-bit)."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import layers as L
from .models import ModelSpec, build
from .tensor import Rng, rand_normal

MICRO_SHAPE = (6, 6, 6, 3)


def micro_spec(variant: str, seed: int = 0, **overrides) -> ModelSpec:
    """Full default topology (3 blocks of 5 layers) with tiny widths on 6^3 x 3 crops."""
    base = dict(variant=variant, init_filters=2, growth_rate=2, gru_hidden=2, input_shape=MICRO_SHAPE, seed=seed)
    base.update(overrides)
    return ModelSpec(**base)


def model_builder(spec: ModelSpec, batch: int = 4, path: str = "im2col") -> ad.Builder:
    """Gradcheck builder: train-mode cross-entropy of a seeded random batch."""

    def builder(rng: Rng):
        model = build(spec, np.float64, path)
        x = rand_normal(rng, [batch, 1, *spec.input_shape], dtype=np.float64)
        labels = [i % 2 for i in range(batch)]

        def loss_fn(g):
            return L.softmax_cross_entropy(g, model.forward(g, x, mode="train"), labels)

        return model.parameters, loss_fn

    return builder


def gradcheck_model(spec: ModelSpec, tolerance: float = 1e-6, max_entries: int | None = 4, seed: int = 0,
                    batch: int = 4) -> ad.GradcheckReport:
    return ad.gradcheck(model_builder(spec, batch), Rng(seed), tolerance, max_entries=max_entries, richardson=True)


def scaled(spec: ModelSpec, **changes) -> ModelSpec:
    return dataclasses.replace(spec, **changes)
