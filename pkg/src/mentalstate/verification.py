"""The standard gradient-check suite run by ``mentalstate gradcheck``."""
from __future__ import annotations

import numpy as np

from .model import Model, ModelConfig, ResidualBlock, BlockConfig
from .nn import (
    BatchNorm1d, Conv1d, Dense, Dropout, GlobalAvgPool, MaxPool1d, ReLU, WithLoss, grad_check,
)
from .nn.gradcheck import GradCheckReport

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


class _BlockAdapter:
    """Expose a residual block through the layer interface grad_check expects."""

    def __init__(self, block):
        self.block = block

    @property
    def params(self):
        return {f"{n}.{k}": v for n, layer in self.block.layers() for k, v in layer.params.items()}

    @property
    def grads(self):
        return {f"{n}.{k}": v for n, layer in self.block.layers() for k, v in layer.grads.items()}

    def forward(self, x, train=False):
        return self.block.forward(x, train)

    def backward(self, g):
        return self.block.backward(g)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _distinct(rng, shape):
    # a permutation of well-separated values: pooling never sees a near tie
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 - n * 0.05).reshape(shape)


def small_model_config() -> ModelConfig:
    return ModelConfig.from_lists([9, 5], [4, 6], input_channels=3, input_len=48)


def gradcheck_suite(seed: int = 0, *, full_model: bool = True,
                    full_model_coords: int = 4) -> list[GradCheckReport]:
    """Every layer at 1e-4, composites and models at 1e-3, all in float64.

    The full default model has ~150k parameters, so ``full_model_coords``
    random coordinates are checked in each of its tensors.
    """
    rng = np.random.default_rng(seed)
    f64 = np.float64
    reports = []

    def run(name, layer, x, tol=LAYER_TOL, **kw):
        reports.append(grad_check(layer, x, tol, name=name, seed=seed, **kw))

    run("conv1d k=5", Conv1d(3, 4, 5, rng=rng, dtype=f64), rng.standard_normal((2, 3, 11)))
    run("conv1d k=1", Conv1d(3, 4, 1, rng=rng, dtype=f64), rng.standard_normal((2, 3, 7)))
    run("conv1d k=3 stride=2", Conv1d(2, 3, 3, stride=2, rng=rng, dtype=f64),
        rng.standard_normal((2, 2, 9)))
    bn = BatchNorm1d(3, dtype=f64)
    bn.params["gamma"][:] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"][:] = rng.standard_normal(3)
    run("batchnorm train", bn, rng.standard_normal((4, 3, 5)), train=True)
    bn_eval = BatchNorm1d(3, dtype=f64)
    bn_eval.buffers["running_mean"][:] = rng.standard_normal(3)
    bn_eval.buffers["running_var"][:] = rng.uniform(0.5, 2.0, 3)
    run("batchnorm eval", bn_eval, rng.standard_normal((4, 3, 5)))
    run("relu", ReLU(), _away_from_zero(rng, (2, 3, 6)))
    run("maxpool", MaxPool1d(2), _distinct(rng, (2, 3, 8)))
    run("global avg pool", GlobalAvgPool(), rng.standard_normal((2, 3, 6)))
    drop = Dropout(0.5)
    drop.seed = seed
    run("dropout", drop, rng.standard_normal((4, 6)), train=True)
    run("dense", Dense(5, 3, rng=rng, dtype=f64), rng.standard_normal((4, 5)))

    # Composites are held to the end-to-end tolerance: FFT round-off puts
    # ~1e-9 of noise on weights whose true gradient is zero (dead ReLUs).
    run("residual block (projection)",
        _BlockAdapter(ResidualBlock(2, BlockConfig(5, 3), rng, f64)),
        rng.standard_normal((3, 2, 8)), MODEL_TOL, train=True)
    run("residual block (identity)",
        _BlockAdapter(ResidualBlock(3, BlockConfig(3, 3), rng, f64)),
        rng.standard_normal((3, 3, 8)), MODEL_TOL, train=True)

    cfg = small_model_config()
    model = Model(cfg, seed=seed, dtype=f64)
    x = rng.standard_normal((2, cfg.input_channels, cfg.input_len))
    run("small model, all coordinates, train mode", WithLoss(model, [0, 2], dropout_seed=seed),
        x, MODEL_TOL, train=True)

    if full_model:
        cfg = ModelConfig()
        model = Model(cfg, seed=seed, dtype=f64)
        x = rng.standard_normal((2, cfg.input_channels, cfg.input_len))
        run("full model (2 clips, frozen BN, no dropout)", WithLoss(model, [1, 2]), x,
            MODEL_TOL, max_coords=full_model_coords)
    return reports
