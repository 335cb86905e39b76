"""Objectness heads: the anomaly-aware head and a conventional logistic baseline.

Both heads share a spatial filtering block (two 3x3 conv -> BN -> ReLU
stages producing ``C`` non-negative channels).  The anomaly-aware head turns
those channels into a significance map against a background model estimated
from the map itself, then squashes it with the scaled sigmoid.  The baseline
adds a 1x1 convolution to a single logit and a logistic activation.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from . import stat_test as st
from .tensor_nn import BatchNorm, Conv3x3, Pointwise, ReLU, Sequential, ShapeError


class NullModelMode(str, Enum):
    IMAGE = "image"
    BATCH = "batch"
    FROZEN = "frozen"


class StaleCacheError(RuntimeError):
    pass


class NotFittedError(RuntimeError):
    pass


def spatial_block(cin: int, channels: int, rng, dtype, name: str) -> Sequential:
    return Sequential(
        Conv3x3(cin, channels, rng=rng, name=f"{name}.conv1", dtype=dtype),
        BatchNorm(channels, name=f"{name}.bn1", dtype=dtype),
        ReLU(name=f"{name}.relu1"),
        Conv3x3(channels, channels, rng=rng, name=f"{name}.conv2", dtype=dtype),
        BatchNorm(channels, name=f"{name}.bn2", dtype=dtype),
        ReLU(name=f"{name}.relu2"),
    )


@dataclass
class HeadCache:
    tag: tuple
    block_caches: list
    features: np.ndarray
    significance: st.SignificanceMap | None = None
    logits_cache: tuple | None = None
    objectness: np.ndarray | None = None


class _Head:
    name: str
    block: Sequential

    def params(self):
        return self.block.params()

    def buffers(self):
        return self.block.buffers()

    def _tag(self, out_shape):
        return (id(self), tuple(p.value.shape for p in self.params()), tuple(out_shape))

    def _check_cache(self, dobj, cache: HeadCache):
        if cache.tag != self._tag(dobj.shape):
            raise StaleCacheError(
                f"{self.name}: cache does not match this head or the upstream gradient of shape {dobj.shape}"
            )


class AADHead(_Head):
    """Anomaly-aware objectness head.

    ``forward`` maps ``(N, H, W, Cin)`` features to an ``(N, H, W)``
    objectness map in [0, 1).  The background model is re-estimated from the
    filtered channels on every call (per image by default) and treated as a
    constant by ``backward``.
    """

    def __init__(self, in_channels: int, config: st.TestConfig | None = None,
                 null_model_mode: NullModelMode | str = NullModelMode.IMAGE, *, rng=None,
                 dtype=np.float32, name: str = "aadh"):
        self.config = st.TestConfig() if config is None else config
        self.null_model_mode = NullModelMode(null_model_mode)
        self.name = name
        rng = np.random.default_rng(0) if rng is None else rng
        self.block = spatial_block(in_channels, self.config.channels, rng, dtype, name)
        self.null_model: st.NullModel | None = None

    def filtered(self, x, training=True, update_stats=True):
        return self.block.forward(x, training, update_stats)

    def background_model(self, fm: np.ndarray) -> st.NullModel:
        floor = self.config.lambda_floor
        if self.null_model_mode is NullModelMode.FROZEN:
            if self.null_model is None:
                raise NotFittedError(f"{self.name}: frozen null model requested but fit_null_model was never called")
            return self.null_model
        if self.null_model_mode is NullModelMode.BATCH:
            return st.estimate_null_model(fm.reshape(-1, 1, fm.shape[-1]), self.config.measure, floor)
        return st.estimate_null_model(fm, self.config.measure, floor)

    def fit_null_model(self, features: np.ndarray) -> st.NullModel:
        """Estimate and store one background model from inference-mode filtered features."""
        fm, _ = self.filtered(features, training=False, update_stats=False)
        self.null_model = st.estimate_null_model(fm.reshape(-1, 1, fm.shape[-1]), self.config.measure,
                                                 self.config.lambda_floor)
        return self.null_model

    def forward(self, x, training=True, update_stats=True, null_model: st.NullModel | None = None):
        fm, caches = self.filtered(x, training, update_stats)
        model = self.background_model(fm) if null_model is None else null_model
        sig = st.significance(fm, self.config, model)
        obj = st.sigmoid_alpha(sig.values, self.config.alpha_sigmoid).astype(fm.dtype)
        return obj, HeadCache(self._tag(obj.shape), caches, fm, significance=sig)

    def backward(self, dobj, cache: HeadCache):
        self._check_cache(dobj, cache)
        sig = cache.significance
        dsig = np.asarray(dobj, dtype=np.float64) * st.sigmoid_alpha_grad(sig.values, self.config.alpha_sigmoid)
        dfm = st.significance_backward(cache.features, sig, dsig)
        return self.block.backward(dfm, cache.block_caches)


class BaselineHead(_Head):
    """Conventional objectness: spatial block -> 1x1 conv -> logistic."""

    def __init__(self, in_channels: int, channels: int = 8, *, rng=None, dtype=np.float32, name: str = "baseline"):
        self.name = name
        rng = np.random.default_rng(0) if rng is None else rng
        self.block = spatial_block(in_channels, channels, rng, dtype, name)
        self.pointwise = Pointwise(channels, 1, rng=rng, name=f"{name}.logit", dtype=dtype)

    def params(self):
        return self.block.params() + self.pointwise.params()

    def forward(self, x, training=True, update_stats=True, null_model=None):
        fm, caches = self.block.forward(x, training, update_stats)
        logits, lcache = self.pointwise.forward(fm)
        obj = expit(logits[..., 0].astype(np.float64)).astype(fm.dtype)
        return obj, HeadCache(self._tag(obj.shape), caches, fm, logits_cache=lcache, objectness=obj)

    def backward(self, dobj, cache: HeadCache):
        self._check_cache(dobj, cache)
        p = cache.objectness.astype(np.float64)
        dlogit = (np.asarray(dobj, dtype=np.float64) * p * (1.0 - p))[..., None].astype(cache.features.dtype)
        dfm = self.pointwise.backward(dlogit, cache.logits_cache)
        return self.block.backward(dfm, cache.block_caches)


def make_head(kind: str, in_channels: int, config: st.TestConfig | None = None,
              null_model_mode: str = "image", *, rng=None, dtype=np.float32):
    config = st.TestConfig() if config is None else config
    if kind == "aadh":
        return AADHead(in_channels, config, null_model_mode, rng=rng, dtype=dtype)
    if kind == "baseline":
        return BaselineHead(in_channels, config.channels, rng=rng, dtype=dtype)
    raise ValueError(f"unknown head kind {kind!r}; expected 'aadh' or 'baseline'")


def count_params(head) -> int:
    return sum(p.value.size for p in head.params())


def check_feature_map(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"features must be (H, W, C) or (N, H, W, C), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return x
