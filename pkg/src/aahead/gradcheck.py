"""Finite-difference checks for every differentiable piece, as named fragments.

Each builder returns ``(fragment, inputs, tol)`` for one seed.  Layers are
built in float64 so central differences resolve the gradients; the
background model inside the statistical fragments is estimated once from the
reference inputs and then held fixed, mirroring how training treats it.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import stat_test as st
from .aadh import AADHead, BaselineHead
from .detector import Targets, detection_loss
from .tensor_nn import (BatchNorm, Conv3x3, FunctionFragment, GradCheckReport, Pointwise, batchnorm_backward,
                        batchnorm_forward, conv3x3_backward, conv3x3_forward, grad_check, mse_loss,
                        pointwise_backward, pointwise_forward, relu_backward, relu_forward)

DEFAULT_TOL = 1e-4
BATCHNORM_TOL = 1e-3


class ModuleFragment:
    """Wraps a layer or head: inputs are ``x`` plus every parameter by name."""

    def __init__(self, name: str, module, forward_kwargs=None):
        self.name = name
        self.module = module
        self.forward_kwargs = forward_kwargs or {}

    def reference_inputs(self, x) -> dict[str, np.ndarray]:
        inputs = {"x": x}
        inputs.update({p.name: p.value.copy() for p in self.module.params()})
        return inputs

    def forward(self, inputs):
        for p in self.module.params():
            p.value[...] = inputs[p.name]
        return self.module.forward(inputs["x"], training=True, update_stats=False, **self.forward_kwargs)

    def backward(self, dout, cache):
        params = self.module.params()
        for p in params:
            p.zero_grad()
        dx = self.module.backward(dout, cache)
        grads = {p.name: p.grad.copy() for p in params}
        if dx is not None:
            grads["x"] = dx
        return grads


def _conv(rng, stride=1):
    x = rng.standard_normal((2, 7, 6, 3))
    k = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)

    def fwd(d):
        return conv3x3_forward(d["x"], d["k"], d["b"], stride)

    def bwd(dout, cache):
        dx, dk, db = conv3x3_backward(dout, cache)
        return {"x": dx, "k": dk, "b": db}

    return FunctionFragment(f"conv3x3/stride{stride}", fwd, bwd), {"x": x, "k": k, "b": b}, DEFAULT_TOL


def _pointwise(rng):
    x = rng.standard_normal((2, 5, 5, 4))
    w = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)

    def bwd(dout, cache):
        dx, dw, db = pointwise_backward(dout, cache)
        return {"x": dx, "w": dw, "b": db}

    return (FunctionFragment("pointwise", lambda d: pointwise_forward(d["x"], d["w"], d["b"]), bwd),
            {"x": x, "w": w, "b": b}, DEFAULT_TOL)


def _batchnorm(rng):
    x = rng.standard_normal((2, 5, 5, 3)) * rng.uniform(0.5, 3, 3) + rng.standard_normal(3)
    g = rng.standard_normal(3)
    b = rng.standard_normal(3)

    def fwd(d):
        out, cache, _ = batchnorm_forward(d["x"], d["g"], d["b"], None, None, training=True)
        return out, cache

    def bwd(dout, cache):
        dx, dg, db = batchnorm_backward(dout, cache)
        return {"x": dx, "g": dg, "b": db}

    return FunctionFragment("batchnorm", fwd, bwd), {"x": x, "g": g, "b": b}, BATCHNORM_TOL


def _relu(rng):
    x = rng.standard_normal((3, 4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep coordinates away from the kink
    return (FunctionFragment("relu", lambda d: relu_forward(d["x"]), lambda g, m: {"x": relu_backward(g, m)}),
            {"x": x}, DEFAULT_TOL)


def _mse(rng):
    pred = rng.standard_normal((4, 6))
    target = rng.standard_normal((4, 6))

    def fwd(d):
        loss, grad = mse_loss(d["pred"], target)
        return np.array(loss), grad

    return (FunctionFragment("mse_loss", fwd, lambda dout, grad: {"pred": dout * grad}),
            {"pred": pred}, DEFAULT_TOL)


def _significance(rng, measure: st.Measure, channels: int = 8):
    fm = rng.exponential(1.0, size=(6, 6, channels)) * rng.uniform(0.5, 2.0, channels)
    fm[2, 3] *= 4.0  # one clearly anomalous voxel
    config = st.TestConfig(measure=measure, channels=channels)
    model = st.estimate_null_model(fm, measure)

    def fwd(d):
        sig = st.significance(d["fm"], config, model)
        return sig.values, (d["fm"], sig)

    def bwd(dout, cache):
        fm_, sig = cache
        return {"fm": st.significance_backward(fm_, sig, dout)}

    return FunctionFragment(f"significance/{measure.value}/C{channels}", fwd, bwd), {"fm": fm}, DEFAULT_TOL


def _sigmoid_alpha(rng):
    s = rng.uniform(0, 3000, size=(5, 5))
    alpha = 1e-3

    def fwd(d):
        return st.sigmoid_alpha(d["s"], alpha), d["s"]

    return (FunctionFragment("sigmoid_alpha", fwd, lambda dout, s: {"s": dout * st.sigmoid_alpha_grad(s, alpha)}),
            {"s": s}, DEFAULT_TOL)


def _aadh(rng, measure: st.Measure = st.Measure.SUM):
    head = AADHead(4, st.TestConfig(measure=measure), rng=rng, dtype=np.float64)
    for p in head.params():  # move BN affine params off their init so every path is exercised
        if p.name.endswith((".gamma", ".beta")):
            p.value[...] = rng.uniform(0.5, 1.5, p.value.shape) if p.name.endswith("gamma") \
                else rng.uniform(-0.2, 0.5, p.value.shape)
    x = rng.standard_normal((2, 6, 6, 4))
    fm, _ = head.filtered(x, training=True, update_stats=False)
    frozen = head.background_model(fm)
    frag = ModuleFragment(f"aadh/{measure.value}", head, {"null_model": frozen})
    return frag, frag.reference_inputs(x), DEFAULT_TOL


def _baseline(rng):
    head = BaselineHead(4, 8, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 6, 6, 4))
    frag = ModuleFragment("baseline", head)
    return frag, frag.reference_inputs(x), DEFAULT_TOL


def _layer(rng, kind):
    if kind == "conv":
        layer = Conv3x3(3, 4, 2, rng=rng, dtype=np.float64, name="conv")
        layer.bias.value[...] = rng.standard_normal(4)
    elif kind == "pointwise":
        layer = Pointwise(3, 2, rng=rng, dtype=np.float64, name="pw")
    else:
        layer = BatchNorm(3, dtype=np.float64, name="bn")
        layer.gamma.value[...] = rng.uniform(0.5, 2, 3)
    x = rng.standard_normal((2, 6, 6, 3))
    frag = ModuleFragment(f"layer/{kind}", layer)
    return frag, frag.reference_inputs(x), BATCHNORM_TOL if kind == "bn" else DEFAULT_TOL


def _detection_loss(rng):
    n, h, w = 2, 4, 4
    mask = np.zeros((n, h, w), dtype=bool)
    mask[0, 1, 2] = mask[1, 3, 0] = mask[1, 0, 0] = True
    targets = Targets(mask.astype(np.float64), rng.standard_normal((n, h, w, 4)), mask)
    obj = rng.uniform(0, 1, (n, h, w))
    boxes = targets.boxes + rng.choice([-1, 1], (n, h, w, 4)) * rng.uniform(0.05, 1, (n, h, w, 4))

    def fwd(d):
        loss, dobj, dbox = detection_loss(d["obj"], d["boxes"], targets, 3.0, 0.7)
        return np.array(loss), (dobj, dbox)

    def bwd(dout, cache):
        dobj, dbox = cache
        return {"obj": dout * dobj, "boxes": dout * dbox}

    return FunctionFragment("detection_loss", fwd, bwd), {"obj": obj, "boxes": boxes}, DEFAULT_TOL


FRAGMENTS: dict[str, Callable] = {
    "conv3x3": _conv,
    "conv3x3/stride2": lambda rng: _conv(rng, 2),
    "pointwise": _pointwise,
    "batchnorm": _batchnorm,
    "relu": _relu,
    "mse_loss": _mse,
    "significance/sum": lambda rng: _significance(rng, st.Measure.SUM),
    "significance/sum/C1": lambda rng: _significance(rng, st.Measure.SUM, 1),
    "significance/min": lambda rng: _significance(rng, st.Measure.MIN),
    "significance/chi2": lambda rng: _significance(rng, st.Measure.CHI2),
    "significance/chi2/C3": lambda rng: _significance(rng, st.Measure.CHI2, 3),
    "sigmoid_alpha": _sigmoid_alpha,
    "layer/conv": lambda rng: _layer(rng, "conv"),
    "layer/pointwise": lambda rng: _layer(rng, "pointwise"),
    "layer/bn": lambda rng: _layer(rng, "bn"),
    "aadh/sum": _aadh,
    "aadh/min": lambda rng: _aadh(rng, st.Measure.MIN),
    "aadh/chi2": lambda rng: _aadh(rng, st.Measure.CHI2),
    "baseline": _baseline,
    "detection_loss": _detection_loss,
}


def check_fragment(name: str, seed: int, tol: float | None = None) -> GradCheckReport:
    """Build fragment ``name`` from ``seed`` and grad-check it.

    ``tol=None`` uses the fragment's own tolerance (looser for batchnorm).
    """
    rng = np.random.default_rng(seed)
    frag, inputs, default_tol = FRAGMENTS[name](rng)
    report = grad_check(frag, inputs, tol=default_tol if tol is None else tol, seed=seed)
    report.name = name
    return report


def run_all(seeds=range(20), tol: float | None = None, names=None) -> list[GradCheckReport]:
    """Worst report per fragment over ``seeds``."""
    reports = []
    for name in names or FRAGMENTS:
        worst = None
        for seed in seeds:
            rep = check_fragment(name, seed, tol)
            if worst is None or not rep.passed or rep.max_rel_error > worst.max_rel_error:
                worst = rep
            if not rep.passed:
                break
        reports.append(worst)
    return reports
