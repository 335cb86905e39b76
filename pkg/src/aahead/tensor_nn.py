"""Dense NHWC layers with hand-written forward and backward passes.

Feature maps are numpy arrays laid out ``(N, H, W, C)`` (a single map may be
passed as ``(H, W, C)``).  Storage follows the input dtype; reductions
(convolution sums, batch statistics, losses) accumulate in float64.

Every ``*_forward`` returns ``(out, cache)`` and is pure; the matching
``*_backward`` consumes the cache.  The layer classes wrap these functions
and accumulate parameter gradients into :class:`Param` objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, where: str, detail: str = ""):
        self.where = where
        super().__init__(f"non-finite values in {where}{': ' + detail if detail else ''}")


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(where)
    return x


# ----------------------------------------------------------------------------
# 3x3 convolution, zero padding 1
# ----------------------------------------------------------------------------


def _out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _im2col3x3(xp: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    taps = []
    for i in range(3):
        for j in range(3):
            taps.append(xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :])
    return np.concatenate(taps, axis=-1)


def conv3x3_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1):
    """3x3 convolution (cross-correlation) with zero padding 1.

    ``kernel`` has shape ``(3, 3, Cin, Cout)`` and ``bias`` shape ``(Cout,)``.
    At stride 1 the output keeps the input's spatial size.
    """
    xb, squeeze = _as_batch(x)
    n, h, w, cin = xb.shape
    if kernel.shape[:3] != (3, 3, cin) or kernel.ndim != 4:
        raise ShapeError(f"input shape {x.shape} does not match kernel shape {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise ShapeError(f"bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if h < 3 or w < 3:
        raise ShapeError(f"spatial size must be at least 3x3, got input shape {x.shape}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    cout = kernel.shape[3]
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col3x3(xp, ho, wo, stride).astype(np.float64)
    wmat = kernel.reshape(9 * cin, cout).astype(np.float64)
    out = (cols @ wmat + bias.astype(np.float64)).astype(x.dtype)
    cache = (cols, kernel, stride, xb.shape, squeeze, x.dtype)
    return (out[0] if squeeze else out), cache


def conv3x3_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Returns ``(dx, dkernel, dbias)``; ``dx`` is ``None`` when ``need_dx`` is false."""
    cols, kernel, stride, in_shape, squeeze, dtype = cache
    n, h, w, cin = in_shape
    cout = kernel.shape[3]
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    expected = (ho, wo, cout) if squeeze else (n, ho, wo, cout)
    if dout.shape != expected:
        raise ShapeError(f"grad_out shape {dout.shape} does not match forward output shape {expected}")
    d = dout.reshape(n, ho, wo, cout).astype(np.float64)
    dflat = d.reshape(-1, cout)
    dkernel = (cols.reshape(-1, 9 * cin).T @ dflat).reshape(3, 3, cin, cout)
    dbias = dflat.sum(axis=0)
    if not need_dx:
        return None, dkernel.astype(kernel.dtype), dbias.astype(kernel.dtype)
    # input gradient sums only 9*Cout terms per entry; kept in the storage dtype
    dcols = dout.reshape(n, ho, wo, cout).astype(dtype, copy=False) @ kernel.reshape(9 * cin, cout).astype(dtype).T
    dxp = np.zeros((n, h + 2, w + 2, cin), dtype=dtype)
    tap = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                dcols[..., tap * cin:(tap + 1) * cin]
            tap += 1
    dx = dxp[:, 1:-1, 1:-1, :]
    return (dx[0] if squeeze else dx), dkernel.astype(kernel.dtype), dbias.astype(kernel.dtype)


def pointwise_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """1x1 convolution; ``weight`` is ``(Cin, Cout)``."""
    if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeError(f"input shape {x.shape} does not match weight shape {weight.shape}")
    out = (x.astype(np.float64) @ weight.astype(np.float64) + bias).astype(x.dtype)
    return out, (x, weight)


def pointwise_backward(dout: np.ndarray, cache):
    x, weight = cache
    cout = weight.shape[1]
    d = dout.astype(np.float64)
    dx = (d @ weight.astype(np.float64).T).astype(x.dtype)
    dw = x.reshape(-1, x.shape[-1]).astype(np.float64).T @ d.reshape(-1, cout)
    db = d.reshape(-1, cout).sum(axis=0)
    return dx, dw.astype(weight.dtype), db.astype(weight.dtype)


# ----------------------------------------------------------------------------
# Batch normalization, ReLU
# ----------------------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-5, training=True):
    """Per-channel batch norm over every axis but the last.

    Returns ``(out, cache, (batch_mean, batch_var))``; the batch statistics
    are ``None`` in inference mode.  Running statistics are not modified.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"input shape {x.shape} does not match batchnorm channels {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.size // c
        if m < 2:
            raise ShapeError(f"training-mode batchnorm needs at least 2 values per channel, got shape {x.shape}")
        mean = x.mean(axis=axes, dtype=np.float64)
        var = np.mean(np.square(x - mean.astype(x.dtype), dtype=np.float64), axis=axes)
        stats = (mean, var)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
        stats = None
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.astype(x.dtype)) * inv_std.astype(x.dtype)
    out = gamma.astype(x.dtype) * xhat + beta.astype(x.dtype)
    cache = (xhat, inv_std, gamma, training, x.dtype)
    return out, cache, stats


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training, dtype = cache
    if dout.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {dout.shape} does not match forward output shape {xhat.shape}")
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes, dtype=np.float64)
    dbeta = dout.sum(axis=axes, dtype=np.float64)
    g = gamma.astype(np.float64)
    if training:
        m = dout.size // dout.shape[-1]
        # dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)) with dxhat = gamma*dout
        scale = (g * inv_std).astype(dtype)
        shift = (dbeta / m).astype(dtype)
        proj = (dgamma / m).astype(dtype)
        dx = scale * (dout - shift - xhat * proj)
    else:
        dx = dout * (g * inv_std).astype(dtype)
    return dx.astype(dtype, copy=False), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask


def relu_backward(dout, mask):
    if dout.shape != mask.shape:
        raise ShapeError(f"grad_out shape {dout.shape} does not match forward output shape {mask.shape}")
    return np.where(mask, dout, np.zeros((), dtype=dout.dtype))


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient ``2 (pred - target) / n``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    loss = float(np.sum(diff * diff) / n)
    return loss, (2.0 * diff / n).astype(pred.dtype)


# ----------------------------------------------------------------------------
# Parameters and layers
# ----------------------------------------------------------------------------


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    def astype(self, dtype) -> "Param":
        return Param(self.name, self.value.astype(dtype))


def kaiming_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv3x3:
    def __init__(self, cin: int, cout: int, stride: int = 1, *, rng=None, name="conv", dtype=np.float32,
                 input_grad: bool = True):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.stride = stride
        self.input_grad = input_grad
        self.kernel = Param(f"{name}.kernel", kaiming_init(rng, (3, 3, cin, cout), 9 * cin, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    @property
    def channels(self) -> tuple[int, int]:
        return self.kernel.value.shape[2], self.kernel.value.shape[3]

    def params(self) -> list[Param]:
        return [self.kernel, self.bias]

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, training=True, update_stats=True):
        out, cache = conv3x3_forward(x, self.kernel.value, self.bias.value, self.stride)
        return check_finite(out, self.name), cache

    def backward(self, dout, cache):
        dx, dk, db = conv3x3_backward(dout, cache, self.input_grad)
        self.kernel.grad += dk
        self.bias.grad += db
        return dx


class Pointwise:
    def __init__(self, cin: int, cout: int, *, rng=None, name="pointwise", dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.name = name
        self.weight = Param(f"{name}.weight", kaiming_init(rng, (cin, cout), cin, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, training=True, update_stats=True):
        out, cache = pointwise_forward(x, self.weight.value, self.bias.value)
        return check_finite(out, self.name), cache

    def backward(self, dout, cache):
        dx, dw, db = pointwise_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BatchNorm:
    def __init__(self, channels: int, *, eps=1e-5, momentum=0.1, name="bn", dtype=np.float32):
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, training=True, update_stats=True):
        out, cache, stats = batchnorm_forward(
            x, self.gamma.value, self.beta.value, self.running_mean, self.running_var, self.eps, training
        )
        if training and update_stats:
            mean, var = stats
            m = x.size // x.shape[-1]
            unbiased = var * m / (m - 1)
            mom = self.momentum
            self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
            self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        return check_finite(out, self.name), cache

    def backward(self, dout, cache):
        dx, dg, db = batchnorm_backward(dout, cache)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class ReLU:
    def __init__(self, name="relu"):
        self.name = name

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, training=True, update_stats=True):
        return relu_forward(x)

    def backward(self, dout, cache):
        return relu_backward(dout, cache)


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x, training=True, update_stats=True):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, training, update_stats)
            caches.append(cache)
        return x, caches

    def backward(self, dout, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dout, cache)
        return dout


def conv_bn_relu(cin, cout, stride=1, *, rng=None, name="block", dtype=np.float32) -> Sequential:
    return Sequential(
        Conv3x3(cin, cout, stride, rng=rng, name=f"{name}.conv", dtype=dtype),
        BatchNorm(cout, name=f"{name}.bn", dtype=dtype),
        ReLU(name=f"{name}.relu"),
    )


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------


def sgd_step(params: Sequence[Param], velocities: list[np.ndarray], lr: float,
             momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """One SGD update with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * value)``; ``value <- value - lr * v``.
    Gradients are left untouched.  If any gradient is non-finite nothing is
    updated.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"gradient of parameter {i} ({p.name})")
    for p, v in zip(params, velocities):
        v *= momentum
        v += p.grad + weight_decay * p.value
        p.value -= (lr * v).astype(p.value.dtype)


class SGD:
    def __init__(self, params: Sequence[Param], lr=0.01, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        sgd_step(self.params, self.velocities, self.lr, self.momentum, self.weight_decay)


# ----------------------------------------------------------------------------
# Finite-difference gradient checking
# ----------------------------------------------------------------------------


class Fragment(Protocol):
    """A pure function of named arrays with an analytic backward pass."""

    name: str

    def forward(self, inputs: dict[str, np.ndarray]): ...

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]: ...


@dataclass
class FunctionFragment:
    name: str
    forward_fn: Callable
    backward_fn: Callable

    def forward(self, inputs):
        return self.forward_fn(inputs)

    def backward(self, dout, cache):
        return self.backward_fn(dout, cache)


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.error})" if self.error else ""
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_checked} coords){extra}"


def grad_check(fragment: Fragment, inputs: dict[str, np.ndarray], tol: float = 1e-4, seed: int = 0,
               n_coords: int = 30, eps: float | Sequence[float] = (1e-5, 1e-6),
               floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The scalar probed is ``sum(forward(inputs) * r)`` for a fixed random
    ``r``.  For each input array, ``n_coords`` random coordinates are
    perturbed.  The relative error at a coordinate is
    ``|a - n| / max(|a|, |n|, floor * G, noise)`` with ``G`` the largest
    analytic gradient entry over all inputs, so entries far below the
    fragment's gradient scale (a bias feeding batchnorm has gradient exactly
    zero) are judged against that scale, which finite differences resolve.
    With several step sizes a coordinate's error is the smallest over them:
    the larger step can straddle a ReLU kink, the smaller one drowns in
    round-off, and a wrong gradient fails both.  ``noise`` is the round-off
    level of the difference quotient, ``1e4 * ulp * sum|out * r| / step``.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    try:
        out, cache = fragment.forward(inputs)
        check_finite(out, fragment.name)
        r = rng.standard_normal(np.shape(out))
        analytic = fragment.backward(r, cache)
        steps = (eps,) if np.isscalar(eps) else tuple(eps)
        ulp_sum = np.finfo(np.float64).eps * float(np.sum(np.abs(np.asarray(out, dtype=np.float64) * r)))
    except NonFiniteError as exc:
        return GradCheckReport(fragment.name, float("inf"), tol, 0, error=str(exc))

    def probe(perturbed):
        o, _ = fragment.forward(perturbed)
        check_finite(o, fragment.name)
        return float(np.sum(np.asarray(o, dtype=np.float64) * r))

    worst, worst_at, checked = 0.0, None, 0
    grad_scale = max((float(np.max(np.abs(g))) for k, g in analytic.items() if k in inputs and np.size(g)),
                     default=0.0)
    scale = max(grad_scale * floor, 1e-12)
    try:
        for key, arr in inputs.items():
            if key not in analytic:
                continue
            grad = np.asarray(analytic[key], dtype=np.float64)
            if grad.shape != arr.shape:
                raise ShapeError(f"gradient for {key!r} has shape {grad.shape}, expected {arr.shape}")
            flat_count = arr.size
            picks = rng.choice(flat_count, size=min(n_coords, flat_count), replace=False)
            for flat in picks:
                idx = np.unravel_index(flat, arr.shape)
                a = grad[idx]
                err = float("inf")
                for h in steps:
                    plus = dict(inputs)
                    minus = dict(inputs)
                    plus[key] = arr.copy()
                    minus[key] = arr.copy()
                    plus[key][idx] += h
                    minus[key][idx] -= h
                    numeric = (probe(plus) - probe(minus)) / (2 * h)
                    noise = 1e4 * ulp_sum / h
                    err = min(err, abs(a - numeric) / max(abs(a), abs(numeric), scale, noise))
                checked += 1
                if err > worst:
                    worst, worst_at = err, (key, tuple(int(i) for i in idx))
    except NonFiniteError as exc:
        return GradCheckReport(fragment.name, float("inf"), tol, checked, error=str(exc))
    return GradCheckReport(fragment.name, worst, tol, checked, worst_at)
