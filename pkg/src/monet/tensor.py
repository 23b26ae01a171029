"""Minimal float64 differentiable substrate for the fixed MONet topology.

Layout is ``(batch, channels, height, width)`` for spatial layers and
``(batch, features)`` for dense layers. Layers are stateless with respect to
their inputs: ``forward`` returns the output plus a cache, ``backward`` takes
that cache, so one layer instance can be applied to several inputs (the
encoder is shared between the two images of a pair).
"""
from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """Parameter container: data plus an accumulated gradient of equal shape."""

    def __init__(self, data: Any):
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    kind: str = "layer"

    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x):
        """Return ``(output, cache)``."""
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(input_grad, [param grads in params() order])``."""
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)[0]


def _check_rank(layer: Layer, x: np.ndarray, rank: int, what: str = "input") -> None:
    if x.ndim != rank:
        raise ShapeError(f"{layer.kind}: expected rank-{rank} {what}, got shape {x.shape}")


class Conv2d(Layer):
    """Square-kernel convolution with zero "same" padding (``k // 2``)."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 rng: np.random.Generator | None = None):
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same padding")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.pad = kernel_size // 2
        rng = rng if rng is not None else np.random.default_rng(0)
        k2 = kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.kernel = Tensor(glorot_uniform(rng, shape, in_channels * k2, out_channels * k2))
        self.bias = Tensor(np.zeros(out_channels))

    def params(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)

    def forward(self, x):
        _check_rank(self, x, 4)
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d: kernel {self.kernel.shape} expects {self.in_channels} "
                             f"input channels, got input shape {x.shape}")
        ho, wo = self.output_hw(h, w)
        p, s, k = self.pad, self.stride, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # channels-first im2col: (B, C, k, k, Ho, Wo) filled by k*k strided copies
        cols = np.empty((b, c, k, k, ho, wo))
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
        cols = cols.reshape(b, c * k * k, ho * wo)
        wmat = self.kernel.data.reshape(self.out_channels, -1)
        out = np.matmul(wmat, cols) + self.bias.data[:, None]
        return out.reshape(b, self.out_channels, ho, wo), (cols, x.shape)

    def backward(self, cache, grad_out):
        cols, in_shape = cache
        b, c, h, w = in_shape
        ho, wo = self.output_hw(h, w)
        if grad_out.shape != (b, self.out_channels, ho, wo):
            raise ShapeError(f"conv2d: upstream grad shape {grad_out.shape} != output shape "
                             f"{(b, self.out_channels, ho, wo)}")
        p, s, k = self.pad, self.stride, self.k
        g = grad_out.reshape(b, self.out_channels, ho * wo)
        wmat = self.kernel.data.reshape(self.out_channels, -1)
        dkernel = sum(g[n] @ cols[n].T for n in range(b)).reshape(self.kernel.shape)
        dbias = g.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T, g).reshape(b, c, k, k, ho, wo)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return np.ascontiguousarray(dx), [dkernel, dbias]


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``[out, in]``."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(glorot_uniform(rng, (out_features, in_features), in_features, out_features))
        self.bias = Tensor(np.zeros(out_features))

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        _check_rank(self, x, 2)
        if x.shape[1] != self.in_features:
            raise ShapeError(f"dense: weight {self.weight.shape} incompatible with input shape {x.shape}")
        return x @ self.weight.data.T + self.bias.data, x

    def backward(self, cache, grad_out):
        x = cache
        if grad_out.shape != (x.shape[0], self.out_features):
            raise ShapeError(f"dense: upstream grad shape {grad_out.shape} != output shape "
                             f"{(x.shape[0], self.out_features)}")
        return grad_out @ self.weight.data, [grad_out.T @ x, grad_out.sum(axis=0)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, grad_out):
        if grad_out.shape != cache.shape:
            raise ShapeError(f"relu: upstream grad shape {grad_out.shape} != output shape {cache.shape}")
        return grad_out * cache, []


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = sigmoid(x)
        return y, y

    def backward(self, cache, grad_out):
        if grad_out.shape != cache.shape:
            raise ShapeError(f"sigmoid: upstream grad shape {grad_out.shape} != output shape {cache.shape}")
        return grad_out * cache * (1.0 - cache), []


class Identity(Layer):
    kind = "identity"

    def forward(self, x):
        return x, x.shape

    def backward(self, cache, grad_out):
        return grad_out, []


class Upsample2x(Layer):
    """Nearest-neighbour 2x spatial upsampling."""

    kind = "upsample2x"

    def forward(self, x):
        _check_rank(self, x, 4)
        return x.repeat(2, axis=2).repeat(2, axis=3), x.shape

    def backward(self, cache, grad_out):
        b, c, h, w = cache
        if grad_out.shape != (b, c, 2 * h, 2 * w):
            raise ShapeError(f"upsample2x: upstream grad shape {grad_out.shape} != output shape "
                             f"{(b, c, 2 * h, 2 * w)}")
        return grad_out.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)), []


class ConcatChannels(Layer):
    """Concatenate a sequence of ``(B, C_i, H, W)`` arrays along channels."""

    kind = "concat_channels"

    def forward(self, xs):
        xs = list(xs)
        for x in xs:
            _check_rank(self, x, 4)
        spatial = {(x.shape[0],) + x.shape[2:] for x in xs}
        if len(spatial) != 1:
            raise ShapeError(f"concat_channels: mismatched shapes {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, cache, grad_out):
        splits = np.cumsum(cache)[:-1]
        return np.split(grad_out, splits, axis=1), []


def apply_layer(layer: Layer, x):
    return layer.forward(x)[0]


def backprop(layer: Layer, x, upstream_grad: np.ndarray):
    """Analytic gradients of ``layer`` at ``x``: ``(input_grad, param_grads)``."""
    out, cache = layer.forward(x)
    if not isinstance(out, list) and np.shape(upstream_grad) != out.shape:
        raise ShapeError(f"{layer.kind}: upstream grad shape {np.shape(upstream_grad)} != "
                         f"forward output shape {out.shape}")
    return layer.backward(cache, upstream_grad)


class Sequential:
    """Named chain of layers; gradients accumulate into each ``Tensor.grad``."""

    def __init__(self, layers: Sequence[tuple[str, Layer]]):
        self.layers = list(layers)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self.layers:
            for pname, t in layer.params().items():
                out[f"{name}.{pname}"] = t
        return out

    def forward(self, x):
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad):
        for (_, layer), cache in zip(reversed(self.layers), reversed(caches)):
            grad, pgrads = layer.backward(cache, grad)
            for t, g in zip(layer.params().values(), pgrads):
                t.grad += g
        return grad

    def __call__(self, x):
        return self.forward(x)[0]


@dataclass
class Adam:
    """Adam with bias correction over a named parameter dict."""

    params: dict[str, Tensor]
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.params.items():
            self.m.setdefault(name, np.zeros_like(t.data))
            self.v.setdefault(name, np.zeros_like(t.data))

    def step(self) -> None:
        for name, t in self.params.items():
            if not np.all(np.isfinite(t.grad)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def adam_step(state: Adam, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Single-array Adam update; advances ``state`` and returns the new params."""
    params = np.array(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ShapeError(f"adam: grad shape {grads.shape} != param shape {params.shape}")
    t = state.params.get("param")
    if t is None or t.shape != params.shape:
        t = Tensor(params)
        state.params = {"param": t}
        state.m["param"] = np.zeros_like(params)
        state.v["param"] = np.zeros_like(params)
    t.data[...] = params
    t.grad[...] = grads
    state.step()
    return t.data.copy()


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    skipped: dict[str, int] = field(default_factory=dict)  # kink-crossing probes left out, per block
    probed: int = 0

    @property
    def flagged(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def skipped_fraction(self) -> float:
        return sum(self.skipped.values()) / max(self.probed, 1)


def _denominator(a: np.ndarray, n: np.ndarray, floor: float, block_floor: float) -> np.ndarray:
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))))
    return np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor, block_floor * scale))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8,
                   block_floor: float = 0.0) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor, block_floor * scale)``.

    ``scale`` is the largest magnitude in the block, so with ``block_floor > 0``
    entries far below the block's gradient scale are judged against that
    scale rather than against their own (roundoff-dominated) size.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / _denominator(a, n, floor, block_floor)))


def gradient_check(fragment, x: np.ndarray, tolerance: float = 1e-4, h: float = 1e-5,
                   head: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None,
                   max_entries: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-8, block_floor: float = 0.0, skip_kinks: bool = False) -> GradCheckReport:
    """Compare analytic gradients of ``fragment`` with central differences.

    ``fragment`` needs ``forward(x) -> (out, cache)``, ``backward(cache, g)``
    that accumulates parameter grads and returns the input grad, and
    ``params() -> dict[str, Tensor]``. ``head`` maps the output to a scalar
    loss and its gradient; by default a fixed random linear functional is
    used. ``max_entries`` caps how many entries per block are probed.
    ``floor`` and ``block_floor`` are passed to :func:`relative_error`.

    With ``skip_kinks``, a failing probe whose left and right one-sided
    slopes disagree by more than the tolerance straddles a ReLU kink or an
    argmax switch; central differences say nothing there, so the probe is
    dropped and counted in ``report.skipped``.
    """
    rng = rng if rng is not None else np.random.default_rng(1234)
    x = np.array(x, dtype=np.float64)
    if head is None:
        out0, _ = fragment.forward(x)
        proj = rng.standard_normal(np.shape(out0))

        def head(out):
            return float(np.sum(out * proj)), proj

    def loss_at(xv):
        out, _ = fragment.forward(xv)
        return head(out)[0]

    params = fragment.params()
    for t in params.values():
        t.zero_grad()
    out, cache = fragment.forward(x)
    base, gout = head(out)
    gx = fragment.backward(cache, gout)

    def probe(arr: np.ndarray, evaluate):
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size)
        gap = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            lp = evaluate()
            flat[i] = orig - h
            lm = evaluate()
            flat[i] = orig
            num[k] = (lp - lm) / (2 * h)
            gap[k] = abs((lp - base) - (base - lm)) / h
        return idx, num, gap

    errors: dict[str, float] = {}
    skipped: dict[str, int] = {}
    probed = 0

    def judge(name, analytic, idx, num, gap):
        nonlocal probed
        a = np.asarray(analytic, dtype=np.float64).reshape(-1)[idx]
        probed += idx.size
        if a.size == 0:
            errors[name] = 0.0
            return
        denom = _denominator(a, num, floor, block_floor)
        err = np.abs(a - num) / denom
        if skip_kinks:
            kink = (err > tolerance) & (gap / denom > tolerance)
            if kink.any():
                skipped[name] = int(kink.sum())
            err = err[~kink]
        errors[name] = float(err.max()) if err.size else 0.0

    for name, t in params.items():
        analytic = t.grad.copy()
        judge(name, analytic, *probe(t.data, lambda: loss_at(x)))
    if gx is not None and not isinstance(gx, (list, tuple)):
        xa = x.copy()
        judge("input", gx, *probe(xa, lambda: loss_at(xa)))
    for t in params.values():
        t.zero_grad()
    return GradCheckReport(errors=errors, tolerance=tolerance, skipped=skipped, probed=probed)


# ---------------------------------------------------------------- checkpoints

def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | os.PathLike, params: dict[str, Tensor], meta: dict) -> None:
    """Write every parameter under its path key plus a JSON metadata blob to one ``.npz``."""
    arrays = {name: t.data for name, t in params.items()}
    if "__meta__" in arrays:
        raise ValueError("parameter name __meta__ is reserved")
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    # np.savez stamps entries with the wall clock; fixed stamps keep files byte-reproducible
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            with zf.open(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    return arrays, meta
