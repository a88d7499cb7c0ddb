"""Dense 2D grids and the cross-correlation machinery used by the loss and model.

A grid is a 2D ``float64`` numpy array (row-major). A grid stack is a 3D array
of shape ``(channels, H, W)``. Convolution here always means cross-correlation:
the kernel is applied unflipped.
"""
from __future__ import annotations

import enum
from typing import Tuple, Union

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments it cannot accept."""


class PaddingMode(str, enum.Enum):
    ZERO = "zero"
    VALID = "valid"


def as_grid(values, name: str = "grid") -> np.ndarray:
    """Coerce ``values`` to a finite 2D float64 array."""
    g = np.asarray(values, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
        raise InvalidInputError(f"{name} must be a non-empty 2D array, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return g


def as_stack(values, name: str = "stack") -> np.ndarray:
    s = np.asarray(values, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or min(s.shape) < 1:
        raise InvalidInputError(f"{name} must have shape (channels, H, W), got {s.shape}")
    return s


def _coefficients(kernel) -> np.ndarray:
    k = getattr(kernel, "coefficients", kernel)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise InvalidInputError(f"kernel must be 2D, got shape {k.shape}")
    return k


def _check_kernel(k: np.ndarray, shape: Tuple[int, int]) -> None:
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidInputError(f"kernel dimensions must be odd, got {k.shape}")
    if kh > shape[0] or kw > shape[1]:
        raise InvalidInputError(f"kernel {k.shape} larger than input {shape}")


def output_shape(input_dims: Tuple[int, int], kernel_dims: Tuple[int, int],
                 padding: PaddingMode) -> Tuple[int, int]:
    padding = PaddingMode(padding)
    if padding is PaddingMode.ZERO:
        return tuple(input_dims)
    return input_dims[0] - kernel_dims[0] + 1, input_dims[1] - kernel_dims[1] + 1


def conv2d(x, kernel, padding: PaddingMode = PaddingMode.ZERO) -> np.ndarray:
    """Cross-correlate grid ``x`` with ``kernel``.

    ``ZERO`` padding keeps the input size; ``VALID`` returns
    ``(H - kh + 1, W - kw + 1)``.
    """
    x = as_grid(x, "input")
    k = _coefficients(kernel)
    _check_kernel(k, x.shape)
    padding = PaddingMode(padding)
    kh, kw = k.shape
    if padding is PaddingMode.ZERO:
        x = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    ho, wo = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((ho, wo))
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0.0:
                out += k[a, b] * x[a:a + ho, b:b + wo]
    return out


def conv2d_input_grad(upstream_grad, kernel, padding: PaddingMode,
                      input_dims: Tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input.

    Given d(scalar)/d(output), returns d(scalar)/d(input) of shape
    ``input_dims``. Equivalent to a full convolution with the 180-degree
    rotated kernel, cropped to the padded region.
    """
    u = as_grid(upstream_grad, "upstream_grad")
    k = _coefficients(kernel)
    input_dims = (int(input_dims[0]), int(input_dims[1]))
    _check_kernel(k, input_dims)
    padding = PaddingMode(padding)
    if u.shape != output_shape(input_dims, k.shape, padding):
        raise InvalidInputError(
            f"upstream_grad shape {u.shape} inconsistent with input {input_dims} "
            f"and {padding.value} padding")
    kh, kw = k.shape
    ph, pw = (kh // 2, kw // 2) if padding is PaddingMode.ZERO else (0, 0)
    ho, wo = u.shape
    g = np.zeros((input_dims[0] + 2 * ph, input_dims[1] + 2 * pw))
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0.0:
                g[a:a + ho, b:b + wo] += k[a, b] * u
    return g[ph:ph + input_dims[0], pw:pw + input_dims[1]]


# Multi-channel variants used by the mask head. Weights have shape
# (out_channels, in_channels, kh, kw); inputs are (in_channels, H, W);
# zero padding keeps the spatial size.

def conv2d_channels(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    c, h, w = x.shape
    o, ci, kh, kw = weights.shape
    if ci != c:
        raise InvalidInputError(f"weights expect {ci} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((o, h, w))
    for a in range(kh):
        for b in range(kw):
            out += np.tensordot(weights[:, :, a, b], xp[:, a:a + h, b:b + w], axes=1)
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_channels_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray,
                             need_input_grad: bool = True):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_channels`."""
    c, h, w = x.shape
    o, _, kh, kw = weights.shape
    if upstream.shape != (o, h, w):
        raise InvalidInputError(f"upstream shape {upstream.shape} != {(o, h, w)}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    gw = np.empty_like(weights)
    for a in range(kh):
        for b in range(kw):
            gw[:, :, a, b] = np.tensordot(upstream, xp[:, a:a + h, b:b + w], axes=([1, 2], [1, 2]))
    gb = upstream.sum(axis=(1, 2))
    gx = None
    if need_input_grad:
        gp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gp[:, a:a + h, b:b + w] += np.tensordot(weights[:, :, a, b].T, upstream, axes=1)
        gx = gp[:, ph:ph + h, pw:pw + w]
    return gx, gw, gb


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Area-average pooling over non-overlapping ``factor`` x ``factor`` blocks (last two axes)."""
    if factor == 1:
        return x
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise InvalidInputError(f"shape {(h, w)} not divisible by pooling factor {factor}")
    return x.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def avg_pool_backward(upstream: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return upstream
    g = np.repeat(np.repeat(upstream, factor, axis=-2), factor, axis=-1)
    return g / (factor * factor)


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(op: str, a, b: Union[np.ndarray, float, None] = None) -> np.ndarray:
    """Pointwise ``add``, ``sub``, ``mul``, ``scale``, ``abs``, ``pow`` or ``exp``.

    ``add``/``sub``/``mul`` take a second grid of equal shape; ``scale`` and
    ``pow`` take a scalar; ``abs`` and ``exp`` ignore ``b``.
    """
    a = as_grid(a, "a")
    if op in _BINARY:
        b = as_grid(b, "b")
        if a.shape != b.shape:
            raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
        out = _BINARY[op](a, b)
    elif op == "scale":
        out = a * float(b)
    elif op == "abs":
        out = np.abs(a)
    elif op == "exp":
        out = np.exp(a)
    elif op == "pow":
        e = float(b)
        if not e.is_integer() and np.any(a < 0):
            raise InvalidInputError("non-integer power of a negative value")
        out = np.power(a, int(e) if e.is_integer() else e)
    else:
        raise InvalidInputError(f"unknown elementwise op {op!r}")
    if not np.all(np.isfinite(out)):
        raise InvalidInputError(f"{op} produced non-finite values")
    return out
