"""Mask-branch losses: pixel-wise BCE, the L^p edge agreement loss and their combinations.

Every loss returns a :class:`LossResult` carrying the scalar value and the
analytic gradient with respect to the predicted mask. Edge responses are
computed with zero padding so they keep the mask resolution.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from .filters import FilterSet, canonical_filter_name, gaussian_kernel_3x3, get_filter_set
from .grid import InvalidInputError, PaddingMode, as_grid, as_stack, conv2d, conv2d_input_grad

BCE_EPS = 1e-7


class Formulation(str, enum.Enum):
    STANDARD = "standard"
    PRODUCT_PW = "productpw"
    EXP_PRODUCT_PW = "expproductpw"

    @classmethod
    def parse(cls, value) -> "Formulation":
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        try:
            return cls(key)
        except ValueError:
            raise InvalidInputError(f"unknown formulation {value!r}") from None


@dataclass(frozen=True)
class LossConfig:
    """One edge agreement loss variant.

    ``filter_set=None`` disables the edge head entirely (the baseline).
    """
    filter_set: Optional[str] = "Sobel"
    p: int = 2
    alpha: float = 1.0
    smooth_gt: bool = False
    smooth_pred: bool = False
    formulation: Formulation = Formulation.STANDARD
    include_magnitude: bool = False

    def __post_init__(self):
        if self.filter_set is not None:
            if str(self.filter_set).lower() in ("none", "baseline", ""):
                object.__setattr__(self, "filter_set", None)
            else:
                canonical_filter_name(self.filter_set)
        if int(self.p) != self.p or self.p < 1:
            raise InvalidInputError(f"p must be a positive integer, got {self.p}")
        object.__setattr__(self, "p", int(self.p))
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise InvalidInputError(f"alpha must be finite and nonnegative, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "formulation", Formulation.parse(self.formulation))

    @property
    def edge_active(self) -> bool:
        """True when the edge term can change the total loss."""
        return self.filter_set is not None and self.alpha != 0.0

    def filters(self) -> FilterSet:
        if self.filter_set is None:
            raise InvalidInputError("edge head is disabled for this config")
        return get_filter_set(self.filter_set)

    def with_(self, **changes) -> "LossConfig":
        return replace(self, **changes)


BASELINE = LossConfig(filter_set=None, alpha=0.0)


@dataclass
class LossResult:
    value: float
    grad_wrt_pred: np.ndarray
    # named unweighted terms, e.g. {"mask": ..., "edge": ...}
    terms: Dict[str, float] = field(default_factory=dict)


def _check_pair(pred, gt):
    pred = as_grid(pred, "pred_mask")
    gt = as_grid(gt, "gt_mask")
    if pred.shape != gt.shape:
        raise InvalidInputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def _check_unit_range(m, name):
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise InvalidInputError(f"{name} values must lie in [0, 1]")


def lp_loss(y, y_hat, p: int):
    """Mean of ``|y - y_hat|**p`` over all elements, and its gradient w.r.t. ``y``.

    The subgradient at ``y == y_hat`` is taken as 0 for every ``p``.
    """
    y = as_stack(y, "y")
    y_hat = as_stack(y_hat, "y_hat")
    if y.shape != y_hat.shape:
        raise InvalidInputError(f"stack shapes differ: {y.shape} vs {y_hat.shape}")
    if int(p) != p or p < 1:
        raise InvalidInputError(f"p must be a positive integer, got {p}")
    p = int(p)
    diff = y - y_hat
    ad = np.abs(diff)
    n = diff.size
    value = float(np.sum(ad ** p) / n)
    if p == 1:
        grad = np.sign(diff) / n
    else:
        grad = p * ad ** (p - 1) * np.sign(diff) / n
    return value, grad


def smooth_mask(mask) -> np.ndarray:
    """Zero-padded 3x3 Gaussian smoothing of a mask."""
    mask = as_grid(mask, "mask")
    _check_unit_range(mask, "mask")
    return conv2d(mask, gaussian_kernel_3x3(), PaddingMode.ZERO)


def _responses(mask: np.ndarray, fs: FilterSet, magnitude: bool) -> np.ndarray:
    r = [conv2d(mask, k, PaddingMode.ZERO) for k in fs.kernels]
    if magnitude and len(r) >= 2:
        r.append(np.sqrt(sum(c * c for c in r)))
    return np.stack(r)


def _responses_backward(g: np.ndarray, r: np.ndarray, fs: FilterSet, magnitude: bool) -> np.ndarray:
    """Map a gradient on the response stack back to the (possibly smoothed) mask."""
    d = fs.channels
    g = g.copy()
    if magnitude and d >= 2:
        mag = r[d]
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g[d] / safe, 0.0)
        for c in range(d):
            g[c] += scale * r[c]
    dims = r.shape[1:]
    out = np.zeros(dims)
    for c, k in enumerate(fs.kernels):
        out += conv2d_input_grad(g[c], k, PaddingMode.ZERO, dims)
    return out


class _EdgeHead:
    """Forward pass of the edge head with enough state kept to backpropagate."""

    def __init__(self, pred: np.ndarray, gt: np.ndarray, config: LossConfig):
        self.config = config
        self.fs = config.filters()
        self.magnitude = config.include_magnitude and self.fs.channels >= 2
        self.gauss = gaussian_kernel_3x3()
        p_in = conv2d(pred, self.gauss) if config.smooth_pred else pred
        g_in = conv2d(gt, self.gauss) if config.smooth_gt else gt
        self.r_pred = _responses(p_in, self.fs, self.magnitude)
        self.r_gt = _responses(g_in, self.fs, self.magnitude)
        self.diff = self.r_pred - self.r_gt

    def backward(self, g_resp: np.ndarray) -> np.ndarray:
        g = _responses_backward(g_resp, self.r_pred, self.fs, self.magnitude)
        if self.config.smooth_pred:
            g = conv2d_input_grad(g, self.gauss, PaddingMode.ZERO, g.shape)
        return g

    def lp(self):
        return lp_loss(self.r_pred, self.r_gt, self.config.p)

    def pixelwise(self):
        """Per-pixel edge loss (channel mean of ``|diff|**p``) and its gradient factor."""
        p = self.config.p
        ad = np.abs(self.diff)
        d = self.diff.shape[0]
        e = np.sum(ad ** p, axis=0) / d
        de = (p * ad ** (p - 1) * np.sign(self.diff) if p > 1 else np.sign(self.diff)) / d
        return e, de


def _edge_raw(pred, gt, config: LossConfig):
    head = _EdgeHead(pred, gt, config)
    value, g = head.lp()
    return value, head.backward(g)


def edge_agreement_loss(pred_mask, gt_mask, config: LossConfig) -> LossResult:
    """Alpha-weighted L^p distance between edge responses of prediction and target.

    No gradient flows into ``gt_mask``.
    """
    pred, gt = _check_pair(pred_mask, gt_mask)
    _check_unit_range(pred, "pred_mask")
    _check_unit_range(gt, "gt_mask")
    raw, grad = _edge_raw(pred, gt, config)
    return LossResult(config.alpha * raw, config.alpha * grad, {"edge": raw})


def _bce_terms(pred, gt):
    y = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    pw = -(gt * np.log(y) + (1.0 - gt) * np.log(1.0 - y))
    dpw = (y - gt) / (y * (1.0 - y))
    return pw, dpw


def mask_bce_loss(pred_mask, gt_mask) -> LossResult:
    """Mean pixel-wise binary cross entropy with predictions clamped to [eps, 1 - eps]."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    pw, dpw = _bce_terms(pred, gt)
    n = pw.size
    value = float(np.sum(pw) / n)
    return LossResult(value, dpw / n, {"mask": value})


def combined_mask_loss(pred_mask, gt_mask, config: LossConfig) -> LossResult:
    """Mask loss plus the alpha-weighted edge term for the configured formulation.

    ``terms["edge"]`` holds the unweighted edge term so that
    ``value == terms["mask"] + alpha * terms["edge"]``.
    """
    pred, gt = _check_pair(pred_mask, gt_mask)
    bce = mask_bce_loss(pred, gt)
    if config.filter_set is None:
        return LossResult(bce.value, bce.grad_wrt_pred, {"mask": bce.value, "edge": 0.0})
    _check_unit_range(pred, "pred_mask")
    _check_unit_range(gt, "gt_mask")
    alpha = config.alpha

    if config.formulation is Formulation.STANDARD:
        raw, raw_grad = _edge_raw(pred, gt, config)
    else:
        head = _EdgeHead(pred, gt, config)
        e, de = head.pixelwise()
        pw, dpw = _bce_terms(pred, gt)
        n = pw.size
        if config.formulation is Formulation.PRODUCT_PW:
            weight = e
            dweight = np.ones_like(e)
        else:
            with np.errstate(over="ignore"):
                weight = np.exp(e / 4.0)
            if not np.all(np.isfinite(weight)):
                raise InvalidInputError(
                    "exp(edge / 4) overflowed; use a smaller p or a lower-magnitude filter set")
            dweight = weight / 4.0
        raw = float(np.sum(pw * weight) / n)
        g_resp = (pw * dweight / n)[None] * de
        raw_grad = dpw * weight / n + head.backward(g_resp)

    value = bce.value + alpha * raw
    grad = bce.grad_wrt_pred + alpha * raw_grad
    return LossResult(value, grad, {"mask": bce.value, "edge": raw})
