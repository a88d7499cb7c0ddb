"""Finite-difference checks of every analytic gradient, for the ``gradcheck`` command."""
from __future__ import annotations

import itertools
from typing import Callable, Iterator, Tuple

import numpy as np

from .filters import FILTER_SET_NAMES
from .loss import LossConfig, combined_mask_loss, edge_agreement_loss, lp_loss, mask_bce_loss
from .model import backward, forward, init_weights

STEP = 1e-5
LOSS_TOL = 1e-5
MODEL_TOL = 1e-4


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b) -> float:
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def _pair(rng, size=8):
    return rng.uniform(0.05, 0.95, (size, size)), (rng.uniform(size=(size, size)) < 0.5) * 1.0


def _away_from_kinks(head, image, rng, margin=3 * STEP, attempts=500):
    """Redraw biases until no ReLU pre-activation lies within ``margin`` of zero.

    A finite-difference step that crosses a kink measures the wrong slope.
    Keeps the widest-margin draw if none clears ``margin``.
    """
    best, best_margin = None, -1.0
    for _ in range(attempts):
        biases = {k: rng.normal(scale=0.1, size=head.params[k].shape) for k in ("b1", "b2", "b3")}
        head.params.update(biases)
        _, cache = forward(head, image, 0)
        m = min(np.abs(cache.z1).min(), np.abs(cache.z2).min())
        if m > margin:
            return head
        if m > best_margin:
            best, best_margin = biases, m
    head.params.update(best)
    return head


def run_all(instances: int = 20, seed: int = 0) -> Iterator[Tuple[str, float, float]]:
    """Yield ``(check name, worst relative error, tolerance)`` for each gradient family."""
    rng = np.random.default_rng(seed)

    for p in (1, 2, 3, 4):
        worst = 0.0
        for _ in range(instances):
            y, t = rng.normal(size=(2, 2, 6, 6))
            if p == 1:
                # keep every element away from the kink at y == t
                t = y - np.where(y - t >= 0, 1, -1) * np.maximum(np.abs(y - t), 1e-2)
            worst = max(worst, max_rel_error(lp_loss(y, t, p)[1],
                                             numeric_grad(lambda z: lp_loss(z, t, p)[0], y)))
        yield f"lp_loss p={p}", worst, LOSS_TOL

    worst = 0.0
    for _ in range(instances):
        pred, gt = _pair(rng)
        worst = max(worst, max_rel_error(mask_bce_loss(pred, gt).grad_wrt_pred,
                                         numeric_grad(lambda z: mask_bce_loss(z, gt).value, pred)))
    yield "mask_bce_loss", worst, LOSS_TOL

    for name, smooth, mag in itertools.product(FILTER_SET_NAMES, (False, True), (False, True)):
        worst = 0.0
        for i in range(instances):
            pred, gt = _pair(rng)
            cfg = LossConfig(name, p=2 + i % 3, smooth_gt=smooth, smooth_pred=smooth, include_magnitude=mag)
            res = edge_agreement_loss(pred, gt, cfg)
            fd = numeric_grad(lambda z: edge_agreement_loss(z, gt, cfg).value, pred)
            worst = max(worst, max_rel_error(res.grad_wrt_pred, fd))
        yield f"edge {name} smooth={smooth} magnitude={mag}", worst, LOSS_TOL

    for form in ("standard", "productpw", "expproductpw"):
        worst = 0.0
        for i in range(instances):
            pred, gt = _pair(rng)
            name = FILTER_SET_NAMES[i % len(FILTER_SET_NAMES)]
            p = 2 if (form == "expproductpw" and name == "Kayyali") else 2 + i % 2
            cfg = LossConfig(name, p=p, alpha=0.7, formulation=form)
            res = combined_mask_loss(pred, gt, cfg)
            fd = numeric_grad(lambda z: combined_mask_loss(z, gt, cfg).value, pred)
            worst = max(worst, max_rel_error(res.grad_wrt_pred, fd))
        yield f"combined {form}", worst, LOSS_TOL

    # full network on a 14x14 mask; instances cycle through the formulations
    forms = ("standard", "productpw", "expproductpw")
    worst = dict.fromkeys(forms, 0.0)
    for i in range(max(instances, len(forms))):
        form = forms[i % len(forms)]
        image = rng.uniform(size=(28, 28))
        gt = np.zeros((14, 14))
        r, c = rng.integers(1, 6, size=2)
        gt[r:r + 7, c:c + 7] = 1.0
        class_id = int(rng.integers(3))
        head = _away_from_kinks(init_weights(seed + i, mask_size=14), image, rng)
        name = FILTER_SET_NAMES[i % len(FILTER_SET_NAMES)]
        cfg = LossConfig(name, p=2, formulation=form)

        def loss_of(h):
            return combined_mask_loss(forward(h, image, class_id)[0], gt, cfg).value

        pred, cache = forward(head, image, class_id)
        grads = backward(head, cache, combined_mask_loss(pred, gt, cfg).grad_wrt_pred)
        for pname, value in head.params.items():
            def f(z, pname=pname):
                saved = head.params[pname]
                head.params[pname] = z
                out = loss_of(head)
                head.params[pname] = saved
                return out
            worst[form] = max(worst[form], max_rel_error(grads[pname], numeric_grad(f, value)))
    for form in forms:
        yield f"model {form} (all parameters)", worst[form], MODEL_TOL
