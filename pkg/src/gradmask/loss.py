"""Classification loss plus the masked input-gradient (GradMask) penalty.

The penalty takes the saliency of the model with respect to its input,
zeroes it inside the lesion segmentation, and charges the norm of what is
left.  Two saliency flavours exist: the gradient of the non-healthy output
(``PerClass``) and the gradient of ``|out1 - out0|`` (``Contrast``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .errors import ShapeError, ValidationError
from .model import forward, probabilities

VARIANTS = ("none", "perclass", "contrast")
NORMS = ("l2", "l2_squared")
TARGETS = ("logits", "probabilities")
HEALTHY_POLICIES = ("penalize_all", "skip")


@dataclass(frozen=True)
class PenaltyConfig:
    variant: str = "contrast"
    lam: float = 1.0
    norm: str = "l2_squared"
    saliency_target: str = "logits"
    healthy_policy: str = "penalize_all"

    def __post_init__(self):
        object.__setattr__(self, "variant", self.variant.lower())
        for name, allowed in (("variant", VARIANTS), ("norm", NORMS),
                              ("saliency_target", TARGETS), ("healthy_policy", HEALTHY_POLICIES)):
            if getattr(self, name) not in allowed:
                raise ValidationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.lam >= 0:
            raise ValidationError(f"lambda must be nonnegative, got {self.lam}")


def classification_loss(logits, y):
    """Softmax cross-entropy -log softmax(logits)[y] for two logits.

    With two classes this is softplus(z_other - z_y), which stays finite for
    any logit gap.
    """
    if y not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {y!r}")
    return ad.softplus(ad.sub(ad.take(logits, 1 - y), ad.take(logits, y)))


def _class_outputs(z, target):
    if target == "logits":
        return ad.take(z, 0), ad.take(z, 1)
    return probabilities(z)


def saliency_per_class(m, x, class_idx, target="logits", create_graph=False):
    """Gradient of class ``class_idx``'s output with respect to the input ``x``."""
    if class_idx not in (0, 1):
        raise ValidationError(f"class index must be 0 or 1, got {class_idx!r}")
    out = _class_outputs(forward(m, x), target)[class_idx]
    return ad.grad(out, [x], create_graph=create_graph)[0]


def contrast_saliency(m, x, target="logits", create_graph=False):
    """Gradient of |out1 - out0| with respect to ``x`` (zero where the outputs tie)."""
    y0, y1 = _class_outputs(forward(m, x), target)
    return ad.grad(ad.abs(ad.sub(y1, y0)), [x], create_graph=create_graph)[0]


def outside_mask(seg, shape, dtype):
    """(1 - seg) broadcast over the channels of a C×H×W saliency."""
    seg = np.asarray(seg.data if isinstance(seg, T.Tensor) else seg)
    if seg.ndim != 2 or seg.shape != tuple(shape[1:]):
        raise ShapeError(f"segmentation shape {seg.shape} does not match saliency {tuple(shape)}")
    if not np.isin(seg, (0, 1)).all():
        raise ValidationError("segmentation must be binary")
    m = np.broadcast_to((1 - seg).astype(dtype), shape)
    return T.Tensor(m, dtype=dtype)


def masked_penalty(s, seg, norm="l2_squared"):
    """Norm of the saliency ``s`` restricted to pixels outside the lesion."""
    if norm not in NORMS:
        raise ValidationError(f"norm must be one of {NORMS}, got {norm!r}")
    masked = ad.mul(s, ad.constant(outside_mask(seg, s.shape, s.dtype)))
    sq = ad.sum(ad.mul(masked, masked))
    return sq if norm == "l2_squared" else ad.sqrt_eps(sq)


def _penalty(z, x, seg, cfg):
    y0, y1 = _class_outputs(z, cfg.saliency_target)
    out = y1 if cfg.variant == "perclass" else ad.abs(ad.sub(y1, y0))
    s = ad.grad(out, [x], create_graph=True)[0]
    return masked_penalty(s, seg, cfg.norm)


def saliency_penalty(m, sample, cfg):
    """The unweighted penalty for one sample, differentiable in the parameters."""
    if cfg.variant == "none":
        raise ValidationError("variant 'none' has no saliency penalty")
    dtype = m.params[0].dtype
    x = ad.lift(sample.x.astype(dtype), requires_grad=True)
    return _penalty(forward(m, x), x, sample.seg, cfg)


def gradmask_loss(m, sample, cfg):
    """Total objective for one sample: L_c + lambda * penalty.

    Returns ``(total, L_c, penalty)`` where ``total`` is a node differentiable
    with respect to the model parameters (through the saliency) and the other
    two are plain floats.  With variant ``none`` no saliency pass runs.
    """
    if not cfg.lam >= 0:
        raise ValidationError(f"lambda must be nonnegative, got {cfg.lam}")
    dtype = m.params[0].dtype
    skip = cfg.variant == "none" or (cfg.healthy_policy == "skip" and not np.any(sample.seg.data))
    x = ad.lift(sample.x.astype(dtype) if sample.x.dtype != dtype else sample.x, requires_grad=not skip)
    if skip:
        logits = forward(m, x)
        lc = classification_loss(logits, sample.y)
        return lc, lc.item(), 0.0
    # one forward graph serves both the classification term and the saliency
    z = forward(m, x)
    lc = classification_loss(z, sample.y)
    pen = _penalty(z, x, sample.seg, cfg)
    total = ad.add(lc, ad.scale(pen, cfg.lam))
    return total, lc.item(), pen.item()


def batch_gradients(m, batch, cfg):
    """Mean over ``batch`` of per-sample objectives and their parameter gradients.

    Returns ``(grads, mean_total, mean_lc, mean_penalty)``; ``grads`` are numpy
    arrays in parameter order.
    """
    if not batch:
        raise ValidationError("batch is empty")
    params = m.params
    acc = None
    tot = lc_sum = pen_sum = 0.0
    for sample in batch:
        total, lc, pen = gradmask_loss(m, sample, cfg)
        grads = [g.value.data.astype(np.float64) for g in ad.grad(total, params)]
        if acc is None:
            acc = grads
        else:
            for a, g in zip(acc, grads):
                a += g
        tot += total.item()
        lc_sum += lc
        pen_sum += pen
    n = len(batch)
    grads = [(a / n).astype(p.dtype) for a, p in zip(acc, params)]
    return grads, tot / n, lc_sum / n, pen_sum / n
