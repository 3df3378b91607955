"""Training objectives for the denoiser and the discriminator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .atw import B3_SPLINE, atw_details
from .autodiff import (
    Tensor,
    _add_scalar,
    _make,
    abs_,
    as_tensor,
    avg_pool,
    log,
    logcosh,
    mul_scalar,
    reduce_mean,
    relu,
    sub,
)


ADV_FORMS = ("hinge", "log")
LOG_EPS = 1e-7


@dataclass
class LossWeights:
    l1: float = 1.0
    pyramidal: float = 1.0
    histogram: float = 1.0
    adversarial: float = 0.01
    adv_form: str = "hinge"  # or "log": -mean log D(xhat)

    def __post_init__(self):
        if self.adv_form not in ADV_FORMS:
            raise ValueError(f"adv_form must be one of {ADV_FORMS}")
        for name in ("l1", "pyramidal", "histogram", "adversarial"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossReport:
    """Scalar breakdown of a loss; ``tensor`` is the differentiable total."""

    total: float
    terms: dict[str, float] = field(default_factory=dict)
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def to_record(self, step: int, prefix: str = "") -> str:
        parts = [f"step={step}", f"{prefix}total={self.total:.9g}"]
        parts += [f"{prefix}{k}={v:.9g}" for k, v in self.terms.items()]
        return " ".join(parts)


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1_loss(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "l1_loss")
    return reduce_mean(abs_(sub(a, b)))


def pyramidal_loss(xhat, x, levels: int = 4, base=B3_SPLINE) -> Tensor:
    """Sum over ATW levels of the mean absolute difference of detail layers."""
    xhat, x = as_tensor(xhat), as_tensor(x)
    _same_shape(xhat, x, "pyramidal_loss")
    # Δ_j is linear, so Δ_j(xhat) - Δ_j(x) = Δ_j(xhat - x).
    total = None
    for d in atw_details(sub(xhat, x), levels, base):
        term = reduce_mean(abs_(d))
        total = term if total is None else total + term
    return total


def soft_histogram(img, bins: int = 64) -> Tensor:
    """Differentiable per-(sample, channel) histogram with triangular binning.

    Bin centres are ``(b + 0.5) / bins`` on [0, 1]; a value ``v`` puts
    ``max(0, 1 - |v - centre| / w)`` mass in each bin, ``w = 1 / bins``.
    Values beyond the outer centres are clamped onto the boundary bins, so
    each sample carries unit mass. Returns ``[N, C, bins]``.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    img = as_tensor(img)
    n, c = img.shape[:2]
    w = 1.0 / bins
    v = img.data.reshape(n * c, -1)
    npix = v.shape[1]
    pos = (v - 0.5 * w) / w  # fractional bin coordinate
    inside = (pos > 0) & (pos < bins - 1)
    pos = np.clip(pos, 0, bins - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), bins - 2)
    frac = pos - lo
    rows = np.arange(n * c)[:, None] * bins
    flat_lo = (rows + lo).ravel()
    mass = np.bincount(flat_lo, weights=(1 - frac).ravel(), minlength=n * c * bins)
    mass += np.bincount(flat_lo + 1, weights=frac.ravel(), minlength=n * c * bins)
    mass = (mass / npix).astype(img.dtype).reshape(n, c, bins)

    def grad_fn(g):
        g2 = g.reshape(n * c, bins)
        glo = np.take_along_axis(g2, lo, axis=1)
        ghi = np.take_along_axis(g2, lo + 1, axis=1)
        gv = np.where(inside, (ghi - glo) / (w * npix), 0.0).astype(img.dtype)
        return (gv.reshape(img.shape),)

    return _make(mass, (img,), grad_fn, "soft_histogram")


def histogram_loss(xhat, x, bins: int = 64) -> Tensor:
    """Mean over bins of logcosh(H[xhat] - H[x]), averaged over samples and channels."""
    xhat, x = as_tensor(xhat), as_tensor(x)
    if xhat.shape[:2] != x.shape[:2]:
        raise ValueError(f"histogram_loss: batch/channel mismatch {xhat.shape[:2]} vs {x.shape[:2]}")
    return reduce_mean(logcosh(sub(soft_histogram(xhat, bins), soft_histogram(x, bins))))


def multiscale_references(x, n_scales: int = 3) -> list[Tensor]:
    """Reference pyramid: average pooling by 2**(s-1) for s = 1..n_scales."""
    x = as_tensor(x)
    return [avg_pool(x, 2 ** s) for s in range(n_scales)]


def generator_adversarial_loss(fake_maps: Sequence[Tensor], form: str = "hinge") -> Tensor:
    """Generator term averaged over heads.

    ``hinge``: -mean D(xhat). ``log``: -mean log(D(xhat) + eps), the
    saturating two-player form; maps must then lie in (0, 1].
    """
    if form not in ADV_FORMS:
        raise ValueError(f"form must be one of {ADV_FORMS}")
    fake_maps = list(fake_maps)
    total = None
    for m in fake_maps:
        t = reduce_mean(m if form == "hinge" else log(_add_scalar(as_tensor(m), LOG_EPS)))
        total = t if total is None else total + t
    return mul_scalar(total, -1.0 / len(fake_maps))


def denoiser_loss(
    scales: Sequence[tuple[Tensor, Tensor]],
    weights: LossWeights | None = None,
    levels: int = 4,
    bins: int = 64,
    fake_maps: Sequence[Tensor] | None = None,
    expected_scales: int | None = 3,
) -> LossReport:
    """Multiscale denoiser objective.

    Mean over scales of ``λ_l1·l1 + λ_p·pyramidal + λ_H·histogram``, plus
    ``λ_adv`` times the generator term when discriminator maps on the
    denoised image are supplied.
    """
    weights = weights or LossWeights()
    scales = list(scales)
    if expected_scales is not None and len(scales) != expected_scales:
        raise ValueError(f"expected {expected_scales} scales, got {len(scales)}")
    terms: dict[str, float] = {}
    total = None
    for s, (xhat, x) in enumerate(scales, start=1):
        xhat, x = as_tensor(xhat), as_tensor(x)
        parts = {
            "l1": (weights.l1, l1_loss(xhat, x) if weights.l1 else None),
            "pyr": (weights.pyramidal, pyramidal_loss(xhat, x, levels) if weights.pyramidal else None),
            "hist": (weights.histogram, histogram_loss(xhat, x, bins) if weights.histogram else None),
        }
        for name, (lam, t) in parts.items():
            terms[f"{name}_s{s}"] = 0.0 if t is None else t.item()
            if t is None:
                continue
            t = mul_scalar(t, lam)
            total = t if total is None else total + t
    if total is None:
        raise ValueError("all fidelity weights are zero")
    total = mul_scalar(total, 1.0 / len(scales))
    adv_value = 0.0
    if fake_maps is not None and weights.adversarial:
        adv = generator_adversarial_loss(fake_maps, weights.adv_form)
        adv_value = adv.item()
        total = total + mul_scalar(adv, weights.adversarial)
    terms["adv"] = adv_value
    return LossReport(total.item(), terms, total)


def hinge_term(real: Tensor, fake: Tensor) -> Tensor:
    """mean[-min(0, -1 + D(x))] + mean[-min(0, -1 - D(xhat))] for one head."""
    return reduce_mean(relu(1.0 - real)) + reduce_mean(relu(fake + 1.0))


def discriminator_loss(real_maps: Sequence[Tensor], fake_maps: Sequence[Tensor], names: Sequence[str] | None = None) -> LossReport:
    """Bridge head plus decoder heads, each a hinge term; the total is their sum."""
    real_maps, fake_maps = list(real_maps), list(fake_maps)
    if len(real_maps) != len(fake_maps):
        raise ValueError("real and fake head counts differ")
    names = list(names) if names else ["bridge"] + [f"dec{i}" for i in range(1, len(real_maps))]
    terms = {}
    total = None
    for name, r, f in zip(names, real_maps, fake_maps):
        r, f = as_tensor(r), as_tensor(f)
        _same_shape(r, f, f"discriminator head {name}")
        t = hinge_term(r, f)
        terms[name] = t.item()
        total = t if total is None else total + t
    return LossReport(total.item(), terms, total)

