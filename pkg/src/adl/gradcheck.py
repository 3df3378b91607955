"""Registry of finite-difference checks for every differentiable op and loss.

Each check builds a scalar function of one float64 input of at most 8x8
pixels and returns :func:`~adl.autodiff.finite_diff_check`'s max relative
error. Inputs are drawn so that no piecewise-linear kink (ReLU, |.|, hinge,
histogram bin centre) lies within a few step sizes of a sample, because the
central difference is meaningless across a kink.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .atw import atw_details
from .autodiff import Tensor, finite_diff_check
from .losses import (
    LossWeights,
    denoiser_loss,
    discriminator_loss,
    generator_adversarial_loss,
    histogram_loss,
    l1_loss,
    multiscale_references,
    pyramidal_loss,
    soft_histogram,
)

H = 1e-4
TOLERANCE = 1e-6


def _away_from(values: np.ndarray, kinks: np.ndarray, margin: float) -> bool:
    return bool(np.min(np.abs(values.reshape(-1, 1) - np.asarray(kinks).reshape(1, -1))) > margin)


def _draw(rng, shape, kinks=(0.0,), low=-1.0, high=1.0, margin=1e-2):
    while True:
        v = rng.uniform(low, high, shape)
        if _away_from(v, np.array(kinks), margin):
            return v


def _weighted(op: Callable[[Tensor], Tensor], weights: np.ndarray) -> Callable[[Tensor], Tensor]:
    """Scalarise a tensor-valued op with fixed random weights."""
    return lambda t: ad.reduce_sum(ad.mul(op(t), Tensor(weights)))


def _first_clear(make, kink_values, margin, tries=200):
    """First seed whose instance keeps ``kink_values(instance)`` clear of zero by ``margin``."""
    for seed in range(tries):
        inst = make(np.random.default_rng(seed))
        if np.min(np.abs(kink_values(inst))) > margin:
            return inst
    raise RuntimeError("could not draw a kink-free instance")


def check_conv(rng, stride=1, dilation=1, rank=2) -> float:
    shape = (2, 3) + (8,) * rank if rank < 3 else (1, 2, 5, 5, 5)
    x = rng.normal(size=shape)
    w = rng.normal(size=(4, shape[1]) + (3,) * rank)
    out_shape = ad.conv_nd(Tensor(x), Tensor(w), stride, dilation).shape
    r = rng.normal(size=out_shape)
    err_x = finite_diff_check(_weighted(lambda t: ad.conv_nd(t, Tensor(w), stride, dilation), r), x, H)
    err_w = finite_diff_check(_weighted(lambda t: ad.conv_nd(Tensor(x), t, stride, dilation), r), w, H)
    return max(err_x, err_w)


def check_filter_axis(rng) -> float:
    x = rng.normal(size=(1, 2, 8, 8))
    taps = np.array([1, 4, 6, 4, 1]) / 16
    return finite_diff_check(_weighted(lambda t: ad.filter_axis(t, taps, 3, dilation=4), rng.normal(size=x.shape)), x, H)


def check_upsample(rng) -> float:
    x = rng.normal(size=(1, 2, 4, 4))
    return finite_diff_check(_weighted(lambda t: ad.upsample_nearest(t, 2), rng.normal(size=(1, 2, 8, 8))), x, H)


def check_avg_pool(rng) -> float:
    x = rng.normal(size=(1, 2, 8, 8))
    return finite_diff_check(_weighted(lambda t: ad.avg_pool(t, 2), rng.normal(size=(1, 2, 4, 4))), x, H)


def _unary(op, kinks=None):
    def check(rng) -> float:
        x = _draw(rng, (2, 1, 5, 5), kinks) if kinks is not None else rng.normal(size=(2, 1, 5, 5))
        return finite_diff_check(_weighted(op, rng.normal(size=x.shape)), x, H)

    return check


def check_log(rng) -> float:
    x = rng.uniform(0.2, 2.0, (2, 1, 5, 5))
    return finite_diff_check(_weighted(ad.log, rng.normal(size=x.shape)), x, H)


def _binary(op):
    def check(rng) -> float:
        x = rng.normal(size=(2, 1, 5, 5))
        other = Tensor(rng.normal(size=x.shape))
        r = rng.normal(size=x.shape)
        return max(
            finite_diff_check(_weighted(lambda t: op(t, other), r), x, H),
            finite_diff_check(_weighted(lambda t: op(other, t), r), x, H),
        )

    return check


def check_concat(rng) -> float:
    x = rng.normal(size=(2, 2, 4, 4))
    other = Tensor(rng.normal(size=(2, 3, 4, 4)))
    r = rng.normal(size=(2, 5, 4, 4))
    return finite_diff_check(_weighted(lambda t: ad.concat_channels([t, other]), r), x, H)


def check_reduce_sum(rng) -> float:
    x = rng.normal(size=(2, 3, 4, 4))
    r = rng.normal(size=(2, 4))
    return max(
        finite_diff_check(ad.reduce_sum, x, H),
        finite_diff_check(lambda t: ad.reduce_sum(ad.mul(ad.reduce_sum(t, axis=(1, 3)), Tensor(r))), x, H),
    )


def check_reduce_mean(rng) -> float:
    x = rng.normal(size=(2, 3, 4, 4))
    r = rng.normal(size=(2, 3))
    return max(
        finite_diff_check(ad.reduce_mean, x, H),
        finite_diff_check(lambda t: ad.reduce_sum(ad.mul(ad.reduce_mean(t, axis=(2, 3)), Tensor(r))), x, H),
    )


def check_atw(rng) -> float:
    x = rng.normal(size=(1, 1, 8, 8))
    rs = [rng.normal(size=x.shape) for _ in range(4)]

    def f(t):
        total = None
        for d, r in zip(atw_details(t, 4), rs):
            term = ad.reduce_sum(ad.mul(d, Tensor(r)))
            total = term if total is None else total + term
        return total

    return finite_diff_check(f, x, H)


def _pair(rng, shape=(1, 1, 8, 8)):
    x = rng.uniform(0.05, 0.95, shape)
    xhat = np.clip(x + rng.normal(0, 0.3, shape), 0.02, 0.98)
    return xhat, x


def check_l1(rng) -> float:
    xhat, x = _first_clear(lambda r: _pair(r), lambda p: p[0] - p[1], 2 * H)
    return finite_diff_check(lambda t: l1_loss(t, Tensor(x)), xhat, H)


def _detail_diffs(pair, levels=4):
    xhat, x = pair
    return np.concatenate([d.data.ravel() for d in atw_details(Tensor(xhat - x), levels)])


def check_pyramidal(rng) -> float:
    xhat, x = _first_clear(lambda r: _pair(r), _detail_diffs, 2 * H)
    return finite_diff_check(lambda t: pyramidal_loss(t, Tensor(x), 4), xhat, H)


def _bin_offsets(values: np.ndarray, bins: int) -> np.ndarray:
    centres = (np.arange(bins) + 0.5) / bins
    return (values.reshape(-1, 1) - centres.reshape(1, -1)).ravel()


def check_soft_histogram(rng, bins=8) -> float:
    x = _first_clear(lambda r: r.uniform(0.1, 0.9, (2, 1, 4, 4)), lambda v: _bin_offsets(v, bins), 2 * H)
    return finite_diff_check(_weighted(lambda t: soft_histogram(t, bins), rng.normal(size=(2, 1, bins))), x, H)


def check_histogram_loss(rng, bins=8) -> float:
    xhat, x = _first_clear(lambda r: _pair(r, (1, 2, 6, 6)), lambda p: _bin_offsets(p[0], bins), 2 * H)
    return finite_diff_check(lambda t: histogram_loss(t, Tensor(x), bins), xhat, H)


def check_denoiser_total(rng, bins=8) -> float:
    """Full multiscale objective (three scales plus the adversarial term) w.r.t. the finest output."""
    x = rng.uniform(0.05, 0.95, (1, 1, 8, 8))
    refs = [r.data for r in multiscale_references(Tensor(x))]

    def make(r):
        return [np.clip(ref + r.normal(0, 0.3, ref.shape), 0.02, 0.98) for ref in refs]

    def kinks(outs):
        # only the finest output is perturbed
        o, ref = outs[0], refs[0]
        return np.concatenate([o.ravel() - ref.ravel(), _detail_diffs((o, ref)), _bin_offsets(o, bins)])

    outs = _first_clear(make, kinks, 2 * H)
    maps = [Tensor(rng.uniform(0, 1, (1, 1, 4, 4))), Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))]
    weights = LossWeights(1.0, 1.0, 1.0, 0.5)

    def f(t):
        scales = [(t, Tensor(refs[0])), (Tensor(outs[1]), Tensor(refs[1])), (Tensor(outs[2]), Tensor(refs[2]))]
        fake = [ad.mul(m, t) if m.shape == t.shape else m for m in maps]
        return denoiser_loss(scales, weights, 4, bins, fake).tensor

    return finite_diff_check(f, outs[0], H)


def check_discriminator_loss(rng) -> float:
    shapes = [(1, 1, 2, 2), (1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2)]
    real = [_draw(rng, s, kinks=(1.0,), low=-2, high=2) for s in shapes]
    fake = [_draw(rng, s, kinks=(-1.0,), low=-2, high=2) for s in shapes]
    f_real = lambda t: discriminator_loss([t] + [Tensor(r) for r in real[1:]], [Tensor(f) for f in fake]).tensor
    f_fake = lambda t: discriminator_loss([Tensor(r) for r in real], [Tensor(f) for f in fake[:1]] + [t] + [Tensor(f) for f in fake[2:]]).tensor
    return max(finite_diff_check(f_real, real[0], H), finite_diff_check(f_fake, fake[1], H))


def check_generator_adversarial(rng) -> float:
    m = rng.uniform(0, 1, (1, 1, 4, 4))
    other = Tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
    return finite_diff_check(lambda t: generator_adversarial_loss([t, other]), m, H)


def check_generator_adversarial_log(rng) -> float:
    m = rng.uniform(0.2, 1, (1, 1, 4, 4))
    other = Tensor(rng.uniform(0.2, 1, (1, 1, 8, 8)))
    return finite_diff_check(lambda t: generator_adversarial_loss([t, other], "log"), m, H)


REGISTRY: dict[str, Callable[[np.random.Generator], float]] = {
    "conv_nd": check_conv,
    "conv_nd_stride2": lambda r: check_conv(r, stride=2),
    "conv_nd_dilation2": lambda r: check_conv(r, dilation=2),
    "conv_nd_1d": lambda r: check_conv(r, rank=1),
    "conv_nd_3d": lambda r: check_conv(r, rank=3),
    "filter_axis": check_filter_axis,
    "upsample_nearest": check_upsample,
    "avg_pool": check_avg_pool,
    "relu": _unary(ad.relu, kinks=(0.0,)),
    "sigmoid": _unary(ad.sigmoid),
    "abs": _unary(ad.abs_, kinks=(0.0,)),
    "logcosh": _unary(ad.logcosh),
    "log": check_log,
    "mul_scalar": _unary(lambda t: ad.mul_scalar(t, -2.5)),
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "concat_channels": check_concat,
    "reduce_sum": check_reduce_sum,
    "reduce_mean": check_reduce_mean,
    "atw_details": check_atw,
    "l1_loss": check_l1,
    "pyramidal_loss": check_pyramidal,
    "soft_histogram": check_soft_histogram,
    "histogram_loss": check_histogram_loss,
    "denoiser_loss": check_denoiser_total,
    "discriminator_loss": check_discriminator_loss,
    "generator_adversarial_loss": check_generator_adversarial,
    "generator_adversarial_loss_log": check_generator_adversarial_log,
}


def run_all(seed: int = 0, names=None) -> dict[str, float]:
    out = {}
    for name, check in REGISTRY.items():
        if names and name not in names:
            continue
        out[name] = check(np.random.default_rng(seed))
    return out
