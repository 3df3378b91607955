"""Undecimated "a trous" wavelet decomposition of 1-d, 2-d and 3-d arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, filter_axis, sub

B3_SPLINE = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def upsample_kernel(base, j: int) -> np.ndarray:
    """Insert ``2**(j-1) - 1`` zeros between adjacent taps of ``base``."""
    if j < 1:
        raise ValueError(f"level must be >= 1, got {j}")
    base = np.asarray(base, dtype=np.float64)
    step = 2 ** (j - 1)
    out = np.zeros((base.size - 1) * step + 1)
    out[::step] = base
    return out


def _check_kernel(base: np.ndarray):
    if base.ndim != 1 or base.size % 2 == 0:
        raise ValueError("ATW kernel must be 1-d with odd length")
    if not np.isclose(base.sum(), 1.0, atol=1e-12):
        raise ValueError("ATW kernel must have unit sum")
    if not np.allclose(base, base[::-1]):
        raise ValueError("ATW kernel must be symmetric")


@dataclass
class AtwPyramid:
    approximations: list[Tensor]  # c_0 .. c_J
    details: list[Tensor]  # Δ_1 .. Δ_J

    @property
    def levels(self) -> int:
        return len(self.details)

    def reconstruct(self) -> np.ndarray:
        out = self.approximations[-1].data.copy()
        for d in self.details:
            out = out + d.data
        return out


def smooth(c: Tensor, level: int, base=B3_SPLINE) -> Tensor:
    """One separable low-pass pass at ``level`` over every spatial axis of ``[N, C, *S]``."""
    base = np.asarray(base, dtype=np.float64)
    step = 2 ** (level - 1)
    for ax in range(2, c.ndim):
        c = filter_axis(c, base, ax, dilation=step)
    return c


def atw_decompose(image, levels: int = 4, base=B3_SPLINE) -> AtwPyramid:
    """Decompose ``image`` (``[N, C, *S]``) into ``levels`` detail layers.

    ``c_j`` is ``c_{j-1}`` smoothed with the level-``j`` dilated kernel along
    every spatial axis and ``Δ_j = c_{j-1} - c_j``. Differentiable.
    """
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    base = np.asarray(base, dtype=np.float64)
    _check_kernel(base)
    c = as_tensor(image)
    if c.ndim < 3:
        raise ValueError("expected [N, C, *spatial] layout; use atw_decompose_array for bare arrays")
    approx = [c]
    details = []
    for j in range(1, levels + 1):
        nxt = smooth(c, j, base)
        details.append(sub(c, nxt))
        approx.append(nxt)
        c = nxt
    return AtwPyramid(approx, details)


def atw_details(image, levels: int = 4, base=B3_SPLINE) -> list[Tensor]:
    return atw_decompose(image, levels, base).details


def atw_decompose_array(arr, levels: int = 4, base=B3_SPLINE) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Plain-array convenience: every axis of ``arr`` is spatial."""
    arr = np.asarray(arr, dtype=np.float64)
    pyr = atw_decompose(Tensor(arr[None, None]), levels, base)
    return [c.data[0, 0] for c in pyr.approximations], [d.data[0, 0] for d in pyr.details]
