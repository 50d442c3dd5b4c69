"""Data-dependent priors: the local residual-variance map and its inverse-Gamma prior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .distributions import SigmaPrior
from .errors import ContractError, DomainError, ShapeError

XI_FLOOR = 1e-8


@dataclass(frozen=True)
class HyperParams:
    eps0_sq: float = 1e-6
    p: int = 7
    filter_kind: str = "gaussian"

    def __post_init__(self):
        if not self.eps0_sq > 0:
            raise DomainError(f"eps0_sq must be positive, got {self.eps0_sq}")
        if self.p < 3 or self.p % 2 == 0:
            raise DomainError(f"window size p must be an odd integer >= 3, got {self.p}")
        if self.filter_kind not in ("gaussian", "average"):
            raise DomainError(f"unknown filter kind {self.filter_kind!r}")


@dataclass
class NoisePrior:
    xi: np.ndarray
    alpha0: float
    beta0: np.ndarray

    def as_sigma_prior(self) -> SigmaPrior:
        return SigmaPrior(self.alpha0, self.beta0)


def default_hyperparams(task: str) -> HyperParams:
    if task in ("denoise", "deblock"):
        return HyperParams(1e-6, 7, "gaussian")
    if task == "sr":
        return HyperParams(1e-6, 11, "average")
    raise ContractError(f"unknown task {task!r}")


def filter_weights(p: int, kind: str) -> np.ndarray:
    """Normalised ``p x p`` window; the Gaussian uses standard deviation p/4."""
    if kind == "average":
        w = np.ones((p, p))
    elif kind == "gaussian":
        ax = np.arange(p) - p // 2
        g = np.exp(-0.5 * (ax / (p / 4.0)) ** 2)
        w = np.outer(g, g)
    else:
        raise DomainError(f"unknown filter kind {kind!r}")
    return w / w.sum()


def local_filter(img: np.ndarray, weights: np.ndarray) -> np.ndarray:
    r = weights.shape[0] // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)]
    win = sliding_window_view(np.pad(img, pad, mode="reflect"), weights.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, weights)


def compute_xi(y: np.ndarray, hx: np.ndarray, hp: HyperParams) -> NoisePrior:
    """Windowed mean of the squared residual ``(y - Hx)**2`` and the matching prior."""
    y = np.asarray(y, dtype=np.float64)
    hx = np.asarray(hx, dtype=np.float64)
    if y.shape != hx.shape:
        raise ShapeError(f"y {y.shape} and Hx {hx.shape} differ")
    xi = np.maximum(local_filter((y - hx) ** 2, filter_weights(hp.p, hp.filter_kind)), XI_FLOOR)
    p2 = hp.p * hp.p
    return NoisePrior(xi=xi, alpha0=p2 / 2.0 - 1.0, beta0=(p2 / 2.0) * xi)
