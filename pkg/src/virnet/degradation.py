"""Corruption machinery: blur kernels, downsampling, noise fields, JPEG-like
compression, kernel PCA and kernel re-estimation.

Blur here is a *true* convolution (kernel flipped) with mirror padding,
unlike :func:`virnet.tensor.conv2d`, which is a cross-correlation. All
images are 2-D ``[h, w]`` float arrays in ``[0, 1]`` unless noted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConditioningError, ContractError, DomainError, ShapeError

TASKS = ("denoise", "sr", "deblock")
DEFAULT_SUPPORT = 15

# open-question defaults for sampling kernels
KERNEL_RANGES = {"d": (0.2, 3.0), "theta": (0.0, math.pi), "l": (0.2, 8.0)}


# -------------------------------------------------------------------- kernels


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "isotropic"
    d: float = 1.0
    theta: float = 0.0
    l1: float = 1.0
    l2: float = 1.0
    support: int = DEFAULT_SUPPORT

    def __post_init__(self):
        if self.kind not in ("isotropic", "anisotropic"):
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        if self.support < 1 or self.support % 2 == 0:
            raise DomainError(f"kernel support must be a positive odd integer, got {self.support}")

    def covariance(self) -> np.ndarray:
        if self.kind == "isotropic":
            return np.eye(2) * self.d**2
        c, s = math.cos(self.theta), math.sin(self.theta)
        U = np.array([[c, -s], [s, c]])
        return U @ np.diag([self.l1, self.l2]) @ U.T

    def to_string(self) -> str:
        if self.kind == "isotropic":
            return f"iso:d={self.d!r},support={self.support}"
        return f"aniso:theta={self.theta!r},l1={self.l1!r},l2={self.l2!r},support={self.support}"

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse ``iso:d=1.6,support=15`` or ``aniso:theta=0.5,l1=4,l2=1``."""
        kind, _, rest = text.partition(":")
        params = _parse_params(rest)
        kinds = {"iso": "isotropic", "isotropic": "isotropic", "aniso": "anisotropic", "anisotropic": "anisotropic"}
        if kind not in kinds:
            raise DomainError(f"unknown kernel kind {kind!r}")
        allowed = {"d", "support"} if kinds[kind] == "isotropic" else {"theta", "l1", "l2", "support"}
        unknown = set(params) - allowed
        if unknown:
            raise DomainError(f"unknown kernel parameters {sorted(unknown)}")
        kw = {k: (int(v) if k == "support" else float(v)) for k, v in params.items()}
        return cls(kind=kinds[kind], **kw)


def _parse_params(text: str) -> dict[str, str]:
    out = {}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise DomainError(f"malformed parameter {item!r}; expected key=value")
        out[key.strip()] = value.strip()
    return out


def make_kernel(spec: KernelSpec) -> np.ndarray:
    """Gaussian kernel on the integer grid, normalised to unit sum.

    The offset vector is ``(column, row)`` relative to the centre, so
    ``theta = 0`` puts ``l1`` along the horizontal axis.
    """
    cov = spec.covariance()
    if spec.kind == "isotropic" and not spec.d > 0:
        raise DomainError(f"kernel width must be positive, got {spec.d}")
    eig = np.linalg.eigvalsh(cov)
    if not eig.min() > 0:
        raise DomainError(f"kernel covariance is not positive definite (eigenvalues {eig})")
    r = spec.support // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    col, row = np.meshgrid(ax, ax)
    off = np.stack([col, row], axis=-1)
    inv = np.linalg.inv(cov)
    q = np.einsum("...i,ij,...j->...", off, inv, off)
    k = np.exp(-0.5 * q)
    return k / k.sum()


def sample_kernel_spec(rng: np.random.Generator, support: int = DEFAULT_SUPPORT,
                       ranges: dict | None = None, p_isotropic: float = 0.5) -> KernelSpec:
    ranges = {**KERNEL_RANGES, **(ranges or {})}
    if rng.random() < p_isotropic:
        return KernelSpec("isotropic", d=float(rng.uniform(*ranges["d"])), support=support)
    return KernelSpec("anisotropic", theta=float(rng.uniform(*ranges["theta"])),
                      l1=float(rng.uniform(*ranges["l"])), l2=float(rng.uniform(*ranges["l"])),
                      support=support)


# ----------------------------------------------------------------- blur + down


def blur(z: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True 2-D convolution with mirror padding; output has the input size."""
    z = np.asarray(z, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    r = k.shape[0] // 2
    if r >= min(z.shape[-2:]):
        raise ShapeError(f"kernel of size {k.shape[0]} too large for image {z.shape[-2:]}")
    pad = [(0, 0)] * (z.ndim - 2) + [(r, r), (r, r)]
    zp = np.pad(z, pad, mode="reflect")
    win = sliding_window_view(zp, k.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, k[::-1, ::-1])


def downsample_direct(z: np.ndarray, s: int) -> np.ndarray:
    """Keep the upper-left pixel of every ``s x s`` block."""
    h, w = z.shape[-2:]
    if h % s or w % s:
        raise ShapeError(f"spatial size {(h, w)} not divisible by scale {s}")
    return z[..., ::s, ::s]


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(x <= 1, (a + 2) * x**3 - (a + 3) * x**2 + 1,
                    np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0))


def bicubic_matrix(n_in: int, s: int) -> np.ndarray:
    """1-D bicubic downsampling operator (a = -0.5, no antialiasing).

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * s - 0.5``;
    out-of-range taps are mirrored (edge sample repeated).
    """
    n_out = n_in // s
    D = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) * s - 0.5
        base = math.floor(u)
        for tap in range(base - 1, base + 3):
            wgt = float(_cubic(np.array(u - tap)))
            if wgt == 0.0:
                continue
            j = tap
            while j < 0 or j >= n_in:
                j = -j - 1 if j < 0 else 2 * n_in - j - 1
            D[i, j] += wgt
    return D


def downsample_bicubic(z: np.ndarray, s: int) -> np.ndarray:
    h, w = z.shape[-2:]
    return bicubic_matrix(h, s) @ z @ bicubic_matrix(w, s).T


# ------------------------------------------------------------------- noise


NOISE_KINDS = ("constant", "peaks", "gradient", "vertical-split", "custom-tensor")


@dataclass
class NoiseFieldSpec:
    """Recipe for a per-pixel noise standard-deviation map ``M``."""

    kind: str = "constant"
    params: dict = field(default_factory=dict)
    tensor: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise DomainError(f"unknown noise-map kind {self.kind!r}")

    def realize(self, shape: tuple[int, int]) -> np.ndarray:
        return make_noise_map(self, shape)

    def to_string(self) -> str:
        if self.kind == "custom-tensor":
            return f"custom-tensor:path={self.params.get('path', '')}"
        body = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}:{body}" if body else self.kind

    @classmethod
    def parse(cls, text: str) -> "NoiseFieldSpec":
        """Parse e.g. ``peaks:seed=7,max=0.3`` or ``constant:value=0.1``."""
        kind, _, rest = text.partition(":")
        raw = _parse_params(rest)
        params = {}
        for k, v in raw.items():
            if k == "path":
                params[k] = v
            elif k in ("seed", "count"):
                params[k] = int(v)
            else:
                params[k] = float(v)
        spec = cls(kind=kind, params=params)
        if kind == "custom-tensor":
            from .io import read_virt
            spec.tensor = read_virt(params["path"])
        return spec


_NOISE_PARAMS = {
    "constant": {"value"},
    "peaks": {"seed", "max", "min", "count"},
    "gradient": {"min", "max", "axis"},
    "vertical-split": {"left", "right"},
    "custom-tensor": {"path"},
}


def make_noise_map(spec: NoiseFieldSpec, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    p = spec.params
    unknown = set(p) - _NOISE_PARAMS[spec.kind]
    if unknown:
        raise DomainError(f"unknown parameters {sorted(unknown)} for noise map {spec.kind!r}")
    if spec.kind == "constant":
        M = np.full((h, w), float(p.get("value", 0.0)))
    elif spec.kind == "peaks":
        M = _peaks_map(h, w, int(p.get("seed", 0)), float(p.get("min", 0.02)),
                       float(p.get("max", 0.2)), int(p.get("count", 4)))
    elif spec.kind == "gradient":
        lo, hi = float(p.get("min", 0.02)), float(p.get("max", 0.2))
        ramp = np.linspace(0.0, 1.0, w if int(p.get("axis", 1)) == 1 else h)
        M = lo + (hi - lo) * (ramp[None, :] if int(p.get("axis", 1)) == 1 else ramp[:, None])
        M = np.broadcast_to(M, (h, w)).copy()
    elif spec.kind == "vertical-split":
        M = np.empty((h, w))
        M[:, : w // 2] = float(p.get("left", 0.02))
        M[:, w // 2:] = float(p.get("right", 0.2))
    else:
        if spec.tensor is None:
            raise ContractError("custom-tensor noise map has no tensor attached")
        M = np.asarray(spec.tensor, dtype=np.float64)
        if M.shape != (h, w):
            raise ShapeError(f"custom noise map {M.shape} does not match image {(h, w)}")
    if np.any(M < 0):
        raise DomainError("noise map must be non-negative")
    return M


def _peaks_map(h: int, w: int, seed: int, lo: float, hi: float, count: int) -> np.ndarray:
    """Sum of Gaussian bumps in relative coordinates, rescaled to ``[lo, hi]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    acc = np.zeros((h, w))
    for _ in range(count):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        width = rng.uniform(0.12, 0.35)
        amp = rng.uniform(0.4, 1.0)
        acc += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    acc -= acc.min()
    peak = acc.max()
    if peak > 0:
        acc /= peak
    return lo + (hi - lo) * acc


def synth_noise(shape, noise_map: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian noise whose per-pixel std is ``noise_map``."""
    M = np.asarray(noise_map, dtype=np.float64)
    if tuple(M.shape) != tuple(shape):
        raise ShapeError(f"noise map {M.shape} does not match requested shape {tuple(shape)}")
    return rng.standard_normal(tuple(shape)) * M


# ------------------------------------------------------------------ JPEG-like

JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def quant_table(qf: int) -> np.ndarray:
    if not (isinstance(qf, (int, np.integer)) and 1 <= qf <= 99):
        raise DomainError(f"quality factor must be an integer in [1, 99], got {qf!r}")
    scale = 5000 // qf if qf < 50 else 200 - 2 * qf
    return np.clip((JPEG_LUMA_TABLE * scale + 50) // 100, 1, 255).astype(np.float64)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    C = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    C[0] /= math.sqrt(2.0)
    return C


_DCT8 = _dct_matrix(8)


def block_dct(blocks: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of ``[..., 8, 8]`` blocks."""
    return _DCT8 @ blocks @ _DCT8.T


def block_idct(coeffs: np.ndarray) -> np.ndarray:
    return _DCT8.T @ coeffs @ _DCT8


def jpeg_like_compress(z: np.ndarray, qf: int) -> np.ndarray:
    """Grayscale block-DCT quantisation round trip at quality ``qf``.

    Works on the 0-255 level-shifted scale like baseline JPEG; the image
    is edge-padded to a multiple of 8 and cropped back.
    """
    Q = quant_table(qf)
    z = np.asarray(z, dtype=np.float64)
    h, w = z.shape
    H, W = -(-h // 8) * 8, -(-w // 8) * 8
    zp = np.pad(z, ((0, H - h), (0, W - w)), mode="edge") * 255.0 - 128.0
    blocks = zp.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    coeffs = block_dct(blocks)
    rec = block_idct(np.round(coeffs / Q) * Q)
    out = rec.transpose(0, 2, 1, 3).reshape(H, W)[:h, :w]
    return np.clip((out + 128.0) / 255.0, 0.0, 1.0)


# ------------------------------------------------------------- degradation


@dataclass
class DegradationSpec:
    task: str = "denoise"
    kernel: KernelSpec | None = None
    scale: int = 1
    noise: NoiseFieldSpec = field(default_factory=NoiseFieldSpec)
    qf: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if self.task == "denoise" and (self.scale != 1 or self.kernel is not None):
            raise ContractError("denoising uses the identity operator: scale 1, no kernel")
        if self.task == "sr" and (self.kernel is None or self.scale < 2):
            raise ContractError("super-resolution needs a kernel and scale >= 2")
        if self.task == "deblock":
            if self.scale != 1 or self.kernel is not None:
                raise ContractError("deblocking uses the identity operator")
            if self.qf is None:
                raise ContractError("deblocking needs a quality factor")
            quant_table(self.qf)

    @property
    def is_identity(self) -> bool:
        return self.kernel is None and self.scale == 1

    def kernel_array(self) -> np.ndarray:
        if self.kernel is None:
            return np.ones((1, 1))
        return make_kernel(self.kernel)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "kernel": self.kernel.to_string() if self.kernel else None,
            "scale": self.scale,
            "noise": self.noise.to_string(),
            "qf": self.qf,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(task=d["task"], kernel=KernelSpec.parse(d["kernel"]) if d.get("kernel") else None,
                   scale=int(d.get("scale", 1)), noise=NoiseFieldSpec.parse(d.get("noise", "constant")),
                   qf=d.get("qf"))


def apply_degradation(z: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Deterministic part of the corruption: blur, then direct downsampling."""
    s = spec.scale
    h, w = np.shape(z)[-2:]
    if h % s or w % s:
        raise ShapeError(f"spatial size {(h, w)} not divisible by scale {s}")
    out = np.asarray(z, dtype=np.float64)
    if spec.kernel is not None:
        out = blur(out, make_kernel(spec.kernel))
    return downsample_direct(out, s) if s > 1 else out.copy()


def corrupt(z: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Full corruption of a clean image. Returns ``(y, M)``, M the true noise std map."""
    if spec.task == "deblock":
        y = jpeg_like_compress(z, spec.qf)
        return y, np.abs(y - z)
    clean = apply_degradation(z, spec)
    M = spec.noise.realize(clean.shape)
    return clean + synth_noise(clean.shape, M, rng), M


# ------------------------------------------------------------------- PCA


@dataclass
class KernelEmbedding:
    basis: np.ndarray  # [t, support**2], orthonormal rows
    mean: np.ndarray  # [support**2]
    support: int

    @property
    def t(self) -> int:
        return self.basis.shape[0]

    def project(self, kernel: np.ndarray) -> np.ndarray:
        return self.basis @ (np.ravel(kernel) - self.mean)

    def reconstruct(self, code: np.ndarray) -> np.ndarray:
        return (self.mean + np.asarray(code) @ self.basis).reshape(self.support, self.support)


def kernel_pca_fit(kernels: Sequence[np.ndarray], t: int) -> KernelEmbedding:
    kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
    if len(kernels) < t:
        raise ContractError(f"need at least t={t} kernels for PCA, got {len(kernels)}")
    support = kernels[0].shape[0]
    if any(k.shape != (support, support) for k in kernels):
        raise ContractError("all kernels must share one square support")
    X = np.stack([k.ravel() for k in kernels])
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    return KernelEmbedding(basis=vt[:t].copy(), mean=mean, support=support)


def stretch_embedding(code, h: int, w: int) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64).ravel()
    return np.broadcast_to(code[:, None, None], (code.size, h, w)).copy()


# ------------------------------------------------------------- re-estimation


def _shift_stack(z: np.ndarray, support: int) -> np.ndarray:
    """``[support**2, h, w]``: blur of ``z`` by each unit kernel, row-major."""
    r = support // 2
    zp = np.pad(z, r, mode="reflect")
    h, w = z.shape
    out = np.empty((support, support, h, w))
    for a in range(support):
        for b in range(support):
            # coefficient of k[a, b] in a true convolution
            out[a, b] = zp[support - 1 - a: support - 1 - a + h, support - 1 - b: support - 1 - b + w]
    return out.reshape(support * support, h, w)


def reestimate_kernel(k_d: np.ndarray, s: int, probe_images: Sequence[np.ndarray],
                      max_condition: float = 1e12) -> np.ndarray:
    """Kernel that reproduces direct-downsampled blur under bicubic downsampling.

    Solves the linear least-squares problem over all probe images and
    returns the minimiser rescaled to unit sum.
    """
    k_d = np.asarray(k_d, dtype=np.float64)
    support = k_d.shape[0]
    rows, rhs = [], []
    for z in probe_images:
        z = np.asarray(z, dtype=np.float64)
        h, w = z.shape
        if h % s or w % s:
            raise ShapeError(f"probe size {(h, w)} not divisible by {s}")
        Dr, Dc = bicubic_matrix(h, s), bicubic_matrix(w, s)
        stack = _shift_stack(z, support)
        rows.append(np.einsum("ih,khw,jw->ijk", Dr, stack, Dc).reshape(-1, support * support))
        rhs.append(downsample_direct(blur(z, k_d), s).ravel())
    A = np.concatenate(rows)
    b = np.concatenate(rhs)
    if A.shape[0] < A.shape[1]:
        raise ConditioningError(f"underdetermined system: {A.shape[0]} equations for {A.shape[1]} unknowns")
    sv = np.linalg.svd(A, compute_uv=False)
    cond = sv[0] / sv[-1] if sv[-1] > 0 else np.inf
    if cond > max_condition:
        raise ConditioningError(f"kernel re-estimation is ill-conditioned (condition number {cond:.3g})",
                                singular_values=sv)
    k, *_ = np.linalg.lstsq(A, b, rcond=None)
    return (k / k.sum()).reshape(support, support)


def reestimation_objective(k_b: np.ndarray, k_d: np.ndarray, s: int, probe_images) -> float:
    return float(sum(np.sum((downsample_bicubic(blur(z, k_b), s) - downsample_direct(blur(z, k_d), s)) ** 2)
                     for z in probe_images))
