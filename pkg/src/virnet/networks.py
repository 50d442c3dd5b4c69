"""SNet and RNet: the amortised inference networks.

SNet maps the corrupted image to inverse-Gamma parameters ``(alpha, beta)``
per pixel; RNet maps the corrupted image (plus the stretched kernel code
for super-resolution) to Gaussian parameters ``(mu, m2)`` of the latent
clean image. Parameters of both live in one ordered ``dict`` whose keys
are prefixed ``snet.`` or ``rnet.``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .distributions import GaussianPosterior, InvGammaPosterior
from .errors import ShapeError
from .io import load_checkpoint, save_checkpoint
from .tensor import Tensor

POSITIVITY_FLOOR = 1e-8

Params = dict  # name -> Tensor


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 1
    snet_channels: int = 32
    rnet_base_channels: int = 32
    deep: bool = False
    leaky_slope: float = 0.2
    t: int = 0
    scale: int = 1

    def __post_init__(self):
        if min(self.channels, self.snet_channels, self.rnet_base_channels) < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def levels(self) -> int:
        return 4 if self.deep else 3

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, int], bool]]:
    """(name, (c_in, c_out), followed_by_activation) for every 3x3 conv."""
    ch, S, C = cfg.channels, cfg.snet_channels, cfg.rnet_base_channels
    layers = [("snet.conv1", (ch, S), True)]
    layers += [(f"snet.conv{i}", (S, S), True) for i in (2, 3, 4)]
    layers.append(("snet.conv5", (S, 2 * ch), False))

    widths = [C * 2**i for i in range(cfg.levels)]
    c_in = ch + cfg.t
    for i, wdt in enumerate(widths):
        layers.append((f"rnet.enc{i + 1}a", (c_in, wdt), True))
        layers.append((f"rnet.enc{i + 1}b", (wdt, wdt), True))
        c_in = wdt
    for i in range(cfg.levels - 2, -1, -1):
        layers.append((f"rnet.dec{i + 1}a", (c_in + widths[i], widths[i]), True))
        layers.append((f"rnet.dec{i + 1}b", (widths[i], widths[i]), True))
        c_in = widths[i]
    if cfg.scale > 1:
        layers.append(("rnet.tail", (C, C), True))
    layers.append(("rnet.head", (C, 2 * ch), False))
    return layers


def orthogonal(shape: tuple[int, ...], gain: float, rng: np.random.Generator) -> np.ndarray:
    """Random weight whose ``[c_out, c_in*k*k]`` reshape has all singular values equal to ``gain``."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    mat = q.T if rows < cols else q
    return np.ascontiguousarray(gain * mat).reshape(shape)


def init_params(cfg: NetworkConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    for name, (c_in, c_out), act in _conv_shapes(cfg):
        gain = np.sqrt(2.0) if act else 1.0
        params[f"{name}.weight"] = Tensor(orthogonal((c_out, c_in, 3, 3), gain, rng), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)
    return params


def _conv(params: Params, name: str, x: Tensor) -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=1)


def _conv_act(params: Params, name: str, x: Tensor, slope: float) -> Tensor:
    return T.leaky_relu(_conv(params, name, x), slope)


def _batched(y) -> tuple[Tensor, bool]:
    y = T._lift(y)
    if y.ndim == 2:
        return Tensor(y.data[None, None]), True
    if y.ndim == 3:
        return Tensor(y.data[None]), True
    return y, False


def snet_forward(y, params: Params, cfg: NetworkConfig) -> InvGammaPosterior:
    """Five plain 3x3 convs; LeakyReLU after all but the last."""
    x, _ = _batched(y)
    h = x
    for i in range(1, 5):
        h = _conv_act(params, f"snet.conv{i}", h, cfg.leaky_slope)
    out = _conv(params, "snet.conv5", h)
    ch = cfg.channels
    # the floor keeps alpha > 1 even when softplus underflows next to 1.0
    alpha = T.softplus(T.slice_channels(out, 0, ch)) + (1.0 + POSITIVITY_FLOOR)
    beta = T.softplus(T.slice_channels(out, ch, 2 * ch)) + POSITIVITY_FLOOR
    return InvGammaPosterior(alpha, beta)


def rnet_forward(y, params: Params, cfg: NetworkConfig, stretched_h=None) -> GaussianPosterior:
    """Tiny U-Net with a residual connection from the (upsampled) input to ``mu``."""
    x, _ = _batched(y)
    n, _, h, w = x.shape
    if h % cfg.multiple or w % cfg.multiple:
        raise ShapeError(f"RNet input {(h, w)} must be divisible by {cfg.multiple}")
    if (stretched_h is not None) != (cfg.t > 0):
        raise ShapeError("stretched kernel code must be given exactly when t > 0")
    slope = cfg.leaky_slope
    inp = x
    if stretched_h is not None:
        code = np.asarray(stretched_h.data if isinstance(stretched_h, Tensor) else stretched_h)
        if code.ndim == 3:
            code = np.broadcast_to(code, (n,) + code.shape)
        if code.shape != (n, cfg.t, h, w):
            raise ShapeError(f"stretched code {code.shape} does not match {(n, cfg.t, h, w)}")
        inp = T.concat([x, Tensor(code)], axis=1)

    skips = []
    cur = inp
    for i in range(cfg.levels):
        if i > 0:
            cur = T.avgpool2(cur)
        cur = _conv_act(params, f"rnet.enc{i + 1}a", cur, slope)
        cur = _conv_act(params, f"rnet.enc{i + 1}b", cur, slope)
        skips.append(cur)
    for i in range(cfg.levels - 2, -1, -1):
        cur = T.concat([T.upsample(cur, 2), skips[i]], axis=1)
        cur = _conv_act(params, f"rnet.dec{i + 1}a", cur, slope)
        cur = _conv_act(params, f"rnet.dec{i + 1}b", cur, slope)
    base = x
    if cfg.scale > 1:
        cur = _conv_act(params, "rnet.tail", T.upsample(cur, cfg.scale), slope)
        base = T.upsample(x, cfg.scale)
    out = _conv(params, "rnet.head", cur)
    ch = cfg.channels
    mu = base + T.slice_channels(out, 0, ch)
    m2 = T.softplus(T.slice_channels(out, ch, 2 * ch)) + POSITIVITY_FLOOR
    return GaussianPosterior(mu, m2)


def snet_params(params: Params) -> list[str]:
    return [k for k in params if k.startswith("snet.")]


def rnet_params(params: Params) -> list[str]:
    return [k for k in params if k.startswith("rnet.")]


def save_params(path, params: Params, cfg: NetworkConfig, extra_arrays: dict | None = None,
                meta: dict | None = None) -> None:
    arrays = {k: v.data for k, v in params.items()}
    arrays.update(extra_arrays or {})
    save_checkpoint(path, arrays, {"network": cfg.to_dict(), "param_names": list(params), **(meta or {})})


def load_params(path) -> tuple[Params, NetworkConfig, dict, dict]:
    """Returns (params, config, other arrays, meta)."""
    arrays, meta = load_checkpoint(path)
    cfg = NetworkConfig(**meta["network"])
    names = meta["param_names"]
    params = {k: Tensor(arrays.pop(k), requires_grad=True) for k in names}
    return params, cfg, arrays, meta
