"""Procedural clean images, dataset synthesis and loading.

A dataset on disk is a directory of VIRT files plus ``manifest.json``.
Each sample draws its degradation from a generator seeded by
``(seed, index)``, so any subset can be regenerated independently and in
any order.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .degradation import (DegradationSpec, KernelEmbedding, KernelSpec, NoiseFieldSpec, apply_degradation,
                          corrupt, kernel_pca_fit, make_kernel, sample_kernel_spec)
from .errors import ContractError, DomainError
from .io import read_image, read_virt, write_virt
from .objective import Batch
from .priors import HyperParams, compute_xi


def procedural_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth gradient plus random shapes, stripes and a soft texture, in [0, 1]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    a, b, c = rng.uniform(-0.4, 0.4, size=3)
    img = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + c * (xx - 0.5) * (yy - 0.5)
    for _ in range(rng.integers(2, 6)):
        level = rng.uniform(0.05, 0.95)
        kind = rng.integers(3)
        if kind == 0:
            y0, x0 = rng.uniform(-0.2, 0.8, size=2)
            hh, ww = rng.uniform(0.15, 0.6, size=2)
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        elif kind == 1:
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.1, 0.4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            ang = rng.uniform(0, np.pi)
            off = rng.uniform(-0.3, 0.3)
            mask = np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5) > off
        img = np.where(mask, 0.6 * level + 0.4 * img, img)
    if rng.random() < 0.5:
        freq = rng.uniform(3, 10)
        ang = rng.uniform(0, np.pi)
        amp = rng.uniform(0.03, 0.12)
        img = img + amp * np.sin(2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy))
    return np.clip(img, 0.0, 1.0)


@dataclass
class SynthConfig:
    task: str = "denoise"
    count: int = 64
    size: int = 32
    noise_map: str = "peaks:max=0.2"
    map_size: int | None = None
    scale: int = 2
    kernels: list = field(default_factory=list)
    kernel_support: int = 15
    noise_level: list = field(default_factory=lambda: [0.0, 25.0])
    qf_range: list = field(default_factory=lambda: [5, 99])
    source_dir: str | None = None


def _sample_degradation(cfg: SynthConfig, rng: np.random.Generator) -> tuple[DegradationSpec, dict]:
    """Degradation for one sample plus how to crop its noise map."""
    crop = {}
    if cfg.task == "denoise":
        noise = NoiseFieldSpec.parse(cfg.noise_map)
        if noise.kind == "peaks" and "seed" not in noise.params:
            noise.params["seed"] = int(rng.integers(2**31))
        map_size = cfg.map_size or cfg.size
        if map_size < cfg.size:
            raise DomainError("map_size must be at least the patch size")
        crop = {"map_size": map_size, "offset": [int(v) for v in rng.integers(0, map_size - cfg.size + 1, size=2)]}
        return DegradationSpec("denoise", noise=noise), crop
    if cfg.task == "sr":
        if cfg.kernels:
            kernel = KernelSpec.parse(cfg.kernels[int(rng.integers(len(cfg.kernels)))])
        else:
            kernel = sample_kernel_spec(rng, support=cfg.kernel_support)
        level = float(rng.uniform(*cfg.noise_level)) / 255.0
        return DegradationSpec("sr", kernel=kernel, scale=cfg.scale,
                               noise=NoiseFieldSpec("constant", {"value": level})), crop
    if cfg.task == "deblock":
        lo, hi = cfg.qf_range
        return DegradationSpec("deblock", qf=int(rng.integers(lo, hi + 1))), crop
    raise ContractError(f"unknown task {cfg.task!r}")


def _noise_map_for(spec: DegradationSpec, crop: dict, shape) -> np.ndarray | None:
    if spec.task != "denoise":
        return None
    m = crop["map_size"]
    full = spec.noise.realize((m, m))
    oy, ox = crop["offset"]
    return full[oy:oy + shape[0], ox:ox + shape[1]]


def _clean_source(cfg: SynthConfig, idx: int, rng: np.random.Generator, sources: list[Path]) -> np.ndarray:
    if not sources:
        return procedural_image(rng, cfg.size, cfg.size)
    img = read_image(sources[idx % len(sources)])
    if img.ndim == 3:
        img = img.mean(axis=0) if img.shape[0] == 3 else img[0]
    h, w = img.shape
    if h < cfg.size or w < cfg.size:
        raise ContractError(f"source image {sources[idx % len(sources)]} is smaller than the patch size")
    oy, ox = rng.integers(0, h - cfg.size + 1), rng.integers(0, w - cfg.size + 1)
    return img[oy:oy + cfg.size, ox:ox + cfg.size]


def synth_sample(cfg: SynthConfig, seed: int, idx: int, sources: list[Path] = ()) -> dict:
    """Generate one clean/corrupted pair (arrays rounded to float32 like on disk)."""
    rng = np.random.default_rng([seed, idx])
    clean = _clean_source(cfg, idx, rng, list(sources)).astype(np.float32).astype(np.float64)
    spec, crop = _sample_degradation(cfg, rng)
    if cfg.task == "sr" and cfg.size % spec.scale:
        # pad the clean patch up to the next multiple so y is ceil(size / s) wide
        extra = -cfg.size % spec.scale
        clean = np.pad(clean, [(0, extra), (0, extra)], mode="reflect")
    if spec.task == "denoise":
        M = _noise_map_for(spec, crop, clean.shape)
        y = clean + rng.standard_normal(clean.shape) * M
    else:
        y, M = corrupt(clean, spec, rng)
    return {"clean": clean, "corrupted": y.astype(np.float32).astype(np.float64), "noise_map": M,
            "degradation": spec, "crop": crop}


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VIRNET_THREADS", "1")))
    except ValueError:
        return 1


def synthesize(cfg: SynthConfig, out_dir, seed: int) -> Path:
    """Write the dataset and its manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = sorted(Path(cfg.source_dir).glob("*")) if cfg.source_dir else []

    def one(idx: int) -> dict:
        s = synth_sample(cfg, seed, idx, sources)
        entry = {"clean": f"clean_{idx:05d}.virt", "corrupted": f"corrupted_{idx:05d}.virt",
                 "degradation": s["degradation"].to_dict()}
        write_virt(out / entry["clean"], s["clean"])
        write_virt(out / entry["corrupted"], s["corrupted"])
        if s["noise_map"] is not None:
            entry["noise_map"] = f"noisemap_{idx:05d}.virt"
            write_virt(out / entry["noise_map"], s["noise_map"])
        if s["crop"]:
            entry["crop"] = s["crop"]
        return entry

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        entries = list(pool.map(one, range(cfg.count)))
    manifest = {"task": cfg.task, "seed": seed, "synth": cfg.__dict__, "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


# ------------------------------------------------------------------ loading


@dataclass
class Dataset:
    task: str
    x: np.ndarray  # [N,1,H,W]
    y: np.ndarray  # [N,1,h,w]
    specs: list
    noise_maps: np.ndarray | None = None
    kernels: np.ndarray | None = None
    scale: int = 1
    embedding: KernelEmbedding | None = None
    codes: np.ndarray | None = None
    beta0: np.ndarray | None = None
    alpha0: float = 0.0

    def __len__(self):
        return self.x.shape[0]

    def prepare(self, hp: HyperParams, embedding: KernelEmbedding | None = None) -> "Dataset":
        """Precompute the per-sample noise priors (and kernel codes for SR)."""
        hx = np.stack([apply_degradation(self.x[i], self.specs[i]) for i in range(len(self))])
        prior = compute_xi(self.y, hx, hp)
        self.beta0, self.alpha0 = prior.beta0, prior.alpha0
        if self.kernels is not None:
            self.embedding = embedding or self.embedding
            if self.embedding is None:
                raise ContractError("super-resolution data needs a kernel embedding")
            self.codes = np.stack([self.embedding.project(k) for k in self.kernels])
        return self

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        code = None
        if self.codes is not None:
            h, w = self.y.shape[-2:]
            code = np.broadcast_to(self.codes[idx][:, :, None, None], (len(idx), self.codes.shape[1], h, w)).copy()
        return Batch(y=self.y[idx], x=self.x[idx], beta0=self.beta0[idx], alpha0=self.alpha0,
                     kernels=None if self.kernels is None else self.kernels[idx], scale=self.scale, code=code)


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    for entry in manifest["samples"]:
        for key in ("clean", "corrupted", "noise_map"):
            if key in entry and not (path.parent / entry[key]).exists():
                raise ContractError(f"manifest references missing file {entry[key]}")
    return manifest


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = load_manifest(path)
    root = path.parent
    xs, ys, ms, specs = [], [], [], []
    for entry in manifest["samples"]:
        xs.append(read_virt(root / entry["clean"]))
        ys.append(read_virt(root / entry["corrupted"]))
        if "noise_map" in entry:
            ms.append(read_virt(root / entry["noise_map"]))
        specs.append(DegradationSpec.from_dict(entry["degradation"]))
    x = np.stack(xs)[:, None]
    y = np.stack(ys)[:, None]
    kernels = None
    scale = 1
    if manifest["task"] == "sr":
        kernels = np.stack([make_kernel(s.kernel) for s in specs])
        scale = specs[0].scale
        if any(s.scale != scale for s in specs):
            raise ContractError("all samples of an SR dataset must share one scale factor")
    return Dataset(task=manifest["task"], x=x, y=y, specs=specs,
                   noise_maps=np.stack(ms)[:, None] if len(ms) == len(specs) else None,
                   kernels=kernels, scale=scale)


def from_samples(task: str, samples: list[dict]) -> Dataset:
    """In-memory dataset from :func:`synth_sample` outputs."""
    specs = [s["degradation"] for s in samples]
    kernels = np.stack([make_kernel(s.kernel) for s in specs]) if task == "sr" else None
    maps = [s["noise_map"] for s in samples]
    return Dataset(task=task, x=np.stack([s["clean"] for s in samples])[:, None],
                   y=np.stack([s["corrupted"] for s in samples])[:, None], specs=specs,
                   noise_maps=np.stack(maps)[:, None] if all(m is not None for m in maps) else None,
                   kernels=kernels, scale=specs[0].scale)


def kernel_bank_embedding(t: int, seed: int, support: int = 15, count: int = 256,
                          extra: list[np.ndarray] = ()) -> KernelEmbedding:
    """PCA embedding fitted on randomly sampled kernels plus any ``extra`` ones."""
    rng = np.random.default_rng([seed, 0x6B65726E])
    bank = [make_kernel(sample_kernel_spec(rng, support=support)) for _ in range(count)]
    return kernel_pca_fit(bank + list(extra), t)
