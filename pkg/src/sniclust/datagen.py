"""Synthetic sparse/noisy image benchmark and pixel-graph construction.

Images mimic spatial expression maps: a small set of smooth base patterns
(Gaussian bumps plus one layered-stripe family), half-normal pixel noise,
then heavy random pixel masking. Values are always finite and >= 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class SynthConfig:
    n_images: int = 300
    height: int = 16
    width: int = 16
    channels: int = 1
    n_patterns: int = 3
    sparsity: float = 0.9
    noise_std: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("image dims must be >= 1")
        if self.n_patterns < 1:
            raise ValueError("n_patterns must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")


def base_patterns(cfg: SynthConfig) -> np.ndarray:
    """The K smooth (C, H, W) patterns: Gaussian bumps plus one stripe layer."""
    h, w, k = cfg.height, cfg.width, cfg.n_patterns
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    sig = min(h, w) / 6.0
    patterns = []
    n_bumps = k if k == 1 else k - 1
    for i in range(n_bumps):
        # distinct centers on a ring around the image middle
        ang = 2.0 * np.pi * i / max(n_bumps, 1)
        r0 = h / 2.0 + 0.28 * h * np.sin(ang)
        c0 = w / 2.0 + 0.28 * w * np.cos(ang)
        bump = np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2.0 * sig ** 2))
        patterns.append(bump)
    if k > 1:
        # layered horizontal stripes, amplitude 1
        period = max(h / 3.0, 2.0)
        stripe = 0.5 * (1.0 + np.cos(2.0 * np.pi * rows / period)) * np.ones((h, w))
        patterns.append(stripe)
    stacked = np.stack(patterns)  # (K, H, W)
    return np.repeat(stacked[:, None, :, :], cfg.channels, axis=1)


def synth_dataset(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Labelled synthetic images: pattern + half-normal noise, then masking."""
    cfg.validate()
    rng = as_rng(cfg.seed)
    patterns = base_patterns(cfg)
    labels = rng.integers(0, cfg.n_patterns, size=cfg.n_images)
    images = patterns[labels].copy()
    if cfg.noise_std > 0:
        images += np.abs(rng.normal(0.0, cfg.noise_std, size=images.shape))
    if cfg.sparsity > 0:
        images = sparsify(images, cfg.sparsity, rng)
    return images, labels


def sparsify(images: np.ndarray, mask_fraction: float, seed) -> np.ndarray:
    """Zero a uniform random pixel subset per image, jointly over channels."""
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError("mask_fraction must lie in [0, 1)")
    images = np.array(images, dtype=np.float64, copy=True)
    if mask_fraction == 0.0:
        return images
    rng = as_rng(seed)
    n, _, h, w = images.shape
    n_pix = h * w
    n_masked = int(round(mask_fraction * n_pix))
    flat = images.reshape(n, -1, n_pix)
    for i in range(n):
        sites = rng.choice(n_pix, size=n_masked, replace=False)
        flat[i, :, sites] = 0.0
    return flat.reshape(images.shape)


@dataclass
class PixelGraph:
    """Undirected pixel adjacency within Euclidean grid radius r, self-loops
    included so every neighbor set is non-empty.

    Edges are stored receiver-major: ``receiver[e]`` aggregates from
    ``sender[e]``; ``starts`` gives each receiver's contiguous segment for
    reduceat-style sums.
    """

    height: int
    width: int
    radius: float
    receiver: np.ndarray
    sender: np.ndarray
    starts: np.ndarray

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @property
    def n_edges(self) -> int:
        return len(self.receiver)

    def neighbors(self, pixel: int) -> np.ndarray:
        """Sorted neighbor set of one pixel (includes the pixel itself)."""
        lo = self.starts[pixel]
        hi = self.starts[pixel + 1] if pixel + 1 < self.n_pixels else self.n_edges
        return self.sender[lo:hi]

    def degrees(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.n_edges))


def build_pixel_graph(height: int, width: int, radius: float) -> PixelGraph:
    if radius < 1:
        raise ValueError("radius must be >= 1")
    span = int(np.floor(radius))
    offs = [(dr, dc)
            for dr in range(-span, span + 1)
            for dc in range(-span, span + 1)
            if dr * dr + dc * dc <= radius * radius]
    receivers, senders = [], []
    for r in range(height):
        for c in range(width):
            pix = r * width + c
            neigh = sorted((r + dr) * width + (c + dc)
                           for dr, dc in offs
                           if 0 <= r + dr < height and 0 <= c + dc < width)
            receivers.extend([pix] * len(neigh))
            senders.extend(neigh)
    receiver = np.asarray(receivers, dtype=np.intp)
    sender = np.asarray(senders, dtype=np.intp)
    counts = np.bincount(receiver, minlength=height * width)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
    return PixelGraph(height, width, radius, receiver, sender, starts)
