"""Masked-patch representation learning with a momentum contrastive branch.

One lightweight ViT encoder serves three roles: the masked-reconstruction
encoder and the online contrastive encoder share parameters exactly, while
the target contrastive encoder is an EMA copy that never receives gradients.
Masked patches are swapped for a learned mask token *before* the encoder, and
a fully-connected linear decoder maps token states back to pixel patches.
Image-level embeddings are mean-pooled over unmasked tokens and passed
through linear mapping heads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor
from .datagen import as_rng
from .io import FormatError, read_float64_block, write_float64_block


@dataclass
class VitConfig:
    image_h: int = 16
    image_w: int = 16
    channels: int = 1
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mask_ratio: float = 0.8
    mlp_ratio: int = 4
    decoder: str = "linear"  # or "mlp": pooled-embedding pyramid decoder
    mlp_decoder_widths: tuple = (128, 256, 512, 1024)

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.decoder not in ("linear", "mlp"):
            raise ValueError(f"unknown decoder {self.decoder!r}")

    @property
    def padded_h(self) -> int:
        return -(-self.image_h // self.patch) * self.patch

    @property
    def padded_w(self) -> int:
        return -(-self.image_w // self.patch) * self.patch

    @property
    def n_patches(self) -> int:
        return (self.padded_h // self.patch) * (self.padded_w // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def to_dict(self) -> dict:
        return {
            "image_h": self.image_h, "image_w": self.image_w,
            "channels": self.channels, "patch": self.patch, "dim": self.dim,
            "depth": self.depth, "heads": self.heads,
            "mask_ratio": self.mask_ratio, "mlp_ratio": self.mlp_ratio,
            "decoder": self.decoder,
            "mlp_decoder_widths": list(self.mlp_decoder_widths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        d = dict(d)
        d["mlp_decoder_widths"] = tuple(d.get("mlp_decoder_widths", (128, 256, 512, 1024)))
        return cls(**d)


# -- patch bookkeeping ---------------------------------------------------------

def pad_images(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """Zero-pad to the next multiple of the patch size (no-op when divisible)."""
    n, c, h, w = images.shape
    if h == cfg.padded_h and w == cfg.padded_w:
        return images
    out = np.zeros((n, c, cfg.padded_h, cfg.padded_w), dtype=np.float64)
    out[:, :, :h, :w] = images
    return out


def patchify(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """(N, C, H, W) -> (N, T, C*p*p), patches row-major, (c, row, col) within."""
    x = pad_images(np.asarray(images, dtype=np.float64), cfg)
    n, c, h, w = x.shape
    p = cfg.patch
    x = x.reshape(n, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def unpatchify(patches: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """Inverse of patchify, cropped back to the original image size."""
    n = patches.shape[0]
    p = cfg.patch
    gh, gw = cfg.padded_h // p, cfg.padded_w // p
    x = patches.reshape(n, gh, gw, cfg.channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5).reshape(n, cfg.channels, cfg.padded_h, cfg.padded_w)
    return x[:, :, :cfg.image_h, :cfg.image_w]


def tensor_patchify(images: Tensor, cfg: VitConfig) -> Tensor:
    """patchify for tensors already shaped (N, C, padded_h, padded_w)."""
    n, c, h, w = images.shape
    p = cfg.patch
    x = ag.reshape(images, (n, c, h // p, p, w // p, p))
    x = ag.permute(x, (0, 2, 4, 1, 3, 5))
    return ag.reshape(x, (n, (h // p) * (w // p), c * p * p))


def n_masked_patches(n_patches: int, ratio: float) -> int:
    return int(round(ratio * n_patches))


def mask_patches(n_patches: int, ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Uniform masked-index draw without replacement: (kept, masked)."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    rng = as_rng(seed)
    n_masked = n_masked_patches(n_patches, ratio)
    masked = np.sort(rng.choice(n_patches, size=n_masked, replace=False))
    kept = np.setdiff1d(np.arange(n_patches), masked)
    return kept, masked


def sample_batch_masks(batch: int, n_patches: int, ratio: float, rng) -> np.ndarray:
    """Boolean (B, T) mask, True = masked, one independent draw per image."""
    masks = np.zeros((batch, n_patches), dtype=bool)
    for i in range(batch):
        _, masked = mask_patches(n_patches, ratio, rng)
        masks[i, masked] = True
    return masks


# -- parameters ------------------------------------------------------------------

def _glorot(rng, shape) -> np.ndarray:
    scale = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-scale, scale, size=shape)


ENCODER_PREFIXES = ("patch_embed", "pos_embed", "mask_token", "blk", "final_ln", "head")


def init_encoder_params(cfg: VitConfig, seed) -> ParamSet:
    """Online parameter set: encoder + mapping head + decoder."""
    rng = as_rng(seed)
    d = cfg.dim
    ps = ParamSet()
    ps.add("patch_embed_w", _glorot(rng, (cfg.patch_dim, d)))
    ps.add("patch_embed_b", np.zeros(d))
    ps.add("pos_embed", 0.02 * rng.standard_normal((cfg.n_patches, d)))
    ps.add("mask_token", 0.02 * rng.standard_normal(d))
    for i in range(cfg.depth):
        ps.add(f"blk{i}_ln1_g", np.ones(d))
        ps.add(f"blk{i}_ln1_b", np.zeros(d))
        ps.add(f"blk{i}_q_w", _glorot(rng, (d, d)))
        ps.add(f"blk{i}_q_b", np.zeros(d))
        ps.add(f"blk{i}_k_w", _glorot(rng, (d, d)))
        ps.add(f"blk{i}_k_b", np.zeros(d))
        ps.add(f"blk{i}_v_w", _glorot(rng, (d, d)))
        ps.add(f"blk{i}_v_b", np.zeros(d))
        ps.add(f"blk{i}_proj_w", _glorot(rng, (d, d)))
        ps.add(f"blk{i}_proj_b", np.zeros(d))
        ps.add(f"blk{i}_ln2_g", np.ones(d))
        ps.add(f"blk{i}_ln2_b", np.zeros(d))
        ps.add(f"blk{i}_mlp1_w", _glorot(rng, (d, cfg.mlp_ratio * d)))
        ps.add(f"blk{i}_mlp1_b", np.zeros(cfg.mlp_ratio * d))
        ps.add(f"blk{i}_mlp2_w", _glorot(rng, (cfg.mlp_ratio * d, d)))
        ps.add(f"blk{i}_mlp2_b", np.zeros(d))
    ps.add("final_ln_g", np.ones(d))
    ps.add("final_ln_b", np.zeros(d))
    ps.add("head_w", _glorot(rng, (d, d)))
    ps.add("head_b", np.zeros(d))
    if cfg.decoder == "linear":
        ps.add("dec_w", _glorot(rng, (d, cfg.patch_dim)))
        ps.add("dec_b", np.zeros(cfg.patch_dim))
    else:
        widths = [d] + list(cfg.mlp_decoder_widths) + [cfg.channels * cfg.padded_h * cfg.padded_w]
        for i in range(len(widths) - 1):
            ps.add(f"dec{i}_w", _glorot(rng, (widths[i], widths[i + 1])))
            ps.add(f"dec{i}_b", np.zeros(widths[i + 1]))
    return ps


def make_target_params(online: ParamSet) -> ParamSet:
    """EMA target copy: encoder + mapping head only, never requiring grad."""
    target = ParamSet()
    for name, t in online.items():
        if name.startswith(ENCODER_PREFIXES):
            target.add(name, t.data.copy(), requires_grad=False)
    return target


# -- forward passes ----------------------------------------------------------------

def _block(x: Tensor, ps: ParamSet, i: int, cfg: VitConfig) -> Tensor:
    b, t, d = x.shape
    h = cfg.heads
    dh = d // h
    y = ag.layer_norm(x, ps[f"blk{i}_ln1_g"], ps[f"blk{i}_ln1_b"])
    q = ag.add(ag.matmul(y, ps[f"blk{i}_q_w"]), ps[f"blk{i}_q_b"])
    k = ag.add(ag.matmul(y, ps[f"blk{i}_k_w"]), ps[f"blk{i}_k_b"])
    v = ag.add(ag.matmul(y, ps[f"blk{i}_v_w"]), ps[f"blk{i}_v_b"])
    # (B, T, D) -> (B, H, T, dh)
    q = ag.permute(ag.reshape(q, (b, t, h, dh)), (0, 2, 1, 3))
    k = ag.permute(ag.reshape(k, (b, t, h, dh)), (0, 2, 1, 3))
    v = ag.permute(ag.reshape(v, (b, t, h, dh)), (0, 2, 1, 3))
    scores = ag.mul(ag.matmul(q, ag.swap_last(k)), 1.0 / np.sqrt(dh))
    att = ag.softmax(scores, axis=-1)
    ctx = ag.matmul(att, v)                                  # (B, H, T, dh)
    ctx = ag.reshape(ag.permute(ctx, (0, 2, 1, 3)), (b, t, d))
    x = ag.add(x, ag.add(ag.matmul(ctx, ps[f"blk{i}_proj_w"]), ps[f"blk{i}_proj_b"]))
    y = ag.layer_norm(x, ps[f"blk{i}_ln2_g"], ps[f"blk{i}_ln2_b"])
    y = ag.gelu(ag.add(ag.matmul(y, ps[f"blk{i}_mlp1_w"]), ps[f"blk{i}_mlp1_b"]))
    y = ag.add(ag.matmul(y, ps[f"blk{i}_mlp2_w"]), ps[f"blk{i}_mlp2_b"])
    return ag.add(x, y)


def encode(patches: np.ndarray, params: ParamSet, cfg: VitConfig,
           mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Token states and the mean-pooled image embedding.

    ``mask`` (B, T) True entries are replaced by the learned mask token before
    the encoder and excluded from the pooled embedding.
    """
    x = ag.add(ag.matmul(Tensor(patches), params["patch_embed_w"]),
               params["patch_embed_b"])
    if mask is not None:
        keep = Tensor((~mask).astype(np.float64)[:, :, None])
        masked = Tensor(mask.astype(np.float64)[:, :, None])
        x = ag.add(ag.mul(x, keep), ag.mul(ag.reshape(params["mask_token"], (1, 1, cfg.dim)), masked))
    x = ag.add(x, params["pos_embed"])
    for i in range(cfg.depth):
        x = _block(x, params, i, cfg)
    x = ag.layer_norm(x, params["final_ln_g"], params["final_ln_b"])
    if mask is None:
        pooled = ag.tmean(x, axis=1)
    else:
        keep = (~mask).astype(np.float64)[:, :, None]
        counts = keep.sum(axis=1)  # (B, 1), > 0 because ratio < 1
        pooled = ag.mul(ag.tsum(ag.mul(x, Tensor(keep)), axis=1), Tensor(1.0 / counts))
    return x, pooled


def decode_patches(tokens: Tensor, pooled: Tensor, params: ParamSet,
                   cfg: VitConfig) -> Tensor:
    """Predicted pixel patches (B, T, patch_dim) from encoder output."""
    if cfg.decoder == "linear":
        return ag.add(ag.matmul(tokens, params["dec_w"]), params["dec_b"])
    x = pooled
    n_layers = len(cfg.mlp_decoder_widths) + 1
    for i in range(n_layers):
        x = ag.add(ag.matmul(x, params[f"dec{i}_w"]), params[f"dec{i}_b"])
        if i < n_layers - 1:
            x = ag.gelu(x)
    img = ag.reshape(x, (x.shape[0], cfg.channels, cfg.padded_h, cfg.padded_w))
    return tensor_patchify(img, cfg)


def mim_patches(images: np.ndarray, params: ParamSet, cfg: VitConfig,
                mask: np.ndarray) -> Tensor:
    """Masked-reconstruction forward pass in patch space."""
    patches = patchify(images, cfg)
    tokens, pooled = encode(patches, params, cfg, mask=mask)
    return decode_patches(tokens, pooled, params, cfg)


def mim_forward(images: np.ndarray, params: ParamSet, cfg: VitConfig,
                mask: np.ndarray) -> np.ndarray:
    """Regenerated image (same shape as input) from the masked forward pass."""
    pred = mim_patches(images, params, cfg, mask)
    return unpatchify(pred.data, cfg)


def rec_loss(patches: np.ndarray, predicted, mask: np.ndarray) -> Tensor:
    """Masked-patch reconstruction loss.

    Mean over images of the mean over masked patches of the squared patch
    residual (summed over the patch vector). Raises if no patch is masked.
    """
    mask = np.asarray(mask, dtype=bool)
    n_masked = mask.sum(axis=1)
    if np.any(n_masked == 0):
        raise ValueError("every image needs at least one masked patch")
    pred = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    resid = ag.add(Tensor(patches), ag.mul(pred, -1.0))
    sq = ag.tsum(ag.mul(resid, resid), axis=2)           # (B, T)
    per_image = ag.tsum(ag.mul(sq, Tensor(mask.astype(np.float64))), axis=1)
    return ag.tmean(ag.mul(per_image, Tensor(1.0 / n_masked)))


# -- contrastive branch ---------------------------------------------------------------

def embed_images(images: np.ndarray, params: ParamSet, cfg: VitConfig) -> Tensor:
    """Image-level embedding through the mapping head (no masking)."""
    patches = patchify(images, cfg)
    _, pooled = encode(patches, params, cfg, mask=None)
    return ag.add(ag.matmul(pooled, params["head_w"]), params["head_b"])


def embed_pair(images: np.ndarray, smoothed: np.ndarray, online: ParamSet,
               target: ParamSet, cfg: VitConfig) -> tuple[Tensor, Tensor]:
    """Online embedding of the raw image, target embedding of its smoothed view.

    The target path is built from no-grad parameters, so the returned target
    embedding is a constant in any loss graph (stop-gradient by construction).
    """
    e = embed_images(images, online, cfg)
    e_bar = embed_images(smoothed, target, cfg)
    return e, e_bar


def contrastive_loss(e: Tensor, e_bar: Tensor, temperature: float = 0.5) -> Tensor:
    """Two-view InfoNCE-style loss over a batch.

    Positives are (e_i, ebar_i); each anchor's denominator runs over the other
    2*N_b - 2 embeddings plus its positive, with similarities
    exp(cos(.,.)/temperature).
    """
    norms_e = np.linalg.norm(e.data, axis=1)
    norms_b = np.linalg.norm(e_bar.data, axis=1)
    if np.any(norms_e == 0.0) or np.any(norms_b == 0.0):
        raise ValueError("contrastive loss undefined for zero-norm embeddings")
    n = e.shape[0]
    e_hat = ag.mul(e, ag.power(ag.l2norm(e, axis=1, keepdims=True), -1.0))
    b_hat = ag.mul(e_bar, ag.power(ag.l2norm(e_bar, axis=1, keepdims=True), -1.0))
    s_ee = ag.exp(ag.mul(ag.matmul(e_hat, ag.swap_last(e_hat)), 1.0 / temperature))
    s_eb = ag.exp(ag.mul(ag.matmul(e_hat, ag.swap_last(b_hat)), 1.0 / temperature))
    s_bb = ag.exp(ag.mul(ag.matmul(b_hat, ag.swap_last(b_hat)), 1.0 / temperature))
    eye = Tensor(np.eye(n))
    pos = ag.tsum(ag.mul(s_eb, eye), axis=1)                             # s(e_i, ebar_i)
    den1 = ag.add(ag.add(ag.tsum(s_ee, axis=1), ag.mul(ag.tsum(ag.mul(s_ee, eye), axis=1), -1.0)),
                  ag.tsum(s_eb, axis=1))
    den2 = ag.add(ag.tsum(s_eb, axis=0),
                  ag.add(ag.tsum(s_bb, axis=1), ag.mul(ag.tsum(ag.mul(s_bb, eye), axis=1), -1.0)))
    loss_i = ag.add(ag.add(ag.log(den1), ag.mul(ag.log(pos), -1.0)),
                    ag.add(ag.log(den2), ag.mul(ag.log(pos), -1.0)))
    return ag.tmean(loss_i)


# -- uncertainty-weighted loss combination ----------------------------------------------

@dataclass
class UwlState:
    """Trainable noise scales, one per combined loss, positive by construction
    (sigma = exp(raw))."""

    raw: Tensor

    @classmethod
    def create(cls, n_losses: int) -> "UwlState":
        return cls(raw=Tensor(np.zeros(n_losses), requires_grad=True))  # sigma = 1

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.raw.data)


def uwl(losses, state: UwlState) -> Tensor:
    """sum_j L_j / (2 sigma_j^2) + sum_j log(1 + sigma_j^2)."""
    if len(losses) != state.raw.shape[0]:
        raise ValueError("need one noise parameter per loss")
    sigma2 = ag.exp(ag.mul(state.raw, 2.0))
    total = ag.tsum(ag.log(ag.add(sigma2, 1.0)))
    for j, loss in enumerate(losses):
        loss = loss if isinstance(loss, Tensor) else Tensor(loss)
        s2_j = ag.take(sigma2, [j], axis=0)
        total = ag.add(total, ag.mul(ag.mul(loss, ag.power(s2_j, -1.0)), 0.5))
    return ag.reshape(total, ())


# -- checkpoint ------------------------------------------------------------------------

def save_vit(path, cfg: VitConfig, online: ParamSet, target: ParamSet,
             extra: dict[str, ParamSet] | None = None) -> None:
    """VIT1 checkpoint: JSON header (config + named shapes), float64 payload."""
    sections: dict[str, ParamSet] = {"online": online, "target": target}
    if extra:
        sections.update(extra)
    manifest = {
        "config": cfg.to_dict(),
        "sections": {
            sec: [[name, list(ps[name].shape)] for name in ps.names()]
            for sec, ps in sections.items()
        },
    }
    with open(path, "wb") as fh:
        fh.write(("VIT1 " + json.dumps(manifest, sort_keys=True) + "\n").encode("ascii"))
        for sec in sorted(sections):
            write_float64_block(fh, [sections[sec][n].data for n in sections[sec].names()])


def load_vit(path) -> tuple[VitConfig, dict[str, ParamSet]]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii")
        if not header.startswith("VIT1 "):
            raise FormatError(f"{path}: bad VIT1 header")
        manifest = json.loads(header[5:])
        cfg = VitConfig.from_dict(manifest["config"])
        sections: dict[str, ParamSet] = {}
        for sec in sorted(manifest["sections"]):
            ps = ParamSet()
            entries = manifest["sections"][sec]
            arrays = read_float64_block(fh, [tuple(shape) for _, shape in entries])
            for (name, _), arr in zip(entries, arrays):
                ps.add(name, arr, requires_grad=(sec != "target"))
            sections[sec] = ps
    return cfg, sections
