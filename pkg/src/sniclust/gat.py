"""Graph attention autoencoder for image denoising.

Pixels are graph nodes; each encoder layer aggregates neighbor features with
a learned softmax attention, and the decoder mirrors the encoder with tied
(transposed) weights, reusing the encoder's attention distributions so the
autoencoder carries no decoder-only parameters. The trained network's
reconstruction of an image is its smoothed view, used downstream as a
contrastive positive. A plain Gaussian-kernel smoother is provided for the
ablation that swaps out the attention network.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import ParamSet, Tensor
from .datagen import PixelGraph, as_rng
from .io import FormatError, read_float64_block, write_float64_block

LEAKY_SLOPE = 0.2


def init_gat_params(channels: int, widths, seed) -> ParamSet:
    """Glorot-initialized encoder weights plus per-layer attention vectors."""
    rng = as_rng(seed)
    dims = [channels] + list(widths)
    params = ParamSet()
    for t in range(1, len(dims)):
        d_in, d_out = dims[t - 1], dims[t]
        scale = np.sqrt(6.0 / (d_in + d_out))
        params.add(f"w{t}", rng.uniform(-scale, scale, size=(d_in, d_out)))
        params.add(f"att{t}", rng.uniform(-scale, scale, size=(2 * d_out,)))
    return params


def gat_layer_widths(params: ParamSet) -> list[int]:
    dims = []
    t = 1
    while f"w{t}" in params:
        w = params[f"w{t}"]
        if t == 1:
            dims.append(w.shape[0])
        dims.append(w.shape[1])
        t += 1
    return dims


def attention_scores(h_prev: Tensor, graph: PixelGraph, weight: Tensor,
                     att_vec: Tensor) -> tuple[Tensor, Tensor]:
    """Per-edge attention for one layer.

    Logits are the attention vector applied to the LeakyReLU of the
    concatenated transformed features of the receiving and sending nodes;
    weights are their softmax over each receiver's neighbor set, so each
    neighborhood's weights sum to 1. Returns (attention (..., E), transformed
    features m = h_prev @ weight).
    """
    m = ag.matmul(h_prev, weight)                      # (..., P, d)
    u = ag.leaky_relu(m, LEAKY_SLOPE)
    d = weight.shape[1]
    a_dst = ag.reshape(att_vec, (2, d))
    s_recv = ag.matmul(u, ag.reshape(ag.take(a_dst, [0], axis=0), (d, 1)))  # (..., P, 1)
    s_send = ag.matmul(u, ag.reshape(ag.take(a_dst, [1], axis=0), (d, 1)))
    axis = h_prev.ndim - 2
    logits = ag.add(ag.take(ag.reshape(s_recv, s_recv.shape[:-1]), graph.receiver, axis=axis),
                    ag.take(ag.reshape(s_send, s_send.shape[:-1]), graph.sender, axis=axis))
    att = _segment_softmax(logits, graph, axis=axis)
    return att, m


def _segment_softmax(logits: Tensor, graph: PixelGraph, axis: int) -> Tensor:
    # detached per-receiver max keeps the exp stable without touching gradients
    shift = np.maximum.reduceat(logits.data, graph.starts, axis=axis)
    sizes = np.diff(np.append(graph.starts, graph.n_edges))
    shift = np.repeat(shift, sizes, axis=axis)
    e = ag.exp(ag.add(logits, Tensor(-shift)))
    denom = ag.segment_sum(e, graph.starts, axis=axis)
    denom_per_edge = ag.take(denom, _edge_receiver_rank(graph), axis=axis)
    return ag.mul(e, ag.power(denom_per_edge, -1.0))


def _edge_receiver_rank(graph: PixelGraph) -> np.ndarray:
    # receiver ids double as segment ranks because edges are receiver-major
    return graph.receiver


def _aggregate(att: Tensor, m: Tensor, graph: PixelGraph) -> Tensor:
    axis = m.ndim - 2
    msgs = ag.take(m, graph.sender, axis=axis)              # (..., E, d)
    weighted = ag.mul(msgs, ag.reshape(att, att.shape + (1,)))
    summed = ag.segment_sum(weighted, graph.starts, axis=axis)  # (..., P, d)
    return ag.leaky_relu(summed, LEAKY_SLOPE)


def images_to_nodes(images: np.ndarray) -> np.ndarray:
    n, c, h, w = images.shape
    return images.reshape(n, c, h * w).transpose(0, 2, 1)  # (N, P, C)


def nodes_to_images(nodes: np.ndarray, height: int, width: int) -> np.ndarray:
    n, _, c = nodes.shape
    return nodes.transpose(0, 2, 1).reshape(n, c, height, width)


def gat_forward(images: np.ndarray, graph: PixelGraph, params: ParamSet
                ) -> tuple[Tensor, Tensor]:
    """Encode then decode a batch; returns (codes, reconstruction) tensors.

    The decoder applies the transposed encoder weights in reverse order and
    reuses each mirrored layer's attention distribution.
    """
    n_layers = len(gat_layer_widths(params)) - 1
    h = Tensor(images_to_nodes(images))
    atts = []
    for t in range(1, n_layers + 1):
        att, m = attention_scores(h, graph, params[f"w{t}"], params[f"att{t}"])
        atts.append(att)
        h = _aggregate(att, m, graph)
    codes = h
    for t in range(n_layers, 0, -1):
        m = ag.matmul(h, ag.swap_last(params[f"w{t}"]))
        h = _aggregate(atts[t - 1], m, graph)
    return codes, h


def denoise_loss(images: np.ndarray, recon: Tensor) -> Tensor:
    """Mean over images of the summed per-pixel Euclidean residual norm.

    Exactly zero iff the reconstruction equals the input.
    """
    target = Tensor(images_to_nodes(images))
    resid = ag.add(target, ag.mul(recon, -1.0))
    return ag.tmean(ag.tsum(ag.l2norm(resid, axis=-1), axis=1))


def denoise_loss_squared(images: np.ndarray, recon: Tensor) -> Tensor:
    """Squared-residual variant of the reconstruction loss.

    Under heavy masking the plain norm form is median-seeking per pixel and
    drives the reconstruction toward zero; the squared form is mean-seeking,
    which is what makes the bottlenecked autoencoder act as a smoother.
    """
    target = Tensor(images_to_nodes(images))
    resid = ag.add(target, ag.mul(recon, -1.0))
    return ag.tmean(ag.tsum(ag.mul(resid, resid), axis=(1, 2)))


_OBJECTIVES = {"norm": denoise_loss, "squared": denoise_loss_squared}


def train_denoiser(images: np.ndarray, graph: PixelGraph, epochs: int = 100,
                   lr: float = 1e-3, widths=(64, 16), batch_size: int = 16,
                   seed=0, objective: str = "squared") -> tuple[ParamSet, list[float]]:
    """Plain gradient descent on the reconstruction loss over the whole set.

    Returns the trained parameters and the per-epoch mean loss history.
    Aborts if the loss goes non-finite.
    """
    if len(images) < 1:
        raise ValueError("need at least one image")
    if objective not in _OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    loss_fn = _OBJECTIVES[objective]
    rng = as_rng(seed)
    params = init_gat_params(images.shape[1], widths, rng)
    opt = ag.GradientDescent(params, lr)
    n = len(images)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, batch_size):
            batch = images[order[lo:lo + batch_size]]
            opt.zero_grad()
            _, recon = gat_forward(batch, graph, params)
            loss = loss_fn(batch, recon)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"denoiser diverged at epoch {epoch} (non-finite loss)")
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        history.append(float(np.mean(epoch_losses)))
    return params, history


def smooth(images: np.ndarray, graph: PixelGraph, params: ParamSet,
           batch_size: int = 32) -> np.ndarray:
    """Deterministic smoothed view of each image from the trained network.

    Batched internally to bound the size of per-edge intermediates; the
    result is independent of the batching.
    """
    chunks = []
    for lo in range(0, len(images), batch_size):
        _, recon = gat_forward(images[lo:lo + batch_size], graph, params)
        chunks.append(recon.data)
    return nodes_to_images(np.concatenate(chunks), graph.height, graph.width)


# -- Gaussian-kernel fallback (ablation) --------------------------------------

def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(3.0 * sigma + 0.5)
    if radius < 1:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gks_smooth(images: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 2-D Gaussian blur, kernel truncated at 3*sigma, reflective
    borders, kernel normalized so constants are preserved."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    kernel = _gaussian_kernel(sigma)
    radius = len(kernel) // 2
    out = np.array(images, dtype=np.float64, copy=True)
    if radius == 0:
        return out
    n, c, h, w = out.shape
    padded = np.pad(out, ((0, 0), (0, 0), (radius, radius), (radius, radius)),
                    mode="symmetric")
    tmp = np.zeros((n, c, h, w + 2 * radius))
    for i, kv in enumerate(kernel):
        tmp += kv * padded[:, :, i:i + h, :]
    res = np.zeros((n, c, h, w))
    for i, kv in enumerate(kernel):
        res += kv * tmp[:, :, :, i:i + w]
    return res


# -- checkpoint ----------------------------------------------------------------

def save_gat(path, params: ParamSet) -> None:
    dims = gat_layer_widths(params)
    with open(path, "wb") as fh:
        fh.write(("GAT1 " + " ".join(str(d) for d in dims) + "\n").encode("ascii"))
        arrays = []
        for t in range(1, len(dims)):
            arrays.append(params[f"w{t}"].data)
            arrays.append(params[f"att{t}"].data)
        write_float64_block(fh, arrays)


def load_gat(path) -> ParamSet:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip().split()
        if not header or header[0] != "GAT1":
            raise FormatError(f"{path}: bad GAT1 header")
        dims = [int(v) for v in header[1:]]
        params = ParamSet()
        for t in range(1, len(dims)):
            w, att = read_float64_block(
                fh, [(dims[t - 1], dims[t]), (2 * dims[t],)])
            params.add(f"w{t}", w)
            params.add(f"att{t}", att)
    return params
