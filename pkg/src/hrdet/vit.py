"""Self-attention prediction network over region patches.

Regions are batched: a batch of R regions is a (R, N, P*P*C) patch tensor and
every intermediate carries a leading R axis.
"""
from __future__ import annotations

import warnings

import numpy as np

from . import geometry as G
from . import tensor as T
from .config import VitConfig
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .roi import PatchSet
from .tensor import Tensor


class EncoderLayer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        d = cfg.d
        self.ln1 = LayerNorm(d, cfg.ln_eps)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.ln2 = LayerNorm(d, cfg.ln_eps)
        self.fc1 = Linear(d, d * cfg.mlp_ratio, rng)
        self.fc2 = Linear(d * cfg.mlp_ratio, d, rng)
        self.heads = cfg.heads
        self.act = T.activation(cfg.activation)


class VisionTransformer(Module):
    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_proj = parameter(trunc_normal(rng, (cfg.P * cfg.P * cfg.C, cfg.d)))
        self.cls_token = parameter(np.zeros((1, cfg.d)))
        self.pos_embed = parameter(trunc_normal(rng, (cfg.N + 1, cfg.d)))
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.L)]
        self.ln_out = LayerNorm(cfg.d, cfg.ln_eps)
        self.classifier = parameter(trunc_normal(rng, (cfg.d, cfg.num_classes)))

    def __call__(self, patches) -> Tensor:
        """Class log-probabilities (R, N_c) for a batch of regions."""
        y = encode(embed(patches, self), self)
        return class_log_probs(y, self.classifier, self.cfg.skip_sigmoid)

    def predict(self, patches) -> np.ndarray:
        with T.no_grad():
            return classify(encode(embed(patches, self), self), self.classifier, self.cfg.skip_sigmoid).data


def _as_batch(patches, cfg: VitConfig) -> Tensor:
    if isinstance(patches, PatchSet):
        arr = patches.flat()[None]
    elif isinstance(patches, Tensor):
        return patches if patches.ndim == 3 else patches.reshape(1, *patches.shape)
    else:
        arr = np.asarray(patches)
        if arr.ndim == 4 and arr.shape[-1] == cfg.C:      # (N, P, P, C): one region
            arr = arr.reshape(1, arr.shape[0], -1)
        elif arr.ndim == 5:                                 # (R, N, P, P, C)
            arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
        elif arr.ndim == 2:
            arr = arr[None]
    return Tensor(arr)


def embed(patches, vit: VisionTransformer) -> Tensor:
    """Project flattened patches, prepend the class token, add position codes.

    Returns (R, N+1, d).
    """
    cfg = vit.cfg
    x = _as_batch(patches, cfg)
    R, N, F = x.shape
    if N != cfg.N or F != cfg.P * cfg.P * cfg.C:
        raise ValueError(f"patch batch {x.shape} does not match N={cfg.N}, P={cfg.P}, C={cfg.C}")
    tokens = x @ vit.patch_proj
    cls = T.broadcast_to(vit.cls_token.reshape(1, 1, cfg.d), (R, 1, cfg.d))
    return T.concat([cls, tokens], axis=1) + vit.pos_embed


def attention(z: Tensor, layer: EncoderLayer, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over the token axis."""
    R, S, d = z.shape
    h = layer.heads
    dh = d // h

    def split(t: Tensor) -> Tensor:
        return t.reshape(R, S, h, dh).transpose(0, 2, 1, 3)

    q, k, v = split(layer.q(z)), split(layer.k(z)), split(layer.v(z))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(R, S, d)
    out = layer.out(ctx)
    return (out, weights) if return_weights else out


def encoder_layer(z: Tensor, layer: EncoderLayer) -> Tensor:
    z = attention(layer.ln1(z), layer) + z
    return layer.fc2(layer.act(layer.fc1(layer.ln2(z)))) + z


def encode(z0: Tensor, vit: VisionTransformer) -> Tensor:
    """Run all layers, then layer-normalise the class-token row. Returns (R, d)."""
    if not vit.layers:
        raise ValueError("encoder needs at least one layer")
    z = z0
    for layer in vit.layers:
        z = encoder_layer(z, layer)
    return vit.ln_out(z[:, 0, :])


def _scores(y: Tensor, W_c: Tensor, skip_sigmoid: bool) -> Tensor:
    if y.shape[-1] != W_c.shape[0]:
        raise ValueError(f"classifier shape mismatch: {y.shape} x {W_c.shape}")
    logits = y @ W_c
    return logits if skip_sigmoid else T.sigmoid(logits)


def classify(y: Tensor, W_c: Tensor, skip_sigmoid: bool = False) -> Tensor:
    """softmax(sigmoid(y W_c)); ``skip_sigmoid`` drops the sigmoid."""
    return T.softmax(_scores(y, W_c, skip_sigmoid), axis=-1)


def class_log_probs(y: Tensor, W_c: Tensor, skip_sigmoid: bool = False) -> Tensor:
    """Log of :func:`classify`, computed stably."""
    return T.log_softmax(_scores(y, W_c, skip_sigmoid), axis=-1)


def _one_hot(labels, n: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    out = np.zeros((len(arr), n))
    out[np.arange(len(arr)), arr.astype(np.int64)] = 1.0
    return out


def tr_loss(preds: Tensor, labels, log_space: bool = False) -> Tensor:
    """Mean over boxes of ``-sum_c label_c * ln p_c``.

    ``preds`` holds probabilities, or log-probabilities when ``log_space``.
    ``labels`` are class indices or per-box label distributions.
    """
    n = preds.shape[0]
    if n == 0:
        warnings.warn("tr_loss: no labelled boxes, returning zero loss", RuntimeWarning, stacklevel=2)
        return preds.sum() * 0.0
    onehot = _one_hot(labels, preds.shape[-1])
    target = Tensor(onehot, dtype=preds.dtype)
    if log_space:
        logp = preds
    else:
        # entries with zero label weight are replaced by 1 so 0 * ln 0 cannot produce NaN
        off = Tensor((onehot == 0).astype(preds.dtype))
        logp = T.log(preds * (1.0 - off) + off)
    return T.sum_(logp * target) * (-1.0 / n)


def assign_region_labels(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes, match_iou: float,
                         background_id: int) -> np.ndarray:
    """Class of the max-IoU gt when that IoU reaches ``match_iou``, else background."""
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(len(props), background_id, dtype=np.int64)
    if len(gt) == 0 or len(props) == 0:
        return labels
    ious = G.iou_matrix(props, gt)
    best = ious.argmax(axis=1)
    hit = ious[np.arange(len(props)), best] >= match_iou
    labels[hit] = np.asarray(gt_classes, dtype=np.int64)[best[hit]]
    return labels
