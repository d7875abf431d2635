"""SimCLR-style contrastive step: symmetric InfoNCE over weak/strong view pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import apply_action, weak_view
from .autodiff import Tensor
from .model import EncoderConfig, encode, project
from .rng import key

_EXCLUDED = -1e9  # additive logit for self-similarity; exp underflows to exactly 0


def _pair_logits(weak: Tensor, strong: Tensor, tau: float) -> tuple[Tensor, np.ndarray]:
    n = weak.shape[0]
    if n < 2:
        raise ValueError(f"info_nce needs N >= 2 pairs for negatives, got {n}")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if weak.shape != strong.shape:
        raise ad.ShapeError(f"info_nce: view batches differ: {weak.shape} vs {strong.shape}")
    z = ad.l2_normalize(ad.concat([weak, strong], axis=0), axis=1)
    logits = ad.scale(ad.matmul(z, ad.transpose(z)), 1.0 / tau)
    logits = ad.add(logits, ad.constant(_EXCLUDED * np.eye(2 * n)))
    positive = np.zeros((2 * n, 2 * n))
    idx = np.arange(n)
    positive[idx, idx + n] = 1.0
    positive[idx + n, idx] = 1.0
    return logits, positive


def info_nce_per_anchor(weak, strong, tau: float = 0.5) -> Tensor:
    """Cross-entropy of each of the 2N anchors against its positive, shape (2N,)."""
    logits, positive = _pair_logits(ad.as_tensor(weak), ad.as_tensor(strong), tau)
    p_pos = ad.sum(ad.mul(ad.softmax(logits, axis=1), ad.constant(positive)), axis=1)
    return ad.scale(ad.log(p_pos), -1.0)


def info_nce(weak, strong, tau: float = 0.5) -> Tensor:
    """Symmetric InfoNCE averaged over all 2N anchors (cosine similarity / tau)."""
    out = ad.mean(info_nce_per_anchor(weak, strong, tau))
    out._op = "info_nce"
    return out


@dataclass
class SSLResult:
    loss: float
    strong_embeddings: np.ndarray
    pair_losses: np.ndarray
    weak_views: np.ndarray
    strong_views: np.ndarray


def make_views(X: np.ndarray, actions, seeds) -> tuple[np.ndarray, np.ndarray]:
    """Weak and strong views for each row; ``seeds[i]`` keys both draws of row i."""
    weak = np.stack([weak_view(x, key(s, 0)) for x, s in zip(X, seeds)])
    strong = np.stack([apply_action(x, a, key(s, 1)) for x, a, s in zip(X, actions, seeds)])
    return weak, strong


def ssl_step(X: np.ndarray, actions, encoder: dict[str, Tensor], projector: dict[str, Tensor],
             cfg: EncoderConfig, lr_enc: float, tau: float = 0.5, seeds=None,
             momentum: float = 0.0, velocity: dict | None = None) -> SSLResult:
    """One encoder/projector SGD update on the batch; returns post-update strong embeddings.

    ``seeds`` holds one seed per row (default: row index).  With ``momentum`` > 0
    the caller-owned ``velocity`` dict carries the running update.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(actions) != len(X):
        raise ValueError(f"need one action per sample: {len(actions)} actions for {len(X)} samples")
    if seeds is None:
        seeds = list(range(len(X)))
    weak, strong = make_views(X, actions, seeds)
    ad.zero_grad(encoder)
    ad.zero_grad(projector)
    n = len(X)
    z = project(encode(np.concatenate([weak, strong]), encoder, cfg), projector, cfg)
    # row selection by constant matmuls keeps everything inside the primitive set
    eye = np.eye(2 * n)
    zw = ad.matmul(ad.constant(eye[:n]), z)
    zs = ad.matmul(ad.constant(eye[n:]), z)
    per_anchor = info_nce_per_anchor(zw, zs, tau)
    loss = ad.mean(per_anchor)
    ad.backward(loss)
    params = {**encoder, **projector}
    grads = {k: p.grad for k, p in params.items()}
    if momentum > 0:
        if velocity is None:
            raise ValueError("momentum requires a velocity dict")
        for k, g in grads.items():
            if g is not None:
                velocity[k] = momentum * velocity.get(k, 0.0) + g
                grads[k] = velocity[k]
    ad.sgd_step(params, grads, lr_enc)
    ad.zero_grad(params)
    pair = 0.5 * (per_anchor.data[:n] + per_anchor.data[n:])
    emb = encode(strong, encoder, cfg, stop_gradient=True).data
    return SSLResult(float(loss.data), emb, pair, weak, strong)
