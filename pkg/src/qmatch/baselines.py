"""Comparison pretext losses and the class-collision probability utility.

Covers the in-batch contrastive loss, plain embedding alignment, prototype
distillation with centering, and the two reconstruction pretext losses
(mask + value prediction, and masked-value-only prediction).
"""

from __future__ import annotations

import warnings

import numpy as np

from .tensor import (
    Tensor,
    bce_with_logits,
    concat_rows,
    cross_entropy_rows,
    exp,
    log,
    softmax_rows,
    tsum,
)


class PrototypeBank:
    """Learnable prototype matrix with an EMA center over teacher logits."""

    def __init__(self, num_prototypes: int, dim: int, rng: np.random.Generator,
                 temperature: float = 0.1, center_momentum: float = 0.9):
        if num_prototypes < 1:
            raise ValueError("need at least one prototype")
        self.prototypes = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim),
                                            size=(num_prototypes, dim)),
                                 requires_grad=True)
        self.center = np.zeros(num_prototypes)
        self.temperature = temperature
        self.center_momentum = center_momentum

    def update_center(self, teacher_logits: np.ndarray):
        m = self.center_momentum
        self.center = m * self.center + (1 - m) * teacher_logits.mean(axis=0)


def info_nce_loss(anchors: Tensor, positives: Tensor, negatives: Tensor,
                  tau: float) -> Tensor:
    """Mean over anchors of -log(S_pos / (S_pos + S_neg)) with
    S_pos = sum_j exp(a . p_j / tau) over that anchor's positives and
    S_neg likewise over its negatives.

    `positives` is B x P x D given as a 2-D (B*P) x D block ordered per
    anchor, or B x D when each anchor has a single positive; same for
    negatives.  Embeddings are expected L2-normalized.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    b = anchors.shape[0]
    if positives.data.size == 0 or positives.shape[0] % b != 0:
        raise ValueError("every anchor needs a nonempty positive set")
    if negatives.shape[0] % b != 0:
        raise ValueError("negatives must provide an equal-size set per anchor")
    npos = positives.shape[0] // b
    nneg = negatives.shape[0] // b
    pos_sims = _per_anchor_sims(anchors, positives, npos)  # B x P
    neg_sims = _per_anchor_sims(anchors, negatives, nneg)  # B x N
    s_pos = tsum(exp(pos_sims * (1.0 / tau)), axis=1)
    s_neg = tsum(exp(neg_sims * (1.0 / tau)), axis=1)
    losses = log(s_pos + s_neg) - log(s_pos)
    return losses.mean()


def _per_anchor_sims(anchors: Tensor, block: Tensor, k: int) -> Tensor:
    """Dot products of each anchor row against its own k block rows: B x k."""
    b = anchors.shape[0]
    tiled = concat_rows([anchors] * k) if k > 1 else anchors
    reordered = _reorder_grad(block, b, k)  # anchor-major -> candidate-major rows
    sims = tsum(tiled * reordered, axis=1)  # (b*k,) candidate-major
    return _reshape_cols(sims, b, k)


def _reorder_grad(block: Tensor, b: int, k: int) -> Tensor:
    from .tensor import _accumulate, _make
    d = block.shape[1]
    data = np.ascontiguousarray(block.data.reshape(b, k, d).transpose(1, 0, 2).reshape(b * k, d))

    def bwd(g):
        _accumulate(block, g.reshape(k, b, d).transpose(1, 0, 2).reshape(b * k, d))
    return _make(data, (block,), bwd)


def _reshape_cols(v: Tensor, b: int, k: int) -> Tensor:
    from .tensor import _accumulate, _make

    def bwd(g):
        _accumulate(v, g.T.reshape(-1))
    return _make(v.data.reshape(k, b).T.copy(), (v,), bwd)


def in_batch_info_nce(z1: Tensor, z2: Tensor, tau: float) -> Tensor:
    """SimCLR-style pairing over two view batches: each view is an anchor, its
    positive is the other view of the same sample, and its negatives are all
    other views in the batch."""
    b = z1.shape[0]
    allz = concat_rows([z1, z2])  # 2B x D
    sims = allz @ allz.T
    e = exp(sims * (1.0 / tau))
    mask = np.ones((2 * b, 2 * b))
    np.fill_diagonal(mask, 0.0)  # an anchor is excluded from its own sets
    denom = tsum(e * Tensor(mask), axis=1)
    pos_idx = np.concatenate([np.arange(b) + b, np.arange(b)])
    pick = np.zeros((2 * b, 2 * b))
    pick[np.arange(2 * b), pos_idx] = 1.0
    s_pos = tsum(e * Tensor(pick), axis=1)
    return (log(denom) - log(s_pos)).mean()


def mse_align_loss(z: Tensor, z_positive) -> Tensor:
    """Mean of -z . z+ per row, with stop-gradient on the positive side."""
    z_pos = z_positive.detach() if isinstance(z_positive, Tensor) else Tensor(z_positive)
    return -tsum(z * z_pos, axis=1).mean()


def dino_proto_loss(z_student: Tensor, z_teacher, bank: PrototypeBank,
                    tau_s: float, tau_t: float, update_center: bool = True) -> Tensor:
    """Cross-entropy between prototype distributions of a positive pair.

    Teacher logits are centered by the bank's EMA center and sharpened by
    tau_t; the teacher side and the prototypes it sees are stop-gradient.
    """
    z_t = z_teacher.detach() if isinstance(z_teacher, Tensor) else Tensor(z_teacher)
    proto_t = bank.prototypes.detach()
    t_logits = (z_t @ proto_t.T).data
    p_t = Tensor(_softmax_np((t_logits - bank.center) / tau_t))
    s_logits = z_student @ bank.prototypes.T
    p_s = softmax_rows(s_logits, temperature=tau_s)
    loss = cross_entropy_rows(p_t, p_s)
    if update_center:
        bank.update_center(t_logits)
    return loss


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def vime_pretext_loss(x_original: Tensor, mask: np.ndarray,
                      mask_logits: Tensor, reconstruction: Tensor,
                      alpha_mask: float = 1.0, alpha_recon: float = 1.0) -> Tensor:
    """Mask-prediction BCE plus full-input reconstruction MSE."""
    bce = bce_with_logits(mask_logits, Tensor(mask.astype(float)))
    diff = reconstruction - x_original.detach()
    mse = (diff * diff).mean()
    return bce * alpha_mask + mse * alpha_recon


def tabnet_recon_loss(x_original: Tensor, mask: np.ndarray,
                      reconstruction: Tensor) -> Tensor:
    """Reconstruction MSE restricted to the corrupted cells."""
    count = float(mask.sum())
    if count == 0:
        warnings.warn("tabnet_recon_loss called with an all-zero mask; loss is 0")
        return (reconstruction * 0.0).sum()
    diff = (reconstruction - x_original.detach()) * Tensor(mask.astype(float))
    return (diff * diff).sum() * (1.0 / count)


def collision_probability(num_classes: int, batch_size: int) -> float:
    """Probability that a batch of uniformly-classed negatives contains at
    least one sample sharing the anchor's class: 1 - ((N-1)/N)^(B-1)."""
    if num_classes < 1 or batch_size < 1:
        raise ValueError("num_classes and batch_size must be >= 1")
    return 1.0 - ((num_classes - 1) / num_classes) ** (batch_size - 1)
