"""Word-to-region attention, local alignment, and contrastive losses.

The cross-modal score of one image/text pair has a global part (cosine of
the two global vectors) and a local part: each word attends over image
regions via a sharpened softmax of the word x region similarity matrix, and
the per-word agreements are folded with a smooth maximum. Batch losses are
symmetric InfoNCE terms over the pairwise score matrices in both pairing
directions, built entirely from taped operations so gradients flow back to
the encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from . import numerics as nm
from .numerics import Tensor


@dataclass
class LossConfig:
    """Temperatures, sharpenings, and component weights for total_loss."""

    lambda1: float = 4.0
    lambda2: float = 5.0
    tau_global: float = 0.1
    tau_local: float = 0.1
    weight_global_i2t: float = 1.0
    weight_global_t2i: float = 1.0
    weight_local_i2t: float = 1.0
    weight_local_t2i: float = 1.0

    def __post_init__(self):
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ParameterError("sharpening factors must be positive")
        if self.tau_global <= 0 or self.tau_local <= 0:
            raise ParameterError("temperatures must be positive")


@dataclass
class SimilarityMatrix:
    """Word x region cosine matrix; entries must stay within [-1, 1]."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"similarity matrix must be 2-D, got {self.values.shape}")
        if self.values.size and np.abs(self.values.data).max() > 1.0 + 1e-9:
            raise ValueError("similarity entries exceed [-1, 1]; rows must be unit-norm")


@dataclass
class AttentionMap:
    """Per-word attention weights over regions plus the context vectors."""

    weights: Tensor
    contexts: Tensor
    lambda1: float


@dataclass
class LossBreakdown:
    """The four directional contrastive terms and their weighted sum."""

    global_i2t: Tensor
    global_t2i: Tensor
    local_i2t: Tensor
    local_t2i: Tensor
    total: Tensor
    config: LossConfig

    def as_dict(self) -> dict[str, float]:
        return {
            "global_i2t": self.global_i2t.item(),
            "global_t2i": self.global_t2i.item(),
            "local_i2t": self.local_i2t.item(),
            "local_t2i": self.local_t2i.item(),
            "total": self.total.item(),
        }


def similarity_matrix(words: Tensor, regions: Tensor) -> SimilarityMatrix:
    """Dot products of unit-norm word rows against unit-norm region rows."""
    if words.ndim != 2 or regions.ndim != 2:
        raise ShapeError(
            f"similarity needs 2-D inputs, got {words.shape} and {regions.shape}"
        )
    if words.shape[1] != regions.shape[1]:
        raise ShapeError(
            f"feature dims differ: words {words.shape} vs regions {regions.shape}"
        )
    return SimilarityMatrix(values=nm.matmul(words, nm.transpose(regions)))


def attention_contexts(sim: SimilarityMatrix, regions: Tensor, lambda1: float) -> AttentionMap:
    """Sharpened per-word softmax over regions and the resulting contexts."""
    if lambda1 <= 0:
        raise ParameterError(f"attention sharpening must be positive, got {lambda1}")
    if regions.ndim != 2 or sim.values.shape[1] != regions.shape[0]:
        raise ShapeError(
            f"similarity {sim.values.shape} does not match regions {regions.shape}"
        )
    weights = nm.softmax_rows(sim.values, lambda1)
    contexts = nm.matmul(weights, regions)
    return AttentionMap(weights=weights, contexts=contexts, lambda1=float(lambda1))


def local_alignment_score(att: AttentionMap, words: Tensor, lambda2: float) -> Tensor:
    """Smooth maximum of per-word cosine(context, word) agreements.

    Z = (1/lambda2) * log sum_t exp(lambda2 * cos_t); degenerate contexts
    (norm below 1e-12) contribute cosine 0 through the rowwise_cosine guard.
    """
    if lambda2 <= 0:
        raise ParameterError(f"aggregation sharpening must be positive, got {lambda2}")
    cosines = nm.rowwise_cosine(att.contexts, words)
    return nm.scale(nm.logsumexp_rows(nm.scale(cosines, lambda2)), 1.0 / lambda2)


def global_similarity(g_img: Tensor, g_txt: Tensor) -> Tensor:
    """Dot product of the two global vectors (cosine, both unit-norm)."""
    if g_img.shape != g_txt.shape or g_img.ndim != 1:
        raise ShapeError(
            f"global vectors must be matching 1-D, got {g_img.shape} and {g_txt.shape}"
        )
    return nm.tensor_sum(nm.mul(g_img, g_txt))


def contrastive_loss_batch(pairwise: Tensor, tau: float, direction: str = "i2t") -> Tensor:
    """Symmetric-InfoNCE term over one direction of a pairwise score matrix.

    i2t treats rows as candidate texts for each image; t2i uses columns.
    mean_i of log-sum-exp_j(pairwise[i,j]/tau) - pairwise[i,i]/tau, which is
    the mean negative log posterior of the matched pairing.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if direction not in ("i2t", "t2i"):
        raise ValueError(f"direction must be i2t or t2i, got {direction!r}")
    p = pairwise if isinstance(pairwise, Tensor) else nm.constant(pairwise)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError(f"pairwise matrix must be square, got {p.shape}")
    if direction == "t2i":
        p = nm.transpose(p)
    b = p.shape[0]
    scaled = nm.scale(p, 1.0 / tau)
    lse = nm.logsumexp_rows(scaled)
    diag = nm.row_sums(nm.mul(scaled, nm.identity(b)))
    return nm.tensor_mean(nm.add(lse, nm.scale(diag, -1.0)))


def pairwise_scores(image_feats, text_feats, config: LossConfig):
    """Global and local B x B score matrices for a batch of feature pairs.

    Entry [i, j] scores image i against text j. Local scores recompute
    attention per pair, since attention is defined by the pairing.
    """
    b = len(image_feats)
    if len(text_feats) != b:
        raise ShapeError(f"batch sizes differ: {b} images vs {len(text_feats)} texts")
    if b == 0:
        raise ShapeError("empty batch")
    global_entries = []
    local_entries = []
    for img in image_feats:
        for txt in text_feats:
            global_entries.append(global_similarity(img.global_feat, txt.global_feat))
            sim = similarity_matrix(txt.local, img.local)
            att = attention_contexts(sim, img.local, config.lambda1)
            local_entries.append(local_alignment_score(att, txt.local, config.lambda2))
    global_matrix = nm.stack_scalars(global_entries, shape=(b, b))
    local_matrix = nm.stack_scalars(local_entries, shape=(b, b))
    return global_matrix, local_matrix


def total_loss(image_feats, text_feats, config: LossConfig | None = None) -> LossBreakdown:
    """Weighted sum of the four directional contrastive terms."""
    config = config if config is not None else LossConfig()
    global_matrix, local_matrix = pairwise_scores(image_feats, text_feats, config)
    g_i2t = contrastive_loss_batch(global_matrix, config.tau_global, "i2t")
    g_t2i = contrastive_loss_batch(global_matrix, config.tau_global, "t2i")
    l_i2t = contrastive_loss_batch(local_matrix, config.tau_local, "i2t")
    l_t2i = contrastive_loss_batch(local_matrix, config.tau_local, "t2i")
    total = nm.add(
        nm.add(nm.scale(g_i2t, config.weight_global_i2t),
               nm.scale(g_t2i, config.weight_global_t2i)),
        nm.add(nm.scale(l_i2t, config.weight_local_i2t),
               nm.scale(l_t2i, config.weight_local_t2i)),
    )
    return LossBreakdown(global_i2t=g_i2t, global_t2i=g_t2i,
                         local_i2t=l_i2t, local_t2i=l_t2i,
                         total=total, config=config)
