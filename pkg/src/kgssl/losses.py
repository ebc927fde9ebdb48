"""Training objectives: reconstruction, contrastive (NT-Xent), pseudo-inverse, and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass
import torch

CONTRASTIVE_FORMS = ("nt_xent", "fraction")


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 1.0
    contrastive: float = 1.0
    inverse: float = 1.0

    def __post_init__(self):
        if min(self.reconstruction, self.contrastive, self.inverse) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self}")


@dataclass(frozen=True)
class ContrastiveBatch:
    """Row ``i`` of ``anchors`` and ``positives`` are the two window embeddings of entity ``i``."""

    anchors: torch.Tensor  # (N, H)
    positives: torch.Tensor  # (N, H)
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.anchors.dim() != 2 or self.anchors.shape != self.positives.shape:
            raise ValueError("anchors and positives must both be (N, H)")
        if self.anchors.shape[0] < 1:
            raise ValueError("contrastive batch needs at least one entity")

    @property
    def size(self) -> int:
        return self.anchors.shape[0]

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.anchors, self.positives], dim=0)


def _check_norms(x: torch.Tensor) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=-1)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity undefined for a zero-norm embedding")
    return norms


def cosine_sim(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    nu, nv = _check_norms(u), _check_norms(v)
    return (u * v).sum(-1) / (nu * nv)


def cosine_matrix(e: torch.Tensor) -> torch.Tensor:
    unit = e / _check_norms(e)[:, None]
    return unit @ unit.T


def reconstruction_loss(reconstructions, originals) -> torch.Tensor:
    """Mean over sequences of the per-sequence MSE. Accepts stacked tensors or lists of matrices."""
    if isinstance(reconstructions, torch.Tensor) and isinstance(originals, torch.Tensor):
        if reconstructions.shape != originals.shape:
            raise ValueError(f"shape mismatch {tuple(reconstructions.shape)} vs {tuple(originals.shape)}")
        return ((reconstructions - originals) ** 2).flatten(1).mean(1).mean()
    if len(reconstructions) != len(originals) or not reconstructions:
        raise ValueError("need equal, nonzero numbers of reconstructions and originals")
    terms = []
    for r, s in zip(reconstructions, originals):
        if r.shape != s.shape:
            raise ValueError(f"shape mismatch {tuple(r.shape)} vs {tuple(s.shape)}")
        terms.append(((r - s) ** 2).mean())
    return torch.stack(terms).mean()


def _row_losses(batch: ContrastiveBatch, form: str) -> torch.Tensor:
    """Per-row terms for the 2N stacked embeddings; row r's positive sits at r +/- N."""
    if form not in CONTRASTIVE_FORMS:
        raise ValueError(f"unknown contrastive form {form!r}")
    n = batch.size
    logits = cosine_matrix(batch.stacked()) / batch.temperature
    idx = torch.arange(2 * n)
    pos = (idx + n) % (2 * n)
    positive = logits[idx, pos]
    if form == "nt_xent":
        logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    # sorted rows make the reduction independent of entity order (bitwise)
    log_denominator = torch.logsumexp(torch.sort(logits, dim=1).values, dim=1)
    if form == "nt_xent":
        return log_denominator - positive
    # bare softmax fraction, self term kept in the denominator; inspection only
    return torch.exp(positive - log_denominator)


def contrastive_pair_loss(i: int, batch: ContrastiveBatch, form: str = "nt_xent") -> torch.Tensor:
    """Loss of entity ``i``: the anchor-side term plus the positive-side term."""
    rows = _row_losses(batch, form)
    return rows[i] + rows[i + batch.size]


def contrastive_loss(batch: ContrastiveBatch, form: str = "nt_xent") -> torch.Tensor:
    """``(1/2N) * sum_i l(a_i, p_i)``."""
    return torch.sort(_row_losses(batch, form)).values.sum() / (2 * batch.size)


def pseudo_inverse_loss(z_hat: torch.Tensor, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Masked regression loss on characteristics.

    ``mask`` is either one availability flag per entity (N,) or one per entry
    (N, D_z). Each entity contributes the mean squared error over its available
    entries; the result is the mean over entities with at least one available
    entry, or 0 when nothing is available.
    """
    if z_hat.shape != z.shape or z.dim() != 2:
        raise ValueError(f"z_hat {tuple(z_hat.shape)} and z {tuple(z.shape)} must match as (N, D_z)")
    if mask is None:
        mask = torch.ones(z.shape, dtype=torch.bool)
    elif mask.dim() == 1:
        mask = mask.bool()[:, None].expand_as(z)
    mask = mask.bool()
    if not bool(mask.any()):
        return z_hat.sum() * 0.0
    # zero the unavailable targets so NaN placeholders cannot leak into the graph
    diff = torch.where(mask, z_hat - torch.where(mask, z, torch.zeros_like(z)), torch.zeros_like(z_hat))
    counts = mask.sum(1)
    has = counts > 0
    per_entity = (diff**2).sum(1)[has] / counts[has]
    return per_entity.mean()


def total_loss(weights: LossWeights, rec, cont, inv):
    return weights.reconstruction * rec + weights.contrastive * cont + weights.inverse * inv

