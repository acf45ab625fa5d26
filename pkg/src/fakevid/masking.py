"""Random masking of token-level text features for the reconstruction objective.

Masking operates on sequences already projected to model width, so one learned
mask embedding serves regardless of the raw text feature width. Replacement is
pure: selected rows become the mask embedding, everything else is untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class MaskedBatch:
    """Masked text features plus the bookkeeping needed to score reconstruction.

    ``mask_positions`` is strictly increasing and aligned with ``target_ids``,
    the original token ids at the masked rows.
    """

    masked_text_feat: Tensor  # l x d_model
    mask_positions: list[int]
    target_ids: list[int]
    ratio_used: float


def mask_count(length: int, ratio: float) -> int:
    """Number of positions to mask: round(ratio * length), floored at 1 when ratio > 0."""
    if ratio == 0.0:
        return 0
    return max(1, int(math.floor(ratio * length + 0.5)))


def apply_mask(
    text_feat: Tensor,
    token_ids: list[int],
    ratio: float,
    mask_embedding: Tensor,
    rng: np.random.Generator,
) -> MaskedBatch:
    """Replace a random subset of rows with the shared learnable mask embedding.

    Positions are drawn uniformly without replacement; the count is
    deterministic given the length and ratio, only the positions are random.
    Gradients flow into the mask embedding through the replaced rows.
    """
    if not (0.0 <= ratio <= 1.0):
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")
    l, d = text_feat.shape
    if l < 1 or l != len(token_ids):
        raise ValueError(f"{len(token_ids)} token ids for {l} feature rows")
    count = mask_count(l, ratio)
    if count == 0:
        return MaskedBatch(text_feat, [], [], 0.0)

    positions = np.sort(rng.choice(l, size=count, replace=False))
    keep = np.ones((l, d))
    keep[positions] = 0.0
    indicator = np.zeros((l, 1))
    indicator[positions] = 1.0

    mask_rows = ad.matmul(Tensor(indicator), ad.reshape(mask_embedding, (1, d)))
    masked = ad.add(ad.mul(text_feat, Tensor(keep)), mask_rows)
    targets = [int(token_ids[p]) for p in positions]
    return MaskedBatch(masked, [int(p) for p in positions], targets, ratio)
