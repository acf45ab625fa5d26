"""Evidence fusion and the fake/real classifier head.

Five evidence vectors (audio-enhanced text, keyframe-enhanced text, motion,
comments, publisher) are projected to model width, stacked into a 5-row
sequence, mixed by one self-attention layer, mean-pooled and classified. The
five slots carry no positional encoding: slot identity is already expressed by
the distinct input projections, and mean pooling keeps the fused vector
invariant under slot permutation.

This whole head is frozen during test-time adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import LinearParams, TransformerUnitParams, linear, transformer_unit


@dataclass
class FusionParams:
    """Projections for the three raw evidence vectors, the mixing layer, and the classifier."""

    motion_proj: LinearParams  # d_v -> d_model
    comment_proj: LinearParams  # d_t -> d_model
    publisher_proj: LinearParams  # d_t -> d_model
    layer: TransformerUnitParams
    classifier: LinearParams  # d_model -> 2

    def named(self, prefix: str = "classifier") -> Iterator[tuple[str, Tensor]]:
        yield from self.motion_proj.named(f"{prefix}/motion_proj")
        yield from self.comment_proj.named(f"{prefix}/comment_proj")
        yield from self.publisher_proj.named(f"{prefix}/publisher_proj")
        yield from self.layer.named(f"{prefix}/layer")
        yield from self.classifier.named(f"{prefix}/head")


def pool_sequence(seq: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Mean over the valid (non-pad) rows of a sequence; result is 1 x d."""
    return ad.mean_rows(seq, valid)


def fuse(
    x_audio_text: Tensor,
    x_visual_text: Tensor,
    x_motion: Tensor,
    x_comments: Tensor,
    x_publisher: Tensor,
    p: FusionParams,
) -> Tensor:
    """Mix the five evidence vectors with self-attention and mean-pool them.

    The two cross-modal vectors arrive already at model width; the other
    three are projected here. All inputs are 1 x width rows.
    """
    seq = ad.concat_rows(
        [
            x_audio_text,
            x_visual_text,
            linear(x_motion, p.motion_proj),
            linear(x_comments, p.comment_proj),
            linear(x_publisher, p.publisher_proj),
        ]
    )
    mixed = transformer_unit(seq, seq, p.layer, self_attention=True)
    return ad.mean_rows(mixed)


PROB_EPS = 1e-7


def classify(fused: Tensor, p: FusionParams) -> Tensor:
    """Fake-class probability from a softmax over two logits, clamped inside (0, 1)."""
    logits = linear(fused, p.classifier)
    probs = ad.softmax(logits)
    return ad.clamp(ad.element(probs, (0, 1)), PROB_EPS, 1.0 - PROB_EPS)


def fnd_loss(p_fake: Tensor, label: int) -> Tensor:
    """Binary cross-entropy of the fake probability against the 0/1 label."""
    return ad.binary_cross_entropy(p_fake, label)
