"""Cross-modal transformer encoder, masked-token decoders, and the reconstruction loss.

The encoder runs two parallel units over the same masked text query sequence:
one attends into audio frames, the other into keyframes. Each unit is a
pre-norm transformer block (multi-head cross-attention, then a position-wise
feed-forward, each wrapped in residual + layer norm). Sinusoidal positions are
added to the text query only; key/value sequences are treated as unordered
evidence, which makes their ordering irrelevant by construction.

Frozen-parameter forward passes are safe to run concurrently; any pass that
will be backpropagated, and all parameter updates, need exclusive access.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError, Tensor
from .masking import MaskedBatch


@dataclass
class LinearParams:
    weight: Tensor  # fan_in x fan_out
    bias: Tensor  # fan_out

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}/weight", self.weight
        yield f"{prefix}/bias", self.bias


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return ad.add(ad.matmul(x, p.weight), p.bias)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}/gain", self.gain
        yield f"{prefix}/bias", self.bias


@dataclass
class TransformerUnitParams:
    """One pre-norm block: multi-head attention plus a feed-forward sub-layer."""

    n_heads: int
    query: LinearParams
    key: LinearParams
    value: LinearParams
    out: LinearParams
    ln_attn: LayerNormParams
    ff1: LinearParams
    ff2: LinearParams
    ln_ff: LayerNormParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.query.named(f"{prefix}/query")
        yield from self.key.named(f"{prefix}/key")
        yield from self.value.named(f"{prefix}/value")
        yield from self.out.named(f"{prefix}/out")
        yield from self.ln_attn.named(f"{prefix}/ln_attn")
        yield from self.ff1.named(f"{prefix}/ff1")
        yield from self.ff2.named(f"{prefix}/ff2")
        yield from self.ln_ff.named(f"{prefix}/ln_ff")


def multi_head_attention(
    query_seq: Tensor,
    kv_seq: Tensor,
    p: TransformerUnitParams,
    kv_valid: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product attention over ``kv_seq`` for each query row.

    Head width is d_model / n_heads and scores are scaled by its square root.
    Padded key/value rows (kv_valid False) receive exactly zero weight; a
    fully padded key/value sequence is an error because attention would be
    undefined.
    """
    l, d_model = query_seq.shape
    s = kv_seq.shape[0]
    if d_model % p.n_heads != 0:
        raise ad.ShapeError(f"model width {d_model} not divisible by {p.n_heads} heads")
    if kv_valid is not None:
        kv_valid = np.asarray(kv_valid, dtype=bool)
        if kv_valid.shape != (s,):
            raise ad.ShapeError(f"kv_valid shape {kv_valid.shape} for {s} rows")
        if not kv_valid.any():
            raise GraphError("attention over a fully padded key/value sequence")

    q = linear(query_seq, p.query)
    k = linear(kv_seq, p.key)
    v = linear(kv_seq, p.value)
    head_width = d_model // p.n_heads
    scale = 1.0 / np.sqrt(head_width)

    heads = []
    for h in range(p.n_heads):
        lo, hi = h * head_width, (h + 1) * head_width
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
        if kv_valid is None:
            weights = ad.softmax(scores)
        else:
            weights = ad.masked_softmax(scores, np.broadcast_to(kv_valid, (l, s)))
        heads.append(ad.matmul(weights, vh))
    return linear(ad.concat_cols(heads), p.out)


def transformer_unit(
    x: Tensor,
    kv: Tensor,
    p: TransformerUnitParams,
    kv_valid: np.ndarray | None = None,
    self_attention: bool = False,
) -> Tensor:
    """Pre-norm block: x + Attn(LN(x), kv), then + FFN(LN(.)).

    In self-attention mode the key/value input is the normalized query
    sequence itself.
    """
    q_in = ad.layer_norm(x, p.ln_attn.gain, p.ln_attn.bias)
    kv_in = q_in if self_attention else kv
    u = ad.add(x, multi_head_attention(q_in, kv_in, p, kv_valid))
    f = ad.layer_norm(u, p.ln_ff.gain, p.ln_ff.bias)
    return ad.add(u, linear(ad.relu(linear(f, p.ff1)), p.ff2))


def cross_attention_unit(
    query_seq: Tensor,
    kv_seq: Tensor,
    p: TransformerUnitParams,
    kv_valid: np.ndarray | None = None,
) -> Tensor:
    """One cross-modal unit: text queries attend into another modality's sequence."""
    return transformer_unit(query_seq, kv_seq, p, kv_valid=kv_valid, self_attention=False)


@lru_cache(maxsize=64)
def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Classic fixed sin/cos position table, length x width."""
    pos = np.arange(length)[:, None]
    i = np.arange((width + 1) // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / width)
    table = np.zeros((length, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : width // 2])
    return table


def add_positions(seq: Tensor) -> Tensor:
    l, d = seq.shape
    return ad.add(seq, Tensor(sinusoidal_positions(l, d)))


@dataclass
class ProjectionParams:
    """Input maps from raw modality widths to the shared model width."""

    text: LinearParams
    audio: LinearParams
    frame: LinearParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.text.named(f"{prefix}/text")
        yield from self.audio.named(f"{prefix}/audio")
        yield from self.frame.named(f"{prefix}/frame")


@dataclass
class EncoderState:
    """The adaptable parameter partition: projections, mask embedding, both units."""

    projections: ProjectionParams
    mask_embedding: Tensor
    audio_text_units: list[TransformerUnitParams]
    visual_text_units: list[TransformerUnitParams]

    def named(self, prefix: str = "encoder") -> Iterator[tuple[str, Tensor]]:
        yield from self.projections.named(f"{prefix}/proj")
        yield f"{prefix}/mask_embedding", self.mask_embedding
        for i, unit in enumerate(self.audio_text_units):
            yield from unit.named(f"{prefix}/audio_text/{i}")
        for i, unit in enumerate(self.visual_text_units):
            yield from unit.named(f"{prefix}/visual_text/{i}")


def encode(
    masked: MaskedBatch,
    audio_feat: np.ndarray,
    keyframe_feat: np.ndarray,
    state: EncoderState,
    audio_valid: np.ndarray | None = None,
    frame_valid: np.ndarray | None = None,
    use_audio: bool = True,
    use_visual: bool = True,
) -> tuple[Tensor | None, Tensor | None]:
    """Run both cross-modal units over the masked text query sequence.

    Returns (audio-enhanced text, keyframe-enhanced text); a branch switched
    off returns None. Raw modality features are projected to model width
    here, and sinusoidal positions are added to the text side only.
    """
    text = add_positions(masked.masked_text_feat)
    audio_text = None
    visual_text = None
    if use_audio:
        kv = linear(Tensor(audio_feat), state.projections.audio)
        seq = text
        for unit in state.audio_text_units:
            seq = transformer_unit(seq, kv, unit, kv_valid=audio_valid)
        audio_text = seq
    if use_visual:
        kv = linear(Tensor(keyframe_feat), state.projections.frame)
        seq = text
        for unit in state.visual_text_units:
            seq = transformer_unit(seq, kv, unit, kv_valid=frame_valid)
        visual_text = seq
    return audio_text, visual_text


@dataclass
class DecoderParams:
    """One self-attention block plus a projection onto the vocabulary."""

    block: TransformerUnitParams
    out: LinearParams

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.block.named(f"{prefix}/block")
        yield from self.out.named(f"{prefix}/out")


def decode_sequence(seq: Tensor, dec: DecoderParams) -> Tensor:
    """Vocabulary logits for every position of the sequence."""
    return linear(transformer_unit(seq, seq, dec.block, self_attention=True), dec.out)


def decode_masked(seq: Tensor, mask_positions: list[int], dec: DecoderParams) -> Tensor:
    """Logits gathered at the masked positions only.

    The decoder block always sees the full enhanced sequence; gathering
    happens after the vocabulary projection.
    """
    if not mask_positions:
        raise GraphError("decode_masked with no masked positions")
    return ad.gather_rows(decode_sequence(seq, dec), mask_positions)


def mlm_loss(
    audio_text: Tensor | None,
    visual_text: Tensor | None,
    mask_positions: list[int],
    target_ids: list[int],
    dec_audio: DecoderParams,
    dec_visual: DecoderParams,
) -> Tensor:
    """Sum of the two branch reconstruction losses.

    Each branch is the mean cross-entropy over masked positions of its
    decoder's predictions; the branches are added, not averaged. A branch
    whose input is None (modality ablated) contributes no term.
    """
    if not mask_positions:
        raise GraphError("reconstruction loss needs at least one masked position")
    terms = []
    if audio_text is not None:
        terms.append(ad.cross_entropy_logits(decode_masked(audio_text, mask_positions, dec_audio), target_ids))
    if visual_text is not None:
        terms.append(ad.cross_entropy_logits(decode_masked(visual_text, mask_positions, dec_visual), target_ids))
    if not terms:
        raise GraphError("reconstruction loss with both branches disabled")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total
