"""Shared builders for module tests and the acceptance suite."""

import numpy as np

from fakevid.autodiff import Tensor
from fakevid.data import DatasetHeader, FeatureRecord
from fakevid.encoder import (
    LayerNormParams,
    LinearParams,
    TransformerUnitParams,
)
from fakevid.model import DetectionModel, ModelConfig

TINY_HEADER = DatasetHeader(
    d_t=6, d_i=7, d_v=4, d_a=5, vocab_size=16,
    l_max=8, m_max=4, n_max=5, k_max=3, mask_token_id=15,
)
TINY_MODEL = ModelConfig(d_model=8, n_heads=2, d_ff=16)


def tiny_model(seed=0) -> DetectionModel:
    return DetectionModel(TINY_HEADER, TINY_MODEL, seed=seed)


def tiny_record(rng, header=TINY_HEADER, l=4, m=2, n=3, k=2, label=0) -> FeatureRecord:
    return FeatureRecord(
        video_id="vid0",
        event_id="ev0",
        timestamp=0,
        label=label,
        token_ids=rng.integers(0, header.mask_token_id, size=l).tolist(),
        text_feat=rng.normal(size=(l, header.d_t)),
        keyframe_feat=rng.normal(size=(m, header.d_i)),
        motion_feat=rng.normal(size=(m, header.d_v)),
        audio_feat=rng.normal(size=(n, header.d_a)),
        comment_feats=rng.normal(size=(k, header.d_t)),
        comment_likes=rng.integers(0, 5, size=k),
        publisher_feat=rng.normal(size=header.d_t),
    )


def random_linear(rng, fan_in, fan_out, scale=0.5) -> LinearParams:
    return LinearParams(
        Tensor(rng.uniform(-scale, scale, (fan_in, fan_out)), requires_grad=True),
        Tensor(rng.uniform(-scale, scale, fan_out), requires_grad=True),
    )


def random_unit(rng, d_model, n_heads, d_ff) -> TransformerUnitParams:
    return TransformerUnitParams(
        n_heads=n_heads,
        query=random_linear(rng, d_model, d_model),
        key=random_linear(rng, d_model, d_model),
        value=random_linear(rng, d_model, d_model),
        out=random_linear(rng, d_model, d_model),
        ln_attn=LayerNormParams(
            Tensor(rng.uniform(0.5, 1.5, d_model), requires_grad=True),
            Tensor(rng.uniform(-0.2, 0.2, d_model), requires_grad=True),
        ),
        ff1=random_linear(rng, d_model, d_ff),
        ff2=random_linear(rng, d_ff, d_model),
        ln_ff=LayerNormParams(
            Tensor(rng.uniform(0.5, 1.5, d_model), requires_grad=True),
            Tensor(rng.uniform(-0.2, 0.2, d_model), requires_grad=True),
        ),
    )


def identity_unit(d_model, n_heads) -> TransformerUnitParams:
    """Identity Q/K/V/out maps with zero biases; layer norms at gain 1, bias 0."""

    def eye():
        return LinearParams(Tensor(np.eye(d_model)), Tensor(np.zeros(d_model)))

    return TransformerUnitParams(
        n_heads=n_heads,
        query=eye(),
        key=eye(),
        value=eye(),
        out=eye(),
        ln_attn=LayerNormParams(Tensor(np.ones(d_model)), Tensor(np.zeros(d_model))),
        ff1=LinearParams(Tensor(np.zeros((d_model, d_model))), Tensor(np.zeros(d_model))),
        ff2=LinearParams(Tensor(np.zeros((d_model, d_model))), Tensor(np.zeros(d_model))),
        ln_ff=LayerNormParams(Tensor(np.ones(d_model)), Tensor(np.zeros(d_model))),
    )


def mha_oracle(q_seq, kv_seq, p: TransformerUnitParams, kv_valid=None):
    """Loop-based per-head attention reimplementation used as an oracle."""
    q = q_seq @ p.query.weight.values + p.query.bias.values
    k = kv_seq @ p.key.weight.values + p.key.bias.values
    v = kv_seq @ p.value.weight.values + p.value.bias.values
    d_model = q.shape[1]
    head = d_model // p.n_heads
    outs = []
    for h in range(p.n_heads):
        qh = q[:, h * head : (h + 1) * head]
        kh = k[:, h * head : (h + 1) * head]
        vh = v[:, h * head : (h + 1) * head]
        rows = []
        for i in range(qh.shape[0]):
            scores = np.array([qh[i] @ kh[j] / np.sqrt(head) for j in range(kh.shape[0])])
            if kv_valid is not None:
                scores = np.where(kv_valid, scores, -np.inf)
            w = np.exp(scores - scores.max())
            if kv_valid is not None:
                w = np.where(kv_valid, w, 0.0)
            w = w / w.sum()
            rows.append(w @ vh)
        outs.append(np.stack(rows))
    return np.concatenate(outs, axis=1) @ p.out.weight.values + p.out.bias.values
