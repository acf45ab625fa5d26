"""Full detector: parameter partitions, initialization, checksums, checkpoints.

Parameters fall into three partitions with different training rules:

* ``encoder`` - both cross-modal units, the modality projections feeding them,
  and the mask embedding. Updated during joint training and during test-time
  adaptation.
* ``decoders`` - the two masked-token decoders. Same update rule as encoder.
* ``classifier`` - the fusion layer, its input projections, and the final
  head. Updated during joint training only; bitwise frozen at test time.

Checkpoints are a single self-describing binary file (JSON manifest plus raw
little-endian float64 buffers) that is byte-stable across save/load cycles.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import DatasetHeader
from .encoder import (
    DecoderParams,
    EncoderState,
    LayerNormParams,
    LinearParams,
    ProjectionParams,
    TransformerUnitParams,
)
from .errors import ConfigError
from .fusion import FusionParams

CHECKPOINT_MAGIC = b"FVCKPT1\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    depth: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")


class _Init:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases, unit gains."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def linear(self, fan_in: int, fan_out: int) -> LinearParams:
        bound = 1.0 / np.sqrt(fan_in)
        w = self.rng.uniform(-bound, bound, size=(fan_in, fan_out))
        return LinearParams(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))

    def layer_norm(self, width: int) -> LayerNormParams:
        return LayerNormParams(
            Tensor(np.ones(width), requires_grad=True),
            Tensor(np.zeros(width), requires_grad=True),
        )

    def unit(self, cfg: ModelConfig) -> TransformerUnitParams:
        d = cfg.d_model
        return TransformerUnitParams(
            n_heads=cfg.n_heads,
            query=self.linear(d, d),
            key=self.linear(d, d),
            value=self.linear(d, d),
            out=self.linear(d, d),
            ln_attn=self.layer_norm(d),
            ff1=self.linear(d, cfg.d_ff),
            ff2=self.linear(cfg.d_ff, d),
            ln_ff=self.layer_norm(d),
        )

    def decoder(self, cfg: ModelConfig, vocab: int) -> DecoderParams:
        return DecoderParams(block=self.unit(cfg), out=self.linear(cfg.d_model, vocab))


class DetectionModel:
    """Parameter container for the full detector."""

    def __init__(self, header: DatasetHeader, config: ModelConfig = ModelConfig(), seed=0):
        self.header = header
        self.config = config
        init = _Init(np.random.default_rng(seed))
        d = config.d_model
        bound = 1.0 / np.sqrt(d)
        self.encoder = EncoderState(
            projections=ProjectionParams(
                text=init.linear(header.d_t, d),
                audio=init.linear(header.d_a, d),
                frame=init.linear(header.d_i, d),
            ),
            mask_embedding=Tensor(init.rng.uniform(-bound, bound, size=d), requires_grad=True),
            audio_text_units=[init.unit(config) for _ in range(config.depth)],
            visual_text_units=[init.unit(config) for _ in range(config.depth)],
        )
        self.decoder_audio = init.decoder(config, header.vocab_size)
        self.decoder_visual = init.decoder(config, header.vocab_size)
        self.fusion = FusionParams(
            motion_proj=init.linear(header.d_v, d),
            comment_proj=init.linear(header.d_t, d),
            publisher_proj=init.linear(header.d_t, d),
            layer=init.unit(config),
            classifier=init.linear(d, 2),
        )

    # -- parameter access ---------------------------------------------------

    def partitions(self) -> dict[str, list[tuple[str, Tensor]]]:
        return {
            "encoder": list(self.encoder.named("encoder")),
            "decoders": list(self.decoder_audio.named("decoders/audio"))
            + list(self.decoder_visual.named("decoders/visual")),
            "classifier": list(self.fusion.named("classifier")),
        }

    def parameters(self, partition: str | None = None) -> list[Tensor]:
        parts = self.partitions()
        if partition is None:
            return [t for group in parts.values() for _, t in group]
        return [t for _, t in parts[partition]]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [item for group in self.partitions().values() for item in group]

    def checksum(self, partition: str) -> str:
        h = hashlib.sha256()
        for name, t in self.partitions()[partition]:
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
        return h.hexdigest()

    def checksums(self) -> dict[str, str]:
        return {part: self.checksum(part) for part in ("encoder", "decoders", "classifier")}

    def snapshot(self, partition_names: tuple[str, ...]) -> dict[str, np.ndarray]:
        parts = self.partitions()
        return {
            name: t.values.copy() for p in partition_names for name, t in parts[p]
        }

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        by_name = dict(self.named_parameters())
        for name, values in snapshot.items():
            by_name[name].values[...] = values

    # -- checkpoint io ------------------------------------------------------

    def save(self, path: str) -> None:
        """Write one deterministic archive of all named parameters."""
        entries = []
        buffers = []
        offset = 0
        for name, t in self.named_parameters():
            raw = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(t.shape), "offset": offset})
            buffers.append(raw)
            offset += len(raw)
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "model": {
                "d_model": self.config.d_model,
                "n_heads": self.config.n_heads,
                "d_ff": self.config.d_ff,
                "depth": self.config.depth,
            },
            "header": self.header.to_dict(),
            "entries": entries,
        }
        blob = json.dumps(manifest, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for raw in buffers:
                f.write(raw)

    @classmethod
    def load(cls, path: str) -> "DetectionModel":
        with open(path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ConfigError(f"{path} is not a checkpoint file")
            (blob_len,) = struct.unpack("<Q", f.read(8))
            manifest = json.loads(f.read(blob_len))
            if manifest["format_version"] != CHECKPOINT_VERSION:
                raise ConfigError(f"unsupported checkpoint version {manifest['format_version']}")
            data = f.read()
        header = DatasetHeader.from_dict(manifest["header"])
        model = cls(header, ModelConfig(**manifest["model"]), seed=0)
        by_name = dict(model.named_parameters())
        if set(by_name) != {e["name"] for e in manifest["entries"]}:
            raise ConfigError("checkpoint parameter names do not match this model")
        for e in manifest["entries"]:
            t = by_name[e["name"]]
            shape = tuple(e["shape"])
            if shape != t.shape:
                raise ConfigError(f"checkpoint shape {shape} for {e['name']} expected {t.shape}")
            count = int(np.prod(shape)) if shape else 1
            raw = data[e["offset"] : e["offset"] + count * 8]
            t.values[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        return model
