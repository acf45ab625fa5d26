"""Encoder registry and the deterministic default encoders.

Every encoder family (text, ocr, visual, audio) is looked up by a versioned
name from the manifest, and the version strings are echoed into the output so
an extraction can be reproduced. The defaults avoid any pretrained weights:
they are hash- and statistics-based featurizers that are bit-stable across
runs. Heavier encoders (pretrained language or vision models) can be
registered under new names without touching the pipeline.
"""

from __future__ import annotations

import re

import numpy as np

from .manifest import ManifestError

_REGISTRY: dict[tuple[str, str], object] = {}


def register(family: str, name: str):
    def deco(cls):
        _REGISTRY[(family, name)] = cls
        return cls

    return deco


def get_encoder(family: str, name: str, output: dict):
    try:
        cls = _REGISTRY[(family, name)]
    except KeyError:
        known = sorted(n for f, n in _REGISTRY if f == family)
        raise ManifestError(f"unknown {family} encoder {name!r}; known: {known}") from None
    return cls(output)


_WORD = re.compile(r"[\w']+", re.UNICODE)


@register("text", "hashed-bag-v1")
class HashedBagText:
    """Tokenizes on word characters and hashes tokens into the vocabulary.

    Each id owns a fixed random embedding seeded by the id itself, so the
    feature space is stable across processes and runs. The reserved mask id
    is never emitted.
    """

    def __init__(self, output: dict):
        self.vocab = int(output["V"])
        self.mask_id = int(output["mask_token_id"])
        self.d_t = int(output["d_t"])

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in _WORD.findall(text.lower()):
            h = 0
            for ch in word:  # FNV-1a, stable across runs unlike hash()
                h = ((h ^ ord(ch)) * 0x01000193) & 0xFFFFFFFF
            token = h % (self.vocab - 1)
            if token >= self.mask_id:
                token += 1
            ids.append(token)
        return ids

    def embed_id(self, token_id: int) -> np.ndarray:
        rng = np.random.default_rng([token_id, 0x7EC5])
        return rng.normal(0.0, 0.8, self.d_t)

    def encode_ids(self, ids: list[int]) -> np.ndarray:
        return np.stack([self.embed_id(t) for t in ids])

    def pool(self, text: str) -> np.ndarray:
        ids = self.tokenize(text)
        if not ids:
            return np.zeros(self.d_t)
        return self.encode_ids(ids).mean(axis=0)


@register("ocr", "none-v1")
class NoOcr:
    """Placeholder OCR that reads nothing; titles alone feed the text encoder."""

    def __init__(self, output: dict):
        pass

    def read(self, frames) -> str:
        return ""


@register("visual", "frame-stats-v1")
class FrameStatsVisual:
    """Per-frame block means and color statistics; motion as inter-frame change.

    Static features: a 4x4 grid of grayscale means, per-channel means and
    standard deviations, and a coarse gray histogram, trimmed or tiled to the
    requested width. Motion rows summarize the absolute change against the
    previous sampled frame (zero for the first frame).
    """

    def __init__(self, output: dict):
        self.d_i = int(output["d_i"])
        self.d_v = int(output["d_v"])

    @staticmethod
    def _grid_means(gray: np.ndarray, cells: int) -> np.ndarray:
        h, w = gray.shape
        ys = np.linspace(0, h, cells + 1, dtype=int)
        xs = np.linspace(0, w, cells + 1, dtype=int)
        vals = [
            gray[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean()
            for i in range(cells)
            for j in range(cells)
        ]
        return np.array(vals)

    @staticmethod
    def _fit(vec: np.ndarray, width: int) -> np.ndarray:
        if len(vec) >= width:
            return vec[:width]
        reps = int(np.ceil(width / len(vec)))
        return np.tile(vec, reps)[:width]

    def frame_features(self, frame: np.ndarray) -> np.ndarray:
        gray = frame.mean(axis=2)
        stats = np.concatenate(
            [
                self._grid_means(gray, 4),
                frame.mean(axis=(0, 1)),
                frame.std(axis=(0, 1)),
                np.histogram(gray, bins=10, range=(0.0, 1.0))[0] / gray.size,
            ]
        )
        return self._fit(stats, self.d_i)

    def motion_features(self, prev: np.ndarray | None, frame: np.ndarray) -> np.ndarray:
        if prev is None:
            return np.zeros(self.d_v)
        delta = np.abs(frame.mean(axis=2) - prev.mean(axis=2))
        stats = np.concatenate([self._grid_means(delta, 3), [delta.mean(), delta.max()]])
        return self._fit(stats, self.d_v)

    def encode(self, frames: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        static = np.stack([self.frame_features(f) for f in frames])
        motion = np.stack(
            [self.motion_features(frames[i - 1] if i else None, f) for i, f in enumerate(frames)]
        )
        return static, motion


@register("audio", "band-energy-v1")
class BandEnergyAudio:
    """Log band energies over fixed-size windows, pooled to the frame budget."""

    frame_size = 1024
    hop = 512

    def __init__(self, output: dict):
        self.d_a = int(output["d_a"])
        self.n_max = int(output["n_max"])

    def encode(self, samples: np.ndarray, rate: int) -> np.ndarray:
        if samples.size < self.frame_size or np.abs(samples).max() == 0.0:
            return np.zeros((0, self.d_a))
        starts = range(0, samples.size - self.frame_size + 1, self.hop)
        rows = []
        window = np.hanning(self.frame_size)
        for s in starts:
            spectrum = np.abs(np.fft.rfft(samples[s : s + self.frame_size] * window))
            bands = np.array_split(spectrum, self.d_a)
            rows.append(np.log1p(np.array([b.mean() for b in bands])))
        rows = np.stack(rows)
        if len(rows) > self.n_max:
            # Pool evenly spaced segments down to the budget.
            segments = np.array_split(rows, self.n_max)
            rows = np.stack([seg.mean(axis=0) for seg in segments])
        return rows
