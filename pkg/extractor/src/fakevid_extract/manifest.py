"""Extraction manifest: which videos to process, with which encoders."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field


class ManifestError(Exception):
    """The manifest is missing, malformed, or references unknown encoders."""


DEFAULT_OUTPUT = {
    "d_t": 32,
    "d_i": 32,
    "d_v": 16,
    "d_a": 24,
    "V": 64,
    "l_max": 32,
    "m_max": 8,
    "n_max": 12,
    "k_max": 6,
    "mask_token_id": 63,
}

DEFAULT_ENCODERS = {
    "text": "hashed-bag-v1",
    "ocr": "none-v1",
    "visual": "frame-stats-v1",
    "audio": "band-energy-v1",
}


@dataclass
class VideoEntry:
    video_id: str
    event_id: str
    timestamp: int
    label: int
    video: str  # frame directory or video file
    title: str
    publisher: str
    audio: str | None = None  # wav file; None means no audio track
    comments: list = field(default_factory=list)  # [{"text": ..., "likes": ...}]


@dataclass
class ExtractionManifest:
    videos: list[VideoEntry]
    output: dict
    encoders: dict
    base_dir: str = "."

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def load_manifest(path: str) -> ExtractionManifest:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path}: {e}") from e

    if "videos" not in raw or not isinstance(raw["videos"], list) or not raw["videos"]:
        raise ManifestError("manifest needs a non-empty 'videos' list")
    videos = []
    for i, entry in enumerate(raw["videos"]):
        try:
            videos.append(
                VideoEntry(
                    video_id=str(entry["video_id"]),
                    event_id=str(entry["event_id"]),
                    timestamp=int(entry["timestamp"]),
                    label=int(entry["label"]),
                    video=str(entry["video"]),
                    title=str(entry.get("title", "")),
                    publisher=str(entry.get("publisher", "")),
                    audio=entry.get("audio"),
                    comments=list(entry.get("comments", [])),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"videos[{i}]: {e}") from e

    output = dict(DEFAULT_OUTPUT)
    output.update(raw.get("output", {}))
    encoders = dict(DEFAULT_ENCODERS)
    encoders.update(raw.get("encoders", {}))
    return ExtractionManifest(
        videos=videos,
        output=output,
        encoders=encoders,
        base_dir=os.path.dirname(os.path.abspath(path)),
    )
