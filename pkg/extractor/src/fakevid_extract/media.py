"""Media loading: frame sequences and audio tracks.

A video source is either a directory of image frames (sorted by filename) or
a video file decoded through OpenCV when that is importable. Audio arrives as
a wav file path.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


class MediaError(Exception):
    """The referenced media could not be decoded."""


def load_frames(path: str, max_frames: int) -> list[np.ndarray]:
    """Up to ``max_frames`` RGB frames sampled evenly across the source."""
    if os.path.isdir(path):
        names = sorted(
            n for n in os.listdir(path) if os.path.splitext(n)[1].lower() in _IMAGE_EXTENSIONS
        )
        if not names:
            raise MediaError(f"no image frames in {path}")
        picks = _even_picks(len(names), max_frames)
        frames = []
        for i in picks:
            with Image.open(os.path.join(path, names[i])) as img:
                frames.append(np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0)
        return frames
    if os.path.isfile(path):
        return _load_video_file(path, max_frames)
    raise MediaError(f"video source not found: {path}")


def _even_picks(total: int, count: int) -> list[int]:
    if total <= count:
        return list(range(total))
    return [int(round(i * (total - 1) / (count - 1))) for i in range(count)]


def _load_video_file(path: str, max_frames: int) -> list[np.ndarray]:
    try:
        import cv2
    except ImportError as e:
        raise MediaError(f"cannot decode {path}: OpenCV is not installed") from e
    cap = cv2.VideoCapture(path)
    frames = []
    ok, frame = cap.read()
    while ok:
        frames.append(np.asarray(frame[:, :, ::-1], dtype=np.float64) / 255.0)
        ok, frame = cap.read()
    cap.release()
    if not frames:
        raise MediaError(f"no decodable frames in {path}")
    return [frames[i] for i in _even_picks(len(frames), max_frames)]


def load_audio(path: str) -> tuple[np.ndarray, int]:
    """Mono float64 samples in [-1, 1] plus the sample rate."""
    from scipy.io import wavfile

    try:
        rate, samples = wavfile.read(path)
    except (FileNotFoundError, ValueError) as e:
        raise MediaError(f"cannot read audio {path}: {e}") from e
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    peak = np.abs(samples).max() if samples.size else 0.0
    if peak > 0:
        samples = samples / peak
    return samples, int(rate)
