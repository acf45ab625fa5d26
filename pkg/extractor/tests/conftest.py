import json

import numpy as np
import pytest
from PIL import Image
from scipy.io import wavfile


def _write_frames(folder, count, seed, size=(48, 36)):
    folder.mkdir(parents=True)
    rng = np.random.default_rng(seed)
    base = rng.uniform(0, 255, size=(size[1], size[0], 3))
    for i in range(count):
        drift = (base + 20.0 * i * rng.uniform(0, 1, size=(size[1], size[0], 3))) % 255
        Image.fromarray(drift.astype(np.uint8), "RGB").save(folder / f"frame_{i:03d}.png")


def _write_tone(path, seconds=0.5, freq=440.0, rate=8000, silent=False):
    t = np.arange(int(seconds * rate)) / rate
    signal = np.zeros_like(t) if silent else 0.6 * np.sin(2 * np.pi * freq * t)
    wavfile.write(path, rate, (signal * 32767).astype(np.int16))


@pytest.fixture(scope="session")
def toy_media(tmp_path_factory):
    """Ten good videos (frame folders plus wavs) and one broken entry."""
    root = tmp_path_factory.mktemp("media")
    entries = []
    for i in range(10):
        frames = root / f"video{i}"
        _write_frames(frames, count=4 + i % 3, seed=i)
        audio = None
        if i != 3:  # video 3 has no audio track at all
            audio = root / f"audio{i}.wav"
            _write_tone(audio, freq=200.0 + 60.0 * i, silent=(i == 7))
        entries.append(
            {
                "video_id": f"clip{i:02d}",
                "event_id": f"story{i // 2}",
                "timestamp": 1_700_000_000 + i * 3600,
                "label": i % 2,
                "video": str(frames),
                "audio": str(audio) if audio else None,
                "title": f"breaking update number {i} from the scene",
                "publisher": f"channel {i % 3} official news desk",
                "comments": [
                    {"text": f"comment {j} about clip {i}", "likes": (i * j) % 7}
                    for j in range(i % 4)
                ],
            }
        )
    entries.append(
        {
            "video_id": "broken",
            "event_id": "story9",
            "timestamp": 1_700_100_000,
            "label": 0,
            "video": str(root / "missing_folder"),
            "audio": None,
            "title": "this one cannot decode",
            "publisher": "nobody",
            "comments": [],
        }
    )
    manifest = {"videos": entries}
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return {"root": root, "manifest": str(manifest_path)}
