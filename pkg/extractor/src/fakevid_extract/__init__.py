"""Feature extraction for short-video records.

Reads a manifest of videos (frame folders or video files, audio tracks,
titles, comments, publisher blurbs), runs the configured encoders, and writes
a dataset directory in the detector's record format: ``header.json`` plus
``records.jsonl``. Encoders are pluggable behind a registry; the defaults are
deterministic, dependency-light featurizers so extraction runs anywhere and is
bit-stable across runs.
"""

__version__ = "0.1.0"
