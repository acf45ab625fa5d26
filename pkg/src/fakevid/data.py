"""Feature-record data model: on-disk format, validation, splits, and a synthetic generator.

A dataset directory holds ``header.json`` plus ``records.jsonl`` with one JSON
object per record. Float matrices are nested JSON arrays by default; a sidecar
``records.f32bin`` mode stores each matrix as little-endian float32 with the
JSONL line carrying ``{"offset": ..., "shape": ...}`` references instead.

Loaded datasets are immutable-by-convention and freely shareable across
threads; loading and synthesis are pure given their inputs and seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataParseError, DataValidationError

FORMAT_VERSION = 1

_HEADER_KEYS = (
    "d_t",
    "d_i",
    "d_v",
    "d_a",
    "V",
    "l_max",
    "m_max",
    "n_max",
    "k_max",
    "mask_token_id",
    "format_version",
)

_MATRIX_FIELDS = ("text_feat", "keyframe_feat", "motion_feat", "audio_feat", "comment_feats")
_VECTOR_FIELDS = ("publisher_feat",)


@dataclass(frozen=True)
class DatasetHeader:
    """Widths, length caps and vocabulary facts shared by every record."""

    d_t: int
    d_i: int
    d_v: int
    d_a: int
    vocab_size: int
    l_max: int
    m_max: int
    n_max: int
    k_max: int
    mask_token_id: int
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for name in ("d_t", "d_i", "d_v", "d_a", "vocab_size", "l_max", "m_max", "n_max", "k_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"header field {name} must be >= 1")
        if not (0 <= self.mask_token_id < self.vocab_size):
            raise ConfigError("mask_token_id must lie in [0, V)")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in _HEADER_KEYS if k != "V"}
        d["V"] = self.vocab_size
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetHeader":
        missing = [k for k in _HEADER_KEYS if k not in d]
        extra = [k for k in d if k not in _HEADER_KEYS]
        if missing or extra:
            raise DataParseError(f"header.json missing keys {missing}, unknown keys {extra}")
        kwargs = {k: int(d[k]) for k in _HEADER_KEYS if k != "V"}
        return cls(vocab_size=int(d["V"]), **kwargs)


@dataclass
class FeatureRecord:
    """One news video as precomputed per-modality feature sequences plus label."""

    video_id: str
    event_id: str
    timestamp: int
    label: int
    token_ids: list[int]
    text_feat: np.ndarray  # l x d_t
    keyframe_feat: np.ndarray  # m x d_i
    motion_feat: np.ndarray  # m x d_v, aggregated lazily
    audio_feat: np.ndarray  # n x d_a
    comment_feats: np.ndarray  # k x d_t, k may be 0
    comment_likes: np.ndarray  # k nonnegative ints
    publisher_feat: np.ndarray  # d_t


@dataclass
class UnlabeledRecord:
    """A feature record with the label deliberately absent (test-time adaptation input)."""

    video_id: str
    event_id: str
    timestamp: int
    token_ids: list[int]
    text_feat: np.ndarray
    keyframe_feat: np.ndarray
    motion_feat: np.ndarray
    audio_feat: np.ndarray
    comment_feats: np.ndarray
    comment_likes: np.ndarray
    publisher_feat: np.ndarray


def strip_labels(records: list[FeatureRecord]) -> list[UnlabeledRecord]:
    out = []
    for r in records:
        d = {f.name: getattr(r, f.name) for f in dataclasses.fields(UnlabeledRecord)}
        out.append(UnlabeledRecord(**d))
    return out


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _check_matrix(violations, rid, name, arr, rows, cols):
    if arr.ndim != 2 or arr.shape != (rows, cols):
        violations.append(f"{rid}: {name} shape {arr.shape}, expected ({rows}, {cols})")
        return
    bad = ~np.isfinite(arr)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        violations.append(f"{rid}: {name} non-finite at row {r} col {c}")


def validate_record(header: DatasetHeader, record) -> list[str]:
    """Return every invariant violation of a record; an empty list means valid.

    Violations are data, not exceptions, so callers can collect them all.
    """
    v: list[str] = []
    rid = record.video_id
    label = getattr(record, "label", None)
    if label is not None and label not in (0, 1):
        v.append(f"{rid}: label not binary (got {label!r})")

    ids = np.asarray(record.token_ids)
    l = len(record.token_ids)
    if not (1 <= l <= header.l_max):
        v.append(f"{rid}: token_ids length {l} outside [1, {header.l_max}]")
    if l and (ids.min() < 0 or ids.max() >= header.vocab_size):
        v.append(f"{rid}: token_ids out of range [0, {header.vocab_size})")
    elif l and (ids == header.mask_token_id).any():
        v.append(f"{rid}: token_ids contains the reserved mask token id")
    if l:
        _check_matrix(v, rid, "text_feat", record.text_feat, l, header.d_t)

    m = record.keyframe_feat.shape[0] if record.keyframe_feat.ndim == 2 else -1
    if not (1 <= m <= header.m_max):
        v.append(f"{rid}: keyframe count {m} outside [1, {header.m_max}]")
    else:
        _check_matrix(v, rid, "keyframe_feat", record.keyframe_feat, m, header.d_i)
        _check_matrix(v, rid, "motion_feat", record.motion_feat, m, header.d_v)

    n = record.audio_feat.shape[0] if record.audio_feat.ndim == 2 else -1
    if not (1 <= n <= header.n_max):
        v.append(f"{rid}: audio frame count {n} outside [1, {header.n_max}]")
    else:
        _check_matrix(v, rid, "audio_feat", record.audio_feat, n, header.d_a)

    k = record.comment_feats.shape[0] if record.comment_feats.ndim == 2 else -1
    if not (0 <= k <= header.k_max):
        v.append(f"{rid}: comment count {k} outside [0, {header.k_max}]")
    else:
        if k:
            _check_matrix(v, rid, "comment_feats", record.comment_feats, k, header.d_t)
        likes = np.asarray(record.comment_likes)
        if likes.shape != (k,):
            v.append(f"{rid}: comment_likes length {likes.shape}, expected ({k},)")
        elif k and (likes < 0).any():
            v.append(f"{rid}: comment_likes contains negative counts")

    pf = record.publisher_feat
    if pf.shape != (header.d_t,):
        v.append(f"{rid}: publisher_feat shape {pf.shape}, expected ({header.d_t},)")
    elif not np.isfinite(pf).all():
        v.append(f"{rid}: publisher_feat non-finite")

    if not isinstance(record.timestamp, int):
        v.append(f"{rid}: timestamp must be an integer epoch second")
    return v


# ---------------------------------------------------------------------------
# Reading and writing
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray, binfile, mode: str):
    if mode == "jsonl":
        return arr.tolist()
    offset = binfile.tell()
    binfile.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return {"offset": offset, "shape": list(arr.shape)}


def _decode_array(value, binpath, cols: int) -> np.ndarray:
    if isinstance(value, dict):
        shape = tuple(int(s) for s in value["shape"])
        count = int(np.prod(shape)) if shape else 1
        with open(binpath, "rb") as f:
            f.seek(int(value["offset"]))
            raw = f.read(count * 4)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    arr = np.asarray(value, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, cols), dtype=np.float64)
    return arr


def write_dataset(path: str, header: DatasetHeader, records: list[FeatureRecord], float_mode: str = "jsonl") -> None:
    """Write ``header.json`` and ``records.jsonl`` (plus ``records.f32bin`` in binary mode)."""
    if float_mode not in ("jsonl", "f32bin"):
        raise ConfigError(f"unknown float_mode {float_mode!r}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "header.json"), "w") as f:
        json.dump(header.to_dict(), f, indent=2)
        f.write("\n")
    binfile = open(os.path.join(path, "records.f32bin"), "wb") if float_mode == "f32bin" else None
    try:
        with open(os.path.join(path, "records.jsonl"), "w") as f:
            for r in records:
                obj = {
                    "video_id": r.video_id,
                    "event_id": r.event_id,
                    "timestamp": int(r.timestamp),
                    "label": int(r.label),
                    "token_ids": [int(t) for t in r.token_ids],
                    "text_feat": _encode_array(r.text_feat, binfile, float_mode),
                    "keyframe_feat": _encode_array(r.keyframe_feat, binfile, float_mode),
                    "motion_feat": _encode_array(r.motion_feat, binfile, float_mode),
                    "audio_feat": _encode_array(r.audio_feat, binfile, float_mode),
                    "comment_feats": _encode_array(r.comment_feats, binfile, float_mode),
                    "comment_likes": [int(x) for x in r.comment_likes],
                    "publisher_feat": _encode_array(r.publisher_feat, binfile, float_mode),
                }
                f.write(json.dumps(obj) + "\n")
    finally:
        if binfile is not None:
            binfile.close()


def load_dataset(path: str) -> tuple[DatasetHeader, list[FeatureRecord]]:
    """Load and validate a dataset directory, preserving record order.

    Malformed lines raise :class:`DataParseError` with the line number;
    invariant breaches raise :class:`DataValidationError` naming the field
    and record id.
    """
    header_path = os.path.join(path, "header.json")
    if not os.path.exists(header_path):
        raise DataParseError(f"missing header.json in {path}")
    with open(header_path) as f:
        try:
            header = DatasetHeader.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise DataParseError(f"header.json: {e}") from e
        except ConfigError as e:
            raise DataValidationError(f"header.json: {e}") from e

    binpath = os.path.join(path, "records.f32bin")
    records: list[FeatureRecord] = []
    with open(os.path.join(path, "records.jsonl")) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataParseError(f"records.jsonl line {lineno}: {e}") from e
            try:
                record = FeatureRecord(
                    video_id=str(obj["video_id"]),
                    event_id=str(obj["event_id"]),
                    timestamp=int(obj["timestamp"]),
                    label=int(obj["label"]),
                    token_ids=[int(t) for t in obj["token_ids"]],
                    text_feat=_decode_array(obj["text_feat"], binpath, header.d_t),
                    keyframe_feat=_decode_array(obj["keyframe_feat"], binpath, header.d_i),
                    motion_feat=_decode_array(obj["motion_feat"], binpath, header.d_v),
                    audio_feat=_decode_array(obj["audio_feat"], binpath, header.d_a),
                    comment_feats=_decode_array(obj["comment_feats"], binpath, header.d_t),
                    comment_likes=np.asarray(obj["comment_likes"], dtype=np.int64),
                    publisher_feat=_decode_array(obj["publisher_feat"], binpath, header.d_t),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataParseError(f"records.jsonl line {lineno}: {e}") from e
            violations = validate_record(header, record)
            if violations:
                raise DataValidationError("; ".join(violations))
            records.append(record)
    return header, records


# ---------------------------------------------------------------------------
# Split planning
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """Per-fold train/test assignment of video ids."""

    mode: str
    fold_count: int
    assignments: list[dict[str, str]]  # one dict per fold: video_id -> "train" | "test"

    def fold_records(self, records, fold: int):
        plan = self.assignments[fold]
        train = [r for r in records if plan[r.video_id] == "train"]
        test = [r for r in records if plan[r.video_id] == "test"]
        return train, test


def event_kfold_split(records: list[FeatureRecord], k: int = 5, seed: int = 0) -> SplitPlan:
    """Partition events into k groups; fold i tests on group i and trains on the rest.

    Event ids are sorted then shuffled under the seed, so folds are
    reproducible. Train and test events never overlap within a fold.
    """
    events = sorted({r.event_id for r in records})
    if len(events) < k:
        raise ConfigError(f"need at least {k} distinct events, got {len(events)}")
    rng = np.random.default_rng(seed)
    order = [events[i] for i in rng.permutation(len(events))]
    groups = np.array_split(np.arange(len(order)), k)
    assignments = []
    for g in groups:
        test_events = {order[i] for i in g}
        assignments.append(
            {r.video_id: ("test" if r.event_id in test_events else "train") for r in records}
        )
    return SplitPlan(mode="event-5fold" if k == 5 else f"event-{k}fold", fold_count=k, assignments=assignments)


def temporal_split(records: list[FeatureRecord], train_fraction: float = 0.8) -> SplitPlan:
    """Chronological split: the earliest ``train_fraction`` of records train, the rest test.

    Ties on timestamp break by video_id, so the split is deterministic.
    """
    order = sorted(records, key=lambda r: (r.timestamp, r.video_id))
    n = len(order)
    n_train = int(train_fraction * n)
    if not (1 <= n_train <= n - 1):
        raise ConfigError(
            f"train_fraction {train_fraction} leaves an empty train or test side for {n} records"
        )
    plan = {r.video_id: ("train" if i < n_train else "test") for i, r in enumerate(order)}
    return SplitPlan(mode="temporal", fold_count=1, assignments=[plan])


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def aggregate_comments(comment_feats: np.ndarray, comment_likes: np.ndarray) -> np.ndarray:
    """Like-weighted average of comment vectors with additive smoothing.

    Weights are (likes + 1) normalized to sum to 1, which stays defined when
    every comment has zero likes. Zero comments yield a zero vector.
    """
    k = comment_feats.shape[0]
    if k == 0:
        return np.zeros(comment_feats.shape[1], dtype=np.float64)
    w = np.asarray(comment_likes, dtype=np.float64) + 1.0
    w = w / w.sum()
    return w @ comment_feats


def aggregate_motion(motion_feat: np.ndarray) -> np.ndarray:
    """Column mean of per-frame motion features."""
    if motion_feat.ndim != 2 or motion_feat.shape[0] < 1:
        raise ValueError(f"motion_feat must have at least one row, got shape {motion_feat.shape}")
    return motion_feat.mean(axis=0)


# ---------------------------------------------------------------------------
# Synthetic dataset with controllable distribution shift
# ---------------------------------------------------------------------------


@dataclass
class ShiftConfig:
    """Controls the synthetic generator.

    A fraction of events is marked as shifted: their records get later
    timestamps and all of their modality features receive an event-specific
    perturbation with mean ``mu_shift`` (along fixed per-modality directions)
    and spread ``sigma_shift``. The label signal is planted cross-modally:
    class-marker token ids appear with probability proportional to
    ``signal_strength`` and the same class also displaces audio and keyframe
    features along fixed directions, so masked-token prediction genuinely
    benefits from the other modalities.

    ``shift_class_alignment`` tilts the audio/keyframe shift toward the class
    direction, so unseen events systematically resemble the fake side until
    the representation is re-aligned; 0 keeps the shift in a random fixed
    direction.
    """

    n_events: int = 30
    samples_per_event: int = 8
    class_balance: float = 0.5  # probability of label 1 (fake)
    signal_strength: float = 0.8
    mu_shift: float = 2.4
    sigma_shift: float = 0.25
    shift_fraction: float = 0.2
    shift_class_alignment: float = 0.45
    seed: int = 0


DEFAULT_WIDTHS = dict(d_t=32, d_i=32, d_v=16, d_a=24, vocab_size=64)
DEFAULT_LIMITS = dict(l_max=32, m_max=8, n_max=12, k_max=6)

_EVENT_STD = 0.2
_NOISE_STD = 0.3
_TOKEN_SCALE = 0.8
_AUDIO_GAIN = 1.2
_FRAME_GAIN = 1.2
_WEAK_GAIN = 0.15
_MARKERS_PER_CLASS = 4
_MARKER_PROB = 0.5  # scaled by signal_strength
_TOPIC_TOKENS_PER_EVENT = 8
_BASE_TS = 1_600_000_000
_SHIFT_TS = _BASE_TS + 30 * 86400


def default_header() -> DatasetHeader:
    return DatasetHeader(
        mask_token_id=DEFAULT_WIDTHS["vocab_size"] - 1, **DEFAULT_WIDTHS, **DEFAULT_LIMITS
    )


def synthesize_dataset(cfg: ShiftConfig) -> tuple[DatasetHeader, list[FeatureRecord]]:
    """Generate a labeled dataset with a planted cross-modal signal and optional shift.

    Deterministic given the seed. Shifted events carry strictly later
    timestamps than unshifted ones, so a temporal split at
    ``1 - shift_fraction`` puts exactly the shifted events on the test side.
    """
    if not (0.0 < cfg.class_balance < 1.0):
        raise ConfigError("class_balance must lie strictly inside (0, 1)")
    if cfg.sigma_shift <= 0.0:
        raise ConfigError("sigma_shift must be > 0")
    if not (0.0 <= cfg.shift_fraction < 1.0):
        raise ConfigError("shift_fraction must lie in [0, 1)")
    if not (0.0 <= cfg.shift_class_alignment <= 1.0):
        raise ConfigError("shift_class_alignment must lie in [0, 1]")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")

    header = default_header()
    d_t, d_i, d_v, d_a = header.d_t, header.d_i, header.d_v, header.d_a
    vocab = header.vocab_size
    rng = np.random.default_rng(cfg.seed)

    # Token dictionary and class-marker pools. The mask id is reserved.
    dictionary = rng.normal(0.0, _TOKEN_SCALE, size=(vocab, d_t))
    n_marker = _MARKERS_PER_CLASS
    real_markers = np.arange(0, n_marker)
    fake_markers = np.arange(n_marker, 2 * n_marker)
    common = np.arange(2 * n_marker, vocab - 1)

    def unit(dim):
        u = rng.normal(size=dim)
        return u / np.linalg.norm(u)

    class_dir_audio = unit(d_a)
    class_dir_frame = unit(d_i)
    shift_dirs = {"text": unit(d_t), "frame": unit(d_i), "motion": unit(d_v), "audio": unit(d_a)}
    # Tilt the audio/keyframe shift toward the class direction.
    align = cfg.shift_class_alignment
    ortho = math.sqrt(max(0.0, 1.0 - align**2))
    shift_dirs["audio"] = align * class_dir_audio + ortho * shift_dirs["audio"]
    shift_dirs["frame"] = align * class_dir_frame + ortho * shift_dirs["frame"]

    n_shifted = round(cfg.shift_fraction * cfg.n_events)
    records: list[FeatureRecord] = []
    for e in range(cfg.n_events):
        shifted = e >= cfg.n_events - n_shifted
        proto = {
            "text": rng.normal(0.0, _EVENT_STD, d_t),
            "frame": rng.normal(0.0, _EVENT_STD, d_i),
            "motion": rng.normal(0.0, _EVENT_STD, d_v),
            "audio": rng.normal(0.0, _EVENT_STD, d_a),
        }
        # Modalities are complementary: each event speaks mostly through one
        # of audio/keyframes, so dropping either branch loses signal.
        if rng.random() < 0.5:
            audio_gain, frame_gain = _AUDIO_GAIN, _WEAK_GAIN
        else:
            audio_gain, frame_gain = _WEAK_GAIN, _FRAME_GAIN
        # Each event talks about a small topic vocabulary, which makes masked
        # common tokens predictable from their unmasked context.
        topic_tokens = rng.choice(common, size=_TOPIC_TOKENS_PER_EVENT, replace=False)
        delta = {
            name: cfg.mu_shift * shift_dirs[name] + cfg.sigma_shift * rng.normal(size=len(vec))
            for name, vec in proto.items()
        }
        ts_base = _SHIFT_TS if shifted else _BASE_TS
        for s in range(cfg.samples_per_event):
            label = int(rng.random() < cfg.class_balance)
            sign = 1.0 if label == 1 else -1.0
            markers = fake_markers if label == 1 else real_markers

            l = int(rng.integers(8, 17))
            is_marker = rng.random(l) < _MARKER_PROB * cfg.signal_strength
            tokens = np.where(
                is_marker,
                rng.choice(markers, size=l),
                rng.choice(topic_tokens, size=l),
            ).astype(np.int64)
            text = dictionary[tokens] + proto["text"] + rng.normal(0.0, _NOISE_STD, (l, d_t))

            m = int(rng.integers(4, 7))
            frames = (
                proto["frame"]
                + sign * cfg.signal_strength * frame_gain * class_dir_frame
                + rng.normal(0.0, _NOISE_STD, (m, d_i))
            )
            motion = proto["motion"] + rng.normal(0.0, _NOISE_STD, (m, d_v))

            n = int(rng.integers(6, 11))
            audio = (
                proto["audio"]
                + sign * cfg.signal_strength * audio_gain * class_dir_audio
                + rng.normal(0.0, _NOISE_STD, (n, d_a))
            )

            k = int(rng.integers(0, 5))
            comments = 0.5 * proto["text"] + rng.normal(0.0, _NOISE_STD, (k, d_t))
            likes = rng.integers(0, 50, size=k)
            publisher = rng.normal(0.0, _NOISE_STD, d_t)

            if shifted:
                text = text + delta["text"]
                frames = frames + delta["frame"]
                motion = motion + delta["motion"]
                audio = audio + delta["audio"]
                if k:
                    comments = comments + delta["text"]
                publisher = publisher + delta["text"]

            records.append(
                FeatureRecord(
                    video_id=f"vid{len(records):05d}",
                    event_id=f"ev{e:04d}",
                    timestamp=int(ts_base + e * 3600 + s * 60),
                    label=label,
                    token_ids=tokens.tolist(),
                    text_feat=text,
                    keyframe_feat=frames,
                    motion_feat=motion,
                    audio_feat=audio,
                    comment_feats=comments if k else np.zeros((0, d_t)),
                    comment_likes=likes,
                    publisher_feat=publisher,
                )
            )
    return header, records
