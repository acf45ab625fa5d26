"""Extraction pipeline: manifest in, detector-format dataset directory out.

Per-video failures become error entries and the batch continues; the output
directory is valid whenever at least one video extracted cleanly. The writer
emits the detector's on-disk interface directly (``header.json`` +
``records.jsonl``, optionally with a ``records.f32bin`` sidecar) so the
detector package is not a runtime dependency.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .encoders import get_encoder
from .manifest import ExtractionManifest, ManifestError, VideoEntry, load_manifest
from .media import MediaError, load_audio, load_frames


def extract_text(entry: VideoEntry, frames, text_enc, ocr_enc, l_max: int):
    """Title plus whatever OCR recovers, tokenized and embedded; l >= 1."""
    composed = (ocr_enc.read(frames) + " " + entry.title).strip()
    ids = text_enc.tokenize(composed)
    if not ids:
        ids = text_enc.tokenize("untitled")
    ids = ids[:l_max]
    return ids, text_enc.encode_ids(ids)


def extract_visual(entry: VideoEntry, frames, visual_enc):
    """Static keyframe features and per-frame motion summaries."""
    return visual_enc.encode(frames)


def extract_audio(entry: VideoEntry, manifest: ExtractionManifest, audio_enc, warnings: list):
    """Audio frame features; silent or missing tracks yield one zero frame."""
    d_a = audio_enc.d_a
    if not entry.audio:
        warnings.append(f"{entry.video_id}: no audio track, using one zero frame")
        return np.zeros((1, d_a))
    samples, rate = load_audio(manifest.resolve(entry.audio))
    rows = audio_enc.encode(samples, rate)
    if rows.shape[0] == 0:
        warnings.append(f"{entry.video_id}: silent or too-short audio, using one zero frame")
        return np.zeros((1, d_a))
    return rows


def extract_social(entry: VideoEntry, text_enc, k_max: int):
    """Comment embeddings with like counts, and the pooled publisher blurb."""
    comments = entry.comments[:k_max]
    if comments:
        feats = np.stack([text_enc.pool(str(c.get("text", ""))) for c in comments])
        likes = np.array([max(0, int(c.get("likes", 0))) for c in comments], dtype=np.int64)
    else:
        feats = np.zeros((0, text_enc.d_t))
        likes = np.zeros(0, dtype=np.int64)
    publisher = text_enc.pool(entry.publisher)
    return feats, likes, publisher


def extract_record(entry: VideoEntry, manifest: ExtractionManifest, encoders, warnings: list) -> dict:
    output = manifest.output
    frames = load_frames(manifest.resolve(entry.video), int(output["m_max"]))
    token_ids, text_feat = extract_text(entry, frames, encoders["text"], encoders["ocr"], int(output["l_max"]))
    keyframe_feat, motion_feat = extract_visual(entry, frames, encoders["visual"])
    audio_feat = extract_audio(entry, manifest, encoders["audio"], warnings)
    comment_feats, comment_likes, publisher_feat = extract_social(entry, encoders["text"], int(output["k_max"]))
    return {
        "video_id": entry.video_id,
        "event_id": entry.event_id,
        "timestamp": int(entry.timestamp),
        "label": int(entry.label),
        "token_ids": [int(t) for t in token_ids],
        "text_feat": text_feat,
        "keyframe_feat": keyframe_feat,
        "motion_feat": motion_feat,
        "audio_feat": audio_feat,
        "comment_feats": comment_feats,
        "comment_likes": comment_likes,
        "publisher_feat": publisher_feat,
    }


_MATRIX_FIELDS = ("text_feat", "keyframe_feat", "motion_feat", "audio_feat", "comment_feats", "publisher_feat")


def _write_records(out_dir: str, header: dict, records: list[dict], float_mode: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "header.json"), "w") as f:
        json.dump(header, f, indent=2)
        f.write("\n")
    binfile = open(os.path.join(out_dir, "records.f32bin"), "wb") if float_mode == "f32bin" else None
    try:
        with open(os.path.join(out_dir, "records.jsonl"), "w") as f:
            for rec in records:
                obj = dict(rec)
                for field in _MATRIX_FIELDS:
                    arr = np.asarray(obj[field], dtype=np.float64)
                    if binfile is None:
                        obj[field] = arr.tolist()
                    else:
                        offset = binfile.tell()
                        binfile.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
                        obj[field] = {"offset": offset, "shape": list(arr.shape)}
                obj["comment_likes"] = [int(x) for x in rec["comment_likes"]]
                f.write(json.dumps(obj) + "\n")
    finally:
        if binfile is not None:
            binfile.close()


def extract_all(manifest_path: str, out_dir: str, float_mode: str = "jsonl") -> dict:
    """Run every manifest entry, write the dataset directory, report errors.

    Returns a summary dict that is also written to ``extraction_report.json``:
    written/error counts, per-video error messages, warnings, and the encoder
    versions used.
    """
    manifest = load_manifest(manifest_path)
    families = ("text", "ocr", "visual", "audio")
    encoders = {fam: get_encoder(fam, manifest.encoders[fam], manifest.output) for fam in families}

    records = []
    errors = []
    warnings: list[str] = []
    for entry in manifest.videos:
        try:
            records.append(extract_record(entry, manifest, encoders, warnings))
        except (MediaError, OSError, ValueError) as e:
            errors.append({"video_id": entry.video_id, "error": str(e)})
    if not records:
        raise ManifestError("every manifest entry failed to extract")

    header = dict(manifest.output)
    header["format_version"] = 1
    _write_records(out_dir, header, records, float_mode)
    report = {
        "written": len(records),
        "errors": errors,
        "warnings": warnings,
        "encoders": {fam: manifest.encoders[fam] for fam in families},
        "float_mode": float_mode,
    }
    with open(os.path.join(out_dir, "extraction_report.json"), "w") as f:
        json.dump(report, f, indent=2)
    return report
