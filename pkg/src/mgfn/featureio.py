"""Dataset manifests, binary feature/mask files, clip segmentation, checkpoints.

On-disk formats (all little-endian):

* feature file: magic ``MGFN``, u32 version=1, u32 N, u32 P, u32 C, then
  N*P*C float32 values, row-major with N outermost and C innermost
* mask file: ``frame_count`` raw bytes, each 0 or 1
* manifest: JSON with version, split tag, dims {P, C} and a video array of
  {id, label, path, frame_count, mask_path?}; paths relative to the manifest
* checkpoint: magic ``MGCK``, u32 version, a JSON metadata block, then named
  float32 parameter blobs and named float64 optimizer blobs

Model parameters are quantized to float32 once at save time; optimizer
moments stay at float64 so a resumed run continues deterministically.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError, ManifestError
from .tensor import Tensor

FEATURE_MAGIC = b"MGFN"
CHECKPOINT_MAGIC = b"MGCK"
FORMAT_VERSION = 1


def worker_count(default: int = 4) -> int:
    """Worker cap for parallel file loading, from the MGFN_THREADS env var."""
    raw = os.environ.get("MGFN_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = default
    return max(1, n)


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class VideoRecord:
    """One video: snippet features, video-level label, optional frame mask."""

    id: str
    label: int  # 0 normal, 1 abnormal
    snippets: Tensor  # [N, P, C]
    frame_count: int
    frame_mask: np.ndarray | None = None  # uint8[frame_count], 1 = abnormal frame

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"video {self.id}: label must be 0 or 1, got {self.label}")
        if self.snippets.data.ndim != 3 or self.snippets.shape[0] < 1:
            raise DataError(f"video {self.id}: snippets must be [N,P,C] with N >= 1")
        if self.frame_mask is not None:
            if len(self.frame_mask) != self.frame_count:
                raise DataError(f"video {self.id}: mask length {len(self.frame_mask)} "
                                f"!= frame_count {self.frame_count}")
            if self.label == 0 and self.frame_mask.any():
                raise DataError(f"video {self.id}: normal video with abnormal mask frames")


@dataclass
class ManifestEntry:
    id: str
    label: int
    path: Path
    frame_count: int
    mask_path: Path | None = None
    snippet_count: int = 0  # filled from the feature header at load


@dataclass
class DatasetManifest:
    split: str
    crops: int  # P
    channels: int  # C
    videos: list = field(default_factory=list)
    version: int = FORMAT_VERSION

    def by_label(self, label: int):
        return [v for v in self.videos if v.label == label]


@dataclass
class ScoreSeries:
    """Per-frame anomaly scores for one video."""

    frame_scores: np.ndarray
    video_id: str = ""


@dataclass
class Checkpoint:
    """Serializable model + optimizer snapshot."""

    arch: dict
    params: dict  # name -> float64 ndarray (float32 on disk)
    opt_state: dict = field(default_factory=dict)  # name -> float64 ndarray
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Feature and mask files


def write_features(path, snippets: np.ndarray):
    """Write an [N, P, C] array as a feature file (values stored as f32)."""
    arr = np.ascontiguousarray(snippets, dtype=np.float32)
    if arr.ndim != 3:
        raise DataError(f"feature array must be [N,P,C], got shape {arr.shape}")
    n, p, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION, n, p, c))
        fh.write(arr.astype("<f4").tobytes())


def read_feature_header(path):
    """Return (N, P, C) from a feature file without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(20)
    if len(head) < 20 or head[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    version, n, p, c = struct.unpack("<IIII", head[4:20])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported feature version {version}")
    return n, p, c


def read_features(path) -> np.ndarray:
    n, p, c = read_feature_header(path)
    with open(path, "rb") as fh:
        fh.seek(20)
        payload = fh.read()
    expect = n * p * c * 4
    if len(payload) != expect:
        raise DataError(f"{path}: truncated payload ({len(payload)} bytes, expected {expect})")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, p, c)


def write_mask(path, mask: np.ndarray):
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise DataError("mask values must be 0 or 1")
    with open(path, "wb") as fh:
        fh.write(arr.astype(np.uint8).tobytes())


def read_mask(path, frame_count: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != frame_count:
        raise DataError(f"{path}: mask has {len(raw)} bytes, expected {frame_count}")
    mask = np.frombuffer(raw, dtype=np.uint8)
    if not np.isin(mask, (0, 1)).all():
        raise DataError(f"{path}: mask bytes outside {{0, 1}}")
    return mask


# ---------------------------------------------------------------------------
# Manifests


def write_manifest(path, split: str, crops: int, channels: int, videos: list):
    """``videos`` holds dicts with id/label/path/frame_count and optional
    mask_path; paths must be relative to the manifest location."""
    doc = {
        "version": FORMAT_VERSION,
        "split": split,
        "dims": {"P": crops, "C": channels},
        "videos": videos,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("version", "split", "dims", "videos"):
        if key not in doc:
            raise ManifestError(f"{path}: missing key '{key}'")
    dims = doc["dims"]
    crops, channels = int(dims["P"]), int(dims["C"])
    manifest = DatasetManifest(split=str(doc["split"]), crops=crops, channels=channels,
                               version=int(doc["version"]))
    seen = set()
    root = path.parent
    for raw in doc["videos"]:
        vid = str(raw["id"])
        if vid in seen:
            raise ManifestError(f"{path}: duplicate video id '{vid}'")
        seen.add(vid)
        fpath = root / raw["path"]
        if not fpath.exists():
            raise ManifestError(f"{path}: entry '{vid}' points to missing file {fpath}")
        n, p, c = read_feature_header(fpath)
        if (p, c) != (crops, channels):
            raise ManifestError(f"{path}: entry '{vid}' has dims P={p},C={c}, "
                                f"manifest declares P={crops},C={channels}")
        mask_path = None
        if raw.get("mask_path"):
            mask_path = root / raw["mask_path"]
            if not mask_path.exists():
                raise ManifestError(f"{path}: entry '{vid}' mask missing: {mask_path}")
        manifest.videos.append(ManifestEntry(
            id=vid, label=int(raw["label"]), path=fpath,
            frame_count=int(raw["frame_count"]), mask_path=mask_path,
            snippet_count=n))
    return manifest


def load_record(entry: ManifestEntry) -> VideoRecord:
    snippets = read_features(entry.path)
    mask = None
    if entry.mask_path is not None:
        mask = read_mask(entry.mask_path, entry.frame_count)
    return VideoRecord(id=entry.id, label=entry.label, snippets=Tensor(snippets),
                       frame_count=entry.frame_count, frame_mask=mask)


def load_records(manifest: DatasetManifest) -> list:
    """Load every video of a manifest, reading files on a small thread pool."""
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(load_record, manifest.videos))


# ---------------------------------------------------------------------------
# Clip segmentation and frame expansion


def _partition_bounds(n: int, groups: int):
    return [n * t // groups for t in range(groups + 1)]


def segment_to_clips(record: VideoRecord, clips: int) -> Tensor:
    """Pool N snippets into ``clips`` contiguous mean-pooled groups.

    Group t covers snippets [floor(N*t/clips), floor(N*(t+1)/clips)). When the
    video is shorter than the clip count the snippet nearest to each clip
    center is repeated instead.
    """
    if clips < 1:
        raise DataError(f"clip count must be >= 1, got {clips}")
    x = record.snippets.data
    n = x.shape[0]
    if n >= clips:
        bounds = _partition_bounds(n, clips)
        out = np.stack([x[bounds[t]:bounds[t + 1]].mean(axis=0) for t in range(clips)])
    else:
        idx = np.minimum(((np.arange(clips) + 0.5) * n / clips).astype(np.intp), n - 1)
        out = x[idx]
    return Tensor(out)


def expand_scores_to_frames(clip_scores, frame_count: int) -> ScoreSeries:
    """Piecewise-constant expansion of clip scores to a frame series.

    Frames are partitioned into T groups by the same rule as
    :func:`segment_to_clips`; every frame in group t receives clip score t.
    """
    s = clip_scores.data if isinstance(clip_scores, Tensor) else np.asarray(clip_scores, dtype=np.float64)
    s = s.reshape(-1)
    t = s.size
    if frame_count < 1:
        raise DataError("frame_count must be >= 1")
    if frame_count >= t:
        bounds = _partition_bounds(frame_count, t)
        frames = np.empty(frame_count)
        for i in range(t):
            frames[bounds[i]:bounds[i + 1]] = s[i]
    else:
        idx = np.minimum(((np.arange(frame_count) + 0.5) * t / frame_count).astype(np.intp), t - 1)
        frames = s[idx]
    return ScoreSeries(frame_scores=frames)


# ---------------------------------------------------------------------------
# Checkpoints


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(path, ckpt: Checkpoint):
    meta = {
        "arch": ckpt.arch,
        "seed": int(ckpt.seed),
        "step": int(ckpt.step),
        "extra": ckpt.extra,
    }
    blob = _canonical_json(meta)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name, arr in ckpt.params.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())
        fh.write(struct.pack("<I", len(ckpt.opt_state)))
        for name, arr in ckpt.opt_state.items():
            encoded = name.encode()
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            data = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())


class _Reader:
    def __init__(self, path):
        self.path = path
        self.buf = Path(path).read_bytes()
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path) -> Checkpoint:
    rd = _Reader(path)
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(rd.take(rd.u32()).decode())
    params = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode()
        count = rd.u64()
        params[name] = np.frombuffer(rd.take(count * 4), dtype="<f4").astype(np.float64)
    opt_state = {}
    for _ in range(rd.u32()):
        name = rd.take(rd.u32()).decode()
        count = rd.u64()
        opt_state[name] = np.frombuffer(rd.take(count * 8), dtype="<f8").copy()
    if rd.pos != len(rd.buf):
        raise CheckpointError(f"{path}: {len(rd.buf) - rd.pos} trailing bytes")
    return Checkpoint(arch=meta["arch"], params=params, opt_state=opt_state,
                      seed=meta["seed"], step=meta["step"], extra=meta.get("extra", {}))
