"""Deterministic synthetic clip-feature datasets with controllable scene movement.

Each scene has a fixed unit direction scaled by its base magnitude; snippets
add Gaussian noise, and abnormal videos add a boost along a second direction
inside a window of frames. Because the base magnitude is a per-scene knob,
datasets can be built where every normal snippet of a busy scene has a larger
feature norm than any abnormal snippet of a quiet one, which is exactly the
cross-scene confound the magnitude-contrastive objective is meant to survive.

The ``fig2`` preset builds that confound; ``balanced`` uses equal base
magnitudes so both training objectives should work; ``micro`` emits a tiny
fixture for gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .featureio import write_features, write_manifest, write_mask

FRAMES_PER_SNIPPET = 16


@dataclass
class SceneSpec:
    name: str
    base_magnitude: float
    noise_scale: float
    anomaly_boost: float
    n_normal: int
    n_abnormal: int
    snippets_per_video: int
    anomaly_window: tuple = (0.35, 0.65)  # fractions of the video
    anomaly_direction: np.ndarray | None = None  # unit vector in R^C, drawn if None
    anomaly_along_scene: bool = False  # boost along the scene direction (a pure
    # within-video magnitude jump, detectable only against the video context)
    direction_group: str = ""  # scenes sharing a non-empty group share a direction

    def __post_init__(self):
        if self.base_magnitude <= 0:
            raise ConfigError(f"scene {self.name}: base_magnitude must be > 0")
        lo, hi = self.anomaly_window
        if not (0.0 <= lo < hi <= 1.0):
            raise ConfigError(f"scene {self.name}: anomaly window {self.anomaly_window} "
                              f"outside [0, 1]")


@dataclass
class Preset:
    scenes: list
    crops: int
    channels: int


def preset(name: str) -> Preset:
    """Named scene collections: 'fig2', 'balanced' or 'micro'."""
    if name == "fig2":
        # Three scenes sharing one content direction at movement levels
        # 14 / 6.6 / 3; all abnormal videos live in the quietest scene and
        # their anomalies are within-video magnitude jumps (3 -> 6.6). A
        # 6.6-level clip is therefore normal in the midtown scene but
        # abnormal in the quiet one, so absolute level never suffices and
        # clip scores need the video context. Every busy-scene magnitude
        # also exceeds every quiet-scene one including the anomalies, so
        # objectives that push abnormal magnitudes globally above normal
        # ones fight the data.
        return Preset(scenes=[
            SceneSpec("busy", base_magnitude=14.0, noise_scale=0.3, anomaly_boost=0.0,
                      n_normal=15, n_abnormal=0, snippets_per_video=64,
                      anomaly_window=(0.3, 0.7), direction_group="street"),
            SceneSpec("midtown", base_magnitude=6.6, noise_scale=0.3, anomaly_boost=0.0,
                      n_normal=15, n_abnormal=0, snippets_per_video=64,
                      anomaly_window=(0.3, 0.7), direction_group="street"),
            SceneSpec("quiet", base_magnitude=3.0, noise_scale=0.3, anomaly_boost=3.6,
                      n_normal=0, n_abnormal=30, snippets_per_video=64,
                      anomaly_window=(0.3, 0.7), anomaly_along_scene=True,
                      direction_group="street"),
        ], crops=2, channels=256)
    if name == "balanced":
        # Equal base magnitudes, anomalies jump above every normal level:
        # no cross-scene confound, so global and contrastive magnitude
        # objectives should both work.
        return Preset(scenes=[
            SceneSpec("alpha", base_magnitude=8.0, noise_scale=0.15, anomaly_boost=4.5,
                      n_normal=15, n_abnormal=15, snippets_per_video=64,
                      anomaly_window=(0.3, 0.7), anomaly_along_scene=True),
            SceneSpec("beta", base_magnitude=8.0, noise_scale=0.15, anomaly_boost=4.5,
                      n_normal=15, n_abnormal=15, snippets_per_video=64,
                      anomaly_window=(0.3, 0.7), anomaly_along_scene=True),
        ], crops=2, channels=256)
    if name == "micro":
        # Gradient-check fixture dims: clips are segmented to T=4, P=2, C=64.
        return Preset(scenes=[
            SceneSpec("tiny", base_magnitude=10.0, noise_scale=0.5, anomaly_boost=5.0,
                      n_normal=4, n_abnormal=4, snippets_per_video=8),
        ], crops=2, channels=64)
    raise ConfigError(f"unknown preset '{name}' (expected fig2, balanced or micro)")


def _unit_vector(rng, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate(scenes, crops: int, channels: int, seed: int, out_dir,
             test_fraction: float = 1.0 / 3.0,
             frames_per_snippet: int = FRAMES_PER_SNIPPET):
    """Write feature files, masks and train/test manifests under ``out_dir``.

    Returns ``(train_manifest_path, test_manifest_path)``. Fully
    deterministic for a given seed; masks are written for the test split
    only (training supervision is video-level by construction).
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))

    train_entries, test_entries = [], []
    group_directions = {}
    for scene in scenes:
        if scene.direction_group and scene.direction_group in group_directions:
            direction = group_directions[scene.direction_group]
        else:
            direction = _unit_vector(rng, channels)
            if scene.direction_group:
                group_directions[scene.direction_group] = direction
        if scene.anomaly_along_scene:
            anomaly_dir = direction
        else:
            anomaly_dir = scene.anomaly_direction
            if anomaly_dir is None:
                anomaly_dir = _unit_vector(rng, channels)
            elif anomaly_dir.shape != (channels,):
                raise DataError(f"scene {scene.name}: anomaly_direction must be length {channels}")
        for label, count in ((0, scene.n_normal), (1, scene.n_abnormal)):
            n_test = int(round(count * test_fraction))
            for i in range(count):
                vid = f"{scene.name}_{'a' if label else 'n'}{i:03d}"
                n = scene.snippets_per_video
                frames = n * frames_per_snippet
                snippets = (scene.base_magnitude * direction
                            + scene.noise_scale * rng.standard_normal((n, crops, channels)))
                mask = np.zeros(frames, dtype=np.uint8)
                if label == 1:
                    lo = math.floor(scene.anomaly_window[0] * frames)
                    hi = math.floor(scene.anomaly_window[1] * frames)
                    mask[lo:hi] = 1
                    for s in range(n):
                        s_lo, s_hi = s * frames_per_snippet, (s + 1) * frames_per_snippet
                        if s_lo < hi and s_hi > lo:
                            snippets[s] += scene.anomaly_boost * anomaly_dir
                write_features(out_dir / "features" / f"{vid}.mgfn", snippets)
                entry = {"id": vid, "label": label,
                         "path": f"features/{vid}.mgfn", "frame_count": frames}
                if i >= count - n_test:
                    write_mask(out_dir / "masks" / f"{vid}.mask", mask)
                    entry["mask_path"] = f"masks/{vid}.mask"
                    test_entries.append(entry)
                else:
                    train_entries.append(entry)

    train_path = out_dir / "train.json"
    test_path = out_dir / "test.json"
    write_manifest(train_path, "train", crops, channels, train_entries)
    write_manifest(test_path, "test", crops, channels, test_entries)
    return train_path, test_path


def generate_preset(name: str, seed: int, out_dir):
    p = preset(name)
    return generate(p.scenes, p.crops, p.channels, seed, out_dir)
