"""Deterministic multimodal scene synthesis.

Each scene partitions the H x W grid into axis-aligned rectangles (a
guillotine split, so every pixel belongs to exactly one class), assigns
distinct classes, and writes a per-class one-hot signature into the feature
channels of whichever modalities that class is visible in. A class visible
only in one modality leaves the other modality's features at zero (plus
noise when noise_sigma > 0), which is what forces the completion stage of
the matcher to fire and makes single-modality evaluation informative.

All randomness comes from a splitmix64 stream seeded by seed XOR index, so
scenes are bit-reproducible and cheap to regenerate anywhere.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costs import GroundTruthSet
from .errors import ConfigError, GenerationError

_MASK64 = 0xFFFFFFFFFFFFFFFF
_MIN_SIDE = 2
_PLACEMENT_ATTEMPTS = 1000

VISIBILITY_TAGS = ("r", "x", "both")


class SplitMix64:
    """Tiny portable PRNG; identical streams across platforms."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._gauss_spare: float | None = None

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) / float(1 << 53)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)

    def normal(self) -> float:
        """Standard normal via Box-Muller, one spare cached."""
        if self._gauss_spare is not None:
            out = self._gauss_spare
            self._gauss_spare = None
            return out
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._gauss_spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def sample(self, pool: list, count: int) -> list:
        """Partial Fisher-Yates draw of count distinct items."""
        pool = list(pool)
        out = []
        for _ in range(count):
            j = self.randint(len(pool))
            out.append(pool.pop(j))
        return out


@dataclass
class SynthConfig:
    h: int = 24
    w: int = 24
    k: int = 6
    cf: int = 8
    visibility: dict[int, str] = field(default_factory=lambda: {
        1: "r", 2: "r", 3: "x", 4: "x", 5: "both", 6: "both"})
    noise_sigma: float = 0.0
    shapes_min: int = 3
    shapes_max: int = 6
    seed: int = 0

    def __post_init__(self):
        for c in range(1, self.k + 1):
            tag = self.visibility.get(c)
            if tag is None:
                raise ConfigError(f"visibility missing for class {c}")
            if tag not in VISIBILITY_TAGS:
                raise ConfigError(f"visibility for class {c} must be one of "
                                  f"{VISIBILITY_TAGS}, got {tag!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 1 <= self.shapes_min <= self.shapes_max <= self.k:
            raise ConfigError("need 1 <= shapes_min <= shapes_max <= k")
        if self.cf < self.k:
            raise ConfigError("need at least one feature channel per class")


@dataclass
class Scene:
    feat_r: np.ndarray   # cf x H x W
    feat_x: np.ndarray   # cf x H x W
    gt: GroundTruthSet
    present: tuple[bool, bool] = (True, True)


def _partition(rng: SplitMix64, h: int, w: int, count: int) -> list[tuple[int, int, int, int]]:
    """Split the grid into count rectangles (top, left, height, width)."""
    for _ in range(_PLACEMENT_ATTEMPTS):
        rects = [(0, 0, h, w)]
        ok = True
        while len(rects) < count:
            # Split the largest splittable rectangle along its longer side.
            order = sorted(range(len(rects)),
                           key=lambda i: (-rects[i][2] * rects[i][3], rects[i][:2]))
            chosen = None
            for i in order:
                top, left, rh, rw = rects[i]
                if max(rh, rw) >= 2 * _MIN_SIDE:
                    chosen = i
                    break
            if chosen is None:
                ok = False
                break
            top, left, rh, rw = rects.pop(chosen)
            if rh >= rw:
                cut = _MIN_SIDE + rng.randint(rh - 2 * _MIN_SIDE + 1)
                rects.append((top, left, cut, rw))
                rects.append((top + cut, left, rh - cut, rw))
            else:
                cut = _MIN_SIDE + rng.randint(rw - 2 * _MIN_SIDE + 1)
                rects.append((top, left, rh, cut))
                rects.append((top, left + cut, rh, rw - cut))
        if ok:
            return rects
    raise GenerationError(
        f"could not partition a {h}x{w} grid into {count} rectangles of "
        f"side >= {_MIN_SIDE} after {_PLACEMENT_ATTEMPTS} attempts")


def generate_scene(cfg: SynthConfig, index: int) -> Scene:
    """Deterministic scene for (cfg.seed, index)."""
    rng = SplitMix64(cfg.seed ^ index)
    count = cfg.shapes_min + rng.randint(cfg.shapes_max - cfg.shapes_min + 1)
    classes = sorted(rng.sample(list(range(1, cfg.k + 1)), count))
    rects = _partition(rng, cfg.h, cfg.w, count)
    # Shared-visibility classes take the largest pieces, modality-exclusive
    # classes the smallest: each modality's featureless area (the other
    # side's exclusive regions) stays small, so a real specialist always
    # out-scores a query bluffing about an invisible class at matching time.
    # The two exclusive groups are interleaved with a per-scene coin flip so
    # neither modality's classes systematically land on larger pieces.
    rects.sort(key=lambda r: (-(r[2] * r[3]), r[0], r[1]))
    groups = {"both": [], "r": [], "x": []}
    for c in classes:
        groups[cfg.visibility[c]].append(c)
    first, second = ((groups["r"], groups["x"]) if rng.randint(2) == 0
                     else (groups["x"], groups["r"]))
    exclusive = []
    for i in range(max(len(first), len(second))):
        exclusive.extend(lst[i] for lst in (first, second) if i < len(lst))
    ordered = groups["both"] + exclusive

    items = []
    feat_r = np.zeros((cfg.cf, cfg.h, cfg.w))
    feat_x = np.zeros((cfg.cf, cfg.h, cfg.w))
    for cls, (top, left, rh, rw) in zip(ordered, rects):
        mask = np.zeros((cfg.h, cfg.w))
        mask[top:top + rh, left:left + rw] = 1.0
        items.append((cls, mask))
        tag = cfg.visibility[cls]
        if tag in ("r", "both"):
            feat_r[cls - 1, top:top + rh, left:left + rw] = 1.0
        if tag in ("x", "both"):
            feat_x[cls - 1, top:top + rh, left:left + rw] = 1.0

    if cfg.noise_sigma > 0.0:
        for feat in (feat_r, feat_x):
            flat = feat.ravel()
            for i in range(flat.size):
                flat[i] += cfg.noise_sigma * rng.normal()

    items.sort(key=lambda item: item[0])
    gt = GroundTruthSet(cfg.h, cfg.w, cfg.k, items)
    return Scene(feat_r, feat_x, gt)


# -- serialization ----------------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths over the row-major bits, alternating 0-runs and 1-runs,
    starting with a (possibly zero-length) 0-run."""
    flat = mask.ravel().astype(np.int64)
    runs = []
    current = 0
    length = 0
    for bit in flat:
        if bit == current:
            length += 1
        else:
            runs.append(length)
            current = 1 - current
            length = 1
    runs.append(length)
    return [int(r) for r in runs]


def rle_decode(runs: list[int], h: int, w: int) -> np.ndarray:
    flat = np.zeros(h * w)
    pos = 0
    for i, run in enumerate(runs):
        if not isinstance(run, int) or run < 0:
            raise ConfigError(f"malformed mask RLE at offset {i}: {run!r}")
        if i % 2 == 1:
            flat[pos:pos + run] = 1.0
        pos += run
    if pos != h * w:
        raise ConfigError(
            f"malformed mask RLE at offset {len(runs)}: covers {pos} of {h * w} pixels")
    return flat.reshape(h, w)


def scene_to_json(scene: Scene) -> dict:
    gt = scene.gt
    return {
        "h": gt.h,
        "w": gt.w,
        "k": gt.k,
        "cf": int(scene.feat_r.shape[0]),
        "feat_r": [float(v) for v in scene.feat_r.ravel()],
        "feat_x": [float(v) for v in scene.feat_x.ravel()],
        "gt": [{"class": c, "mask_rle": rle_encode(m)} for c, m in gt.items],
        "present": {"r": bool(scene.present[0]), "x": bool(scene.present[1])},
    }


def scene_from_json(obj: dict) -> Scene:
    try:
        h, w, k, cf = obj["h"], obj["w"], obj["k"], obj["cf"]
        feat_r = np.array(obj["feat_r"], dtype=np.float64).reshape(cf, h, w)
        feat_x = np.array(obj["feat_x"], dtype=np.float64).reshape(cf, h, w)
        items = [(entry["class"], rle_decode(entry["mask_rle"], h, w))
                 for entry in obj["gt"]]
        present = (bool(obj["present"]["r"]), bool(obj["present"]["x"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scene payload: {exc}") from exc
    return Scene(feat_r, feat_x, GroundTruthSet(h, w, k, items), present)


def generate_benchmark(cfg: SynthConfig, n_scenes: int,
                       start_index: int = 0) -> list[Scene]:
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    return [generate_scene(cfg, start_index + i) for i in range(n_scenes)]


def write_benchmark(cfg: SynthConfig, n_train: int, n_test: int,
                    out_dir: str | Path) -> dict:
    """Write train/test scene files plus a manifest with a content digest."""
    out = Path(out_dir)
    digest = hashlib.sha256()
    files = []
    for split, count, start in (("train", n_train, 0),
                                ("test", n_test, n_train)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            scene = generate_scene(cfg, start + i)
            payload = json.dumps(scene_to_json(scene)).encode()
            digest.update(payload)
            path = split_dir / f"scene_{start + i:04d}.json"
            path.write_bytes(payload)
            files.append(str(path.relative_to(out)))
    manifest = {
        "config": {
            "h": cfg.h, "w": cfg.w, "k": cfg.k, "cf": cfg.cf,
            "visibility": {str(c): tag for c, tag in sorted(cfg.visibility.items())},
            "noise_sigma": cfg.noise_sigma,
            "shapes_min": cfg.shapes_min, "shapes_max": cfg.shapes_max,
            "seed": cfg.seed,
        },
        "n_train": n_train,
        "n_test": n_test,
        "digest": digest.hexdigest(),
        "files": files,
    }
    (out / "manifest.json").write_bytes(json.dumps(manifest, indent=1).encode())
    return manifest


def load_split(data_dir: str | Path, split: str) -> list[Scene]:
    split_dir = Path(data_dir) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no {split!r} split under {data_dir}")
    scenes = []
    for path in sorted(split_dir.glob("scene_*.json")):
        scenes.append(scene_from_json(json.loads(path.read_text())))
    return scenes
