"""Synthetic scenes with planted class-specific glyphs and shared distractors.

Each class owns a fixed set of *unique* glyphs; every scene of that class
carries ``num_unique_per_image`` of them, and their centers are the
ground-truth keypoints. *Repeated* glyphs are drawn independently of the
class and stamped at several places, so detecting them says nothing about
the label. Background is Gaussian noise.

Per-scene randomness comes from ``SeedSequence([seed, split, class, index])``
so any scene can be regenerated on its own.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementError
from .tensor_core import load_tensor, save_tensor

_GLYPH_ART = {
    "cross": ["..#..", "..#..", "#####", "..#..", "..#.."],
    "corner": ["#....", "#....", "#....", "#....", "#####"],
    "tee": ["#####", "..#..", "..#..", "..#..", "..#.."],
    "ring": [".###.", "#...#", "#...#", "#...#", ".###."],
    "ex": ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    "aitch": ["#...#", "#...#", "#####", "#...#", "#...#"],
    "diamond": ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
    "zed": ["#####", "...#.", "..#..", ".#...", "#####"],
    "block": [".....", ".###.", ".###.", ".###.", "....."],
    "bars": ["#.#.#", "#.#.#", "#.#.#", "#.#.#", "#.#.#"],
    "frame": ["#####", "#...#", "#...#", "#...#", "#####"],
    "cup": ["#...#", "#...#", "#...#", "#...#", ".###."],
}

GLYPHS = {name: np.array([[ch == "#" for ch in row] for row in art], dtype=np.float64)
          for name, art in _GLYPH_ART.items()}

DEFAULT_UNIQUE = ("cross", "corner", "tee", "ring", "ex", "aitch", "diamond", "zed")
DEFAULT_REPEATED = ("block", "bars")

TRAIN_SPLIT, TEST_SPLIT = 0, 1
MAX_RESTARTS = 200
MAX_TRIES = 200


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (32, 32)
    num_classes: int = 4
    unique_patterns_per_class: int = 2
    num_unique_per_image: int = 2
    num_repeated_distractors: int = 3
    noise_sigma: float = 0.05
    min_separation: float = 10.0
    unique_glyphs: tuple = DEFAULT_UNIQUE
    repeated_glyphs: tuple = DEFAULT_REPEATED

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "unique_glyphs", tuple(self.unique_glyphs))
        object.__setattr__(self, "repeated_glyphs", tuple(self.repeated_glyphs))
        need = self.num_classes * self.unique_patterns_per_class
        if len(self.unique_glyphs) < need:
            raise ValueError(f"{need} unique glyphs needed, {len(self.unique_glyphs)} given")
        if self.num_unique_per_image > self.unique_patterns_per_class:
            raise ValueError("num_unique_per_image exceeds unique_patterns_per_class")
        if self.num_repeated_distractors and not self.repeated_glyphs:
            raise ValueError("distractors requested but no repeated glyphs given")
        shared = set(self.unique_glyphs) & set(self.repeated_glyphs)
        if shared:
            raise ValueError(f"glyphs cannot be both unique and repeated: {sorted(shared)}")
        for name in self.unique_glyphs + self.repeated_glyphs:
            if name not in GLYPHS:
                raise ValueError(f"unknown glyph {name!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    def class_glyphs(self, class_id: int) -> tuple:
        per = self.unique_patterns_per_class
        return self.unique_glyphs[class_id * per:(class_id + 1) * per]


@dataclass
class SyntheticScene:
    image: np.ndarray                 # [1, h, w]
    label: int
    keypoints: list                   # [(row, col)] of the unique glyph centers
    glyphs: list = field(default_factory=list)        # unique glyph names, same order
    distractors: list = field(default_factory=list)   # repeated glyph names


def _place(rng, n, h, w, margin, min_sep):
    lo_r, hi_r = margin, h - 1 - margin
    lo_c, hi_c = margin, w - 1 - margin
    if hi_r < lo_r or hi_c < lo_c:
        return None
    pts = []
    for _ in range(n):
        for _ in range(MAX_TRIES):
            p = (int(rng.integers(lo_r, hi_r + 1)), int(rng.integers(lo_c, hi_c + 1)))
            if all(np.hypot(p[0] - q[0], p[1] - q[1]) >= min_sep for q in pts):
                pts.append(p)
                break
        else:
            return None
    return pts


def _stamp(img, glyph, center):
    gh, gw = glyph.shape
    r0, c0 = center[0] - gh // 2, center[1] - gw // 2
    region = img[r0:r0 + gh, c0:c0 + gw]
    np.maximum(region, glyph, out=region)


def generate_scene(spec: SceneSpec, class_id: int, seed) -> SyntheticScene:
    """Render one scene of class ``class_id``; deterministic in ``(spec, class_id, seed)``."""
    if not 0 <= class_id < spec.num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {spec.num_classes})")
    rng = np.random.default_rng(seed)
    h, w = spec.image_size
    owned = spec.class_glyphs(class_id)
    if spec.num_unique_per_image == len(owned):
        unique = list(owned)
    else:
        pick = np.sort(rng.choice(len(owned), spec.num_unique_per_image, replace=False))
        unique = [owned[i] for i in pick]
    distract = [spec.repeated_glyphs[int(i)]
                for i in rng.integers(0, len(spec.repeated_glyphs), spec.num_repeated_distractors)]
    names = unique + distract
    margin = max(max(GLYPHS[n].shape) for n in names) // 2 if names else 0

    for _ in range(MAX_RESTARTS):
        centers = _place(rng, len(names), h, w, margin, spec.min_separation)
        if centers is not None:
            break
    else:
        raise PlacementError(f"could not place {len(names)} glyphs {spec.min_separation} px apart "
                             f"in a {h}x{w} image")

    img = np.zeros((h, w))
    for name, ctr in zip(names, centers):
        _stamp(img, GLYPHS[name], ctr)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return SyntheticScene(image=img[None], label=int(class_id),
                          keypoints=centers[:len(unique)], glyphs=unique, distractors=distract)


def scene_seed(seed: int, split: int, class_id: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(split), int(class_id), int(index)])


def generate_split(spec: SceneSpec, n_per_class: int, seed: int, split: int) -> list:
    """Scenes ordered index-major, so labels cycle 0, 1, ..., C-1, 0, ..."""
    return [generate_scene(spec, c, scene_seed(seed, split, c, j))
            for j in range(n_per_class) for c in range(spec.num_classes)]


def generate_dataset(spec: SceneSpec, n_per_class: int, seed: int, n_test_per_class=None):
    """Return ``(train, test)`` scene lists drawn from disjoint seed streams."""
    if n_test_per_class is None:
        n_test_per_class = n_per_class
    return (generate_split(spec, n_per_class, seed, TRAIN_SPLIT),
            generate_split(spec, n_test_per_class, seed, TEST_SPLIT))


def stack_scenes(scenes):
    """``(images[N, 1, h, w], labels[N])`` for a scene list."""
    if not scenes:
        return np.zeros((0, 1, 0, 0)), np.zeros(0, dtype=np.int64)
    return (np.stack([s.image for s in scenes]),
            np.array([s.label for s in scenes], dtype=np.int64))


def write_split(out_dir, name: str, scenes) -> Path:
    """Store images as LMPT1 tensors and write ``<name>_manifest.json``."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(scenes):
        rel = f"images/{name}_{i:05d}.lmpt"
        save_tensor(out_dir / rel, s.image)
        manifest.append({"path": rel, "label": s.label,
                         "keypoints": [list(map(int, kp)) for kp in s.keypoints]})
    path = out_dir / f"{name}_manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_split(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text())
    return [SyntheticScene(image=load_tensor(manifest_path.parent / e["path"]),
                           label=int(e["label"]),
                           keypoints=[tuple(kp) for kp in e["keypoints"]])
            for e in entries]
