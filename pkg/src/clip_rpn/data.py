"""Paired rainy/clean datasets, ground-truth rain masks, and synthetic rain.

Directory convention: ``<root>/rain/<id>.png`` holds the rainy image and
``<root>/norain/<id>.png`` the aligned clean reference. Manifests are JSON
lines, one ``{"id", "rainy", "clean"}`` object per entry.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging

SOURCE_TAGS = ("rain100l", "rain100h", "rain800", "mixed", "synthetic")

GT_MASK_THRESHOLD = 0.1


@dataclass
class ImagePair:
    """A rainy image and its aligned clean reference."""

    rainy: np.ndarray
    clean: np.ndarray
    id: str

    def __post_init__(self) -> None:
        if np.shape(self.rainy) != np.shape(self.clean):
            raise ValueError(
                f"pair {self.id!r}: rainy shape {np.shape(self.rainy)} != "
                f"clean shape {np.shape(self.clean)}"
            )


@dataclass
class RainMask:
    """Per-pixel rain indicator: binary ground truth or predicted confidence."""

    values: np.ndarray
    kind: str  # "binary_gt" | "predicted"
    level: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("binary_gt", "predicted"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.level not in (0, 1, 2):
            raise ValueError(f"mask level must be 0, 1, or 2, got {self.level}")
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-d, got shape {values.shape}")
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        if self.kind == "binary_gt" and not np.isin(values, (0.0, 1.0)).all():
            raise ValueError("binary_gt mask must contain only 0 and 1")


def gt_mask(pair: ImagePair, threshold: float = GT_MASK_THRESHOLD) -> RainMask:
    """Binary rain mask: 1 where the channel-mean |rainy - clean| exceeds the threshold.

    The comparison is strict, so a pixel sitting exactly at the threshold is
    not rain.
    """
    diff = np.abs(pair.rainy - pair.clean).mean(axis=2)
    values = (diff > threshold).astype(np.float64)
    return RainMask(values=values, kind="binary_gt", level=0)


def downsample_mask(mask: RainMask, factor: int) -> RainMask:
    """Max-pool a mask: a low-res cell is rainy if any covered pixel is rainy."""
    if factor not in (2, 4):
        raise ValueError(f"downsample factor must be 2 or 4, got {factor}")
    h, w = mask.values.shape
    if h % factor or w % factor:
        raise ValueError(f"mask dims ({h}, {w}) not divisible by {factor}")
    pooled = mask.values.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))
    return RainMask(values=pooled, kind=mask.kind, level=mask.level + factor.bit_length() - 1)


def _streak_pixels(
    height: int,
    width: int,
    center_r: float,
    center_c: float,
    angle_deg: float,
    length: float,
) -> tuple[np.ndarray, np.ndarray]:
    # angle 0 = vertical streak; positive angles tilt clockwise
    theta = math.radians(angle_deg)
    dr, dc = math.cos(theta), math.sin(theta)
    ts = np.arange(-length / 2.0, length / 2.0 + 1e-9, 0.5)
    rows = np.rint(center_r + ts * dr).astype(int)
    cols = np.rint(center_c + ts * dc).astype(int)
    keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    return rows[keep], cols[keep]


def synth_rain(
    clean: np.ndarray,
    streak_count: int = 40,
    angle: float = 0.0,
    length: float = 12.0,
    intensity: float = 0.35,
    seed: int = 0,
    pair_id: str = "synthetic",
) -> ImagePair:
    """Overlay oriented rain streaks on a clean image.

    The streak layer is additive with a single intensity, clamped to [0, 1],
    and fully determined by the seed. The clean image is never modified.
    """
    if not 0.0 < intensity <= 1.0:
        raise ValueError(f"intensity must be in (0, 1], got {intensity}")
    if streak_count < 0:
        raise ValueError("streak_count must be non-negative")
    height, width = clean.shape[:2]
    rng = np.random.default_rng(seed)
    layer = np.zeros((height, width), dtype=np.float64)
    for _ in range(streak_count):
        center_r = rng.uniform(0, height)
        center_c = rng.uniform(0, width)
        rows, cols = _streak_pixels(height, width, center_r, center_c, angle, length)
        layer[rows, cols] = intensity
    rainy = np.clip(clean + layer[:, :, None], 0.0, 1.0)
    return ImagePair(rainy=rainy, clean=clean.copy(), id=pair_id)


@dataclass
class ManifestEntry:
    id: str
    rainy: str
    clean: str


@dataclass
class DatasetManifest:
    """Named list of paired image paths with a source tag."""

    name: str
    entries: list[ManifestEntry] = field(default_factory=list)
    source_tag: str = "synthetic"

    def __post_init__(self) -> None:
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}, got {self.source_tag!r}")
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError(f"manifest {self.name!r} has duplicate ids")

    def __len__(self) -> int:
        return len(self.entries)

    def validate_paths(self) -> None:
        for entry in self.entries:
            for path in (entry.rainy, entry.clean):
                if not os.path.isfile(path):
                    raise FileNotFoundError(f"manifest {self.name!r}: missing file {path}")

    def load_pair(self, entry: ManifestEntry) -> ImagePair:
        return ImagePair(
            rainy=imaging.load_image(entry.rainy),
            clean=imaging.load_image(entry.clean),
            id=entry.id,
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as handle:
            for entry in self.entries:
                handle.write(
                    json.dumps({"id": entry.id, "rainy": entry.rainy, "clean": entry.clean})
                )
                handle.write("\n")


def load_manifest(
    path: str | os.PathLike,
    name: str | None = None,
    source_tag: str = "synthetic",
    check_paths: bool = True,
) -> DatasetManifest:
    """Read a JSON-lines manifest. Paths are checked for existence by default."""
    entries = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            entries.append(
                ManifestEntry(id=record["id"], rainy=record["rainy"], clean=record["clean"])
            )
    manifest = DatasetManifest(
        name=name or Path(path).stem, entries=entries, source_tag=source_tag
    )
    if check_paths:
        manifest.validate_paths()
    return manifest


def scan_root(
    root: str | os.PathLike, name: str | None = None, source_tag: str = "synthetic"
) -> DatasetManifest:
    """Build a manifest by pairing <root>/rain/*.png with <root>/norain/*.png by id."""
    root = Path(root)
    rain_dir, clean_dir = root / "rain", root / "norain"
    if not rain_dir.is_dir() or not clean_dir.is_dir():
        raise FileNotFoundError(f"{root} must contain rain/ and norain/ directories")
    entries = []
    for rainy_path in sorted(rain_dir.glob("*")):
        if rainy_path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        stem = rainy_path.stem
        matches = [clean_dir / f"{stem}{ext}" for ext in (".png", ".jpg", ".jpeg")]
        clean_path = next((m for m in matches if m.is_file()), None)
        if clean_path is None:
            raise FileNotFoundError(f"no clean counterpart for {rainy_path}")
        entries.append(ManifestEntry(id=stem, rainy=str(rainy_path), clean=str(clean_path)))
    return DatasetManifest(name=name or root.name, entries=entries, source_tag=source_tag)


def build_mixed(manifests: list[DatasetManifest]) -> DatasetManifest:
    """Concatenate manifests into one, prefixing ids with the source name.

    Order is deterministic: manifests in the given order, entries sorted by id
    within each.
    """
    if not manifests:
        raise ValueError("need at least one manifest")
    entries = []
    for manifest in manifests:
        for entry in sorted(manifest.entries, key=lambda e: e.id):
            entries.append(
                ManifestEntry(
                    id=f"{manifest.name}/{entry.id}", rainy=entry.rainy, clean=entry.clean
                )
            )
    return DatasetManifest(name="mixed", entries=entries, source_tag="mixed")


def make_synthetic_dataset(
    out_dir: str | os.PathLike,
    count: int,
    size: int = 64,
    seed: int = 0,
    streak_count: int = 40,
    angle: float = 0.0,
    length: float = 12.0,
    intensity: float = 0.35,
) -> DatasetManifest:
    """Generate paired synthetic images on disk plus their manifest.jsonl.

    Clean images are smooth random gradients with a few soft blobs so that the
    rain layer is the dominant high-frequency content.
    """
    out_dir = Path(out_dir)
    rain_dir, clean_dir = out_dir / "rain", out_dir / "norain"
    rain_dir.mkdir(parents=True, exist_ok=True)
    clean_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for index in range(count):
        clean = _random_clean_image(size, rng)
        pair = synth_rain(
            clean,
            streak_count=streak_count,
            angle=angle,
            length=length,
            intensity=intensity,
            seed=int(rng.integers(0, 2**31 - 1)),
            pair_id=f"synth{index:04d}",
        )
        rainy_path = rain_dir / f"{pair.id}.png"
        clean_path = clean_dir / f"{pair.id}.png"
        imaging.save_image(rainy_path, pair.rainy)
        imaging.save_image(clean_path, pair.clean)
        entries.append(ManifestEntry(id=pair.id, rainy=str(rainy_path), clean=str(clean_path)))
    manifest = DatasetManifest(name=out_dir.name, entries=entries, source_tag="synthetic")
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def _random_clean_image(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((size, size, 3), dtype=np.float64)
    for channel in range(3):
        a, b, c = rng.uniform(0.1, 0.7, size=3)
        img[:, :, channel] = a * yy + b * xx + c * 0.3
    for _ in range(3):
        cy, cx = rng.uniform(0, 1, size=2)
        radius = rng.uniform(0.15, 0.4)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        img += 0.25 * blob[:, :, None] * rng.uniform(-1, 1, size=3)
    return np.clip(img, 0.0, 1.0)
