"""Procedural texture classes, anomaly injection, augmentation and splits.

Every sample draws from its own generator seeded by
``(master_seed, class, split, index)``, so generation order and
parallelism never change the bytes produced. Images are snapped to the
8-bit grid on creation; saving to PGM and reloading is lossless.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import DataConfig
from .errors import ConfigError, DataError
from .io import from_uint8, load_pgm, quantize, save_pgm, to_uint8

CLASS_NAMES = ("sinusoid_grid", "checkerboard", "radial_blobs", "stripes")
ANOMALY_KINDS = ("blob_shift", "scratch", "texture_swap")
MIN_AREA, MAX_AREA = 0.005, 0.10

# split codes keep seed streams of different splits disjoint
TRAIN, TEST_GOOD, TEST_BAD, INJECT, AUGMENT, DONOR = range(6)


@dataclass
class SyntheticSample:
    id: str
    class_id: int
    image: np.ndarray  # (H, W, ch) float32 in [0, 1]
    label: int  # 0 normal, 1 anomalous
    gt_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    seed: int
    kind: str = "normal"


def sample_seed(master_seed: int, class_id: int, split: int, index: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(class_id, split, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _texture(class_id: int, rng: np.random.Generator, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    if class_id == 0:
        f = rng.uniform(3.0, 5.0) / size
        a = rng.uniform(0.3, 0.42)
        img = 0.5 + a * np.sin(2 * np.pi * f * x + rng.uniform(0, 2 * np.pi)) * np.sin(
            2 * np.pi * f * y + rng.uniform(0, 2 * np.pi)
        )
    elif class_id == 1:
        # cells well below the 8 px patch keep each patch a mix of several cells
        cell = rng.uniform(4.0, 6.0)
        ox, oy = rng.uniform(0, 2 * cell, size=2)
        parity = (np.floor((x + ox) / cell) + np.floor((y + oy) / cell)) % 2
        lo, hi = rng.uniform(0.15, 0.3), rng.uniform(0.7, 0.85)
        img = lo + (hi - lo) * parity
        ncell = int(math.ceil((size + 2 * cell) / cell)) + 1
        jitter = rng.normal(0.0, 0.03, size=(ncell, ncell))
        img = img + jitter[((y + oy) // cell).astype(int), ((x + ox) // cell).astype(int)]
    elif class_id == 2:
        spacing = rng.uniform(11.0, 14.0)
        ox, oy = rng.uniform(0, spacing, size=2)
        img = np.full((size, size), 0.2)
        n = int(size / spacing) + 3
        for i in range(-1, n):
            for j in range(-1, n):
                cy = oy + i * spacing + rng.normal(0, 1.2)
                cx = ox + j * spacing + rng.normal(0, 1.2)
                r = rng.uniform(2.8, 3.8)
                img = img + rng.uniform(0.5, 0.7) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * r * r))
    elif class_id == 3:
        theta = np.deg2rad(35.0) + rng.uniform(-0.2, 0.2)
        f = rng.uniform(5.0, 7.0) / size
        a = rng.uniform(0.3, 0.42)
        img = 0.5 + a * np.sin(2 * np.pi * f * (x * np.cos(theta) + y * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
    else:
        raise ConfigError(f"unknown class id {class_id}")
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_normal(class_id: int, seed: int, cfg: DataConfig, sample_id: str | None = None) -> SyntheticSample:
    if not 0 <= class_id < min(cfg.num_classes, len(CLASS_NAMES)):
        raise ConfigError(f"unknown class id {class_id}")
    rng = np.random.default_rng(seed)
    gray = _texture(class_id, rng, cfg.image_size)
    img = np.repeat(gray[:, :, None], cfg.channels, axis=2)
    size = cfg.image_size
    return SyntheticSample(
        id=sample_id or f"{CLASS_NAMES[class_id]}_{seed:016x}",
        class_id=class_id,
        image=quantize(img),
        label=0,
        gt_mask=np.zeros((size, size), dtype=np.uint8),
        seed=seed,
    )


def _area_ok(mask: np.ndarray) -> bool:
    frac = mask.mean()
    return MIN_AREA <= frac <= MAX_AREA


def _ellipse_mask(rng, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    frac = rng.uniform(0.01, 0.05)
    aspect = rng.uniform(0.6, 1.6)
    r1 = math.sqrt(frac * size * size / (math.pi * aspect))
    r2 = r1 * aspect
    margin = int(math.ceil(max(r1, r2))) + 1
    cy, cx = rng.uniform(margin, size - margin, size=2)
    ang = rng.uniform(0, np.pi)
    dx, dy = x - cx, y - cy
    u = dx * np.cos(ang) + dy * np.sin(ang)
    v = -dx * np.sin(ang) + dy * np.cos(ang)
    return ((u / r2) ** 2 + (v / r1) ** 2 <= 1.0).astype(np.uint8)


def _scale(size: int) -> float:
    """Mask dimensions are tuned at 64 px and scale linearly with the image."""
    return size / 64.0


def _line_mask(rng, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    s = _scale(size)
    length = rng.uniform(16 * s, 34 * s)
    thick = max(s, 0.5)
    width = rng.uniform(2.2, 3.4) * thick
    ang = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(length / 2 + 2 * thick, size - length / 2 - 2 * thick, size=2)
    d = np.array([np.cos(ang), np.sin(ang)])
    px, py = x - cx, y - cy
    t = np.clip(px * d[0] + py * d[1], -length / 2, length / 2)
    dist = np.hypot(px - t * d[0], py - t * d[1])
    return (dist <= width / 2).astype(np.uint8)


def _rect_mask(rng, size: int) -> np.ndarray:
    s = _scale(size)
    h, w = rng.integers(max(2, round(9 * s)), round(18 * s) + 1, size=2)
    top = rng.integers(1, size - h - 1)
    left = rng.integers(1, size - w - 1)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top : top + h, left : left + w] = 1
    return mask


def inject_anomaly(
    sample: SyntheticSample, seed: int, cfg: DataConfig, kind: str | None = None
) -> SyntheticSample:
    """Apply one local defect; pixels outside the returned mask are untouched.

    ``kind`` is drawn from the seed unless given explicitly.
    """
    if sample.label != 0:
        raise DataError(f"{sample.id}: inject_anomaly expects a normal sample")
    rng = np.random.default_rng(seed)
    kind = kind or ANOMALY_KINDS[int(rng.integers(len(ANOMALY_KINDS)))]
    size = cfg.image_size
    make = {"blob_shift": _ellipse_mask, "scratch": _line_mask, "texture_swap": _rect_mask}.get(kind)
    if make is None:
        raise ConfigError(f"unknown anomaly kind {kind!r}")
    for _ in range(100):
        mask = make(rng, size)
        if _area_ok(mask):
            break
    else:  # pragma: no cover - the samplers are sized to land in range
        raise DataError("could not draw an anomaly mask within the area limits")

    img = sample.image.astype(np.float64)
    inside = mask.astype(bool)
    region = img[inside]
    if kind == "blob_shift":
        shift = rng.uniform(0.3, 0.45) * (-1.0 if region.mean() > 0.5 else 1.0)
        new = region + shift
    elif kind == "scratch":
        level = 0.04 if region.mean() > 0.5 else 0.96
        new = np.full_like(region, level) + rng.normal(0, 0.02, size=region.shape)
    else:
        others = [c for c in range(min(cfg.num_classes, len(CLASS_NAMES))) if c != sample.class_id]
        donor_cls = others[int(rng.integers(len(others)))]
        donor = gen_normal(donor_cls, int(rng.integers(2**63)), cfg)
        new = donor.image[inside].astype(np.float64)
    out = sample.image.copy()
    out[inside] = quantize(new)
    return replace(sample, image=out, label=1, gt_mask=mask, seed=seed, kind=kind)


@dataclass(frozen=True)
class AugmentParams:
    rot90: int = 0
    hflip: bool = False
    vflip: bool = False
    dx: int = 0
    dy: int = 0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "AugmentParams":
        return cls(
            rot90=int(rng.integers(4)),
            hflip=bool(rng.integers(2)),
            vflip=bool(rng.integers(2)),
            dx=int(rng.integers(-2, 3)),
            dy=int(rng.integers(-2, 3)),
        )


def _apply_geom(arr: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = np.rot90(arr, k=p.rot90, axes=(0, 1))
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1]
    if p.dx or p.dy:
        pad = [(2, 2), (2, 2)] + [(0, 0)] * (out.ndim - 2)
        padded = np.pad(out, pad, mode="edge")
        h, w = out.shape[:2]
        out = padded[2 - p.dy : 2 - p.dy + h, 2 - p.dx : 2 - p.dx + w]
    return np.ascontiguousarray(out)


def apply_augmentation(sample: SyntheticSample, params: AugmentParams, sample_id: str | None = None) -> SyntheticSample:
    return replace(
        sample,
        id=sample_id or sample.id,
        image=_apply_geom(sample.image, params),
        gt_mask=_apply_geom(sample.gt_mask, params),
    )


def augment(sample: SyntheticSample, seed: int, sample_id: str | None = None) -> SyntheticSample:
    """Random 90-degree rotation, flips and a +-2 px edge-padded shift."""
    params = AugmentParams.draw(np.random.default_rng(seed))
    return apply_augmentation(sample, params, sample_id)


def build_splits(cfg: DataConfig) -> dict[str, list[SyntheticSample]]:
    """Train (normals only) and test (normals + anomalies) splits for cfg.classes."""
    ms = cfg.master_seed
    train: list[SyntheticSample] = []
    test: list[SyntheticSample] = []
    for c in cfg.classes:
        name = CLASS_NAMES[c]
        count = cfg.few_shot if cfg.few_shot is not None else cfg.train_per_class
        for i in range(count):
            base = gen_normal(c, sample_seed(ms, c, TRAIN, i), cfg, f"{name}_train_{i:03d}")
            if cfg.few_shot is None:
                train.append(base)
                continue
            train.append(replace(base, id=f"{base.id}_aug0"))
            for j in range(1, cfg.augment_factor):
                seed = sample_seed(ms, c, AUGMENT, i * cfg.augment_factor + j)
                train.append(augment(base, seed, f"{base.id}_aug{j}"))
        for i in range(cfg.test_normal_per_class):
            test.append(gen_normal(c, sample_seed(ms, c, TEST_GOOD, i), cfg, f"{name}_good_{i:03d}"))
        for i in range(cfg.test_anomalous_per_class):
            base = gen_normal(c, sample_seed(ms, c, TEST_BAD, i), cfg, f"{name}_bad_{i:03d}")
            test.append(inject_anomaly(base, sample_seed(ms, c, INJECT, i), cfg))
    if any(s.label for s in train):  # pragma: no cover - guarded by construction
        raise DataError("anomalous sample leaked into the training split")
    return {"train": train, "test": test}


# -- persistence -------------------------------------------------------------

MANIFEST = "dataset.toml"
INDEX = "samples.tsv"


def _sample_path(root: Path, split: str, s: SyntheticSample) -> Path:
    name = CLASS_NAMES[s.class_id]
    if split == "train":
        return root / "train" / name / f"{s.id}.pgm"
    return root / "test" / name / ("bad" if s.label else "good") / f"{s.id}.pgm"


def _mask_path(root: Path, s: SyntheticSample) -> Path:
    return root / "ground_truth" / CLASS_NAMES[s.class_id] / f"{s.id}_mask.pgm"


def write_manifest(path: Path, values: dict) -> None:
    lines = []
    for key, val in values.items():
        if isinstance(val, str):
            lines.append(f'{key} = "{val}"')
        elif isinstance(val, (list, tuple)):
            lines.append(f"{key} = [{', '.join(str(v) for v in val)}]")
        elif val is None:
            continue
        else:
            lines.append(f"{key} = {val}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict:
    """Parse the ``key = value`` lines written by :func:`write_manifest`."""
    out: dict = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: malformed manifest line {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if val.startswith('"'):
            out[key] = val.strip('"')
        elif val.startswith("["):
            inner = val[1:-1].strip()
            out[key] = [int(v) for v in inner.split(",")] if inner else []
        else:
            out[key] = int(val) if val.lstrip("-").isdigit() else float(val)
    return out


def save_dataset(splits: dict, cfg: DataConfig, root) -> None:
    """Write the MVTec-like directory tree plus manifest and sample index."""
    root = Path(root)
    rows = []
    for split in ("train", "test"):
        for s in splits[split]:
            path = _sample_path(root, split, s)
            path.parent.mkdir(parents=True, exist_ok=True)
            save_pgm(path, to_uint8(s.image[:, :, 0]))
            if s.label:
                mpath = _mask_path(root, s)
                mpath.parent.mkdir(parents=True, exist_ok=True)
                save_pgm(mpath, s.gt_mask * np.uint8(255))
            rows.append([split, s.class_id, s.label, s.id, s.seed, s.kind, path.relative_to(root).as_posix()])
    write_manifest(
        root / MANIFEST,
        {
            "format": "inpforge-dataset-1",
            "master_seed": cfg.master_seed,
            "classes": list(cfg.classes),
            "class_names": "|".join(CLASS_NAMES[c] for c in cfg.classes),
            "num_classes": cfg.num_classes,
            "image_size": cfg.image_size,
            "channels": cfg.channels,
            "train_per_class": cfg.train_per_class,
            "test_normal_per_class": cfg.test_normal_per_class,
            "test_anomalous_per_class": cfg.test_anomalous_per_class,
            "few_shot": cfg.few_shot,
            "augment_factor": cfg.augment_factor,
            "train_count": len(splits["train"]),
            "test_count": len(splits["test"]),
        },
    )
    with open(root / INDEX, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["split", "class_id", "label", "id", "seed", "kind", "path"])
        w.writerows(rows)


def load_dataset(root) -> tuple[dict[str, list[SyntheticSample]], dict]:
    """Read a dataset directory back; masks are optional for anomalous samples."""
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise DataError(f"{root}: no {MANIFEST}")
    manifest = read_manifest(root / MANIFEST)
    channels = int(manifest.get("channels", 1))
    splits: dict[str, list[SyntheticSample]] = {"train": [], "test": []}
    with open(root / INDEX, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            path = root / row["path"]
            if not path.exists():
                raise DataError(f"missing image {path}")
            img = from_uint8(load_pgm(path))
            img = np.repeat(img[:, :, None], channels, axis=2)
            label = int(row["label"])
            mask = np.zeros(img.shape[:2], dtype=np.uint8)
            s = SyntheticSample(row["id"], int(row["class_id"]), img, label, mask, int(row["seed"]), row["kind"])
            if label:
                mpath = _mask_path(root, s)
                s.gt_mask = (load_pgm(mpath) > 127).astype(np.uint8) if mpath.exists() else None
            splits[row["split"]].append(s)
    return splits, manifest
