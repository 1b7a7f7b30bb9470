"""Procedural training data for the three tasks and the on-disk dataset format.

Text is imitated by random polyline "glyphs" drawn inside non-overlapping
boxes. All rasterization is integer arithmetic on numpy arrays, so a
(config, seed) pair gives byte-identical images everywhere.

Dataset layout::

    DIR/manifest.json
    DIR/inputs/<id>.png
    DIR/targets/<id>.png
    DIR/masks/<id>.png      (removal samples only; 0/255 single channel)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .codec import BACKGROUND, REAL, TAMPERED, TaskId, decode_segmentation, decode_tamper, encode_target

MANIFEST_VERSION = 1
BACKGROUND_KINDS = ("flat", "gradient", "noise", "shapes")
TAMPER_KINDS = ("copy_move", "blur", "color_shift")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 64
    glyphs_per_image: tuple = (1, 3)  # boxes per image, inclusive
    stroke_width: tuple = (1, 3)
    box_height: tuple = (12, 22)
    box_width: tuple = (16, 40)
    background_weights: dict = field(default_factory=lambda: {k: 1.0 for k in BACKGROUND_KINDS})
    noise_amplitude: int = 10
    tamper_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if not 0.0 <= self.tamper_fraction <= 1.0:
            raise ValueError("tamper_fraction must lie in [0, 1]")
        unknown = set(self.background_weights) - set(BACKGROUND_KINDS)
        if unknown:
            raise ValueError(f"unknown background kinds {sorted(unknown)}")
        if sum(self.background_weights.values()) <= 0:
            raise ValueError("background weights must not all be zero")
        for name in ("glyphs_per_image", "stroke_width", "box_height", "box_width"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")
        if self.box_height[1] > self.image_size or self.box_width[1] > self.image_size:
            raise ValueError("boxes cannot exceed the image size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["glyphs_per_image"] = list(self.glyphs_per_image)
        for k in ("stroke_width", "box_height", "box_width"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("glyphs_per_image", "stroke_width", "box_height", "box_width"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


GENERATOR_PRESETS = {
    "toy": GeneratorConfig(image_size=64, glyphs_per_image=(2, 4), stroke_width=(3, 5)),
    "small": GeneratorConfig(image_size=512, glyphs_per_image=(3, 8), stroke_width=(2, 6), box_height=(24, 64),
                             box_width=(32, 160), noise_amplitude=12),
}


@dataclass
class TaskSample:
    input: np.ndarray  # HxWx3 uint8
    target: np.ndarray  # HxWx3 uint8, already codec-encoded
    task: TaskId
    id: str
    mask: Optional[np.ndarray] = None  # HxW uint8 in {0, 1}, removal only
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.input.shape != self.target.shape or self.input.ndim != 3 or self.input.shape[2] != 3:
            raise DatasetError(f"{self.id}: input {self.input.shape} / target {self.target.shape} mismatch")
        if (self.mask is not None) != (self.task is TaskId.REMOVAL):
            raise DatasetError(f"{self.id}: mask must be present exactly for removal samples")
        if self.mask is not None and self.mask.shape != self.input.shape[:2]:
            raise DatasetError(f"{self.id}: mask {self.mask.shape} does not match image {self.input.shape[:2]}")


def sample_rng(seed: int, task: TaskId, index: int) -> np.random.Generator:
    """Independent stream per sample, derived from the master seed."""
    return np.random.default_rng([seed, int(task), index])


def _luma(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.int64)
    return (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2]) // 1000


def gen_background(cfg: GeneratorConfig, rng: np.random.Generator, kind: Optional[str] = None) -> np.ndarray:
    n = cfg.image_size
    if kind is None:
        kinds = [k for k in BACKGROUND_KINDS if cfg.background_weights.get(k, 0) > 0]
        w = np.array([cfg.background_weights[k] for k in kinds], dtype=np.float64)
        kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
    base = rng.integers(0, 256, 3)
    img = np.empty((n, n, 3), dtype=np.int64)
    img[...] = base
    if kind == "flat":
        pass
    elif kind == "gradient":
        end = rng.integers(0, 256, 3)
        axis = int(rng.integers(0, 2))
        ramp = np.arange(n, dtype=np.int64)
        vals = base[None, :] + (end - base)[None, :] * ramp[:, None] // (n - 1)
        img[...] = vals[:, None, :] if axis == 0 else vals[None, :, :]
    elif kind == "noise":
        a = cfg.noise_amplitude
        img = img + rng.integers(-a, a + 1, (n, n, 3))
    elif kind == "shapes":
        yy, xx = np.mgrid[0:n, 0:n]
        for _ in range(int(rng.integers(1, 4))):
            color = rng.integers(0, 256, 3)
            cy, cx = rng.integers(0, n, 2)
            ry, rx = rng.integers(3, max(4, n // 3), 2)
            if rng.integers(0, 2):
                sel = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            else:
                sel = (yy - cy) ** 2 * rx * rx + (xx - cx) ** 2 * ry * ry <= rx * rx * ry * ry
            img[sel] = color
    else:
        raise ValueError(f"unknown background kind {kind!r}")
    return np.clip(img, 0, 255).astype(np.uint8)


def _line(y0, x0, y1, x1):
    """Integer Bresenham points from (y0, x0) to (y1, x1) inclusive."""
    pts = []
    dy, dx = abs(y1 - y0), -abs(x1 - x0)
    sy, sx = (1 if y0 < y1 else -1), (1 if x0 < x1 else -1)
    err = dy + dx
    while True:
        pts.append((y0, x0))
        if y0 == y1 and x0 == x1:
            return pts
        e2 = 2 * err
        if e2 >= dx:
            err += dx
            y0 += sy
        if e2 <= dy:
            err += dy
            x0 += sx


def _place_boxes(cfg: GeneratorConfig, rng, count: int) -> list:
    n = cfg.image_size
    boxes = []
    for _ in range(count):
        for _attempt in range(50):
            h = int(rng.integers(cfg.box_height[0], cfg.box_height[1] + 1))
            w = int(rng.integers(cfg.box_width[0], cfg.box_width[1] + 1))
            y0 = int(rng.integers(0, n - h + 1))
            x0 = int(rng.integers(0, n - w + 1))
            box = (y0, x0, y0 + h, x0 + w)
            # one pixel of clearance keeps boxes disjoint and separable
            if all(box[0] > b[2] or box[2] < b[0] or box[1] > b[3] or box[3] < b[1] for b in boxes):
                boxes.append(box)
                break
    return boxes


def gen_glyphs(cfg: GeneratorConfig, rng: np.random.Generator, count: Optional[int] = None):
    """Random polyline strokes inside disjoint boxes.

    Returns ``(stroke_mask, boxes)`` with boxes as ``(y0, x0, y1, x1)``,
    end-exclusive. Every stroke pixel lies inside its box.
    """
    n = cfg.image_size
    if count is None:
        count = int(rng.integers(cfg.glyphs_per_image[0], cfg.glyphs_per_image[1] + 1))
    mask = np.zeros((n, n), dtype=np.uint8)
    boxes = _place_boxes(cfg, rng, count)
    for y0, x0, y1, x1 in boxes:
        width = int(rng.integers(cfg.stroke_width[0], cfg.stroke_width[1] + 1))
        r = width // 2
        lo_y, hi_y = y0 + r, y1 - 1 - (width - 1 - r)
        lo_x, hi_x = x0 + r, x1 - 1 - (width - 1 - r)
        if lo_y > hi_y or lo_x > hi_x:
            continue
        # split the box into character cells
        chars = max(1, (x1 - x0) // max(1, (y1 - y0) * 2 // 3))
        edges = np.linspace(lo_x, hi_x + 1, chars + 1).astype(np.int64)
        for c in range(chars):
            cx0, cx1 = int(edges[c]), max(int(edges[c]), int(edges[c + 1]) - 1)
            npts = int(rng.integers(2, 5))
            ys = rng.integers(lo_y, hi_y + 1, npts)
            xs = rng.integers(cx0, cx1 + 1, npts)
            for k in range(npts - 1):
                for py, px in _line(int(ys[k]), int(xs[k]), int(ys[k + 1]), int(xs[k + 1])):
                    mask[py - r:py - r + width, px - r:px - r + width] = 1
    return mask, boxes


def box_mask(boxes, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=np.uint8)
    for y0, x0, y1, x1 in boxes:
        m[y0:y1, x0:x1] = 1
    return m


def _text_color(rng, region: np.ndarray) -> np.ndarray:
    flat = region.reshape(-1, 3).astype(np.int64)
    if _luma(flat.sum(axis=0) // len(flat)) > 127:
        return rng.integers(0, 70, 3)
    return rng.integers(185, 256, 3)


def _render(cfg, rng):
    bg = gen_background(cfg, rng)
    strokes, boxes = gen_glyphs(cfg, rng)
    img = bg.copy()
    for y0, x0, y1, x1 in boxes:
        sel = np.zeros_like(strokes, dtype=bool)
        sel[y0:y1, x0:x1] = strokes[y0:y1, x0:x1].astype(bool)
        img[sel] = _text_color(rng, bg[y0:y1, x0:x1])
    return bg, img, strokes, boxes


def make_removal_sample(cfg: GeneratorConfig, rng: np.random.Generator, sample_id: str = "removal") -> TaskSample:
    bg, img, _, boxes = _render(cfg, rng)
    s = TaskSample(img, bg, TaskId.REMOVAL, sample_id, mask=box_mask(boxes, cfg.image_size),
                   meta={"boxes": boxes})
    s.validate()
    return s


def make_seg_sample(cfg: GeneratorConfig, rng: np.random.Generator, sample_id: str = "segmentation") -> TaskSample:
    _, img, strokes, boxes = _render(cfg, rng)
    target = encode_target(TaskId.SEGMENTATION, strokes)
    if not np.array_equal(decode_segmentation(target / 255.0), strokes):
        raise AssertionError(f"{sample_id}: segmentation codec round trip failed")
    s = TaskSample(img, target, TaskId.SEGMENTATION, sample_id, meta={"boxes": boxes})
    s.validate()
    return s


def _box_blur(region: np.ndarray) -> np.ndarray:
    pad = np.pad(region.astype(np.int64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = sum(pad[dy:dy + region.shape[0], dx:dx + region.shape[1]] for dy in range(3) for dx in range(3))
    return (acc // 9).astype(np.uint8)


def make_tamper_sample(cfg: GeneratorConfig, rng: np.random.Generator, sample_id: str = "tamper") -> TaskSample:
    _, img, strokes, boxes = _render(cfg, rng)
    n_tamper = int(round(cfg.tamper_fraction * len(boxes)))
    chosen = set(rng.permutation(len(boxes))[:n_tamper].tolist()) if boxes else set()
    labels = np.full((cfg.image_size, cfg.image_size), BACKGROUND, dtype=np.uint8)
    source = img.copy()
    kinds = []
    for i, (y0, x0, y1, x1) in enumerate(boxes):
        if i not in chosen:
            labels[y0:y1, x0:x1] = REAL
            continue
        labels[y0:y1, x0:x1] = TAMPERED
        kind = TAMPER_KINDS[int(rng.integers(0, len(TAMPER_KINDS)))]
        if kind == "copy_move" and len(boxes) < 2:
            kind = "color_shift"
        region = img[y0:y1, x0:x1]
        if kind == "copy_move":
            j = int(rng.choice([k for k in range(len(boxes)) if k != i]))
            sy0, sx0, sy1, sx1 = boxes[j]
            h, w = min(y1 - y0, sy1 - sy0), min(x1 - x0, sx1 - sx0)
            region[:h, :w] = source[sy0:sy0 + h, sx0:sx0 + w]
        elif kind == "blur":
            region[...] = _box_blur(region)
        else:
            sel = strokes[y0:y1, x0:x1].astype(bool)
            shift = rng.integers(-90, 91, 3)
            region[sel] = np.clip(region[sel].astype(np.int64) + shift, 0, 255).astype(np.uint8)
        kinds.append(kind)
    target = encode_target(TaskId.TAMPER, labels)
    if not np.array_equal(decode_tamper(target / 255.0), labels):
        raise AssertionError(f"{sample_id}: tamper codec round trip failed")
    s = TaskSample(img, target, TaskId.TAMPER, sample_id,
                   meta={"boxes": boxes, "tampered": sorted(chosen), "kinds": kinds})
    s.validate()
    return s


MAKERS = {
    TaskId.REMOVAL: make_removal_sample,
    TaskId.SEGMENTATION: make_seg_sample,
    TaskId.TAMPER: make_tamper_sample,
}


def generate(cfg: GeneratorConfig, tasks, count: int) -> list:
    """``count`` samples for each task in ``tasks``."""
    samples = []
    for task in tasks:
        task = TaskId.parse(task)
        for i in range(count):
            sid = f"{task.label}_{i:05d}"
            samples.append(MAKERS[task](cfg, sample_rng(cfg.seed, task, i), sid))
    return samples


# --- on-disk format -----------------------------------------------------------------

def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", compress_level=6)


def _read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert(mode))


def write_dataset(samples, out_dir, generator: Optional[GeneratorConfig] = None) -> dict:
    out = Path(out_dir)
    for sub in ("inputs", "targets", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records, seen = [], set()
    for s in samples:
        s.validate()
        if s.id in seen:
            raise DatasetError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        rec = {"id": s.id, "task": s.task.label, "input": f"inputs/{s.id}.png", "target": f"targets/{s.id}.png",
               "mask": None}
        _write_png(out / rec["input"], s.input)
        _write_png(out / rec["target"], s.target)
        if s.mask is not None:
            rec["mask"] = f"masks/{s.id}.png"
            _write_png(out / rec["mask"], (s.mask * 255).astype(np.uint8))
        records.append(rec)
    manifest = {
        "version": MANIFEST_VERSION,
        "generator": generator.to_dict() if generator else None,
        "seed": generator.seed if generator else None,
        "records": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class Dataset:
    """A validated dataset directory. Samples are loaded lazily."""

    def __init__(self, root, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.records = manifest["records"]

    def __len__(self):
        return len(self.records)

    def ids(self, task=None) -> list:
        if task is None:
            return [r["id"] for r in self.records]
        task = TaskId.parse(task)
        return [r["id"] for r in self.records if r["task"] == task.label]

    def tasks(self) -> set:
        return {TaskId.parse(r["task"]) for r in self.records}

    def load(self, rec) -> TaskSample:
        if isinstance(rec, str):
            rec = next((r for r in self.records if r["id"] == rec), None)
            if rec is None:
                raise KeyError(rec)
        inp = _read_png(self.root / rec["input"], "RGB")
        tgt = _read_png(self.root / rec["target"], "RGB")
        mask = None
        if rec.get("mask"):
            mask = (_read_png(self.root / rec["mask"], "L") > 127).astype(np.uint8)
        s = TaskSample(inp, tgt, TaskId.parse(rec["task"]), rec["id"], mask=mask)
        try:
            s.validate()
        except DatasetError as e:
            raise DatasetError(f"record {rec['id']!r}: {e}") from None
        return s

    def __iter__(self) -> Iterator[TaskSample]:
        for rec in self.records:
            yield self.load(rec)

    def samples(self, task=None) -> list:
        wanted = None if task is None else TaskId.parse(task).label
        return [self.load(r) for r in self.records if wanted is None or r["task"] == wanted]


def read_dataset(root, check_sizes: bool = True) -> Dataset:
    """Open and validate a dataset directory.

    Every record must reference existing files, ids must be unique, removal
    records need a mask and image sizes must agree. Errors name the record.
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: invalid JSON ({e})") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{mpath}: unsupported manifest version {manifest.get('version')!r}")
    records = manifest.get("records")
    if not isinstance(records, list):
        raise DatasetError(f"{mpath}: 'records' must be a list")
    seen = set()
    for i, rec in enumerate(records):
        rid = rec.get("id") if isinstance(rec, dict) else None
        if not rid:
            raise DatasetError(f"record #{i} has no id")
        if rid in seen:
            raise DatasetError(f"duplicate record id {rid!r}")
        seen.add(rid)
        try:
            task = TaskId.parse(rec.get("task", ""))
        except ValueError as e:
            raise DatasetError(f"record {rid!r}: {e}") from None
        if task is TaskId.REMOVAL and not rec.get("mask"):
            raise DatasetError(f"record {rid!r}: removal record without mask")
        for key in ("input", "target", "mask"):
            if key != "mask" and not rec.get(key):
                raise DatasetError(f"record {rid!r}: missing '{key}' path")
            if rec.get(key) and not (root / rec[key]).is_file():
                raise DatasetError(f"record {rid!r}: missing file {rec[key]}")
        if check_sizes:
            sizes = {}
            for key in ("input", "target", "mask"):
                if rec.get(key):
                    with Image.open(root / rec[key]) as im:
                        sizes[key] = im.size
            if len(set(sizes.values())) > 1:
                raise DatasetError(f"record {rid!r}: size mismatch {sizes}")
    return Dataset(root, manifest)
