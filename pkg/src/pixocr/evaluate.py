"""Dataset-level evaluation: run (or read) predictions, decode them and
aggregate the task metrics into a versioned report."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from PIL import Image

from . import metrics as M
from .codec import TaskId, decode, to_uint8
from .losses import FeatureExtractor
from .synthdata import Dataset, DatasetError, read_dataset

REPORT_VERSION = 1
REMOVAL_KEYS = ("psnr", "mssim", "mse", "age", "peps", "pceps")


class Embedder:
    """Image set -> (N, D) embedding array, with a label for reports."""

    def __init__(self, extractor: FeatureExtractor, label: str):
        self.extractor = extractor
        self.label = label

    def __call__(self, images: list) -> np.ndarray:
        x = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float() / 255.0
        return self.extractor.embed(x).double().numpy()

    @classmethod
    def load(cls, spec: str = "default") -> "Embedder":
        if spec == "default":
            return cls(FeatureExtractor(), "default: seeded conv stack, global-average-pooled (128-d)")
        path = Path(spec)
        if not path.is_file():
            raise FileNotFoundError(f"embedder weights not found: {path}")
        return cls(FeatureExtractor.from_vgg16(path), f"vgg16 blocks 1-3 from {path.name} (256-d)")


@dataclass
class MetricReport:
    task: str
    count: int
    metrics: dict
    embedder: Optional[str] = None
    per_image: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "task": self.task, "count": self.count, "embedder": self.embedder,
                "metrics": self.metrics, "per_image": self.per_image}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = []
        for key, val in _flatten(self.metrics):
            rows.append((key, "n/a" if val is None else f"{val:.4f}"))
        width = max(len(k) for k, _ in rows)
        lines = [f"{self.task} ({self.count} images)"]
        lines += [f"  {k:<{width}}  {v:>12}" for k, v in rows]
        if self.embedder:
            lines.append(f"  fid embedder: {self.embedder}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        if not self.per_image:
            return
        keys = [k for k in self.per_image[0] if k != "id"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + keys)
            for row in self.per_image:
                w.writerow([row["id"]] + [_fmt(row[k]) for k in keys])


def _flatten(d: dict, prefix: str = ""):
    for k, v in d.items():
        if isinstance(v, dict):
            yield from _flatten(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# --- prediction sources ------------------------------------------------------------

def predict_rgb(model, image: np.ndarray, task) -> np.ndarray:
    """Raw model output at full scale for one HxWx3 uint8 image, as 8-bit RGB."""
    model.eval()
    x = torch.from_numpy(image).permute(2, 0, 1)[None].float() / 255.0
    with torch.no_grad():
        out = model(x, int(TaskId.parse(task))).out_full[0].permute(1, 2, 0).double().numpy()
    return to_uint8(out)


def _read_prediction(pred_dir: Path, sample_id: str, shape) -> np.ndarray:
    path = pred_dir / "rgb" / f"{sample_id}.png"
    if not path.is_file():
        raise DatasetError(f"missing prediction for {sample_id!r}: {path}")
    with Image.open(path) as im:
        arr = np.array(im.convert("RGB"))
    if arr.shape != shape:
        raise DatasetError(f"prediction {path} has shape {arr.shape}, ground truth is {shape}")
    return arr


def _predictions(source, ds: Dataset, task: TaskId):
    """Yield (sample, predicted 8-bit RGB) pairs for every record of ``task``."""
    for sample in ds.samples(task):
        if isinstance(source, torch.nn.Module):
            yield sample, predict_rgb(source, sample.input, task)
        else:
            yield sample, _read_prediction(Path(source), sample.id, sample.target.shape)


# --- aggregation ---------------------------------------------------------------------

def _eval_removal(pairs, embedder) -> MetricReport:
    per_image, preds, gts = [], [], []
    for sample, pred in pairs:
        out = to_uint8(decode(TaskId.REMOVAL, pred / 255.0))
        per_image.append({"id": sample.id, **M.removal_image_metrics(out, sample.target)})
        preds.append(out)
        gts.append(sample.target)
    summary = {k: float(np.mean([row[k] for row in per_image])) for k in REMOVAL_KEYS}
    summary["fid"] = M.fid(preds, gts, embedder) if len(preds) >= 2 else None
    return MetricReport("removal", len(per_image), summary, embedder.label, per_image)


def _eval_segmentation(pairs) -> MetricReport:
    total, per_image = M.ConfusionCounts(), []
    for sample, pred in pairs:
        counts = M.seg_counts(decode(TaskId.SEGMENTATION, pred / 255.0),
                              decode(TaskId.SEGMENTATION, sample.target / 255.0))
        total = total + counts
        s = counts.scores()
        per_image.append({"id": sample.id, "fgIoU": s["iou"], "P": s["p"], "R": s["r"], "F": s["f"]})
    s = total.scores()
    return MetricReport("segmentation", len(per_image), {"fgIoU": s["iou"], "P": s["p"], "R": s["r"], "F": s["f"]},
                        per_image=per_image)


def _eval_tamper(pairs) -> MetricReport:
    total = {"tampered": M.ConfusionCounts(), "real": M.ConfusionCounts()}
    per_image = []
    for sample, pred in pairs:
        counts = M.tamper_counts(decode(TaskId.TAMPER, pred / 255.0), decode(TaskId.TAMPER, sample.target / 255.0))
        total = {k: total[k] + counts[k] for k in total}
        rep = M.tamper_report(counts)
        per_image.append({"id": sample.id, "mIoU": rep["mIoU"], "mF": rep["mF"]})
    return MetricReport("tamper", len(per_image), M.tamper_report(total), per_image=per_image)


def evaluate_dataset(source, dataset, task, embedder: Optional[Callable] = None) -> MetricReport:
    """Evaluate one task.

    ``source`` is a model or a prediction directory holding ``rgb/<id>.png``
    (as written by ``pixocr infer``); ``dataset`` a directory or Dataset.
    Segmentation and tamper scores are computed from counts accumulated over
    the whole set; removal scores are per-image means plus a set-level FID.
    """
    task = TaskId.parse(task)
    ds = dataset if isinstance(dataset, Dataset) else read_dataset(dataset)
    if task not in ds.tasks():
        present = sorted(t.label for t in ds.tasks())
        raise DatasetError(f"dataset {ds.root} has no {task.label} records (found: {', '.join(present) or 'none'})")
    pairs = _predictions(source, ds, task)
    if task is TaskId.REMOVAL:
        return _eval_removal(pairs, embedder or Embedder.load())
    if task is TaskId.SEGMENTATION:
        return _eval_segmentation(pairs)
    return _eval_tamper(pairs)
