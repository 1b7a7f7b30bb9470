"""Prompt geometry: pooled features before and after prompt injection, a
deterministic 2-D projection and a task-separation summary."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import TaskId, task_names

LABEL_ORDER = ("general", *task_names())
COLORS = {"general": "#7f7f7f", "removal": "#1f77b4", "segmentation": "#2ca02c", "tamper": "#d62728"}


@dataclass
class FeatureRecord:
    id: str
    task: str
    shared: np.ndarray  # spatial mean of the final encoder feature
    injected: np.ndarray  # spatial mean after adding the task prompt


@dataclass
class FeatureSet:
    records: list
    untrained: bool = False  # all prompts still zero, so the tasks are indistinguishable

    def meta(self) -> dict:
        return {"records": len(self.records), "untrained": self.untrained,
                "tasks": sorted({r.task for r in self.records})}


@dataclass
class SeparationReport:
    intra: float
    inter: float
    centroids: dict = field(default_factory=dict)
    ratio: float = 0.0  # (inter - intra) / max(inter, intra), 0 when both vanish

    def to_dict(self) -> dict:
        return {"intra": self.intra, "inter": self.inter, "ratio": self.ratio,
                "centroids": {k: v.tolist() for k, v in self.centroids.items()}}


def prompts_untrained(model) -> bool:
    return bool((model.prompts.matrix == 0).all())


@torch.no_grad()
def extract_features(model, samples, tasks=None) -> FeatureSet:
    """One record per (sample, task); every sample is run under every task."""
    tasks = [TaskId.parse(t) for t in (tasks or list(TaskId))]
    model.eval()
    records = []
    for s in samples:
        x = torch.from_numpy(s.input).permute(2, 0, 1)[None].float() / 255.0
        for t in tasks:
            feats = model(x, int(t), return_features=True).features
            records.append(FeatureRecord(
                s.id, t.label,
                feats.shared_feat.double().mean(dim=(1, 2))[0].numpy(),
                feats.injected_feat.double().mean(dim=(1, 2))[0].numpy(),
            ))
    return FeatureSet(records, prompts_untrained(model))


def project_2d(features) -> np.ndarray:
    """Top-two principal components of the centered rows.

    Each component's sign is chosen so its largest-magnitude loading is
    positive. If the data has rank < 2 the missing components are zero.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"need at least 3 feature rows, got shape {x.shape}")
    x = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(x, full_matrices=False)
    tol = sv.max(initial=0.0) * max(x.shape) * np.finfo(float).eps
    rank = int((sv > tol).sum())
    comps = np.zeros((2, x.shape[1]))
    for i in range(min(2, rank)):
        v = vt[i]
        comps[i] = v if v[np.argmax(np.abs(v))] > 0 else -v
    if rank < 2:
        warnings.warn(f"features have rank {rank}; missing principal components are set to zero", RuntimeWarning)
    return x @ comps.T


def _mean_dist(a: np.ndarray, b: np.ndarray, same: bool) -> tuple[float, int]:
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    if same:
        iu = np.triu_indices(len(a), k=1)
        return float(d[iu].sum()), len(iu[0])
    return float(d.sum()), d.size


def separation(records) -> SeparationReport:
    """Mean within-task and cross-task Euclidean distance of injected features."""
    groups = {}
    for r in records:
        groups.setdefault(r.task, []).append(r.injected)
    if len(groups) < 2:
        raise ValueError(f"separation needs at least two tasks, got {sorted(groups)}")
    groups = {k: np.stack(v) for k, v in sorted(groups.items())}
    names = list(groups)
    intra_sum = intra_n = inter_sum = inter_n = 0
    for i, a in enumerate(names):
        s, n = _mean_dist(groups[a], groups[a], same=True)
        intra_sum, intra_n = intra_sum + s, intra_n + n
        for b in names[i + 1:]:
            s, n = _mean_dist(groups[a], groups[b], same=False)
            inter_sum, inter_n = inter_sum + s, inter_n + n
    intra = intra_sum / intra_n if intra_n else 0.0
    inter = inter_sum / inter_n
    top = max(intra, inter)
    return SeparationReport(intra, inter, {k: v.mean(axis=0) for k, v in groups.items()},
                            (inter - intra) / top if top > 0 else 0.0)


def scatter_points(fs: FeatureSet):
    """Shared features (one per sample, label "general") plus injected ones per task."""
    feats, labels, seen = [], [], set()
    for r in fs.records:
        if r.id not in seen:
            seen.add(r.id)
            feats.append(r.shared)
            labels.append("general")
    for r in fs.records:
        feats.append(r.injected)
        labels.append(r.task)
    return np.stack(feats), labels


def legend_labels(labels) -> list:
    """Labels present, in legend order: general, then tasks, then anything else sorted."""
    labels = set(labels)
    return [l for l in LABEL_ORDER if l in labels] + sorted(labels - set(LABEL_ORDER))


def emit_scatter(points, labels, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"cannot write {path}: directory {path.parent} does not exist")
    points = np.asarray(points, dtype=np.float64)
    labels = list(labels)
    if len(points) != len(labels):
        raise ValueError(f"{len(points)} points but {len(labels)} labels")
    present = legend_labels(labels)
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    for name in present:
        idx = [i for i, l in enumerate(labels) if l == name]
        ax.scatter(points[idx, 0], points[idx, 1], s=14, label=name, c=COLORS.get(name, "#000000"))
    ax.legend(loc="best")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    fig.tight_layout()
    fmt = path.suffix.lstrip(".").lower() or "png"
    meta = {"Date": None} if fmt == "svg" else {"Software": None}
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def write_features_csv(fs: FeatureSet, path) -> None:
    dim = len(fs.records[0].shared) if fs.records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "task", "stage"] + [f"d{i}" for i in range(dim)])
        for r in fs.records:
            w.writerow([r.id, r.task, "shared"] + [repr(float(v)) for v in r.shared])
            w.writerow([r.id, r.task, "injected"] + [repr(float(v)) for v in r.injected])


def inspect_prompts(model, samples, out_dir, tasks=None) -> dict:
    """Write features.csv, separation.json and scatter.png; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fs = extract_features(model, samples, tasks)
    write_features_csv(fs, out / "features.csv")
    rep = separation(fs.records)
    summary = {"meta": fs.meta(), "separation": rep.to_dict()}
    (out / "separation.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    pts, labels = scatter_points(fs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        xy = project_2d(pts) if len(pts) >= 3 else np.zeros((len(pts), 2))
    emit_scatter(xy, labels, out / "scatter.png")
    return summary
