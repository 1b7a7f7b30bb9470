"""Evaluation metrics for removal, segmentation and tamper detection.

Removal metrics take 8-bit RGB (or grayscale) arrays. AGE/pEPs/pCEPs follow
the scene-text-removal convention: BT.601 luma, error pixel when the luma
difference exceeds 20, clustered error pixel when all four in-bounds
neighbours are error pixels too. Fractions are relative to the pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.metrics import structural_similarity

from .codec import REAL, TAMPERED

PSNR_CAP = 100.0
ERROR_THRESHOLD = 20.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse)))


def mssim(a, b) -> float:
    """Mean SSIM (percent) on luma, 11x11 Gaussian window with sigma 1.5."""
    a, b = _pair(a, b)
    ga, gb = gray(a), gray(b)
    if min(ga.shape) < 11:
        raise ValueError(f"image {ga.shape} is smaller than the 11x11 SSIM window")
    val = structural_similarity(ga, gb, data_range=255.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, K1=0.01, K2=0.03)
    return float(val * 100.0)


def mse_percent(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(((a - b) / 255.0) ** 2) * 100.0)


def age(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(gray(a) - gray(b))))


def error_map(a, b, threshold: float = ERROR_THRESHOLD) -> np.ndarray:
    a, b = _pair(a, b)
    return np.abs(gray(a) - gray(b)) > threshold


def peps(a, b) -> float:
    return float(error_map(a, b).mean())


def clustered_errors(err: np.ndarray) -> np.ndarray:
    out = np.zeros_like(err)
    out[1:-1, 1:-1] = (err[1:-1, 1:-1] & err[:-2, 1:-1] & err[2:, 1:-1] & err[1:-1, :-2] & err[1:-1, 2:])
    return out


def pceps(a, b) -> float:
    return float(clustered_errors(error_map(a, b)).mean())


# --- confusion-based scores -------------------------------------------------------

@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
        return cls(int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum()),
                   int((~pred & ~gt).sum()))

    def scores(self) -> dict:
        """IoU/P/R/F in percent. Empty foreground on both sides counts as a perfect IoU."""
        tp, fp, fn = self.tp, self.fp, self.fn
        iou = 100.0 if tp + fp + fn == 0 else 100.0 * tp / (tp + fp + fn)
        p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return {"iou": iou, "p": p, "r": r, "f": f}


def _check_binary(m, name):
    m = np.asarray(m)
    if not np.isin(m, (0, 1)).all():
        raise ValueError(f"{name} mask must be binary")
    return m.astype(bool)


def seg_counts(pred, gt) -> ConfusionCounts:
    pred, gt = _check_binary(pred, "predicted"), _check_binary(gt, "ground-truth")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return ConfusionCounts.from_masks(pred, gt)


def seg_scores(pred, gt) -> dict:
    s = seg_counts(pred, gt).scores()
    return {"fgIoU": s["iou"], "P": s["p"], "R": s["r"], "F": s["f"]}


def tamper_counts(pred, gt) -> dict:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    for name, m in (("predicted", pred), ("ground-truth", gt)):
        if not np.isin(m, (0, 1, 2)).all():
            raise ValueError(f"{name} tamper map has classes outside {{0,1,2}}")
    return {"tampered": ConfusionCounts.from_masks(pred == TAMPERED, gt == TAMPERED),
            "real": ConfusionCounts.from_masks(pred == REAL, gt == REAL)}


def tamper_report(counts: dict) -> dict:
    out = {}
    for cls in ("tampered", "real"):
        s = counts[cls].scores()
        out[cls] = {"IoU": s["iou"], "P": s["p"], "R": s["r"], "F": s["f"]}
    out["mIoU"] = (out["tampered"]["IoU"] + out["real"]["IoU"]) / 2
    out["mF"] = (out["tampered"]["F"] + out["real"]["F"]) / 2
    return out


def tamper_scores(pred, gt) -> dict:
    return tamper_report(tamper_counts(pred, gt))


# --- Frechet distance ----------------------------------------------------------------

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of (S_a S_b)^(1/2) is taken as the trace of
    (S_a^(1/2) S_b S_a^(1/2))^(1/2), which is symmetric PSD and shares its
    eigenvalues.
    """
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(vals)))
    return max(d, 0.0)


def gaussian_fit(emb: np.ndarray, eps: float = 1e-6):
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim == 1:
        emb = emb[:, None]
    if emb.shape[0] < 2:
        raise ValueError("need at least 2 embeddings for a Gaussian fit")
    cov = np.atleast_2d(np.cov(emb, rowvar=False)) + eps * np.eye(emb.shape[1])
    return emb.mean(axis=0), cov


def fid_from_embeddings(emb_a, emb_b) -> float:
    mu_a, cov_a = gaussian_fit(emb_a)
    mu_b, cov_b = gaussian_fit(emb_b)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def fid(set_a, set_b, embedder) -> float:
    """Frechet distance between embedding Gaussians of two image sets.

    ``embedder`` maps a list of HxWx3 uint8 images to an (N, D) array.
    """
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("FID needs at least 2 images per set")
    return fid_from_embeddings(np.asarray(embedder(list(set_a))), np.asarray(embedder(list(set_b))))


def removal_image_metrics(pred, gt) -> dict:
    return {
        "psnr": psnr(pred, gt),
        "mssim": mssim(pred, gt),
        "mse": mse_percent(pred, gt),
        "age": age(pred, gt),
        "peps": peps(pred, gt),
        "pceps": pceps(pred, gt),
    }
