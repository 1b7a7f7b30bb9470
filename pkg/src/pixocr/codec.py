"""Mapping between task labels and the shared RGB output space.

Every task is trained as RGB -> RGB translation. Segmentation masks become
white-on-black images, tamper maps become red/green/blue images, and removal
targets are used as-is. Decoding turns a predicted RGB image (float, [0, 1])
back into the task-specific structure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class TaskId(enum.IntEnum):
    REMOVAL = 0
    SEGMENTATION = 1
    TAMPER = 2

    @classmethod
    def parse(cls, value: "TaskId | str | int") -> "TaskId":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown task {value!r}; expected one of {task_names()}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"unknown task index {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


def task_names() -> list[str]:
    return [t.label for t in TaskId]


# class indices of a tamper map
TAMPERED, REAL, BACKGROUND = 0, 1, 2


@dataclass(frozen=True)
class ColorMap:
    seg_fg: tuple[int, int, int] = (255, 255, 255)
    seg_bg: tuple[int, int, int] = (0, 0, 0)
    tamper: tuple[int, int, int] = (255, 0, 0)
    real: tuple[int, int, int] = (0, 255, 0)
    background: tuple[int, int, int] = (0, 0, 255)
    seg_threshold: float = 0.4

    def __post_init__(self):
        colors = [self.seg_fg, self.seg_bg]
        if len(set(colors)) != 2 or len({self.tamper, self.real, self.background}) != 3:
            raise ValueError("codec colors must be distinct")
        if not 0.0 < self.seg_threshold < 1.0:
            raise ValueError("seg_threshold must lie in (0, 1)")

    @property
    def tamper_palette(self) -> np.ndarray:
        return np.array([self.tamper, self.real, self.background], dtype=np.uint8)


DEFAULT_COLORS = ColorMap()


def encode_target(task, label: np.ndarray, colors: ColorMap = DEFAULT_COLORS) -> np.ndarray:
    """Encode a task label as an 8-bit HxWx3 RGB image."""
    task = TaskId.parse(task)
    label = np.asarray(label)
    if task is TaskId.REMOVAL:
        if label.ndim != 3 or label.shape[2] != 3:
            raise ValueError(f"removal target must be HxWx3, got {label.shape}")
        return label.astype(np.uint8, copy=True)
    if label.ndim != 2:
        raise ValueError(f"{task.label} label must be a 2-D map, got {label.shape}")
    if task is TaskId.SEGMENTATION:
        if not np.isin(label, (0, 1)).all():
            raise ValueError("segmentation mask must be binary")
        out = np.empty(label.shape + (3,), dtype=np.uint8)
        out[...] = colors.seg_bg
        out[label.astype(bool)] = colors.seg_fg
        return out
    bad = ~np.isin(label, (TAMPERED, REAL, BACKGROUND))
    if bad.any():
        vals = np.unique(label[bad]).tolist()
        raise ValueError(f"tamper label contains classes outside {{0,1,2}}: {vals}")
    return colors.tamper_palette[label.astype(np.intp)]


def _as_unit(pred) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"prediction must be HxWx3, got {pred.shape}")
    return np.clip(pred, 0.0, 1.0)


def decode_segmentation(pred, colors: ColorMap = DEFAULT_COLORS) -> np.ndarray:
    """Foreground wherever the channel mean exceeds the threshold (strictly)."""
    # compare sums: the float mean of three equal values can land one ulp above them
    return (_as_unit(pred).sum(axis=-1) > 3 * colors.seg_threshold).astype(np.uint8)


def decode_tamper(pred) -> np.ndarray:
    # np.argmax returns the first maximum, which gives the R > G > B tie order
    return np.argmax(np.asarray(pred, dtype=np.float64), axis=-1).astype(np.uint8)


def decode_removal(pred) -> np.ndarray:
    return _as_unit(pred)


def decode(task, pred: np.ndarray) -> np.ndarray:
    task = TaskId.parse(task)
    if task is TaskId.REMOVAL:
        return decode_removal(pred)
    if task is TaskId.SEGMENTATION:
        return decode_segmentation(pred)
    return decode_tamper(pred)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] float image -> 8-bit with round-half-to-even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def to_unit(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


def decoded_to_png_array(task, decoded: np.ndarray) -> np.ndarray:
    """Array suitable for writing the decoded output as an 8-bit PNG.

    Segmentation masks are written as 0/255, tamper maps as raw class indices
    {0, 1, 2} in a single channel, removal images as RGB.
    """
    task = TaskId.parse(task)
    if task is TaskId.REMOVAL:
        return to_uint8(decoded)
    if task is TaskId.SEGMENTATION:
        return (decoded.astype(np.uint8) * 255)
    return decoded.astype(np.uint8)
