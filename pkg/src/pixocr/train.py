"""Multi-task training: fixed per-task batch composition, stepwise linear LR
decay, AdamW, JSON-lines loss logs and resumable checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .codec import TaskId, task_names
from .losses import FeatureExtractor, LossConfig, total_loss
from .model import PixelOCRNet, load_params, preset, random_init, read_checkpoint, save_checkpoint
from .model.checkpoint import LoadReport
from .synthdata import read_dataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 80000
    per_task_batch: tuple = (16, 16, 16)  # removal, segmentation, tamper
    lr_start: float = 5e-4
    lr_end: float = 1e-5
    lr_step: int = 200
    weight_decay: float = 0.05
    prompt_lr_scale: float = 1.0  # prompt vectors train at lr * scale
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    image_size: int = 512
    preset: str = "small"
    init: str = "random"  # or a checkpoint path
    vgg_weights: Optional[str] = None
    checkpoint_every: int = 5000
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "per_task_batch", tuple(int(n) for n in self.per_task_batch))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig.from_dict(self.loss))
        if len(self.per_task_batch) != len(TaskId) or min(self.per_task_batch) < 0 or self.batch_size == 0:
            raise ValueError("per_task_batch needs one non-negative count per task and a positive total")
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("need lr_start > lr_end > 0")
        if self.lr_step < 1 or self.total_iters % self.lr_step:
            raise ValueError(f"total_iters {self.total_iters} must be a multiple of lr_step {self.lr_step}")
        if self.total_iters // self.lr_step < 2:
            raise ValueError("the schedule needs at least two lr windows")
        if self.prompt_lr_scale <= 0:
            raise ValueError("prompt_lr_scale must be positive")
        if self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")

    @property
    def batch_size(self) -> int:
        return sum(self.per_task_batch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_task_batch"] = list(self.per_task_batch)
        d["betas"] = list(self.betas)
        d["loss"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.loss.to_dict().items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        bs = d.pop("batch_size", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        cfg = cls(**d)
        if bs is not None and bs != cfg.batch_size:
            raise ValueError(f"batch_size {bs} != sum of per_task_batch {cfg.batch_size}")
        return cfg


# Built-in run recipes. "small" is the full schedule; "toy" is the desk-scale
# overfit recipe (500 iterations of 2/2/2 batches on 64x64 images).
TRAIN_PRESETS = {
    "small": TrainConfig(),
    "toy": TrainConfig(total_iters=500, per_task_batch=(2, 2, 2), lr_start=1e-3, lr_end=2e-5, lr_step=100,
                       betas=(0.9, 0.99), prompt_lr_scale=10.0, image_size=64, preset="toy", checkpoint_every=100),
}


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Piecewise-constant linear decay: window k of K gets
    lr_start + (lr_end - lr_start) * k / (K - 1)."""
    if not 0 <= it < cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters})")
    windows = cfg.total_iters // cfg.lr_step
    k = it // cfg.lr_step
    if k == windows - 1:
        return cfg.lr_end
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * k / (windows - 1)


class TaskStream:
    """Endless sample stream for one task; reshuffles after every pass."""

    def __init__(self, samples: list, rng: np.random.Generator):
        if not samples:
            raise TrainingError("empty sample stream")
        self.samples = samples
        self.rng = rng
        self.order = rng.permutation(len(samples))
        self.pos = 0

    def next(self):
        if self.pos == len(self.order):
            self.order = self.rng.permutation(len(self.samples))
            self.pos = 0
        s = self.samples[self.order[self.pos]]
        self.pos += 1
        return s

    def state(self) -> dict:
        return {"order": self.order.tolist(), "pos": self.pos}

    def restore(self, state: dict) -> None:
        self.order = np.asarray(state["order"], dtype=np.int64)
        self.pos = int(state["pos"])


def build_batch(streams: dict, cfg: TrainConfig, rng: np.random.Generator) -> list:
    """Exactly ``per_task_batch[t]`` samples of each task, shuffled together."""
    batch = []
    for task, n in zip(TaskId, cfg.per_task_batch):
        if n == 0:
            continue
        if task not in streams:
            raise TrainingError(f"no training samples for task {task.label}")
        batch.extend(streams[task].next() for _ in range(n))
    return [batch[i] for i in rng.permutation(len(batch))]


@dataclass
class ScheduleState:
    iter: int = 0
    lr: float = 0.0
    rng_state: Optional[dict] = None
    stream_states: dict = field(default_factory=dict)
    loss_avg: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW; biases, norm scales, prompts and other 1-D parameters are not decayed."""
    prompt_ids = {id(getattr(model.prompts, n)) for n in model.prompts.names} if hasattr(model, "prompts") else set()
    params = [p for p in model.parameters() if p.requires_grad]
    groups = [
        {"params": [p for p in params if p.ndim > 1], "weight_decay": cfg.weight_decay, "lr_scale": 1.0},
        {"params": [p for p in params if p.ndim <= 1 and id(p) not in prompt_ids], "weight_decay": 0.0,
         "lr_scale": 1.0},
        {"params": [p for p in params if id(p) in prompt_ids], "weight_decay": 0.0,
         "lr_scale": cfg.prompt_lr_scale},
    ]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=cfg.lr_start, betas=cfg.betas)


def set_lr(optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)


def collate(batch: list):
    """List of TaskSample -> (inputs, targets, masks, task ids) tensors in [0, 1]."""
    inp = torch.from_numpy(np.stack([s.input for s in batch])).permute(0, 3, 1, 2).float() / 255.0
    tgt = torch.from_numpy(np.stack([s.target for s in batch])).permute(0, 3, 1, 2).float() / 255.0
    h, w = batch[0].input.shape[:2]
    masks = torch.from_numpy(np.stack([
        s.mask if s.mask is not None else np.zeros((h, w), dtype=np.uint8) for s in batch
    ])).float()[:, None]
    tasks = torch.tensor([int(s.task) for s in batch])
    return inp, tgt, masks, tasks


def _grad_norms(model) -> dict:
    return {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}


def train_step(model: PixelOCRNet, batch: list, cfg: TrainConfig, state: ScheduleState, optimizer,
               extractor) -> dict:
    """One optimizer update on a mixed-task batch. Returns per-task loss breakdowns."""
    model.train()
    lr = lr_at(state.iter, cfg)
    set_lr(optimizer, lr)
    inp, tgt, masks, tasks = collate(batch)
    out = model(inp, tasks)
    outs = out.scales()
    loss = 0.0
    breakdown = {}
    for task in TaskId:
        sel = (tasks == int(task)).nonzero().flatten()
        if len(sel) == 0:
            continue
        mask = masks[sel] if task is TaskId.REMOVAL else None
        l, parts = total_loss(task, inp[sel], tgt[sel], [o[sel] for o in outs], cfg.loss, mask=mask,
                              extractor=extractor)
        # mean of per-sample totals across the whole batch
        loss = loss + l * (len(sel) / len(batch))
        breakdown[task.label] = parts
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        norms = _grad_norms(model)
        raise TrainingError(json.dumps({"step": state.iter, "losses": breakdown,
                                        "grad_norms": norms}, default=str))
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    state.lr = lr
    for name, parts in breakdown.items():
        prev = state.loss_avg.get(name)
        state.loss_avg[name] = parts["l_total"] if prev is None else 0.9 * prev + 0.1 * parts["l_total"]
    state.iter += 1
    return breakdown


def init_weights(model: PixelOCRNet, source: str = "random", seed: int = 0) -> LoadReport:
    """Random init, or a shape-checked load from a checkpoint.

    Loading may be partial (e.g. an encoder-only file); tensors the file does
    not provide keep a fresh random init and are listed in the report.
    """
    random_init(model, seed)
    if source == "random":
        return LoadReport(missing=sorted(model.state_dict()))
    payload = read_checkpoint(source)
    report = load_params(model, payload["params"], strict=False)
    log.info("init from %s: %s", source, report.summary())
    return report


def load_training_samples(dataset_dirs) -> dict:
    streams = {}
    for d in dataset_dirs:
        ds = read_dataset(d)
        for s in ds:
            streams.setdefault(s.task, []).append(s)
    return streams


def _config_fingerprint(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d.pop("checkpoint_every")
    return d


def train_loop(cfg: TrainConfig, dataset_dirs, out_dir, resume=None, samples: Optional[dict] = None,
               log_every: int = 1, torch_threads: Optional[int] = 1):
    """Run ``cfg.total_iters`` steps. Returns ``(model, final_checkpoint_path)``.

    Writes ``loss_log.jsonl`` and ``ckpt_<iter>.pt`` / ``final.pt`` into
    ``out_dir``. ``samples`` may be passed directly (task -> list of
    TaskSample) instead of dataset directories.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if torch_threads:
        torch.set_num_threads(torch_threads)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)

    by_task = samples if samples is not None else load_training_samples(dataset_dirs)
    by_task = {TaskId.parse(k): v for k, v in by_task.items()}
    for task, n in zip(TaskId, cfg.per_task_batch):
        if n and not by_task.get(task):
            raise TrainingError(f"no training samples for task {task.label}")
        for s in by_task.get(task, []):
            if s.input.shape[:2] != (cfg.image_size, cfg.image_size):
                raise TrainingError(f"sample {s.id} has size {s.input.shape[:2]}, expected {cfg.image_size}")

    model = PixelOCRNet(preset(cfg.preset))
    extractor = (FeatureExtractor.from_vgg16(cfg.vgg_weights) if cfg.vgg_weights
                 else FeatureExtractor())
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    streams = {t: TaskStream(v, np.random.default_rng([cfg.seed, int(t)])) for t, v in sorted(by_task.items())}
    state = ScheduleState(lr=cfg.lr_start)
    log_path = out / "loss_log.jsonl"

    if resume is not None:
        payload = read_checkpoint(resume)
        saved = payload["header"].get("train")
        if saved is None or saved != _config_fingerprint(cfg):
            raise TrainingError(f"cannot resume from {resume}: training config differs")
        load_params(model, payload["params"], strict=True)
        optimizer.load_state_dict(payload["optimizer"])
        sched = payload["header"]["schedule"]
        state = ScheduleState(iter=sched["iter"], lr=sched["lr"], rng_state=sched["rng_state"],
                              stream_states=sched["stream_states"], loss_avg=sched["loss_avg"])
        rng.bit_generator.state = state.rng_state["batch"]
        for t, st in streams.items():
            st.rng.bit_generator.state = state.rng_state[t.label]
            st.restore(state.stream_states[t.label])
        mode = "a"
    else:
        report = init_weights(model, cfg.init, cfg.seed)
        if cfg.init != "random":
            log.info("%s", report.summary())
        mode = "w"

    def snapshot(path):
        state.rng_state = {"batch": rng.bit_generator.state, **{t.label: s.rng.bit_generator.state
                                                                 for t, s in streams.items()}}
        state.stream_states = {t.label: s.state() for t, s in streams.items()}
        header = {"train": _config_fingerprint(cfg), "loss": cfg.loss.to_dict(), "schedule": state.to_dict()}
        save_checkpoint(path, model, header, optimizer)

    with open(log_path, mode) as fh:
        while state.iter < cfg.total_iters:
            step = state.iter
            batch = build_batch(streams, cfg, rng)
            parts = train_step(model, batch, cfg, state, optimizer, extractor)
            if step % log_every == 0 or state.iter == cfg.total_iters:
                for task in task_names():
                    if task in parts:
                        p = parts[task]
                        rec = {"step": step, "task": task, "lr": lr_at(step, cfg),
                               "l_pix": p["l_pix"], "l_per": p.get("l_per", 0.0),
                               "l_sty": p.get("l_sty", 0.0), "l_total": p["l_total"]}
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
                fh.flush()
            if cfg.checkpoint_every and state.iter % cfg.checkpoint_every == 0 and state.iter < cfg.total_iters:
                snapshot(out / f"ckpt_{state.iter:06d}.pt")
    final = out / "final.pt"
    snapshot(final)
    return model, final
