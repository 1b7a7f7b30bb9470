import json
from collections import Counter

import numpy as np
import pytest
import torch

from pixocr.codec import TaskId
from pixocr.losses import FeatureExtractor
from pixocr.model import build_model, preset, read_checkpoint
from pixocr.synthdata import GeneratorConfig, TaskSample, generate
from pixocr.train import (
    TRAIN_PRESETS,
    ScheduleState,
    TaskStream,
    TrainConfig,
    TrainingError,
    build_batch,
    init_weights,
    lr_at,
    make_optimizer,
    set_lr,
    train_loop,
    train_step,
)


def tiny_cfg(**kw):
    base = dict(total_iters=4, per_task_batch=(1, 1, 1), lr_step=2, image_size=64, preset="toy",
                checkpoint_every=2, lr_start=1e-3, lr_end=1e-4)
    base.update(kw)
    return TrainConfig(**base)


def by_task(n=2):
    out = {}
    for s in generate(GeneratorConfig(), list(TaskId), n):
        out.setdefault(s.task, []).append(s)
    return out


def test_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.total_iters == 80000 and cfg.batch_size == 48 and cfg.per_task_batch == (16, 16, 16)
    assert (cfg.lr_start, cfg.lr_end, cfg.lr_step) == (5e-4, 1e-5, 200)
    assert cfg.betas == (0.9, 0.999) and cfg.weight_decay == 0.05
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(total_iters=1000, lr_step=300)
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig.from_dict({"batch_size": 12})
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert TRAIN_PRESETS["toy"].batch_size == 6


def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 5e-4
    assert lr_at(79999, cfg) == 1e-5
    two = TrainConfig(total_iters=400)
    assert {lr_at(i, two) for i in range(200)} == {5e-4}
    assert {lr_at(i, two) for i in range(200, 400)} == {1e-5}
    for bad in (-1, 80000):
        with pytest.raises(ValueError):
            lr_at(bad, cfg)


def test_lr_matches_window_formula():
    cfg = TrainConfig(total_iters=2000)
    k_total = 10
    for it in range(2000):
        k = it // 200
        want = 5e-4 + (1e-5 - 5e-4) * k / (k_total - 1)
        assert lr_at(it, cfg) == pytest.approx(want, rel=1e-12)


def test_task_stream_epochs():
    items = list("abcd")
    st = TaskStream(items, np.random.default_rng(0))
    seen = Counter(st.next() for _ in range(8))
    assert seen == Counter({c: 2 for c in items})
    with pytest.raises(TrainingError):
        TaskStream([], np.random.default_rng(0))


def test_build_batch_composition():
    cfg = TRAIN_PRESETS["toy"]
    streams = {t: TaskStream(v, np.random.default_rng(int(t))) for t, v in by_task(3).items()}
    rng = np.random.default_rng(0)
    for _ in range(5):
        batch = build_batch(streams, cfg, rng)
        assert len(batch) == 6
        assert Counter(s.task for s in batch) == {TaskId.REMOVAL: 2, TaskId.SEGMENTATION: 2, TaskId.TAMPER: 2}
    default = TrainConfig()
    big = build_batch(streams, default, rng)
    assert Counter(s.task for s in big) == {t: 16 for t in TaskId}
    del streams[TaskId.TAMPER]
    with pytest.raises(TrainingError, match="tamper"):
        build_batch(streams, cfg, rng)


def test_optimizer_groups():
    model = build_model(preset("toy"), seed=0)
    opt = make_optimizer(model, TRAIN_PRESETS["toy"])
    decays = [g["weight_decay"] for g in opt.param_groups]
    assert decays == [0.05, 0.0, 0.0]
    assert opt.param_groups[2]["lr_scale"] == 10.0
    set_lr(opt, 1e-3)
    assert opt.param_groups[0]["lr"] == 1e-3 and opt.param_groups[2]["lr"] == pytest.approx(1e-2)


def test_quadratic_converges_within_200_steps():
    target = 3.0

    class One(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.zeros(1, 1))

    m = One()
    cfg = TrainConfig(total_iters=200, lr_step=20, lr_start=0.1, lr_end=1e-3, weight_decay=0.0)
    opt = make_optimizer(m, cfg)
    for it in range(cfg.total_iters):
        set_lr(opt, lr_at(it, cfg))
        loss = ((m.w - target) ** 2).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert abs(m.w.item() - target) < 1e-2


def test_zero_gradient_batch_leaves_params():
    torch.set_num_threads(1)
    model = build_model(preset("toy"), seed=0)
    with torch.no_grad():
        for conv in model.head.values():
            conv.weight.zero_()
            conv.bias.zero_()
    cfg = tiny_cfg(weight_decay=0.0, per_task_batch=(0, 2, 0))
    black = np.zeros((64, 64, 3), dtype=np.uint8)
    rng = np.random.default_rng(0)
    batch = [TaskSample(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8), black, TaskId.SEGMENTATION, f"s{i}")
             for i in range(2)]
    before = {k: v.clone() for k, v in model.state_dict().items()}
    state = ScheduleState()
    parts = train_step(model, batch, cfg, state, make_optimizer(model, cfg), None)
    assert parts["segmentation"]["l_total"] == 0.0
    assert state.iter == 1 and state.lr == lr_at(0, cfg)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_non_finite_loss_dumps_diagnostics():
    model = build_model(preset("toy"), seed=0)
    with torch.no_grad():
        model.head["full"].bias.fill_(float("nan"))
    cfg = tiny_cfg(per_task_batch=(0, 1, 0))
    sample = by_task(1)[TaskId.SEGMENTATION]
    with pytest.raises(TrainingError) as err:
        train_step(model, sample, cfg, ScheduleState(iter=3), make_optimizer(model, cfg), None)
    dump = json.loads(str(err.value))
    assert dump["step"] == 3 and "segmentation" in dump["losses"] and dump["grad_norms"]


def test_init_weights_partial(tmp_path):
    from pixocr.model import save_checkpoint

    src = build_model(preset("toy"), seed=1)
    ckpt = tmp_path / "enc.pt"
    save_checkpoint(ckpt, src, {})
    payload = torch.load(ckpt, weights_only=True)
    payload["params"] = {k: v for k, v in payload["params"].items() if k.startswith("encoder.")}
    torch.save(payload, ckpt)
    model = build_model(preset("toy"), seed=0)
    rep = init_weights(model, str(ckpt), seed=0)
    assert rep.loaded == sorted(payload["params"])
    assert rep.missing == sorted(k for k in model.state_dict() if not k.startswith("encoder."))
    assert any(k.startswith("decoder.") for k in rep.missing)
    fresh = build_model(preset("toy"), seed=0).state_dict()
    for k, v in model.state_dict().items():
        assert torch.equal(v, src.state_dict()[k] if k.startswith("encoder.") else fresh[k])
    zero = build_model(preset("toy"), seed=0)
    init_weights(zero, "random", seed=0)
    for name in zero.prompts.names:
        assert torch.count_nonzero(getattr(zero.prompts, name)) == 0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    model, final = train_loop(tiny_cfg(), None, out, samples=by_task())
    return out, model, final


def test_loop_writes_logs_and_checkpoints(trained):
    out, model, final = trained
    lines = [json.loads(l) for l in (out / "loss_log.jsonl").read_text().splitlines()]
    assert len(lines) == 4 * 3
    assert set(lines[0]) == {"step", "task", "lr", "l_pix", "l_per", "l_sty", "l_total"}
    assert [l["step"] for l in lines[::3]] == [0, 1, 2, 3]
    assert all(l["lr"] == lr_at(l["step"], tiny_cfg()) for l in lines)
    assert all(np.isfinite(l["l_total"]) for l in lines)
    mid = read_checkpoint(out / "ckpt_000002.pt")
    assert mid["header"]["schedule"]["iter"] == 2
    assert read_checkpoint(final)["header"]["schedule"]["iter"] == 4


def test_loop_is_deterministic(trained, tmp_path):
    out, model, _ = trained
    again, _ = train_loop(tiny_cfg(), None, tmp_path, samples=by_task())
    assert (tmp_path / "loss_log.jsonl").read_bytes() == (out / "loss_log.jsonl").read_bytes()
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), again.state_dict().values()))


def test_resume_matches_uninterrupted(trained, tmp_path):
    out, model, _ = trained
    half = tmp_path / "half"
    half.mkdir()
    # replay the first half of the log, then resume from the mid checkpoint
    lines = (out / "loss_log.jsonl").read_text().splitlines(keepends=True)
    (half / "loss_log.jsonl").write_text("".join(lines[:6]))
    resumed, _ = train_loop(tiny_cfg(), None, half, resume=out / "ckpt_000002.pt", samples=by_task())
    assert (half / "loss_log.jsonl").read_bytes() == (out / "loss_log.jsonl").read_bytes()
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), resumed.state_dict().values()))


def test_resume_rejects_config_change(trained, tmp_path):
    out, _, _ = trained
    with pytest.raises(TrainingError, match="config differs"):
        train_loop(tiny_cfg(lr_start=2e-3), None, tmp_path, resume=out / "ckpt_000002.pt", samples=by_task())


def test_loop_rejects_missing_task_and_wrong_size(tmp_path):
    data = by_task()
    del data[TaskId.REMOVAL]
    with pytest.raises(TrainingError, match="removal"):
        train_loop(tiny_cfg(), None, tmp_path, samples=data)
    with pytest.raises(TrainingError, match="size"):
        train_loop(tiny_cfg(image_size=96), None, tmp_path, samples=by_task())


def test_extractor_untouched_by_training():
    model = build_model(preset("toy"), seed=0)
    ext = FeatureExtractor()
    before = [p.clone() for p in ext.parameters()]
    cfg = tiny_cfg(per_task_batch=(2, 0, 0))
    parts = train_step(model, by_task()[TaskId.REMOVAL], cfg, ScheduleState(), make_optimizer(model, cfg), ext)
    assert parts["removal"]["l_sty"] > 0
    assert all(torch.equal(a, b) for a, b in zip(before, ext.parameters()))
