import csv
import json

import numpy as np
import pytest
from PIL import Image

from pixocr import metrics as M
from pixocr.codec import TaskId, decode
from pixocr.evaluate import Embedder, MetricReport, evaluate_dataset, predict_rgb
from pixocr.synthdata import DatasetError, GeneratorConfig, generate, read_dataset, write_dataset

CFG = GeneratorConfig()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    write_dataset(generate(CFG, list(TaskId), 3), d, CFG)
    return d


def write_preds(pred_dir, samples, fn):
    (pred_dir / "rgb").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(fn(s)).save(pred_dir / "rgb" / f"{s.id}.png")


def test_gt_against_itself(data_dir, tmp_path):
    ds = read_dataset(data_dir)
    for task in TaskId:
        pred = tmp_path / task.label
        write_preds(pred, ds.samples(task), lambda s: s.target)
        rep = evaluate_dataset(pred, data_dir, task)
        assert rep.count == 3
        m = rep.metrics
        if task is TaskId.REMOVAL:
            assert m["psnr"] == 100.0 and m["mssim"] == pytest.approx(100.0)
            assert m["mse"] == m["age"] == m["peps"] == m["pceps"] == 0.0
            assert m["fid"] <= 1e-6
        elif task is TaskId.SEGMENTATION:
            assert m == {"fgIoU": 100.0, "P": 100.0, "R": 100.0, "F": 100.0}
        else:
            assert m["mIoU"] == 100.0 and m["mF"] == 100.0


def test_removal_report_matches_recomputation(data_dir, tmp_path):
    ds = read_dataset(data_dir)
    samples = ds.samples("removal")
    write_preds(tmp_path, samples, lambda s: s.input)
    rep = evaluate_dataset(tmp_path, data_dir, "removal")
    rows = [M.removal_image_metrics(s.input, s.target) for s in samples]
    for key in ("psnr", "mssim", "mse", "age", "peps", "pceps"):
        assert rep.metrics[key] == pytest.approx(np.mean([r[key] for r in rows]), rel=1e-12)
    emb = Embedder.load()
    assert rep.metrics["fid"] == pytest.approx(M.fid([s.input for s in samples], [s.target for s in samples], emb))
    assert "default" in rep.embedder


def test_seg_report_pools_counts(data_dir, tmp_path):
    ds = read_dataset(data_dir)
    samples = ds.samples("segmentation")
    write_preds(tmp_path, samples, lambda s: np.roll(s.target, 1, axis=1))
    rep = evaluate_dataset(tmp_path, data_dir, "segmentation")
    total = M.ConfusionCounts()
    for s in samples:
        total = total + M.seg_counts(decode("segmentation", np.roll(s.target, 1, axis=1) / 255.0),
                                     decode("segmentation", s.target / 255.0))
    assert rep.metrics["fgIoU"] == pytest.approx(total.scores()["iou"])
    assert len(rep.per_image) == 3


def test_single_sample_equals_image_metrics(tmp_path):
    d = tmp_path / "one"
    s = generate(CFG, ["removal"], 1)
    write_dataset(s, d, CFG)
    write_preds(tmp_path / "pred", s, lambda x: x.input)
    rep = evaluate_dataset(tmp_path / "pred", d, "removal")
    want = M.removal_image_metrics(s[0].input, s[0].target)
    assert {k: rep.metrics[k] for k in want} == pytest.approx(want)
    assert rep.metrics["fid"] is None


def test_errors(data_dir, tmp_path):
    only = tmp_path / "only_seg"
    write_dataset(generate(CFG, ["segmentation"], 1), only, CFG)
    with pytest.raises(DatasetError, match="no tamper records"):
        evaluate_dataset(tmp_path, only, "tamper")
    with pytest.raises(DatasetError, match="missing prediction"):
        evaluate_dataset(tmp_path / "empty", data_dir, "segmentation")
    ds = read_dataset(data_dir)
    write_preds(tmp_path / "small", ds.samples("tamper"), lambda s: s.target[:32])
    with pytest.raises(DatasetError, match="shape"):
        evaluate_dataset(tmp_path / "small", data_dir, "tamper")
    with pytest.raises(FileNotFoundError):
        Embedder.load(str(tmp_path / "nope.pt"))


def test_model_source(data_dir, toy_model):
    rep = evaluate_dataset(toy_model, data_dir, "tamper")
    assert rep.count == 3 and 0 <= rep.metrics["mIoU"] <= 100
    img = read_dataset(data_dir).samples("tamper")[0].input
    out = predict_rgb(toy_model, img, "tamper")
    assert out.dtype == np.uint8 and out.shape == img.shape


def test_report_serialization(tmp_path):
    rep = MetricReport("tamper", 1, {"mIoU": 50.0, "real": {"IoU": 1.0}}, per_image=[{"id": "a", "mIoU": 50.0}])
    d = json.loads(rep.to_json())
    assert d["version"] == 1 and d["task"] == "tamper" and d["metrics"]["real"]["IoU"] == 1.0
    assert "real.IoU" in rep.table()
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows == [["id", "mIoU"], ["a", "50.0"]]
