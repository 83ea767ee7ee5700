"""Exit criteria for the package, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists a
PASS/FAIL line per criterion.
"""
import csv
import time
from fractions import Fraction

import numpy as np
import pytest
from PIL import Image

from adlocus import cli
from adlocus import layers as L
from adlocus import metrics as M
from adlocus.model import (
    ModelConfig,
    build_model,
    forward,
    forward_with_cache,
    load_weights,
    save_weights,
)
from gradcheck import numeric_grad, rel_error

AC1 = "metric oracle suite (1000 random 64x64 pairs, |delta| < 1e-12, < 30 s)"
AC2 = "gradient suite vs central differences (rel err < 1e-4, < 60 s)"
AC3 = "architecture contract 3x200x200 -> 1x200x200, trace 200-100-50-25-50-100-200"
AC4 = "sweep/ROC contract (21 thresholds, endpoints, monotone FPR/TPR)"
AC5 = "end-to-end synthetic run (mIOU >= 0.60, PA >= 0.90, <= 15 epochs, <= 15 min, stable CSV)"
AC6 = "determinism and persistence (32-bit round trip, loss curves, CSV bytes)"
AC7 = "external-dataset-shaped manifest runs eval/sweep/roc unchanged"


def _tally(pred, truth):
    n = [[0, 0], [0, 0]]
    for t_row, p_row in zip(truth.tolist(), pred.tolist()):
        for t, p in zip(t_row, p_row):
            n[t][p] += 1
    return n


def _formulas(n):
    t = [n[0][0] + n[0][1], n[1][0] + n[1][1]]
    col = [n[0][0] + n[1][0], n[0][1] + n[1][1]]
    total = t[0] + t[1]
    recall = [Fraction(n[i][i], t[i]) for i in range(2) if t[i]]
    iou = {i: Fraction(n[i][i], t[i] + col[i] - n[i][i]) for i in range(2) if t[i] + col[i] - n[i][i]}
    tp, tn, fp, fn = n[1][1], n[0][0], n[0][1], n[1][0]
    return {
        "pa": Fraction(n[0][0] + n[1][1], total),
        "ma": sum(recall) / len(recall),
        "miou": sum(iou.values()) / len(iou),
        "fwiou": sum(t[i] * iou.get(i, 0) for i in range(2)) / Fraction(total),
        "accuracy": Fraction(tp + tn, tp + tn + fp + fn),
        "fpr": Fraction(fp, fp + tn) if fp + tn else Fraction(0),
        "tpr": Fraction(tp, tp + fn) if tp + fn else Fraction(0),
    }


def _implemented(c):
    fpr, tpr = M.fpr_tpr(c)
    return {
        "pa": M.pixel_accuracy(c), "ma": M.mean_accuracy(c), "miou": M.mean_iou(c),
        "fwiou": M.fw_iou(c), "accuracy": M.accuracy(c), "fpr": fpr, "tpr": tpr,
    }


@pytest.mark.criterion("AC1", AC1)
def test_ac1_metric_oracle_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2019)
    worst = 0.0
    for _ in range(1000):
        truth = (rng.random((64, 64)) < rng.uniform(0, 0.6)).astype(np.uint8)
        pred = (rng.random((64, 64)) < rng.uniform(0, 0.6)).astype(np.uint8)
        n = _tally(pred, truth)
        c = M.confusion(pred, truth)
        assert c.n.tolist() == n
        got, exp = _implemented(c), _formulas(n)
        for key in exp:
            worst = max(worst, abs(got[key] - float(exp[key])))
    assert worst < 1e-12

    c = M.confusion(np.array([[1, 1], [0, 0]]), np.array([[1, 0], [0, 0]]))
    fixture = _implemented(c)
    assert fixture["pa"] == 0.75
    assert abs(fixture["ma"] - 5 / 6) < 1e-12
    assert abs(fixture["miou"] - 7 / 12) < 1e-12
    assert abs(fixture["fwiou"] - 0.625) < 1e-12
    assert abs(fixture["fpr"] - 1 / 3) < 1e-12
    assert fixture["tpr"] == 1.0
    assert time.perf_counter() - start < 30


def _fd_check(forward_fn, backward_grads, inputs):
    """Compare analytic grads of sum(forward * upstream) against central differences."""
    worst = 0.0
    for x, g in zip(inputs, backward_grads):
        worst = max(worst, rel_error(g, numeric_grad(forward_fn, x)))
    return worst


@pytest.mark.criterion("AC2", AC2)
def test_ac2_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    errors = {}

    x, w, b = rng.normal(size=(3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    up = rng.normal(size=(4, 6, 6))
    g = L.conv2d_backward(x, w, up)
    errors["conv"] = _fd_check(lambda: np.sum(L.conv2d_forward(x, w, b) * up), [g.input_grad, *g.param_grads], [x, w, b])

    x = rng.permutation(108).reshape(3, 6, 6) * 0.01  # distinct values: no pooling ties
    up = rng.normal(size=(3, 3, 3))
    g = L.maxpool2_backward(L.maxpool2_forward(x)[1], up)
    errors["maxpool"] = _fd_check(lambda: np.sum(L.maxpool2_forward(x)[0] * up), [g.input_grad], [x])

    x, up = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 6, 6))
    errors["upsample"] = _fd_check(lambda: np.sum(L.upsample2_forward(x) * up), [L.upsample2_backward(up).input_grad], [x])

    x = rng.normal(size=(3, 6, 6))
    while (np.abs(x) < 1e-6).any():
        x = rng.normal(size=(3, 6, 6))
    up = rng.normal(size=x.shape)
    errors["relu"] = _fd_check(lambda: np.sum(L.relu_forward(x) * up), [L.relu_backward(x, up).input_grad], [x])

    x = rng.normal(scale=2, size=(3, 6, 6))
    up = rng.normal(size=x.shape)
    errors["sigmoid"] = _fd_check(
        lambda: np.sum(L.sigmoid_forward(x) * up), [L.sigmoid_backward(L.sigmoid_forward(x), up).input_grad], [x]
    )

    p = rng.uniform(0.02, 0.98, size=(1, 6, 6))
    t = (rng.random((1, 6, 6)) > 0.5).astype(float)
    errors["bce"] = _fd_check(lambda: L.bce_loss(p, t)[0], [L.bce_loss(p, t)[1]], [p])

    from adlocus.model import loss_and_grads

    reduced = build_model(ModelConfig(input_size=(16, 16), encoder_channels=(4, 8), decoder_channels=(4, 1), seed=11))
    arrays = [a + rng.normal(scale=0.05, size=a.shape) for a in reduced.arrays()]
    params = reduced.with_arrays(arrays)
    images = rng.random((2, 3, 16, 16))
    masks = (rng.random((2, 1, 16, 16)) > 0.7).astype(float)
    _, grads = loss_and_grads(params, images, masks)
    errors["model"] = _fd_check(
        lambda: L.bce_loss(forward(params.with_arrays(arrays), images), masks)[0], grads, arrays
    )

    elapsed = time.perf_counter() - start
    print({k: f"{v:.2e}" for k, v in errors.items()}, f"{elapsed:.1f}s")
    assert all(v < 1e-4 for v in errors.values()), errors
    assert elapsed < 60


@pytest.mark.criterion("AC3", AC3)
def test_ac3_architecture_contract():
    params = build_model(ModelConfig(seed=3))
    image = np.random.default_rng(3).random((3, 200, 200))
    prob, cache = forward_with_cache(params, image)
    assert prob.shape == (1, 200, 200)
    assert ((prob > 0) & (prob < 1)).all()
    # spatial size entering each encoder conv, after each pool, then entering each decoder conv
    trace = [cache[0]["conv_in"].shape[-1]]
    trace += [cache[k]["argmax"].shape[-1] for k in range(3)]
    trace += [cache[k]["conv_in"].shape[-1] for k in range(3, 5)]
    trace.append(prob.shape[-1])
    assert trace == [200, 100, 50, 25, 50, 100, 200]
    assert [cache[k]["conv_in"].shape[0] for k in range(6)] == [3, 16, 32, 64, 32, 16]


@pytest.mark.criterion("AC4", AC4)
def test_ac4_sweep_contract():
    rng = np.random.default_rng(4)
    probs, truths = [], []
    for _ in range(6):
        probs.append(rng.uniform(1e-6, 1 - 1e-6, size=(1, 40, 40)))
        t = (rng.random((1, 40, 40)) < rng.uniform(0.1, 0.5)).astype(np.uint8)
        truths.append(t)
    points = M.threshold_sweep(probs, truths)
    assert len(points) == 21
    np.testing.assert_allclose([p.threshold for p in points], np.arange(21) * 0.05, atol=1e-12)
    assert points[0].threshold == 0.0 and points[-1].threshold == 1.0
    assert (points[0].fpr, points[0].tpr) == (1.0, 1.0)
    assert (points[-1].fpr, points[-1].tpr) == (0.0, 0.0)
    fpr = [p.fpr for p in points]
    tpr = [p.tpr for p in points]
    assert all(b <= a for a, b in zip(fpr, fpr[1:]))
    assert all(b <= a for a, b in zip(tpr, tpr[1:]))
    assert all(0 <= v <= 1 for p in points for v in (p.fpr, p.tpr, p.accuracy))


E2E_EPOCHS = 5


def _pipeline(root):
    data = root / "data"
    run = root / "run"
    rep = root / "report"
    assert cli.run(["synth", "--out", str(data), "--count", "250", "--seed", "7", "--holdout", "50"]) == 0
    assert cli.run(["train", "--manifest", str(data / "train.csv"), "--out", str(run),
                    "--epochs", str(E2E_EPOCHS), "--seed", "7", "--checkpoint-every", "1"]) == 0
    weights = str(run / "model.adlw")
    test = str(data / "test.csv")
    assert cli.run(["eval", "--manifest", test, "--weights", weights, "--out", str(rep), "--threshold", "0.5"]) == 0
    assert cli.run(["sweep", "--manifest", test, "--weights", weights, "--out", str(rep)]) == 0
    assert cli.run(["roc", "--sweep", str(rep / "sweep.csv"), "--out", str(rep)]) == 0
    return data, run, rep


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    start = time.perf_counter()
    first = _pipeline(tmp_path_factory.mktemp("e2e_a"))
    elapsed = time.perf_counter() - start
    second = _pipeline(tmp_path_factory.mktemp("e2e_b"))
    return first, second, elapsed


def _mean_row(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[-1][0] == "MEAN"
    return dict(zip(rows[0][1:], map(float, rows[-1][1:]))), len(rows) - 2


@pytest.mark.criterion("AC5", AC5)
def test_ac5_end_to_end_synthetic(e2e_runs):
    (data, run, rep), (_, _, rep_b), elapsed = e2e_runs
    means, n_images = _mean_row(rep / "metrics.csv")
    print(f"held-out metrics over {n_images} images: {means}; one pipeline run {elapsed:.0f}s")
    assert n_images == 50
    assert E2E_EPOCHS <= 15
    assert means["miou"] >= 0.60
    assert means["pa"] >= 0.90
    assert elapsed <= 15 * 60
    assert (rep / "metrics.csv").read_bytes() == (rep_b / "metrics.csv").read_bytes()


@pytest.mark.criterion("AC6", AC6)
def test_ac6_determinism_and_persistence(e2e_runs, tmp_path):
    (data, run, rep), (data_b, run_b, rep_b), _ = e2e_runs
    params = load_weights(run / "model.adlw")
    save_weights(params, tmp_path / "again.adlw")
    again = load_weights(tmp_path / "again.adlw")
    for a, b in zip(params.arrays(), again.arrays()):
        np.testing.assert_array_equal(a, b)
    fresh = build_model(ModelConfig(seed=42))
    save_weights(fresh, tmp_path / "fresh.adlw")
    for a, b in zip(fresh.arrays(), load_weights(tmp_path / "fresh.adlw").arrays()):
        np.testing.assert_array_equal(a.astype(np.float32).astype(np.float64), b)

    assert (run / "train_report.csv").read_bytes() == (run_b / "train_report.csv").read_bytes()
    for name in ("metrics.csv", "sweep.csv", "roc.csv", "accuracy_per_image.csv"):
        assert (rep / name).read_bytes() == (rep_b / name).read_bytes(), name
    for name in ("manifest.csv", "train.csv", "test.csv"):
        assert (data / name).read_bytes() == (data_b / name).read_bytes(), name
    for epoch in range(1, E2E_EPOCHS + 1):
        ckpt = f"ckpt_epoch{epoch}.adlw"
        assert (run / ckpt).read_bytes() == (run_b / ckpt).read_bytes()


@pytest.mark.criterion("AC7", AC7)
def test_ac7_external_dataset_shape(tmp_path):
    # street-scene-shaped data: JPEG photos >= 800x600, anti-aliased 8-bit masks,
    # nested folders, absolute paths, one scene without any billboard
    rng = np.random.default_rng(5)
    root = tmp_path / "dataset"
    (root / "images").mkdir(parents=True)
    (root / "annotations").mkdir()
    rows = ["image,mask"]
    for k, (w, h) in enumerate([(800, 600), (1024, 768), (960, 720)]):
        img = Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
        img_path = root / "images" / f"scene_{k}.jpg"
        img.save(img_path, quality=90)
        mask = np.zeros((h, w), np.uint8)
        if k:
            mask[h // 4:h // 2, w // 3:2 * w // 3] = 255
            mask[h // 4, w // 3:2 * w // 3] = 128  # soft edge
        mask_path = root / "annotations" / f"scene_{k}.png"
        Image.fromarray(mask).save(mask_path)
        rows.append(f"{img_path},{mask_path}")
    manifest = tmp_path / "splits" / "test.csv"
    manifest.parent.mkdir()
    manifest.write_text("\n".join(rows) + "\n")

    params = build_model(ModelConfig(seed=1))
    arrays = [a + np.random.default_rng(2).normal(scale=0.05, size=a.shape) for a in params.arrays()]
    weights = tmp_path / "w.adlw"
    save_weights(params.with_arrays(arrays), weights)

    out = tmp_path / "out"
    assert cli.run(["eval", "--manifest", str(manifest), "--weights", str(weights), "--out", str(out)]) == 0
    assert cli.run(["sweep", "--manifest", str(manifest), "--weights", str(weights), "--out", str(out)]) == 0
    assert cli.run(["roc", "--sweep", str(out / "sweep.csv"), "--out", str(out)]) == 0
    with open(out / "metrics.csv", newline="") as fh:
        metrics_rows = list(csv.reader(fh))
    assert metrics_rows[0] == ["image_id", "pa", "ma", "miou", "fwiou"]
    assert [r[0] for r in metrics_rows[1:]] == ["scene_0", "scene_1", "scene_2", "MEAN"]
    for r in metrics_rows[1:]:
        assert all(0.0 <= float(v) <= 1.0 for v in r[1:])
    with open(out / "sweep.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 22
    with open(out / "roc.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 22
