"""PSNR/SSIM 및 디렉토리 평가 테스트"""
import math

import numpy as np
import pytest

from csrecon.config import build_config
from csrecon.cs_operator import build_operator
from csrecon.engine import Rng, precision
from csrecon.errors import ShapeError
from csrecon.metrics import EvalReport, ImageScore, evaluate, psnr, score_pair, ssim, to_luma
from csrecon.metrics_log import format_psnr, read_rows
from csrecon.sampler import identity_framework
from csrecon.trainer import build_model


def test_psnr_of_constant_offset():
    x = np.zeros((1, 8, 8))
    assert abs(psnr(x + 0.1, x) - 20.0) < 1e-9


def test_psnr_matches_hand_computation():
    rng = Rng(6)
    a, b = rng.uniform((8, 8)), rng.uniform((8, 8))
    total = 0.0
    for i in range(8):
        for j in range(8):
            total += (a[i, j] - b[i, j]) ** 2
    expected = 10.0 * math.log10(1.0 / (total / 64.0))
    assert abs(psnr(a, b) - expected) < 1e-6


def test_identical_images():
    x = Rng(1).uniform((1, 16, 16))
    assert psnr(x, x) == math.inf
    assert format_psnr(psnr(x, x)) == "99.99"
    assert abs(ssim(x, x) - 1.0) < 1e-12


def test_ssim_of_inverted_checkerboard_is_negative():
    board = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)
    assert ssim(board, 1.0 - board) < 0.0


def smooth_image(size=16):
    yy, xx = np.mgrid[0:size, 0:size] / size
    return 0.5 + 0.3 * np.sin(4 * xx) * np.cos(3 * yy)


def naive_ssim(a, b, size=11, sigma=1.5):
    """창 하나씩 직접 계산하는 SSIM"""
    g = np.exp(-((np.arange(size) - (size - 1) / 2) ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            values.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(values))


def test_ssim_matches_window_by_window_computation():
    rng = Rng(9)
    a = smooth_image()
    b = np.clip(a + 0.1 * rng.normal((16, 16), dtype=np.float64), 0.0, 1.0)
    assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-6
    c = rng.uniform((16, 16))
    assert abs(ssim(a, c) - naive_ssim(a, c)) < 1e-6


def test_pixel_permutation_keeps_psnr_but_not_ssim():
    rng = Rng(10)
    a = smooth_image()
    b = a + 0.05 * rng.normal((16, 16), dtype=np.float64)
    order = np.random.default_rng(0).permutation(a.size)
    pa, pb = a.ravel()[order].reshape(a.shape), b.ravel()[order].reshape(b.shape)
    assert abs(psnr(pa, pb) - psnr(a, b)) < 1e-9
    assert abs(ssim(pa, pb) - ssim(a, b)) > 1e-3


def test_psnr_falls_as_noise_grows():
    a = smooth_image()
    noise = Rng(11).normal((16, 16), dtype=np.float64)
    scores = [psnr(a + amp * noise, a) for amp in (0.01, 0.05, 0.2)]
    assert scores[0] > scores[1] > scores[2]


def test_metric_shape_checks():
    with pytest.raises(ShapeError):
        psnr(np.zeros((1, 8, 8)), np.zeros((1, 8, 9)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def test_luma():
    rgb = np.zeros((3, 2, 2))
    rgb[0] = 1.0
    assert np.allclose(to_luma(rgb), 0.299)
    gray = np.ones((1, 2, 2))
    assert to_luma(gray) is gray
    with pytest.raises(ShapeError):
        to_luma(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        score_pair(gray, gray, mode="hsv")


def test_report_files(tmp_path):
    report = EvalReport(mode="luma", scores=[
        ImageScore("a.pgm", math.inf, 1.0, baseline_psnr_db=20.0, baseline_ssim=0.5, nfe=2),
        ImageScore("b.pgm", 30.0, 0.9, baseline_psnr_db=18.0, baseline_ssim=0.4, nfe=2),
    ])
    rows = read_rows(report.write_csv(tmp_path / "eval.csv"))
    assert [r["name"] for r in rows] == ["a.pgm", "b.pgm"]
    assert rows[0]["psnr_db"] == "99.99"
    assert "baseline_psnr_db" in rows[0]
    assert abs(report.psnr_mean - (99.99 + 30.0) / 2) < 1e-9
    assert "mean PSNR" in report.format_table()


def test_report_workbook(tmp_path):
    openpyxl = pytest.importorskip("openpyxl")
    report = EvalReport(mode="luma", scores=[ImageScore("a.pgm", 25.0, 0.8)])
    path = report.write_xlsx(tmp_path / "eval.xlsx")
    wb = openpyxl.load_workbook(path)
    assert wb["reconstruction"]["A2"].value == "a.pgm"
    assert wb["summary"]["A1"].value == "count"


def test_evaluate_keeps_input_order(tmp_path):
    op = build_operator(4, 1.0, seed=0)
    rng = Rng(2)
    names = ["c.pgm", "a.pgm", "b.pgm"]
    images = [rng.uniform((1, 16, 16)), rng.uniform((1, 16, 18)), rng.uniform((1, 16, 16))]
    with precision("float64"):
        fw = identity_framework()
        report = evaluate(fw, op, names, images, baseline=True, workers=2, save_dir=tmp_path / "rec")
    assert [s.name for s in report.scores] == names
    assert all(s.psnr_db >= 99.0 for s in report.scores)
    assert all(s.baseline_psnr_db >= 99.0 for s in report.scores)
    assert all(s.nfe == 1 for s in report.scores)
    assert sorted(p.name for p in (tmp_path / "rec").iterdir()) == ["a.pgm", "b.pgm", "c.pgm"]


def test_evaluate_rejects_unknown_mode():
    with pytest.raises(ValueError):
        evaluate(identity_framework(), build_operator(4, 1.0, 0), [], [], mode="hsv")


def test_evaluate_uses_the_checkpoint_init(tiny_values, monkeypatch):
    """noise 초기화로 학습된 모델은 평가에서도 noise 초기화"""
    model = build_model(build_config({**tiny_values, "init": "noise"}))
    seen = []
    original = model.framework.reconstruct

    def spy(op, y, init="backproj", rng=None):
        seen.append((init, rng is not None))
        return original(op, y, init=init, rng=rng)

    monkeypatch.setattr(model.framework, "reconstruct", spy)
    images = [Rng(12).uniform((1, 16, 16)), Rng(13).uniform((1, 16, 16))]
    with precision(model.config.precision):
        first = evaluate(model.framework, model.operator, ["a", "b"], images,
                         init=model.config.init, seed=model.config.seed)
        second = evaluate(model.framework, model.operator, ["a", "b"], images, workers=2,
                          init=model.config.init, seed=model.config.seed)
    assert seen == [("noise", True)] * 4
    assert [s.psnr_db for s in first.scores] == [s.psnr_db for s in second.scores]
