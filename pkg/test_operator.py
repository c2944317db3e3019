"""측정 연산자 테스트: 직교 행, 의사역행렬, RND 투영, RCSA/RCSM 파일"""
from dataclasses import replace

import numpy as np
import pytest

from csrecon.cs_operator import (
    back_project,
    build_operator,
    load_measurement,
    load_operator,
    measurement_count,
    rnd_project,
    sample,
    save_measurement,
    save_operator,
    verify_operator,
)
from csrecon.engine import Rng, Tensor, precision
from csrecon.errors import FormatError, OperatorError, ShapeError


def test_measurement_count():
    assert measurement_count(8, 0.25) == 16
    assert measurement_count(4, 0.5) == 8
    assert measurement_count(32, 0.1) == 102


def test_rows_are_orthonormal():
    for block, ratio in [(8, 0.25), (4, 0.5), (8, 1.0), (3, 0.3)]:
        op = build_operator(block, ratio, seed=11)
        assert op.matrix.shape == (measurement_count(block, ratio), block * block)
        assert np.abs(op.matrix @ op.matrix.T - np.eye(op.m)).max() < 1e-12
        assert verify_operator(op) < 1e-12


def test_operator_is_deterministic():
    a = build_operator(8, 0.25, seed=3)
    b = build_operator(8, 0.25, seed=3)
    c = build_operator(8, 0.25, seed=4)
    assert np.array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, c.matrix)


def test_invalid_operators():
    with pytest.raises(OperatorError):
        build_operator(2, 0.1, seed=0)
    with pytest.raises(OperatorError):
        build_operator(4, 0.0, seed=0)
    with pytest.raises(OperatorError):
        build_operator(0, 0.5, seed=0)


def test_back_project_matches_pinv_oracle():
    """B=4, 비율 0.5: A^T y = pinv(A) y (타일별)"""
    op = build_operator(4, 0.5, seed=5)
    image = Rng(1).uniform((1, 8, 8))
    with precision("float64"):
        y = sample(op, Tensor(image))
        bp = back_project(op, y).data
    pinv = np.linalg.pinv(op.matrix)
    for i in range(2):
        for j in range(2):
            tile = image[0, 4 * i:4 * i + 4, 4 * j:4 * j + 4].ravel()
            expected = pinv @ (op.matrix @ tile)
            assert np.abs(bp[0, 4 * i:4 * i + 4, 4 * j:4 * j + 4].ravel() - expected).max() < 1e-5


def test_tile_order_channel_row_column():
    op = build_operator(2, 1.0, seed=0)
    image = np.arange(2 * 4 * 4, dtype=np.float64).reshape(2, 4, 4)
    y = sample(op, Tensor(image))
    # tile (c=1, i=0, j=1) is the 6th column: c * nh * nw + i * nw + j
    tile = image[1, 0:2, 2:4].ravel()
    assert np.allclose(y.values[:, 5], op.matrix @ tile)
    assert np.allclose(y.flat()[5 * op.m:6 * op.m], op.matrix @ tile)


def test_full_sampling_recovers_image():
    op = build_operator(4, 1.0, seed=2)
    image = Rng(2).uniform((3, 8, 8))
    with precision("float64"):
        y = sample(op, Tensor(image))
        assert np.abs(back_project(op, y).data - image).max() < 1e-12
        guess = Tensor(np.zeros_like(image))
        assert np.abs(rnd_project(op, guess, y).data - image).max() < 1e-12


def test_rnd_projection_is_measurement_consistent():
    op = build_operator(8, 0.25, seed=9)
    rng = Rng(3)
    with precision("float64"):
        y = sample(op, Tensor(rng.uniform((1, 16, 16))))
        x_hat = Tensor(rng.normal((1, 16, 16), dtype=np.float64))
        x_bar = rnd_project(op, x_hat, y)
        assert np.abs(op.apply(x_bar).data - y.values).max() < 1e-12
        # the null-space part of x_hat survives untouched
        null = x_hat.data - op.project_range(x_hat).data
        assert np.abs((x_bar.data - op.project_range(x_bar).data) - null).max() < 1e-12


def test_rnd_projection_is_idempotent():
    op = build_operator(4, 0.5, seed=6)
    rng = Rng(7)
    y = sample(op, Tensor(rng.uniform((2, 8, 8)).astype(np.float32)))
    once = rnd_project(op, Tensor(rng.normal((2, 8, 8))), y)
    twice = rnd_project(op, once, y)
    assert np.abs(twice.data - once.data).max() < 1e-5


def test_adjoint_identity():
    """<A x, y> = <x, A^T y>"""
    op = build_operator(8, 0.25, seed=12)
    rng = Rng(8)
    x = rng.uniform((1, 16, 16))
    with precision("float64"):
        ax = sample(op, Tensor(x))
        y = replace(ax, values=rng.normal(ax.values.shape, dtype=np.float64))
        lhs = float(np.sum(ax.values * y.values))
        rhs = float(np.sum(x * back_project(op, y).data))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_permuting_tiles_permutes_measurements():
    op = build_operator(4, 0.5, seed=13)
    image = Rng(9).uniform((1, 8, 8))
    tiles = [image[:, 4 * i:4 * i + 4, 4 * j:4 * j + 4] for i in range(2) for j in range(2)]
    order = [2, 0, 3, 1]
    shuffled = np.zeros_like(image)
    for k, src in enumerate(order):
        i, j = divmod(k, 2)
        shuffled[:, 4 * i:4 * i + 4, 4 * j:4 * j + 4] = tiles[src]
    with precision("float64"):
        y = sample(op, Tensor(image))
        y_shuffled = sample(op, Tensor(shuffled))
    assert np.abs(y_shuffled.values - y.values[:, order]).max() < 1e-12


def test_indivisible_image_rejected():
    op = build_operator(8, 0.25, seed=0)
    with pytest.raises(ShapeError):
        sample(op, Tensor(np.zeros((1, 12, 16))))
    y = sample(op, Tensor(np.zeros((1, 16, 16))))
    with pytest.raises(ShapeError):
        rnd_project(op, Tensor(np.zeros((1, 8, 16))), y)


def test_matrix_file_round_trip(tmp_path):
    op = build_operator(8, 0.25, seed=1)
    first, second = tmp_path / "a.rcsa", tmp_path / "b.rcsa"
    save_operator(first, op)
    save_operator(second, build_operator(8, 0.25, seed=1))
    assert first.read_bytes() == second.read_bytes()
    loaded = load_operator(first)
    assert (loaded.block, loaded.m, loaded.n, loaded.seed) == (8, 16, 64, 1)
    assert np.abs(loaded.matrix - op.matrix).max() < 1e-6
    assert verify_operator(loaded) < 1e-5


def test_truncated_matrix_file(tmp_path):
    path = tmp_path / "a.rcsa"
    save_operator(path, build_operator(4, 0.5, seed=1))
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError) as info:
        load_operator(path)
    assert info.value.extra["offset"] == len(raw) - 10
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as info:
        load_operator(path)
    assert info.value.extra["offset"] == 0


def test_measurement_file_round_trip(tmp_path):
    op = build_operator(4, 0.5, seed=6)
    y = sample(op, Tensor(Rng(4).uniform((3, 8, 12)).astype(np.float32)))
    path = tmp_path / "y.rcsm"
    save_measurement(path, y)
    loaded = load_measurement(path)
    assert loaded.shape == (3, 8, 12)
    assert (loaded.block, loaded.seed, loaded.ratio) == (4, 6, 0.5)
    assert np.array_equal(loaded.values, y.values.astype(np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_measurement(path)
