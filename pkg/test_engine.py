"""텐서 엔진 테스트: 유한차분 기울기, 테이프 모드, 메모리 장부"""
import numpy as np
import pytest

from csrecon import functional as F
from csrecon.engine import (
    CACHED,
    RECOMPUTE,
    MemoryLedger,
    Rng,
    Tape,
    Tensor,
    audit_ledger,
    backward,
    get_default_dtype,
    memory_report,
    no_grad,
    precision,
)
from csrecon.errors import EngineError, NonFiniteError, ShapeError
from csrecon.nn import parameter
from csrecon.utils import derive_seed

FD_STEP = 1e-5


def _value(fn, arrays, weights):
    with no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * weights))


def check_gradients(fn, *arrays, rtol=1e-5):
    """Analytic gradients of ``sum(fn(*xs) * weights)`` against central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with precision("float64"):
        with no_grad():
            shape = fn(*[Tensor(a) for a in arrays]).shape
        weights = Rng(99).normal(shape, dtype=np.float64)
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        with Tape(CACHED):
            loss = (fn(*leaves) * Tensor(weights)).sum()
        grads = backward(loss, accumulate=False)
        for leaf, base in zip(leaves, arrays):
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                orig = base[idx]
                base[idx] = orig + FD_STEP
                plus = _value(fn, arrays, weights)
                base[idx] = orig - FD_STEP
                minus = _value(fn, arrays, weights)
                base[idx] = orig
                numeric[idx] = (plus - minus) / (2 * FD_STEP)
            analytic = grads.get(leaf)
            assert analytic is not None
            scale = max(np.abs(numeric).max(), 1e-8)
            assert np.abs(analytic - numeric).max() / scale < rtol


def _away_from_zero(rng, shape):
    mag = rng.uniform(shape, 0.5, 1.5)
    return np.where(rng.uniform(shape) < 0.5, -mag, mag)


# ==================== finite differences ====================

def test_elementwise_gradients(rng):
    a, b = rng.normal((3, 4)), rng.normal((3, 4))
    check_gradients(lambda x, y: x + y, a, b)
    check_gradients(lambda x, y: x - y, a, b)
    check_gradients(lambda x, y: x * y, a, b)
    check_gradients(lambda x, y: x / y, a, _away_from_zero(rng, (3, 4)))
    check_gradients(lambda x: -x, a)


def test_broadcast_gradients(rng):
    check_gradients(lambda x, y: x + y, rng.normal((3, 4)), rng.normal((4,)))
    check_gradients(lambda x, y: x * y, rng.normal((3, 4, 4)), rng.normal((3, 1, 1)))
    check_gradients(lambda x: 2.0 * x - 1.0, rng.normal((2, 3)))


def test_shape_op_gradients(rng):
    x = rng.normal((2, 3, 4))
    check_gradients(lambda t: t.reshape(6, 4), x)
    check_gradients(lambda t: t.permute(2, 0, 1), x)
    check_gradients(lambda t: t[1, :, ::2], x)
    check_gradients(lambda t: t.sum(axis=1), x)
    check_gradients(lambda t: t.mean(), x)


def test_matmul_gradient(rng):
    check_gradients(F.matmul, rng.normal((3, 4)), rng.normal((4, 2)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_gradient(rng, stride):
    check_gradients(lambda x, w: F.conv2d(x, w, stride), rng.normal((2, 5, 5)), rng.normal((3, 2, 3, 3)))


def test_conv2d_kernel_gradient_single_channel(rng):
    """1x1x5x5 입력, 1x1x3x3 커널: 커널 기울기 rel 1e-6"""
    x = Rng(3).normal((1, 5, 5), dtype=np.float64)
    check_gradients(lambda w: F.conv2d(Tensor(x), w), Rng(4).normal((1, 1, 3, 3), dtype=np.float64), rtol=1e-6)


def test_resampling_gradients(rng):
    check_gradients(lambda t: F.pixel_shuffle(t, 2), rng.normal((8, 2, 2)))
    check_gradients(lambda t: F.pixel_unshuffle(t, 2), rng.normal((2, 4, 4)))
    check_gradients(lambda t: F.upsample_nearest(t), rng.normal((2, 3, 3)))
    check_gradients(lambda a, b: F.concat([a, b]), rng.normal((1, 2, 2)), rng.normal((2, 2, 2)))


def test_pointwise_gradients(rng):
    x = rng.normal((3, 4))
    check_gradients(F.sigmoid, x)
    check_gradients(F.silu, x)
    check_gradients(F.square, x)
    check_gradients(lambda t: F.softmax(t, axis=-1), x)
    check_gradients(F.absolute, _away_from_zero(rng, (3, 4)))
    check_gradients(F.sqrt, rng.uniform((3, 4), 0.5, 2.0))
    check_gradients(F.cumprod, rng.uniform(5, 0.5, 1.5))


# ==================== op semantics ====================

def test_conv2d_delta_and_zero_kernels(rng):
    x = Tensor(rng.normal((1, 6, 6)))
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    assert np.array_equal(F.conv2d(x, Tensor(delta)).data, x.data)
    assert not F.conv2d(x, Tensor(np.zeros((1, 1, 3, 3)))).data.any()


def test_conv2d_rejects_bad_kernels(rng):
    x = Tensor(rng.normal((2, 4, 4)))
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        F.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))


def test_pixel_shuffle_convention(rng):
    x = Tensor(np.arange(16, dtype=np.float64).reshape(4, 2, 2))
    out = F.pixel_shuffle(x, 2)
    assert out.shape == (1, 4, 4)
    # channel dy*r + dx lands at offset (dy, dx) of every 2x2 cell
    assert out.data[0, 0, 1] == x.data[1, 0, 0]
    assert out.data[0, 1, 0] == x.data[2, 0, 0]
    assert out.data[0, 3, 3] == x.data[3, 1, 1]
    assert np.array_equal(F.pixel_unshuffle(out, 2).data, x.data)
    assert F.pixel_shuffle(x, 1) is x


def test_pixel_shuffle_divisibility():
    with pytest.raises(ShapeError):
        F.pixel_shuffle(Tensor(np.zeros((3, 2, 2))), 2)
    with pytest.raises(ShapeError):
        F.pixel_unshuffle(Tensor(np.zeros((1, 3, 4))), 2)


def test_non_finite_values_abort():
    with pytest.raises(NonFiniteError):
        F.sqrt(Tensor(np.array([-1.0])))
    with pytest.raises(NonFiniteError):
        Tensor(1.0) / Tensor(0.0)


# ==================== tape / backward ====================

def test_linear_layer_gradient_both_modes(rng):
    """L = sum(W x) -> dL/dW = x 브로드캐스트"""
    x = rng.normal((4, 1))
    for mode in (CACHED, RECOMPUTE):
        w = parameter(rng.normal((3, 4)), dtype=np.float64)
        with Tape(mode):
            loss = F.matmul(w, Tensor(x)).sum()
        grads = backward(loss, mode=mode)
        assert np.allclose(grads.get(w), np.broadcast_to(x.T, (3, 4)))
        assert np.allclose(w.grad, grads.get(w))


def test_backward_errors(rng):
    w = parameter(rng.normal(3), dtype=np.float64)
    with pytest.raises(EngineError):
        backward(Tensor(1.0))
    with Tape(CACHED):
        vec = w * 2.0
        loss = vec.sum()
    with pytest.raises(ShapeError):
        backward(vec)
    with pytest.raises(EngineError):
        backward(loss, mode=RECOMPUTE)
    with pytest.raises(EngineError):
        Tape("fast")


def test_no_grad_records_nothing(rng):
    w = parameter(rng.normal(3))
    with Tape(CACHED) as tape, no_grad():
        (w * w).sum()
    assert tape.nodes == []


def test_gradients_accumulate(rng):
    w = parameter(np.ones(3), dtype=np.float64)
    for _ in range(2):
        with Tape(CACHED):
            loss = (w * 3.0).sum()
        backward(loss)
    assert np.allclose(w.grad, 6.0)
    with Tape(CACHED):
        loss = (w * 3.0).sum()
    backward(loss, accumulate=False)
    assert np.allclose(w.grad, 6.0)


# ==================== memory ledger ====================

def test_empty_memory_report():
    report = memory_report(None)
    assert (report.peak_bytes, report.live_bytes, report.retained_tensor_count) == (0, 0, 0)
    with Tape(CACHED) as tape:
        pass
    report = memory_report(tape)
    assert (report.peak_bytes, report.live_bytes, report.retained_tensor_count) == (0, 0, 0)


def test_ledger_tracks_retained_activations(rng):
    w = parameter(rng.normal((4, 4)), dtype=np.float64)
    x = Tensor(rng.normal((4, 4)))
    with Tape(CACHED) as tape:
        hidden = w * x
        loss = F.silu(hidden).sum()
    # silu keeps its (non-leaf) input; leaves are free
    assert tape.ledger.live_bytes == hidden.nbytes
    assert audit_ledger(tape).live_bytes == tape.ledger.live_bytes
    backward(loss)
    assert tape.ledger.live_bytes == 0
    assert tape.ledger.peak_bytes == hidden.nbytes


def test_ledger_charges_views_once():
    ledger = MemoryLedger()
    base = np.zeros(100)
    ledger.retain(base)
    ledger.retain(base[10:20])
    assert ledger.live_bytes == base.nbytes
    assert ledger.retained_count == 1
    ledger.release(base[10:20])
    assert ledger.live_bytes == base.nbytes
    ledger.release(base)
    assert ledger.live_bytes == 0
    with pytest.raises(EngineError):
        ledger.release(base)


# ==================== rng / precision ====================

def test_rng_is_reproducible():
    assert np.array_equal(Rng(5).normal(6), Rng(5).normal(6))
    assert not np.array_equal(Rng(5).derive("a").normal(6), Rng(5).derive("b").normal(6))
    assert Rng(5).derive("a").seed == derive_seed(5, "a")
    assert derive_seed(0, "x") != derive_seed(1, "x")


def test_precision_context():
    assert get_default_dtype() is np.float32
    with precision("float64"):
        assert parameter(1.0).dtype == np.float64
    assert parameter(1.0).dtype == np.float32
    with pytest.raises(EngineError):
        with precision("float16"):
            pass
