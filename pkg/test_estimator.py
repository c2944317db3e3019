"""노이즈 추정기 테스트: 출력 형태, 인젝터, 블록 그룹 배선"""
import numpy as np
import pytest

from csrecon.cs_operator import build_operator, sample
from csrecon.engine import Rng, Tensor, precision
from csrecon.errors import ShapeError
from csrecon.estimator import (
    EstimatorGraph,
    Injector,
    PhysicsContext,
    estimate_noise,
    group_forward,
    group_inverse,
    inject,
)


@pytest.fixture
def physics64():
    op = build_operator(4, 0.5, seed=2)
    with precision("float64"):
        y = sample(op, Tensor(Rng(5).uniform((1, 8, 8))))
    return op, y, PhysicsContext.build(op, y, np.float64)


def small_graph(**kwargs):
    options = dict(channels=(4, 8), blocks_per_group=1, expansion=2, rng=Rng(21))
    options.update(kwargs)
    with precision("float64"):
        return EstimatorGraph(1, **options)


def randomize_head(g):
    g.head.weight.data = Rng(8).normal(g.head.weight.shape, dtype=np.float64) * 0.1


def test_fresh_estimator_outputs_zero(physics64):
    op, y, _ = physics64
    g = small_graph()
    x = Tensor(Rng(1).normal((1, 8, 8), dtype=np.float64))
    eps = estimate_noise(g, x, 1, op, y)
    assert eps.shape == x.shape
    assert not eps.data.any()


def test_fresh_injector_is_identity(physics64):
    op, y, _ = physics64
    with precision("float64"):
        inj = Injector(8, 2, 1, Rng(3))
    feature = Tensor(Rng(4).normal((8, 4, 4), dtype=np.float64))
    assert np.array_equal(inject(inj, feature, op, y).data, feature.data)
    inj.conv2.weight.data = Rng(6).normal(inj.conv2.weight.shape, dtype=np.float64)
    assert not np.array_equal(inject(inj, feature, op, y).data, feature.data)


def test_injector_channel_checks():
    with pytest.raises(ShapeError):
        Injector(6, 2, 1, Rng(0))


def test_injectors_are_a_small_share():
    with precision("float32"):
        g = EstimatorGraph(1, channels=(16, 32), blocks_per_group=2, expansion=4, rng=Rng(0))
        bare = EstimatorGraph(1, channels=(16, 32), blocks_per_group=2, expansion=4, injectors=False, rng=Rng(0))
    share = g.injector_parameter_count() / g.parameter_count()
    assert 0.0 < share <= 0.02
    assert bare.injector_parameter_count() == 0
    assert bare.parameter_count() == g.parameter_count() - g.injector_parameter_count()


def test_input_shape_checks(physics64):
    op, y, physics = physics64
    g = small_graph()
    with pytest.raises(ShapeError):
        g(Tensor(np.zeros((1, 7, 8))), 1, physics)
    with pytest.raises(ShapeError):
        g(Tensor(np.zeros((3, 8, 8))), 1, physics)


def test_nfe_counts_calls(physics64):
    _, _, physics = physics64
    g = small_graph()
    x = Tensor(np.zeros((1, 8, 8)))
    for _ in range(3):
        g(x, 1, physics)
    assert physics.nfe == 3


def test_attention_variant(physics64):
    _, _, physics = physics64
    plain = small_graph()
    attn = small_graph(attention=True)
    assert attn.parameter_count() > plain.parameter_count()
    randomize_head(attn)
    out = attn(Tensor(Rng(2).normal((1, 8, 8), dtype=np.float64)), 1, physics)
    assert out.shape == (1, 8, 8) and np.isfinite(out.data).all()


def test_zero_coupling_group_equals_plain_blocks(physics64):
    """v=0, w_out=0 이면 배선된 그룹 = 일반 순차 블록"""
    _, _, physics = physics64
    g = small_graph()
    randomize_head(g)
    for group in g.groups():
        for block in group.blocks:
            block.coupling.pin(0.0)
    x = Tensor(Rng(9).normal((1, 8, 8), dtype=np.float64))
    wired = g(x, 1, physics).data
    g.set_wired(False)
    plain = g(x, 1, physics).data
    assert np.abs(wired).max() > 0
    assert np.abs(wired - plain).max() < 1e-12


def test_group_inverse_round_trip(physics64):
    _, _, physics = physics64
    g = small_graph(blocks_per_group=3)
    group = g.down[0]
    for i, block in enumerate(group.blocks):
        block.coupling.pin(0.3 + 0.2 * i)
    rng = Rng(12)
    x = Tensor(rng.normal((4, 8, 8), dtype=np.float64))
    h = Tensor(rng.normal((4, 8, 8), dtype=np.float64))
    xo, ho = group_forward(group, x, h, physics)
    xr, hr = group_inverse(group, xo, ho, physics)
    assert np.abs(xr.data - x.data).max() < 1e-10
    assert np.abs(hr.data - h.data).max() < 1e-10
