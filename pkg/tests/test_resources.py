import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgdispatch.errors import SchemaError
from mgdispatch.fixtures import cigre_lv, cigre_mv
from mgdispatch.resources import (BessParams, ResourceProfile, bess_constraints, bess_cost, capability_check,
                                  grid_resources, soc_trajectory)

from oracles import soc_recursion

STEP = 900.0


def test_idle_keeps_initial_soc():
    b = BessParams(node=1, s_max=0.5, e_max=1e6)
    assert np.all(soc_trajectory(b, np.zeros(96), STEP, 1e6) == 0.5)


def test_constant_discharge_one_percent_per_step():
    # s_max * T_s / (e_max * 3600) = 0.01 with base 1 MVA
    b = BessParams(node=1, s_max=0.04, e_max=1e6, soc_init=0.8)
    soc = soc_trajectory(b, np.full(10, b.s_max), STEP, 1e6)[0]
    assert np.allclose(np.diff(np.r_[0.8, soc]), -0.01)
    assert np.allclose(soc, soc_recursion(0.8, np.full(10, 0.04), 0.25))


def test_constraint_block_reproduces_recursion():
    b = BessParams(node=1, s_max=0.3, e_max=5e5, soc_init=0.4)
    blk = bess_constraints(b, 6, STEP, 1e6)
    p = np.array([0.1, -0.2, 0.3, 0.0, -0.1, 0.05])
    soc = soc_recursion(0.4, p, blk.gain)
    assert np.allclose(blk.eq_matrix @ np.r_[p, np.zeros(6), soc], blk.eq_rhs)
    assert (blk.soc_lower, blk.soc_upper, blk.radius) == (0.1, 0.9, 0.3)


def test_table_one_fixtures():
    (mv_b,) = grid_resources(cigre_mv())
    assert mv_b.node == 1  # N_2
    assert mv_b.s_max * 12e6 == pytest.approx(0.75e6)
    assert mv_b.e_max == 1.0e6
    (lv_b,) = grid_resources(cigre_lv("lv1", 5))
    assert lv_b.node == 14  # n_15
    assert lv_b.s_max * 400e3 == pytest.approx(250e3)
    assert lv_b.e_max == 500e3


def test_cost_is_constant_per_step():
    prof = ResourceProfile("b", np.random.default_rng(0).standard_normal((3, 96)), np.zeros((3, 96)))
    assert bess_cost(prof) == 96
    assert bess_cost(np.zeros((1, 1))) == 1
    assert bess_cost(ResourceProfile("b", prof.p * 5, prof.q)) == bess_cost(prof)


def test_parameter_validation():
    with pytest.raises(SchemaError):
        BessParams(node=1, s_max=1, e_max=1, margin=0.5)
    with pytest.raises(SchemaError):
        BessParams(node=1, s_max=1, e_max=1, soc_init=0.95)
    with pytest.raises(SchemaError):
        BessParams(node=1, s_max=0, e_max=1)


def test_capability_violations_reported():
    b = BessParams(node=1, s_max=0.1, e_max=1e5)
    p = np.array([[0.1, 0.1, 0.0]])
    q = np.array([[0.05, 0.0, 0.0]])
    v = capability_check(b, ResourceProfile("b", p, q), STEP, 1e6)
    kinds = {(x.kind, x.t) for x in v}
    assert ("apparent_power", 0) in kinds
    assert any(k == "soc_lower" for k, _ in kinds)
    assert capability_check(b, ResourceProfile("b", np.zeros((1, 3)), np.zeros((1, 3))), STEP, 1e6) == []


@settings(max_examples=50, deadline=None)
@given(p=st.lists(st.floats(-1, 1), min_size=1, max_size=40))
def test_soc_telescopes(p):
    b = BessParams(node=1, s_max=1.0, e_max=2e6)
    soc = soc_trajectory(b, p, STEP, 1e6)[0]
    gain = b.soc_gain(STEP, 1e6)
    assert soc[-1] - b.soc_init == pytest.approx(-gain * np.sum(p), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0, 1))
def test_feasible_set_is_convex(seed, lam):
    rng = np.random.default_rng(seed)
    b = BessParams(node=1, s_max=0.2, e_max=2e6)

    def feasible():
        ang = rng.uniform(0, 2 * np.pi, 24)
        r = 0.2 * np.sqrt(rng.uniform(0, 1, 24)) * 0.25
        return ResourceProfile("b", r * np.cos(ang), r * np.sin(ang))

    a, c = feasible(), feasible()
    assert capability_check(b, a, STEP, 1e6) == [] and capability_check(b, c, STEP, 1e6) == []
    mix = ResourceProfile("b", lam * a.p + (1 - lam) * c.p, lam * a.q + (1 - lam) * c.q)
    assert capability_check(b, mix, STEP, 1e6) == []
