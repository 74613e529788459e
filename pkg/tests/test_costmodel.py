from fractions import Fraction

import numpy as np
import pytest

from resilmoe.costmodel import (
    TABLE1, CostParams, DeploymentKind as K, FailurePoint, decode_vs_prefill_ratio, grid_to_csv,
    params_from_mapping, prefill_failure_cost, prefill_failure_stall, reexec_cost, stall_time,
    sweep,
)

MS, VL = TABLE1["megascale"], TABLE1["vllm"]


def test_frozen_values():
    assert stall_time(MS, K.DECOUPLED_EW, FailurePoint(64, 32)) == Fraction("18.50085")
    assert stall_time(MS, K.DECOUPLED_AW, FailurePoint(64, 32)) == Fraction(126941, 6250)
    assert reexec_cost(VL, K.MONOLITHIC, FailurePoint(1, 1)) == Fraction(3228, 625)
    assert reexec_cost(MS, K.DECOUPLED_EW, FailurePoint(5, 3)) == Fraction("0.0022")
    assert prefill_failure_stall(MS) == Fraction("18.5") + 32 * Fraction("0.00218")
    assert prefill_failure_cost(VL) == 16 * 32 * Fraction("0.010")


def test_monolithic_and_aw_coincide():
    for i in (1, 7, 100):
        for layer in (1, 16, 32):
            fp = FailurePoint(i, layer)
            assert stall_time(MS, K.MONOLITHIC, fp) == stall_time(MS, K.DECOUPLED_AW, fp)


def test_decode_vs_prefill_ratio():
    r = decode_vs_prefill_ratio(VL)
    assert abs(float(r) - 18.92) < 0.01
    assert abs(float(r) - 19) / 19 < 0.15
    assert abs(float(decode_vs_prefill_ratio(MS)) - 24.47) < 0.01


@pytest.mark.parametrize("seed", range(20))
def test_matches_independent_formula(seed):
    rng = np.random.default_rng(seed)
    p = CostParams(*(Fraction(int(x), 10**5) for x in rng.integers(0, 10**6, size=5)),
                   M=int(rng.integers(1, 64)), L=int(rng.integers(1, 96)))
    i, layer = int(rng.integers(1, 2048)), int(rng.integers(1, p.L + 1))
    fp = FailurePoint(i, layer)
    n = (i - 1) * p.L + layer
    assert stall_time(p, K.MONOLITHIC, fp) == p.T_w + p.L * p.t_pre + n * p.t_dec
    assert reexec_cost(p, K.DECOUPLED_AW, fp) == p.M * (p.L * p.g_pre + n * p.g_dec)
    assert stall_time(p, K.DECOUPLED_EW, fp) == p.T_w + p.t_dec
    assert reexec_cost(p, K.DECOUPLED_EW, fp) == p.g_dec


def test_linear_in_decode_position():
    a = stall_time(MS, K.MONOLITHIC, FailurePoint(10, 5))
    b = stall_time(MS, K.MONOLITHIC, FailurePoint(11, 5))
    c = stall_time(MS, K.MONOLITHIC, FailurePoint(10, 6))
    assert b - a == MS.L * MS.t_dec
    assert c - a == MS.t_dec


def test_ew_dominated_by_aw():
    for i in (1, 50):
        fp = FailurePoint(i, 1)
        assert stall_time(MS, K.DECOUPLED_EW, fp) < stall_time(MS, K.DECOUPLED_AW, fp)
        assert reexec_cost(MS, K.DECOUPLED_EW, fp) < reexec_cost(MS, K.DECOUPLED_AW, fp)


def test_zero_params():
    z = CostParams(0, 0, 0, 0, 0)
    for k in K:
        assert stall_time(z, k, FailurePoint(3, 2)) == 0
        assert reexec_cost(z, k, FailurePoint(3, 2)) == 0


def test_preconditions():
    with pytest.raises(ValueError):
        stall_time(MS, K.MONOLITHIC, FailurePoint(0, 1))
    with pytest.raises(ValueError):
        stall_time(MS, K.DECOUPLED_EW, FailurePoint(1, 33))
    with pytest.raises(ValueError):
        CostParams(-1, 0, 0, 0, 0)


def test_sweep_and_csv():
    grid = sweep(MS, K.DECOUPLED_AW, range(1, 4), range(1, 3))
    assert [[c.layer for c in row] for row in grid] == [[1, 2]] * 3
    text = grid_to_csv(grid, "stall").splitlines()
    assert text[0] == "i,1,2"
    assert len(text) == 4
    assert float(text[1].split(",")[1]) == pytest.approx(float(stall_time(MS, K.DECOUPLED_AW, FailurePoint(1, 1))))
    with pytest.raises(ValueError):
        grid_to_csv(grid, "latency")


def test_params_from_mapping():
    p = params_from_mapping({"preset": "vllm", "M": 8})
    assert p.M == 8 and p.T_w == 24
    q = params_from_mapping({"T_w": 1.5, "t_pre": 0.1, "t_dec": 0.01, "g_pre": 0, "g_dec": 0})
    assert q.T_w == Fraction(3, 2)
    with pytest.raises(ValueError):
        params_from_mapping({"T_w": 1})
