import math

import numpy as np
import pytest

from anode.core_math import Rng, gaussian_tensor
from anode.dynamics import ConstantField, Dense, Quadratic, ScalarLinear, ZeroField
from anode.solvers import (TABLEAUS, BlowUpError, Scheme, StepBudgetExhausted, convergence_order,
                           flow_forward, flow_reverse, integrate)

# stability polynomials R(h) of the fixed-step schemes, for dz/dt = lam z
R = {
    "euler": lambda h: 1 + h,
    "heun_rk2": lambda h: 1 + h + h * h / 2,
    "rk4": lambda h: 1 + h + h ** 2 / 2 + h ** 3 / 6 + h ** 4 / 24,
}


@pytest.mark.parametrize("kind", sorted(TABLEAUS))
def test_tableau_consistency(kind):
    tab = TABLEAUS[kind]
    assert sum(tab.b) == pytest.approx(1.0, abs=1e-15)
    for row, c in zip(tab.a, tab.c):
        assert sum(row) == pytest.approx(c, abs=1e-15)
    if tab.err is not None:
        assert sum(tab.err) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("kind", ["euler", "heun_rk2", "rk4"])
def test_linear_flow_matches_stability_polynomial(kind):
    lam, n, T = -3.0, 17, 1.3
    traj = flow_forward(ScalarLinear(lam), None, np.array([2.0]), T, kind, n)
    assert traj.final[0] == pytest.approx(2.0 * R[kind](lam * T / n) ** n, rel=1e-13)
    assert len(traj.states) == n + 1
    assert traj.times[-1] == pytest.approx(T)


@pytest.mark.parametrize("kind,order,tol", [("euler", 1, 0.2), ("heun_rk2", 2, 0.3), ("rk4", 4, 0.5)])
def test_convergence_order(kind, order, tol):
    exact = np.array([math.exp(-2.0)])
    p = convergence_order(ScalarLinear(-2.0), None, np.array([1.0]), 1.0, kind, [8, 16, 32, 64], exact)
    assert abs(p - order) <= tol


def test_adaptive_accuracy_and_frozen_replay():
    f = Dense(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    z0 = np.array([1.0, 0.0])
    sch = Scheme("rk45_dormand_prince", abs_tol=1e-10, rel_tol=1e-10)
    traj = flow_forward(f, None, z0, 2.0, sch, record_tape=True)
    assert np.allclose(traj.final, [math.cos(2.0), -math.sin(2.0)], atol=1e-8)
    assert traj.steps.sum() == pytest.approx(2.0, abs=1e-12)
    assert len(traj.stages) == traj.accepted == traj.nsteps
    replay = flow_forward(f, None, z0, 2.0, sch, steps=traj.steps)
    assert np.array_equal(replay.final, traj.final)
    assert all(np.array_equal(a, b) for a, b in zip(replay.states, traj.states))


def test_adaptive_tolerance_controls_step_count():
    f = ScalarLinear(-5.0)
    loose = flow_forward(f, None, np.array([1.0]), 1.0, Scheme("rk45_dormand_prince", 1e-4, 1e-4))
    tight = flow_forward(f, None, np.array([1.0]), 1.0, Scheme("rk45_dormand_prince", 1e-10, 1e-10))
    assert tight.accepted > loose.accepted
    assert abs(tight.final[0] - math.exp(-5)) < abs(loose.final[0] - math.exp(-5))


def test_blowup_raises_with_partial_trajectory():
    with pytest.raises(BlowUpError, match="blow-up detected at t=") as info:
        flow_forward(Quadratic(1.0), None, np.array([1.0]), 20.0, "euler", 20)
    assert info.value.trajectory is not None
    assert not info.value.trajectory.complete


def test_step_budget():
    with pytest.raises(StepBudgetExhausted, match="step budget exhausted"):
        flow_forward(ScalarLinear(-50.0), None, np.array([1.0]), 1.0,
                     Scheme("rk45_dormand_prince", 1e-12, 1e-12, max_steps=5))


def test_scheme_validation():
    with pytest.raises(ValueError):
        Scheme("midpoint")
    with pytest.raises(ValueError):
        Scheme("rk45_dormand_prince", abs_tol=0.0)
    with pytest.raises(ValueError):
        integrate(lambda z: z, np.ones(1), 1.0, "euler")
    with pytest.raises(ValueError):
        integrate(lambda z: z, np.ones(1), 0.0, "euler", 4)


def test_single_precision_rounds_every_state():
    traj = flow_forward(ScalarLinear(-1.0), None, np.array([0.1]), 1.0, "rk4", 7, precision="single")
    for z in traj.states:
        assert z.astype(np.float32).astype(np.float64)[0] == z[0]


def test_reverse_of_zero_and_constant_fields_is_exact():
    z0 = np.array([0.25, -1.5])
    for field in (ZeroField(), ConstantField([0.5, 2.0])):
        for kind in ("euler", "heun_rk2", "rk4"):
            fwd = flow_forward(field, None, z0, 1.0, kind, 8)
            back = flow_reverse(field, None, fwd.final, 1.0, kind, 8)
            assert np.allclose(back.final, z0, atol=1e-15)


def test_keep_states_false_keeps_endpoints():
    traj = flow_forward(ScalarLinear(-1.0), None, np.array([1.0]), 1.0, "euler", 10, keep_states=False)
    assert len(traj.states) == 2 and traj.times.tolist() == [0.0, 1.0]


def test_trajectory_csv(tmp_path):
    traj = flow_forward(ScalarLinear(-1.0), None, np.array([1.0, 2.0]), 1.0, "euler", 2)
    p = tmp_path / "t.csv"
    traj.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,z0,z1"
    assert lines[1] == "0.0,1.0,2.0"
    assert lines[2] == "0.5,0.5,1.0"


def test_batched_dense_flow_matches_per_sample():
    rng = Rng(1)
    f = Dense(gaussian_tensor(rng, (3, 3)), gaussian_tensor(rng, (3,)), "relu")
    z = gaussian_tensor(rng, (4, 3))
    batched = flow_forward(f, None, z, 1.0, "rk4", 5).final
    for i in range(4):
        assert np.allclose(batched[i], flow_forward(f, None, z[i], 1.0, "rk4", 5).final, atol=1e-14)
