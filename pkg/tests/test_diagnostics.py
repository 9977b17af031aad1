import math

import numpy as np
import pytest

from anode.core_math import Rng, gaussian_tensor
from anode.diagnostics import (EPS32, adaptive_sweep, conv_spec, image_roundtrip_demo,
                               matrix_relu_reversibility, min_steps_for_rho, otd_dto_scan, read_pgm,
                               reversibility_scan, rho, rho_report, ring_pattern, skew_kernel,
                               write_pgm)
from anode.dynamics import Composite, Conv2dBlock, Dense, ScalarLinear, ScalarRelu, ZeroField


def euler_linear_rho(lam, n):
    """Forward then backward Euler on dz/dt = lam z multiplies z0 by (1 - (lam dt)^2)^N."""
    h = lam / n
    return abs((1 + h) ** n * (1 - h) ** n - 1)


@pytest.mark.parametrize("lam,n", [(-1.0, 10), (-5.0, 40), (-100.0, 1000), (-100.0, 5000)])
def test_linear_euler_rho_closed_form(lam, n):
    got = rho(ScalarLinear(lam), None, np.array([1.0]), 1.0, "euler", n)
    assert got == pytest.approx(euler_linear_rho(lam, n), rel=1e-9)


def test_rho_of_zero_field_and_zero_input():
    assert rho(ZeroField(), None, np.array([1.0, 2.0]), 1.0, "rk4", 3) == 0.0
    with pytest.raises(ValueError, match="undefined relative error"):
        rho(ScalarLinear(-1.0), None, np.zeros(2), 1.0, "euler", 3)


def test_rho_blowup_is_inf():
    assert rho(ScalarLinear(-1e4), None, np.array([1.0]), 1.0, "euler", 100) == math.inf


def test_rho_report_adaptive_counts():
    rep = rho_report(ScalarRelu(-1.0, 10.0), None, np.array([1.0]), 1.0,
                     {"kind": "rk45_dormand_prince", "abs_tol": 1e-8, "rel_tol": 1e-8})
    assert rep["forward_steps"] > 5 and rep["backward_steps"] > 5
    assert 0 < rep["rho"] < 1e-2


def test_scan_records_non_monotone_points():
    scan = reversibility_scan(ScalarLinear(-100.0), None, np.array([1.0]), 1.0, "euler", [10, 40, 100, 400])
    # dt lam = -10 and -2.5 overshoot wildly; the scan must flag the rise
    assert not scan.monotone
    text = scan.to_csv()
    assert text.splitlines()[0] == "field,scheme,N,rho"
    assert len(text.splitlines()) == 5


def test_min_steps_matches_exhaustive_search():
    f = ScalarLinear(-1.0)
    target = 0.02
    exhaustive = next(n for n in range(1, 1000) if euler_linear_rho(-1.0, n) <= target)
    res = min_steps_for_rho(f, None, np.array([1.0]), 1.0, "euler", target)
    assert res.reached and res.nsteps == exhaustive


def test_min_steps_reports_unreached_and_rejects_bad_bracket():
    f = ScalarLinear(-1.0)
    res = min_steps_for_rho(f, None, np.array([1.0]), 1.0, "euler", 1e-9, hi=64)
    assert not res.reached and res.nsteps == 64
    with pytest.raises(ValueError):
        min_steps_for_rho(f, None, np.array([1.0]), 1.0, "euler", 0.1, lo=5, hi=2)
    with pytest.raises(ValueError, match="not monotone"):
        min_steps_for_rho(ScalarLinear(-100.0), None, np.array([1.0]), 1.0, "euler", 1e-3, lo=10)


def test_adaptive_sweep_tighter_is_better():
    rows = adaptive_sweep(ScalarRelu(-1.0, 10.0), None, np.array([1.0]), 1.0, [(1e-4, 1e-4), (1e-9, 1e-9)])
    assert rows[1]["rho"] < rows[0]["rho"]
    assert rows[1]["forward_steps"] > rows[0]["forward_steps"]


def test_otd_dto_scan_first_order():
    rng = Rng(5)
    f = Composite([Dense(gaussian_tensor(rng, (3, 3)), gaussian_tensor(rng, (3,)), "relu"),
                   Dense(gaussian_tensor(rng, (3, 3)), None, "identity")])
    scan = otd_dto_scan(f, None, gaussian_tensor(rng, (3,)), 1.0, [1 / 8, 1 / 16, 1 / 32, 1 / 64, 1 / 128])
    assert scan.discrepancies[0] > 0
    assert abs(scan.slope - 1.0) <= 0.3
    assert scan.to_csv().startswith("dt,discrepancy,slope\n")
    with pytest.raises(ValueError):
        otd_dto_scan(f, None, np.ones(3), 1.0, [0.5, 0.25])


def test_matrix_relu_normalization_helps():
    raw = matrix_relu_reversibility(30, False, nsteps=200, seed=1)
    norm = matrix_relu_reversibility(30, True, nsteps=200, seed=1)
    assert norm < raw
    assert norm < 1e-3
    with pytest.raises(ValueError):
        matrix_relu_reversibility(1, True)


def test_pgm_round_trip(tmp_path):
    img = ring_pattern(20)
    assert img.shape == (20, 20) and img.min() >= 0.0 and img.max() <= 1.0
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    assert p.read_bytes().startswith(b"P5\n20 20\n255\n")


def test_read_ascii_pgm_and_errors(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_text("P2\n# comment\n2 1\n10\n0 10\n")
    assert read_pgm(p).tolist() == [[0.0, 1.0]]
    bad = tmp_path / "b.pgm"
    bad.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError, match="not a PGM"):
        read_pgm(bad)
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "c.pgm", np.zeros(3))


def test_skew_kernel_gives_skew_operator():
    k = skew_kernel(Rng(2), 2, 1.0)
    f = Conv2dBlock(k, "identity")
    rng = Rng(3)
    x = gaussian_tensor(rng, (2, 5, 5))
    y = gaussian_tensor(rng, (2, 5, 5))
    assert np.vdot(f(x), y) == pytest.approx(-np.vdot(x, f(y)), abs=1e-12)


def test_image_demo_writes_triplets(tmp_path):
    img = ring_pattern(12)
    res = image_roundtrip_demo(img, conv_spec("identity", std=1.0, normalize=True, size=12), "rk4",
                               nsteps=20, out_dir=tmp_path, prefix="id")
    assert res["rho"] < 1e-6 and not res["blowup"]
    for key in ("input", "forward", "reconstructed"):
        assert (tmp_path / f"id_{key}.pgm").exists()
    with pytest.raises(ValueError):
        image_roundtrip_demo(img * 2, conv_spec("relu"))


def test_eps32_value():
    assert EPS32 == 2.0 ** -23
