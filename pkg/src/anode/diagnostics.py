"""Reversibility and gradient-consistency experiments.

``rho`` integrates forward, then integrates the negated field backward from
the result with the same scheme and step count, and reports the relative
distance to the starting point.  Blow-up counts as ``rho = inf``.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint_grad import dto_gradient, otd_gradient_stored
from .core_math import Rng, as_rng, gaussian_tensor, norm2, relative_error, spectral_norm
from .dynamics import Conv2dBlock, VectorField, field_from_spec, matrix_relu
from .solvers import (BlowUpError, StepBudgetExhausted, as_scheme, flow_forward, flow_reverse)

EPS32 = float(np.finfo(np.float32).eps)


def _roundtrip(field, theta, z0, horizon, scheme, nsteps, precision="double", check_every=1):
    kw = dict(keep_states=False, precision=precision, check_every=check_every)
    if as_scheme(scheme).adaptive and nsteps is not None:
        # a step count with Dormand-Prince means its tableau on a fixed uniform grid
        kw["steps"] = np.full(int(nsteps), horizon / int(nsteps))
    fwd = flow_forward(field, theta, z0, horizon, scheme, nsteps, **kw)
    bwd = flow_reverse(field, theta, fwd.final, horizon, scheme, nsteps, **kw)
    return fwd, bwd


def rho(field: VectorField, theta, z0, horizon: float, scheme, nsteps: int | None = None,
        precision: str = "double", check_every: int = 64) -> float:
    """Reversibility error ``||phi(phi(z0, T), -T) - z0|| / ||z0||``.

    Passing ``nsteps`` together with the adaptive scheme runs its tableau on
    a uniform grid of that many steps; ``nsteps=None`` runs the controller.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if norm2(z0) == 0.0:
        raise ValueError("undefined relative error")
    try:
        _, bwd = _roundtrip(field, theta, z0, horizon, scheme, nsteps, precision, check_every)
    except BlowUpError:
        return math.inf
    zr = bwd.final
    if not np.all(np.isfinite(zr)):
        return math.inf
    return relative_error(zr, z0)


def rho_report(field, theta, z0, horizon, scheme, nsteps=None, precision="double") -> dict:
    """``rho`` plus accepted/rejected step counts of both sweeps (useful for adaptive runs)."""
    z0 = np.asarray(z0, dtype=np.float64)
    out = {"forward_steps": None, "backward_steps": None, "rejected": None, "blowup": False}
    try:
        fwd, bwd = _roundtrip(field, theta, z0, horizon, scheme, nsteps, precision)
    except BlowUpError as exc:
        out.update(rho=math.inf, blowup=True, blowup_t=exc.t)
        return out
    except StepBudgetExhausted:
        out.update(rho=math.nan, budget_exhausted=True)
        return out
    out.update(rho=relative_error(bwd.final, z0), forward_steps=fwd.accepted,
               backward_steps=bwd.accepted, rejected=fwd.rejected + bwd.rejected)
    return out


@dataclass
class ReversibilityScan:
    field_spec: dict
    scheme: str
    step_counts: list
    rhos: list
    precision: str = "double"
    violations: list = dc_field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return not self.violations

    def rows(self):
        kind = self.field_spec.get("kind", "?")
        return [(kind, self.scheme, n, r) for n, r in zip(self.step_counts, self.rhos)]

    def to_csv(self, path=None) -> str:
        return _write_csv(path, ("field", "scheme", "N", "rho"), self.rows())


def _write_csv(path, header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _violations(counts, rhos, slack):
    bad = []
    for (n0, r0), (n1, r1) in zip(zip(counts, rhos), zip(counts[1:], rhos[1:])):
        if math.isinf(r0):
            continue
        if not r1 <= r0 * (1.0 + slack) + 1e-15:
            bad.append((n0, n1, r0, r1))
    return bad


def reversibility_scan(field, theta, z0, horizon, scheme, step_counts, precision="double",
                       slack: float = 1e-9) -> ReversibilityScan:
    """``rho`` for each step count; increases beyond ``slack`` are recorded as violations."""
    counts = sorted(int(n) for n in step_counts)
    rhos = [rho(field, theta, z0, horizon, scheme, n, precision) for n in counts]
    return ReversibilityScan(field.to_spec(), as_scheme(scheme).kind, counts, rhos, precision,
                             _violations(counts, rhos, slack))


@dataclass
class MinSteps:
    nsteps: int
    rho: float
    reached: bool
    scan: list


def min_steps_for_rho(field, theta, z0, horizon, scheme, target: float, lo: int = 1,
                      hi: int = 10 ** 6, precision: str = "double", resolution: int = 1,
                      slack: float = 1e-9) -> MinSteps:
    """Smallest ``N`` in ``[lo, hi]`` with ``rho(N) <= target``.

    A doubling scan brackets the answer and checks that ``rho`` does not
    increase over the bracket; integer bisection then narrows it to
    ``resolution``.  If even ``hi`` misses the target the result has
    ``reached=False`` and ``nsteps=hi``.
    """
    if not 1 <= lo <= hi:
        raise ValueError("need 1 <= lo <= hi")
    scan = []
    n = lo
    while True:
        scan.append((n, rho(field, theta, z0, horizon, scheme, n, precision)))
        bad = _violations([s[0] for s in scan[-2:]], [s[1] for s in scan[-2:]], slack)
        if bad:
            raise ValueError(f"rho increases between N={bad[0][0]} and N={bad[0][1]}; bracket not monotone")
        if scan[-1][1] <= target or n == hi:
            break
        n = min(2 * n, hi)
    if scan[-1][1] > target:
        return MinSteps(hi, scan[-1][1], False, scan)
    if len(scan) == 1:
        return MinSteps(lo, scan[0][1], True, scan)
    a, b, rb = scan[-2][0], scan[-1][0], scan[-1][1]
    ra = scan[-2][1]
    while b - a > resolution:
        mid = (a + b) // 2
        r = rho(field, theta, z0, horizon, scheme, mid, precision)
        scan.append((mid, r))
        if r <= target:
            b, rb = mid, r
        else:
            if r > ra * (1 + slack) + 1e-15 and not math.isinf(ra):
                raise ValueError(f"rho not monotone near N={mid}")
            a, ra = mid, r
    return MinSteps(b, rb, True, sorted(scan))


def adaptive_sweep(field, theta, z0, horizon, tolerances, precision="double",
                   max_steps: int = 100_000) -> list:
    """``rho_report`` of Dormand-Prince runs for each ``(abs_tol, rel_tol)`` pair."""
    out = []
    for atol, rtol in tolerances:
        sch = {"kind": "rk45_dormand_prince", "abs_tol": atol, "rel_tol": rtol, "max_steps": max_steps}
        rep = rho_report(field, theta, z0, horizon, sch, precision=precision)
        out.append({"abs_tol": atol, "rel_tol": rtol, **rep})
    return out


# ---------------------------------------------------------------------------
# gradient consistency


@dataclass
class DiscrepancyScan:
    field_spec: dict
    horizon: float
    dts: list
    discrepancies: list
    slope: float
    orders: list
    richardson: list

    def to_csv(self, path=None) -> str:
        rows = [(dt, d, self.slope) for dt, d in zip(self.dts, self.discrepancies)]
        return _write_csv(path, ("dt", "discrepancy", "slope"), rows)


def otd_dto_scan(field, theta, z0, horizon, dts, scheme="euler", gbar=None) -> DiscrepancyScan:
    """Relative gap between the stored-trajectory continuous adjoint and the exact discrete one.

    The loss is ``J = gbar . z(T)``.  Besides the log-log slope the scan
    reports the local orders ``log2(D(dt) / D(dt/2))`` and the Richardson
    residual ``|2 D(dt/2) - D(dt)| / D(dt)``, which is small when the gap is
    first order.
    """
    dts = sorted((float(d) for d in dts), reverse=True)
    if len(dts) < 4 or dts[0] / dts[-1] < 8 * (1 - 1e-12):
        raise ValueError("need at least 4 step sizes spanning a factor of 8")
    z0 = np.asarray(z0, dtype=np.float64)
    gbar = np.ones_like(z0) if gbar is None else np.asarray(gbar, dtype=np.float64)
    disc = []
    for dt in dts:
        n = int(round(horizon / dt))
        if n < 1 or abs(n * dt - horizon) > 1e-9 * horizon:
            raise ValueError(f"dt={dt} does not divide the horizon")
        a = dto_gradient(field, theta, z0, horizon, scheme, n, gbar)
        b = otd_gradient_stored(field, theta, z0, horizon, scheme, n, gbar)
        disc.append(relative_error(b.flat, a.flat))
    pos = [(dt, d) for dt, d in zip(dts, disc) if d > 0]
    slope = float(np.polyfit(np.log([p[0] for p in pos]), np.log([p[1] for p in pos]), 1)[0]) \
        if len(pos) >= 2 else math.nan
    orders, rich = [], []
    for k in range(len(dts) - 1):
        if disc[k] > 0 and disc[k + 1] > 0 and abs(dts[k] / dts[k + 1] - 2) < 1e-9:
            orders.append(math.log2(disc[k] / disc[k + 1]))
            rich.append(abs(2 * disc[k + 1] - disc[k]) / disc[k])
    return DiscrepancyScan(field.to_spec(), horizon, dts, disc, slope, orders, rich)


# ---------------------------------------------------------------------------
# matrix ReLU flows


def matrix_relu_reversibility(n: int, normalize: bool, scheme="euler", nsteps: int = 1000,
                              seed: int = 0, horizon: float = 1.0, precision="double") -> float:
    """``rho`` of ``dz/dt = max(0, W z)`` with Gaussian ``W`` (optionally unit spectral norm)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = Rng(seed)
    w = gaussian_tensor(rng, (n, n))
    if normalize:
        w = w / spectral_norm(w, 500)
    z0 = gaussian_tensor(rng, (n,))
    return rho(matrix_relu(w), None, z0, horizon, scheme, nsteps, precision)


# ---------------------------------------------------------------------------
# images


def ring_pattern(size: int = 28) -> np.ndarray:
    """Synthetic handwritten-zero: an anti-aliased elliptical ring in [0, 1]."""
    if size < 8:
        raise ValueError("pattern needs at least 8 pixels per side")
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    r = np.hypot(xx - 0.5, (yy - 0.5) * 0.8)
    return np.clip(1.0 - np.abs(r - 0.3) / 0.06, 0.0, 1.0)


def write_pgm(path, image) -> None:
    """Binary P5, 8-bit; values are clipped to [0, 1] and scaled to 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-d")
    img = np.nan_to_num(img, nan=0.0, posinf=1.0, neginf=0.0)
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _pgm_tokens(buf: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read binary (P5) or ASCII (P2) PGM into floats in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise ValueError(f"{path}: not a PGM file")
    (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    else:
        data = np.array(buf[pos - 1:].split()[: w * h], dtype=np.float64)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated image data")
    return data.reshape(h, w).astype(np.float64) / maxval


def skew_kernel(rng, channels: int = 1, std: float = 1.0) -> np.ndarray:
    """Kernel with ``K[o, i, d] = -K[i, o, -d]``: the zero-padded convolution is then skew."""
    k = gaussian_tensor(as_rng(rng), (channels, channels, 3, 3), 0.0, std)
    return 0.5 * (k - np.flip(k, axis=(2, 3)).transpose(1, 0, 2, 3))


def image_roundtrip_demo(image, field_spec, scheme="rk45_dormand_prince", horizon: float = 1.0,
                         nsteps: int | None = None, out_dir=None, prefix: str = "demo",
                         seed: int = 0) -> dict:
    """Push an image through one conv ODE block and pull it back with the reversed flow.

    ``field_spec`` is a field dictionary (or a field); the image becomes a
    one-channel state.  Writes ``<prefix>_input.pgm``, ``_forward.pgm`` and
    ``_reconstructed.pgm`` when ``out_dir`` is given.  A blow-up leaves the
    last computed states in place of the missing ones and ``rho = inf``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-d grayscale image")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    field = field_spec if isinstance(field_spec, VectorField) else field_from_spec(field_spec, Rng(seed))
    z0 = img[None]
    res = {"input": img, "blowup": False, "stage": None}
    try:
        fwd = flow_forward(field, None, z0, horizon, scheme, nsteps, keep_states=False)
        res["forward"] = fwd.final[0]
        res["forward_steps"] = fwd.accepted
        bwd = flow_reverse(field, None, fwd.final, horizon, scheme, nsteps, keep_states=False)
        res["reconstructed"] = bwd.final[0]
        res["backward_steps"] = bwd.accepted
        res["rho"] = relative_error(bwd.final, z0)
    except (BlowUpError, StepBudgetExhausted) as exc:
        partial = getattr(exc, "trajectory", None)
        last = partial.states[-1][0] if partial is not None and partial.states else np.full_like(img, np.nan)
        res["blowup"] = True
        res["stage"] = "forward" if "forward" not in res else "reverse"
        res["error"] = str(exc)
        res.setdefault("forward", last)
        res["reconstructed"] = last
        res["rho"] = math.inf
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for key in ("input", "forward", "reconstructed"):
            write_pgm(os.path.join(out_dir, f"{prefix}_{key}.pgm"), res[key])
    return res


ACTIVATION_ROWS = ("identity", "relu", "leaky_relu", "softplus")


def conv_spec(act: str, std: float = 10.0, seed: int = 0, normalize: bool = False,
              size: int = 28) -> dict:
    spec = {"kind": "conv2d_block", "channels": 1, "act": act, "std": std, "seed": seed}
    if normalize:
        spec.update(normalize=True, norm_shape=[1, size, size])
    return spec


# ---------------------------------------------------------------------------
# finite-difference gradient checks


def trajectory_kink_distance(field, theta, z0, horizon, scheme, nsteps=None) -> float:
    """Smallest ``|pre-activation|`` over every stage input of the forward run."""
    from .dynamics import min_abs_preactivation

    tape = flow_forward(field, theta, z0, horizon, scheme, nsteps, record_tape=True)
    return min((min_abs_preactivation(field, y, theta) for ys in tape.stages for y in ys),
               default=math.inf)


def fd_gradient(field, theta, z0, horizon, scheme, nsteps, gbar, h: float = 1e-5, steps=None):
    """Central differences of ``gbar . z(T)`` w.r.t. ``(theta, z0)``, concatenated."""
    theta = field._theta(theta).copy()
    z0 = np.asarray(z0, dtype=np.float64)

    def loss(th, z):
        zt = flow_forward(field, th, z, horizon, scheme, nsteps, steps=steps, keep_states=False).final
        return float(np.vdot(gbar, zt))

    out = np.zeros(theta.size + z0.size)
    for j in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        out[j] = (loss(tp, z0) - loss(tm, z0)) / (2 * h)
    zf = z0.ravel()
    for j in range(z0.size):
        zp, zm = zf.copy(), zf.copy()
        zp[j] += h
        zm[j] -= h
        out[theta.size + j] = (loss(theta, zp.reshape(z0.shape)) - loss(theta, zm.reshape(z0.shape))) / (2 * h)
    return out


def gradient_check(field, theta, z0, horizon, scheme, nsteps=None, gbar=None, h: float = 1e-5,
                   seed: int = 0, kink_margin: float = 1e-4, max_resample: int = 50) -> dict:
    """Compare every pipeline with central differences on one (field, z0) sample.

    ``z0`` is redrawn while some stage input sits within ``kink_margin`` of
    an activation kink.  Adaptive runs are differentiated on their frozen
    accepted-step sequence.
    """
    from .adjoint_grad import ReconstructionError, otd_gradient_reverse

    rng = Rng(seed)
    theta = field._theta(theta)
    z0 = np.asarray(z0, dtype=np.float64)
    tries = 0
    while trajectory_kink_distance(field, theta, z0, horizon, scheme, nsteps) < kink_margin:
        tries += 1
        if tries > max_resample:
            raise RuntimeError("could not find a kink-free sample")
        z0 = gaussian_tensor(rng, z0.shape) if z0.ndim else np.array(rng.normal(1)[0])
    gbar = np.ones_like(z0) if gbar is None else np.asarray(gbar, dtype=np.float64)
    fwd = flow_forward(field, theta, z0, horizon, scheme, nsteps, record_tape=True)
    steps = fwd.steps if as_scheme(scheme).adaptive else None
    ref = fd_gradient(field, theta, z0, horizon, scheme, nsteps, gbar, h, steps)

    def err(vec):
        scale = norm2(ref)
        return norm2(vec - ref) / scale if scale > 0 else norm2(vec - ref)

    out = {"resampled": tries, "nsteps": fwd.nsteps, "fd_norm": norm2(ref)}
    out["dto"] = err(dto_gradient(field, theta, z0, horizon, scheme, nsteps, gbar, tape=fwd).flat)
    out["otd_stored"] = err(otd_gradient_stored(field, theta, z0, horizon, scheme, nsteps, gbar,
                                                tape=fwd).flat)
    try:
        rep = otd_gradient_reverse(field, theta, fwd.final, horizon, scheme,
                                   fwd.nsteps if not as_scheme(scheme).adaptive else None, gbar, z0=z0)
        out["otd_reverse"] = err(rep.flat)
        out["otd_reverse_rho"] = rep.diagnostics.get("rho")
    except ReconstructionError as exc:
        out["otd_reverse"] = math.inf
        out["otd_reverse_error"] = str(exc)
    return out
