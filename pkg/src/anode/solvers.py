"""Explicit Runge-Kutta integrators that record replayable trajectories.

All schemes share one stage loop (:func:`rk_step`) so that a step replayed
from a stored state reproduces the original floating-point operations
exactly.  Dormand-Prince 5(4) adds an embedded error estimate and a PI
step-size controller on top of the same loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .dynamics import Negated, VectorField

BLOWUP_LIMIT = 1e300


@dataclass(frozen=True)
class Tableau:
    a: tuple
    b: tuple
    c: tuple
    order: int
    err: tuple | None = None  # weights of (5th - 4th) order solution, incl. the FSAL stage

    @property
    def stages(self) -> int:
        return len(self.b)


TABLEAUS = {
    "euler": Tableau(a=((),), b=(1.0,), c=(0.0,), order=1),
    "heun_rk2": Tableau(a=((), (1.0,)), b=(0.5, 0.5), c=(0.0, 1.0), order=2),
    "rk4": Tableau(
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
        c=(0.0, 0.5, 0.5, 1.0),
        order=4,
    ),
    "rk45_dormand_prince": Tableau(
        a=(
            (),
            (1 / 5,),
            (3 / 40, 9 / 40),
            (44 / 45, -56 / 15, 32 / 9),
            (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
            (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
        ),
        b=(35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
        c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0),
        order=5,
        err=(
            35 / 384 - 5179 / 57600,
            0.0,
            500 / 1113 - 7571 / 16695,
            125 / 192 - 393 / 640,
            -2187 / 6784 + 92097 / 339200,
            11 / 84 - 187 / 2100,
            -1 / 40,
        ),
    ),
}

SCHEMES = tuple(TABLEAUS)


@dataclass(frozen=True)
class Scheme:
    kind: str = "euler"
    abs_tol: float = 1e-6
    rel_tol: float = 1e-3
    initial_step: float | None = None
    max_steps: int = 100_000

    def __post_init__(self):
        if self.kind not in TABLEAUS:
            raise ValueError(f"unknown scheme {self.kind!r}; choose from {SCHEMES}")
        if self.adaptive and (self.abs_tol <= 0 or self.rel_tol <= 0):
            raise ValueError("adaptive scheme requires positive tolerances")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.kind == "rk45_dormand_prince"

    @property
    def tableau(self) -> Tableau:
        return TABLEAUS[self.kind]

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.adaptive:
            d.update(abs_tol=self.abs_tol, rel_tol=self.rel_tol,
                     initial_step=self.initial_step, max_steps=self.max_steps)
        return d


def as_scheme(scheme) -> Scheme:
    if isinstance(scheme, Scheme):
        return scheme
    if isinstance(scheme, str):
        return Scheme(scheme)
    if isinstance(scheme, dict):
        return Scheme(**scheme)
    raise TypeError(f"cannot interpret {scheme!r} as a scheme")


@dataclass
class Trajectory:
    """Discrete solution ``z_0 .. z_N`` on ``times``.

    ``steps[i]`` is the exact step size used from ``states[i]``; ``stages[i]``
    (when recorded) holds the stage inputs of step ``i``, i.e. the points at
    which the right-hand side was evaluated.
    """

    times: np.ndarray
    states: list
    steps: np.ndarray
    scheme: Scheme
    stages: list | None = None
    accepted: int = 0
    rejected: int = 0
    step_log: list = dc_field(default_factory=list)
    complete: bool = True

    @property
    def nsteps(self) -> int:
        return len(self.steps)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        """Columns: ``t`` followed by the flattened state."""
        rows = [np.concatenate([[t], np.ravel(z)]) for t, z in zip(self.times, self.states)]
        width = len(rows[0]) - 1
        header = "t," + ",".join(f"z{i}" for i in range(width))
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for r in rows:
                fh.write(",".join(repr(float(x)) for x in r) + "\n")


class BlowUpError(FloatingPointError):
    """Raised when a state becomes non-finite or exceeds ``BLOWUP_LIMIT`` in magnitude."""

    def __init__(self, t: float, trajectory: Trajectory | None = None):
        super().__init__(f"blow-up detected at t={t:.6g}")
        self.t = t
        self.trajectory = trajectory


class StepBudgetExhausted(RuntimeError):
    pass


def _round32(x):
    return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)


def _blown(z) -> bool:
    return not (np.max(np.abs(z)) <= BLOWUP_LIMIT)


def rk_step(rhs, z, dt, tab: Tableau, rnd=None):
    """One explicit RK step; returns ``(z_new, stage_inputs, stage_slopes)``."""
    ys, ks = [], []
    for j, row in enumerate(tab.a):
        if j == 0:
            y = z
        else:
            acc = None
            for l, a in enumerate(row):
                if a == 0.0:
                    continue
                term = ks[l] if a == 1.0 else a * ks[l]
                acc = term if acc is None else acc + term
            y = z if acc is None else z + dt * acc
            if rnd is not None:
                y = rnd(y)
        k = rhs(y)
        if rnd is not None:
            k = rnd(k)
        ys.append(y)
        ks.append(k)
    incr = None
    for bj, k in zip(tab.b, ks):
        if bj == 0.0:
            continue
        term = k if bj == 1.0 else bj * k
        incr = term if incr is None else incr + term
    z_new = z + dt * incr
    if rnd is not None:
        z_new = rnd(z_new)
    return z_new, ys, ks


def _rms(x) -> float:
    x = np.ravel(x)
    return math.sqrt(float(np.dot(x, x)) / max(x.size, 1))


def _initial_step(rhs, z0, horizon, scheme: Scheme, f0) -> float:
    # Hairer, Norsett & Wanner, Solving ODEs I, II.4
    sc = scheme.abs_tol + scheme.rel_tol * np.abs(z0)
    d0, d1 = _rms(z0 / sc), _rms(f0 / sc)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, horizon)
    f1 = rhs(z0 + h0 * f0)
    d2 = _rms((f1 - f0) / sc) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, horizon)


def integrate(rhs, z0, horizon: float, scheme, nsteps: int | None = None, *, steps=None,
              record_tape: bool = False, precision: str = "double", keep_states: bool = True,
              check_every: int = 1) -> Trajectory:
    """Integrate ``dz/dt = rhs(z)`` from ``z0`` over ``[0, horizon]``.

    Fixed-step schemes use ``nsteps`` uniform steps unless an explicit
    ``steps`` sequence is given; the adaptive scheme runs its controller
    unless ``steps`` freezes a previously accepted sequence.
    """
    scheme = as_scheme(scheme)
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if precision not in ("double", "single"):
        raise ValueError("precision must be 'double' or 'single'")
    rnd = _round32 if precision == "single" else None
    tab = scheme.tableau
    z = np.array(z0, dtype=np.float64)
    if rnd is not None:
        z = rnd(z)
    if steps is None and not scheme.adaptive:
        if nsteps is None or int(nsteps) < 1:
            raise ValueError("fixed-step schemes require nsteps >= 1")
        nsteps = int(nsteps)
        dt = horizon / nsteps
        steps = np.full(nsteps, dt)
        traj = _integrate_fixed(rhs, z, steps, scheme, tab, record_tape, rnd, keep_states,
                                check_every)
        if keep_states:
            traj.times = np.linspace(0.0, horizon, nsteps + 1)
        else:
            traj.times = np.array([0.0, horizon])
        return traj
    if steps is not None:
        return _integrate_fixed(rhs, z, np.asarray(steps, dtype=np.float64), scheme, tab,
                                record_tape, rnd, keep_states, check_every)
    return _integrate_adaptive(rhs, z, float(horizon), scheme, tab, record_tape, rnd, keep_states)


def _integrate_fixed(rhs, z, steps, scheme, tab, record_tape, rnd, keep_states, check_every):
    n = len(steps)
    states = [z]
    stages = [] if record_tape else None
    t = 0.0
    times = [0.0]
    since = 0
    plain_euler = tab.stages == 1 and rnd is None
    for i in range(n):
        dt = steps[i]
        if plain_euler:
            # same operations as rk_step for the one-stage tableau
            ys = (z,)
            z_new = z + dt * rhs(z)
        else:
            z_new, ys, _ = rk_step(rhs, z, dt, tab, rnd)
        t = t + dt
        if record_tape:
            stages.append(list(ys))
        since += 1
        if since >= check_every or i == n - 1:
            since = 0
            if _blown(z_new):
                if keep_states:
                    states.append(z_new)
                    times.append(t)
                partial = Trajectory(np.array(times), states, steps[: len(states) - 1], scheme,
                                     stages, accepted=i + 1, complete=False)
                raise BlowUpError(t, partial)
        z = z_new
        if keep_states:
            states.append(z)
            times.append(t)
    if not keep_states:
        states.append(z)
        times.append(t)
    traj = Trajectory(np.array(times), states, steps, scheme, stages, accepted=n,
                      complete=keep_states)
    return traj


def _integrate_adaptive(rhs, z, horizon, scheme, tab, record_tape, rnd, keep_states):
    f0 = rhs(z)
    dt = scheme.initial_step if scheme.initial_step else _initial_step(rhs, z, horizon, scheme, f0)
    states, times, steps, log = [z], [0.0], [], []
    stages = [] if record_tape else None
    t = 0.0
    err_prev = 1e-4
    last_rejected = False
    accepted = rejected = 0
    alpha, beta = 0.7 / 5.0, 0.4 / 5.0
    while horizon - t > 1e-13 * max(1.0, horizon):
        if accepted + rejected >= scheme.max_steps:
            raise StepBudgetExhausted("step budget exhausted")
        dt = min(dt, horizon - t)
        z_new, ys, ks = rk_step(rhs, z, dt, tab, rnd)
        if _blown(z_new):
            partial = Trajectory(np.array(times), states, np.array(steps), scheme, stages,
                                 accepted, rejected, log, complete=False)
            raise BlowUpError(t + dt, partial)
        k7 = rhs(z_new)
        errvec = tab.err[-1] * k7
        for e, k in zip(tab.err[:-1], ks):
            if e != 0.0:
                errvec = errvec + e * k
        errvec = dt * errvec
        sc = scheme.abs_tol + scheme.rel_tol * np.maximum(np.abs(z), np.abs(z_new))
        err = _rms(errvec / sc)
        if err <= 1.0:
            log.append((t, dt, err, True))
            t = t + dt
            steps.append(dt)
            accepted += 1
            if record_tape:
                stages.append(ys)
            z = z_new
            if keep_states:
                states.append(z)
                times.append(t)
            fac = 5.0 if err == 0.0 else 0.9 * err ** (-alpha) * err_prev ** beta
            fac = min(5.0, max(0.2, fac))
            if last_rejected:
                fac = min(fac, 1.0)
            err_prev = max(err, 1e-4)
            last_rejected = False
        else:
            log.append((t, dt, err, False))
            rejected += 1
            fac = max(0.2, 0.9 * err ** (-1.0 / 5.0))
            last_rejected = True
        dt = dt * fac
    if not keep_states:
        states.append(z)
        times.append(t)
    times[-1] = horizon
    return Trajectory(np.array(times), states, np.array(steps), scheme, stages,
                      accepted, rejected, log, complete=keep_states)


def _rhs(field: VectorField, theta):
    theta = field._theta(theta)
    return lambda y: field._eval(y, theta)


def flow_forward(field: VectorField, theta, z0, horizon: float, scheme, nsteps: int | None = None,
                 **kwargs) -> Trajectory:
    """Solve ``dz/dt = f(z, theta)`` from ``z0``; ``kwargs`` as for :func:`integrate`."""
    return integrate(_rhs(field, theta), z0, horizon, scheme, nsteps, **kwargs)


def flow_reverse(field: VectorField, theta, z_end, horizon: float, scheme, nsteps: int | None = None,
                 **kwargs) -> Trajectory:
    """Solve the reverse-time system ``dz/ds = -f(z, theta)`` starting from ``z_end``."""
    return integrate(_rhs(Negated(field), theta), z_end, horizon, scheme, nsteps, **kwargs)


def convergence_order(field: VectorField, theta, z0, horizon: float, scheme, step_counts,
                      exact=None) -> float:
    """Least-squares slope of ``log(error)`` against ``log(dt)``.

    ``exact`` is the reference end state; without it a fine RK4 solution
    with 64x the largest step count is used.
    """
    step_counts = sorted(int(n) for n in step_counts)
    if len(step_counts) < 3:
        raise ValueError("need at least three step counts")
    if exact is None:
        exact = flow_forward(field, theta, z0, horizon, "rk4", 64 * step_counts[-1],
                             keep_states=False).final
    dts, errs = [], []
    for n in step_counts:
        zn = flow_forward(field, theta, z0, horizon, scheme, n, keep_states=False).final
        dts.append(horizon / n)
        errs.append(float(np.linalg.norm(np.ravel(zn - exact))))
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
