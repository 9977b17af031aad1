"""Gradients of one ODE block, and of a stack of blocks, by three pipelines.

``dto``
    exact reverse mode through the recorded RK stages (discretize, then
    differentiate).
``otd_stored``
    the continuous adjoint ODE discretised with the forward scheme on the
    forward grid, reading ``z`` from the stored trajectory.
``otd_reverse``
    the continuous adjoint ODE solved jointly with a reverse-time
    reconstruction of ``z`` from the block output, storing nothing.

Sign convention: every adjoint in this module is ``alpha = +dJ/dz``.  The
terminal value is therefore ``alpha(T) = dJ/dz(T)`` and the adjoint ODE reads
``d alpha/dt = -(df/dz)^T alpha``.  A costate defined as ``-dJ/dz`` (another
common convention) is the negative of ours; only the boundary would change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .checkpoint import StateStore, plan as make_plan, replay, store_forward, sweep
from .core_math import relative_error
from .dynamics import VectorField, vjp
from .solvers import (BlowUpError, Scheme, Tableau, Trajectory, _rhs, as_scheme, flow_forward,
                      integrate, rk_step)

PIPELINES = ("dto", "otd_stored", "otd_reverse")


@dataclass
class GradientReport:
    grad_theta: np.ndarray
    grad_z0: np.ndarray
    pipeline: str
    scheme: Scheme
    nsteps: int
    diagnostics: dict = dc_field(default_factory=dict)

    def to_dict(self, full: bool = False) -> dict:
        d = {
            "pipeline": self.pipeline,
            "scheme": self.scheme.to_dict(),
            "nsteps": int(self.nsteps),
            "grad_theta_norm": float(np.linalg.norm(np.ravel(self.grad_theta))),
            "grad_z0_norm": float(np.linalg.norm(np.ravel(self.grad_z0))),
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }
        if full:
            d["grad_theta"] = np.ravel(self.grad_theta).tolist()
            d["grad_z0"] = np.ravel(self.grad_z0).tolist()
            d["z0_shape"] = list(np.shape(self.grad_z0))
        return d

    def to_json(self, full: bool = False) -> str:
        return json.dumps(self.to_dict(full), sort_keys=True)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.grad_theta), np.ravel(self.grad_z0)])


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return str(v)
    return v


class ReconstructionError(FloatingPointError):
    """Reverse reconstruction blew up; ``diagnostics`` holds what was computed so far."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def _start_theta(field: VectorField, theta, reg_grad):
    n = field._theta(theta).size
    if reg_grad is None:
        return np.zeros(n)
    reg_grad = np.asarray(reg_grad, dtype=np.float64).ravel()
    if reg_grad.size != n:
        raise ValueError("reg_grad must be shaped like theta")
    return reg_grad.copy()


# ---------------------------------------------------------------------------
# discretize-then-optimize


def dto_step_reverse(field: VectorField, theta, tab: Tableau, ys, dt, alpha, gtheta):
    """Pull ``alpha = dJ/dz_{i+1}`` back through one RK step with stage inputs ``ys``.

    With ``w_j = b_j alpha + dt sum_{m>j} a_mj u_m`` and
    ``u_j = (df/dz)(Y_j)^T w_j`` the step returns
    ``alpha + dt sum_j u_j`` and adds ``dt sum_j (df/dtheta)(Y_j)^T w_j``
    to ``gtheta``.  For Euler this is literally
    ``alpha_i = alpha_{i+1} + dt f_z(z_i)^T alpha_{i+1}``.
    """
    s = tab.stages
    us, gs = [None] * s, [None] * s
    for j in range(s - 1, -1, -1):
        bj = tab.b[j]
        w = None if bj == 0.0 else (alpha if bj == 1.0 else bj * alpha)
        extra = None
        for m in range(j + 1, s):
            a = tab.a[m][j] if j < len(tab.a[m]) else 0.0
            if a == 0.0 or us[m] is None:
                continue
            term = us[m] if a == 1.0 else a * us[m]
            extra = term if extra is None else extra + term
        if extra is not None:
            w = dt * extra if w is None else w + dt * extra
        if w is None:
            continue
        us[j], gs[j] = vjp(field, ys[j], theta, w)
    usum = gsum = None
    for u, g in zip(us, gs):
        if u is None:
            continue
        usum = u if usum is None else usum + u
        gsum = g if gsum is None else gsum + g
    if usum is None:
        return alpha, gtheta
    return alpha + dt * usum, gtheta + dt * gsum


def dto_gradient(field: VectorField, theta, z0, horizon, scheme, nsteps=None, gbar_z1=None,
                 tape: Trajectory | None = None, reg_grad=None) -> GradientReport:
    """Exact gradient of ``J(z_N)`` through the discrete forward map.

    Without ``tape`` the forward pass is run here with stage recording; an
    adaptive run's accepted steps are then frozen and differentiated as
    constants.
    """
    scheme = as_scheme(scheme)
    theta = field._theta(theta)
    if tape is None:
        tape = flow_forward(field, theta, z0, horizon, scheme, nsteps, record_tape=True)
    if tape.stages is None or len(tape.stages) != tape.nsteps:
        raise ValueError("tape required for DTO")
    tab = tape.scheme.tableau
    alpha = np.array(gbar_z1, dtype=np.float64)
    if alpha.shape != np.shape(tape.states[0]):
        raise ValueError("gbar_z1 must be shaped like z")
    g = _start_theta(field, theta, reg_grad)
    for i in range(tape.nsteps - 1, -1, -1):
        alpha, g = dto_step_reverse(field, theta, tab, tape.stages[i], tape.steps[i], alpha, g)
    diag = {"accepted": tape.accepted, "rejected": tape.rejected}
    return GradientReport(g, alpha, "dto", tape.scheme, tape.nsteps, diag)


def euler_adjoint_recursion(field: VectorField, theta, states, steps, gbar_z1, reg_grad=None):
    """Forward-Euler discrete adjoint written out by hand; returns ``(grad_z0, grad_theta)``.

    ``alpha_N = gbar``;  ``alpha_i = alpha_{i+1} + dt (df/dz(z_i))^T alpha_{i+1}``;
    ``g += dt (df/dtheta(z_i))^T alpha_{i+1}``.
    """
    theta = field._theta(theta)
    alpha = np.array(gbar_z1, dtype=np.float64)
    g = _start_theta(field, theta, reg_grad)
    for i in range(len(steps) - 1, -1, -1):
        dt = steps[i]
        g = g + dt * field.vjp_theta(states[i], theta, alpha)
        alpha = alpha + dt * field.vjp_z(states[i], theta, alpha)
    return alpha, g


# ---------------------------------------------------------------------------
# optimize-then-discretize


def stage_nodes(tab: Tableau):
    """Where each reverse-time stage reads ``z`` from a forward step's record.

    Returns ``"end"`` (``z_{i+1}``), ``"start"`` (``z_i``) or a forward stage
    index.  A reverse stage at fraction ``c_j`` of the reversed step sits at
    forward fraction ``1 - c_j``: endpoints map to the stored states, interior
    points to the mirrored forward stage when its node coincides, otherwise
    the forward stage with the nearest node.
    """
    s = tab.stages
    out = []
    for j in range(s):
        p = 1.0 - tab.c[j]
        if p == 1.0:
            out.append("end")
        elif p == 0.0:
            out.append("start")
        elif tab.c[s - 1 - j] == p:
            out.append(s - 1 - j)
        else:
            dist = [abs(c - p) for c in tab.c]
            best = min(dist)
            # ties resolved toward the later stage
            out.append(max(l for l, d in enumerate(dist) if d == best))
    return out


def _adjoint_rk_step(field, theta, tab, nodes, alpha, dt):
    ks = []
    for j in range(tab.stages):
        a = alpha
        acc = None
        for l, coef in enumerate(tab.a[j]):
            if coef == 0.0:
                continue
            term = ks[l] if coef == 1.0 else coef * ks[l]
            acc = term if acc is None else acc + term
        if acc is not None:
            a = alpha + dt * acc
        ks.append(field.vjp_z(nodes[j], theta, a))
    incr = None
    for bj, k in zip(tab.b, ks):
        if bj == 0.0:
            continue
        term = k if bj == 1.0 else bj * k
        incr = term if incr is None else incr + term
    return alpha + dt * incr


def otd_gradient_stored(field: VectorField, theta, z0, horizon, scheme, nsteps=None, gbar_z1=None,
                        tape: Trajectory | None = None, reg_grad=None) -> GradientReport:
    """Continuous adjoint ODE on the stored forward grid.

    ``alpha`` is stepped backward with the forward scheme; ``g_theta`` is
    the left-endpoint Riemann sum ``sum_i dt_i (df/dtheta(z_i))^T alpha_i``.
    """
    scheme = as_scheme(scheme)
    theta = field._theta(theta)
    if tape is None:
        tape = flow_forward(field, theta, z0, horizon, scheme, nsteps, record_tape=True)
    if tape.stages is None:
        raise ValueError("tape with stage inputs required")
    tab = tape.scheme.tableau
    where = stage_nodes(tab)
    alpha = np.array(gbar_z1, dtype=np.float64)
    g = _start_theta(field, theta, reg_grad)
    for i in range(tape.nsteps - 1, -1, -1):
        rec = {"end": tape.states[i + 1], "start": tape.states[i]}
        nodes = [rec[w] if isinstance(w, str) else tape.stages[i][w] for w in where]
        alpha = _adjoint_rk_step(field, theta, tab, nodes, alpha, tape.steps[i])
        g = g + tape.steps[i] * field.vjp_theta(tape.states[i], theta, alpha)
    return GradientReport(g, alpha, "otd_stored", tape.scheme, tape.nsteps,
                          {"accepted": tape.accepted, "rejected": tape.rejected})


def otd_gradient_reverse(field: VectorField, theta, z1, horizon, scheme, nsteps=None, gbar_z1=None,
                         z0=None, reg_grad=None) -> GradientReport:
    """One reverse sweep of ``(z, alpha)`` from the block output, nothing stored.

    ``z`` follows the negated field, ``alpha`` the adjoint ODE, both through
    the same RK stages (adaptive schemes control the error of the pair).
    ``g_theta`` is accumulated at the forward-time left end of every step.
    When ``z0`` is supplied the reconstruction error ``rho`` is reported.
    """
    scheme = as_scheme(scheme)
    theta = field._theta(theta)
    z1 = np.asarray(z1, dtype=np.float64)
    alpha = np.array(gbar_z1, dtype=np.float64)
    if alpha.shape != z1.shape:
        raise ValueError("gbar_z1 must be shaped like z")
    f = _rhs(field, theta)

    def aug(y):
        return np.stack([-f(y[0]), field._vjp_z(y[0], theta, y[1])])

    try:
        traj = integrate(aug, np.stack([z1, alpha]), horizon, scheme, nsteps)
    except BlowUpError as exc:
        diag = {"blowup_t": exc.t, "completed_steps": exc.trajectory.nsteps if exc.trajectory else 0}
        raise ReconstructionError(f"reverse reconstruction failed: {exc}", diag) from exc
    g = _start_theta(field, theta, reg_grad)
    for k in range(traj.nsteps):
        y = traj.states[k + 1]
        g = g + traj.steps[k] * field.vjp_theta(y[0], theta, y[1])
    if not np.all(np.isfinite(g)):
        raise ReconstructionError("reverse reconstruction produced a non-finite parameter gradient",
                                  {"completed_steps": traj.nsteps})
    z_rec, alpha0 = traj.final[0], traj.final[1]
    diag = {"accepted": traj.accepted, "rejected": traj.rejected}
    if z0 is not None:
        z0 = np.asarray(z0, dtype=np.float64)
        diag["rho"] = relative_error(z_rec, z0) if np.any(z0) else float(np.linalg.norm(z_rec))
    diag["z0_reconstructed_norm"] = float(np.linalg.norm(np.ravel(z_rec)))
    return GradientReport(g, alpha0, "otd_reverse", scheme, traj.nsteps, diag)


def block_gradient(pipeline: str, field, theta, z0, horizon, scheme, nsteps, gbar_z1, reg_grad=None):
    """Dispatch to one of :data:`PIPELINES` for a single block."""
    if pipeline == "dto":
        return dto_gradient(field, theta, z0, horizon, scheme, nsteps, gbar_z1, reg_grad=reg_grad)
    if pipeline == "otd_stored":
        return otd_gradient_stored(field, theta, z0, horizon, scheme, nsteps, gbar_z1, reg_grad=reg_grad)
    if pipeline == "otd_reverse":
        z1 = flow_forward(field, theta, z0, horizon, scheme, nsteps, keep_states=False).final
        return otd_gradient_reverse(field, theta, z1, horizon, scheme, nsteps, gbar_z1, z0=z0,
                                    reg_grad=reg_grad)
    raise ValueError(f"unknown pipeline {pipeline!r}")


# ---------------------------------------------------------------------------
# stacks of blocks


@dataclass
class OdeBlock:
    field: VectorField
    horizon: float = 1.0
    scheme: object = "euler"
    nsteps: int | None = 1

    def __post_init__(self):
        self.scheme = as_scheme(self.scheme)


@dataclass
class ForwardRecord:
    output: np.ndarray
    store: StateStore
    plan: object
    pipeline: str
    inputs: dict
    steps: dict
    ode_index: dict


def _ode_layout(layers):
    idx, k = {}, 0
    for i, layer in enumerate(layers):
        if isinstance(layer, OdeBlock):
            idx[i] = k
            k += 1
    return idx


def forward_pass(layers, thetas, x, policy: str = "anode_block", m: int | None = None,
                 pipeline: str = "dto", store: StateStore | None = None) -> ForwardRecord:
    """Run ``layers`` (ODE blocks and plain maps) keeping what ``pipeline`` needs.

    ODE-block states go to the :class:`StateStore` under ``policy``; plain
    layers keep their input activation on the record.  ``otd_reverse``
    stores only each block's output.
    """
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}")
    ode_index = _ode_layout(layers)
    nblocks = len(ode_index)
    store = store or StateStore()
    fixed = [b for b in layers if isinstance(b, OdeBlock) and not b.scheme.adaptive]
    nt = max([b.nsteps for b in fixed], default=1)
    pl = make_plan(policy if pipeline != "otd_reverse" else "anode_block", max(nblocks, 1), nt, m)
    if pipeline == "otd_stored" and policy in ("uniform", "binomial"):
        pl = make_plan(policy, max(nblocks, 1), nt, m)
    inputs, steps = {}, {}
    z = np.asarray(x, dtype=np.float64)
    for i, (layer, th) in enumerate(zip(layers, thetas)):
        if isinstance(layer, OdeBlock):
            ell = ode_index[i]
            if pipeline == "otd_reverse":
                traj = flow_forward(layer.field, th, z, layer.horizon, layer.scheme, layer.nsteps,
                                    keep_states=False)
                inputs[i] = z  # only kept for the rho diagnostic, never read by the gradient
                z = traj.final
                store.put(("out", ell), z)
                steps[ell] = traj.steps
            else:
                z, steps[ell] = store_forward(pl, ell, layer.field, th, layer.scheme, z, layer.horizon,
                                              layer.nsteps, store)
        else:
            inputs[i] = z
            z = layer(z, th)
    return ForwardRecord(z, store, pl, pipeline, inputs, steps, ode_index)


@dataclass
class BackpropResult:
    grad_input: np.ndarray
    grads: list
    reports: list


def multi_block_backprop(layers, thetas, record: ForwardRecord, loss_grad) -> BackpropResult:
    """Walk ``layers`` backward from ``dJ/d(output)``, freeing each block once it is done."""
    store, pl = record.store, record.plan
    g = np.asarray(loss_grad, dtype=np.float64)
    grads = [None] * len(layers)
    reports = [None] * len(record.ode_index)
    for i in range(len(layers) - 1, -1, -1):
        layer, th = layers[i], thetas[i]
        if not isinstance(layer, OdeBlock):
            x = record.inputs[i]
            grads[i] = layer.vjp_theta(x, th, g)
            g = layer.vjp_z(x, th, g)
            continue
        ell = record.ode_index[i]
        steps = record.steps[ell]
        f, sch = layer.field, layer.scheme
        if record.pipeline == "otd_reverse":
            rep = otd_gradient_reverse(f, th, store.get(("out", ell)), layer.horizon, sch,
                                       len(steps) if not sch.adaptive else None, g,
                                       z0=record.inputs.get(i))
            store.pop(("out", ell))
        elif pl.policy in ("uniform", "binomial") and record.pipeline == "dto":
            rep = _dto_sweep(pl, ell, f, th, sch, store, steps, g)
        else:
            if not (store.has(("ckpt", ell, 0)) or store.has(("tape", ell, 0))):
                raise KeyError(f"missing checkpoint for block {ell}")
            tape = replay(pl, ell, f, th, sch, store, steps)
            if record.pipeline == "dto":
                rep = dto_gradient(f, th, None, layer.horizon, sch, gbar_z1=g, tape=tape)
            else:
                rep = otd_gradient_stored(f, th, None, layer.horizon, sch, gbar_z1=g, tape=tape)
        store.free_block(ell)
        reports[ell] = rep
        grads[i] = rep.grad_theta
        g = rep.grad_z0
    return BackpropResult(g, grads, reports)


def _dto_sweep(pl, ell, field, theta, scheme, store, steps, gbar):
    tab = scheme.tableau
    rhs = _rhs(field, theta)
    state = {"alpha": np.array(gbar, dtype=np.float64), "g": np.zeros(field._theta(theta).size)}
    theta = field._theta(theta)

    def reverse_step(i, z):
        if tab.stages == 1:
            ys = (z,)
        else:
            ys = rk_step(rhs, z, steps[i], tab)[1]
            store.taped_steps += 1
        state["alpha"], state["g"] = dto_step_reverse(field, theta, tab, ys, steps[i],
                                                      state["alpha"], state["g"])

    sweep(pl, ell, field, theta, scheme, store, steps, reverse_step)
    return GradientReport(state["g"], state["alpha"], "dto", scheme, len(steps),
                          {"policy": pl.policy})
