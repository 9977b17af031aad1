"""Storage policies for multi-block backpropagation and their exact cost accounting.

Memory is counted in *states*: one z-shaped tensor held in a
:class:`StateStore`.  RK stage inputs live in a separate scratch count
(Euler 1, Heun 2, RK4 4, Dormand-Prince 7 per taped step).

Cost model for the within-block schedules (``uniform`` and ``binomial``):
the forward pass may drop checkpoints into ``m`` slots for free (slot 0 is
the block input); reversing step ``i`` needs ``z_i``; every step re-executed
during the backward sweep to regenerate a state counts as one recomputed
step.  Re-taping the RK stages of the step being reversed is bookkept
separately as ``taped_steps``.
"""

from __future__ import annotations

import heapq
import json
import time
from dataclasses import asdict, dataclass, field as dc_field
from functools import lru_cache

import numpy as np

from .solvers import as_scheme, flow_forward, rk_step, Trajectory, _rhs

POLICIES = ("store_all", "anode_block", "uniform", "binomial")
STAGE_SCRATCH = {"euler": 1, "heun_rk2": 2, "rk4": 4, "rk45_dormand_prince": 7}


# ---------------------------------------------------------------------------
# optimal schedules


@lru_cache(maxsize=None)
def _tables(nmax: int, mmax: int):
    """DP tables ``T`` (all advances paid) and ``F`` (first sweep free) plus their argmins."""
    inf = float("inf")
    T = [[inf] * (mmax + 1) for _ in range(nmax + 1)]
    F = [[inf] * (mmax + 1) for _ in range(nmax + 1)]
    tj = [[0] * (mmax + 1) for _ in range(nmax + 1)]
    fj = [[0] * (mmax + 1) for _ in range(nmax + 1)]
    for m in range(1, mmax + 1):
        T[1][m] = F[1][m] = 0
    for n in range(2, nmax + 1):
        T[n][1] = F[n][1] = n * (n - 1) // 2
        for m in range(2, mmax + 1):
            best, arg = inf, 0
            for j in range(1, n):
                c = j + T[n - j][m - 1] + T[j][m]
                if c < best:  # strict: ties keep the earlier split
                    best, arg = c, j
            T[n][m], tj[n][m] = best, arg
            best, arg = inf, 0
            for j in range(1, n):
                c = F[n - j][m - 1] + T[j][m]
                if c < best:
                    best, arg = c, j
            F[n][m], fj[n][m] = best, arg
    return T, F, tj, fj


def dp_optimal_cost(nt: int, m: int) -> int:
    """Minimal recomputed steps to reverse ``nt`` steps with ``m`` checkpoint slots."""
    if nt < 1 or m < 1:
        raise ValueError("need nt >= 1 and m >= 1")
    m = min(m, nt)
    return int(_tables(nt, m)[1][nt][m])


def brute_force_cost(nt: int, m: int) -> int:
    """Exhaustive shortest-path search over every checkpoint schedule (small ``nt`` only).

    States are ``(k, stored, work)``: steps ``0..k-1`` still to reverse, the
    set of checkpointed indices, and the index held in the working buffer.
    Any placement of at most ``m`` checkpoints during the first sweep is a
    free starting state.
    """
    if nt < 1 or m < 1:
        raise ValueError("need nt >= 1 and m >= 1")
    from itertools import combinations

    m = min(m, nt)
    heap, best = [], {}
    for r in range(0, m):
        for extra in combinations(range(1, nt), r):
            st = (nt, frozenset((0,) + extra), -1)
            best[st] = 0
            heap.append((0, st))
    heapq.heapify(heap)
    while heap:
        cost, (k, stored, work) = heapq.heappop(heap)
        if best.get((k, stored, work), None) != cost:
            continue
        if k == 0:
            return cost
        moves = []
        need = k - 1
        if need in stored or work == need:
            s2 = frozenset(i for i in stored if i < need) or frozenset((0,))
            moves.append((0, (need, s2, -1)))
        if 0 <= work < need - 0 and work + 1 <= need:
            moves.append((1, (k, stored, work + 1)))
        for s in stored:
            if s < need and s != work:
                moves.append((1, (k, stored, s + 1)))
        if work >= 0 and work not in stored and len(stored) < m:
            moves.append((0, (k, stored | {work}, work)))
        for s in stored:
            if s != 0:
                moves.append((0, (k, stored - {s}, work)))
        for dc, st in moves:
            nc = cost + dc
            if nc < best.get(st, float("inf")):
                best[st] = nc
                heapq.heappush(heap, (nc, st))
    raise RuntimeError("no schedule found")


def _t_actions(lo: int, n: int, m: int, acts: list, tj):
    if n == 1:
        acts.append(("reverse", lo))
        return
    if m == 1:
        for i in range(lo + n - 1, lo, -1):
            acts.append(("advance", lo, i))
            acts.append(("reverse", i))
        acts.append(("reverse", lo))
        return
    j = tj[n][m]
    acts.append(("advance", lo, lo + j))
    acts.append(("store", lo + j))
    _t_actions(lo + j, n - j, m - 1, acts, tj)
    acts.append(("free", lo + j))
    _t_actions(lo, j, m, acts, tj)


def binomial_schedule(nt: int, m: int):
    """``(forward_checkpoints, backward_actions)`` realising :func:`dp_optimal_cost`.

    Actions are ``("advance", src, dst)`` into the working buffer,
    ``("store", i)`` of the working buffer, ``("reverse", i)`` and
    ``("free", i)``.
    """
    m = min(m, nt)
    T, F, tj, fj = _tables(nt, m)
    chain, slots = [0], [m]
    pos, mm, n = 0, m, nt
    while n > 1 and mm > 1:
        j = fj[n][mm]
        pos += j
        chain.append(pos)
        n -= j
        mm -= 1
        slots.append(mm)
    acts = []
    ends = chain[1:] + [nt]
    for k in range(len(chain) - 1, -1, -1):
        _t_actions(chain[k], ends[k] - chain[k], slots[k], acts, tj)
        if k > 0:
            acts.append(("free", chain[k]))
    return chain, acts


def uniform_schedule(nt: int, m: int):
    """Equispaced checkpoints; each missing state is re-advanced from the nearest one below."""
    chain = sorted({int(round(k * nt / m)) for k in range(m)})
    acts = []
    for i in range(nt - 1, -1, -1):
        c = max(x for x in chain if x <= i)
        if c != i:
            acts.append(("advance", c, i))
        acts.append(("reverse", i))
        if c == i and i != 0:
            acts.append(("free", i))
    return chain, acts


def _simulate(chain, acts, n_other: int):
    live = set(chain)
    peak = n_other + len(live)
    recompute = 0
    for a in acts:
        if a[0] == "advance":
            recompute += a[2] - a[1]
        elif a[0] == "store":
            live.add(a[1])
            peak = max(peak, n_other + len(live))
        elif a[0] == "free":
            live.discard(a[1])
    return peak, recompute


# ---------------------------------------------------------------------------
# plans


@dataclass
class CheckpointPlan:
    policy: str
    L: int
    Nt: int
    m: int | None
    stored_indices: list
    predicted_peak_states: int
    predicted_recomputed_steps: int
    actions: list = dc_field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"policy": self.policy, "L": self.L, "Nt": self.Nt, "m": self.m,
                "peak_states": self.predicted_peak_states,
                "recomputed_steps": self.predicted_recomputed_steps}


def plan(policy: str, L: int, Nt: int, m: int | None = None) -> CheckpointPlan:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if L < 1 or Nt < 1:
        raise ValueError("need L >= 1 and Nt >= 1")
    if policy == "store_all":
        return CheckpointPlan(policy, L, Nt, None, [list(range(Nt + 1))] * L, L * (Nt + 1), 0)
    if policy == "anode_block":
        return CheckpointPlan(policy, L, Nt, None, [[0]] * L, L + Nt + 1, L * Nt)
    if m is None or m < 1:
        raise ValueError(f"policy {policy} needs a budget m >= 1")
    if m > Nt:
        raise ValueError("budget exceeds steps")
    chain, acts = (binomial_schedule if policy == "binomial" else uniform_schedule)(Nt, m)
    # the last block is reversed first, while every other block still holds its chain
    peak, per_block = _simulate(chain, acts, (L - 1) * len(chain))
    return CheckpointPlan(policy, L, Nt, m, [list(chain)] * L, peak, L * per_block, acts)


# ---------------------------------------------------------------------------
# instrumented storage and replay


class StateStore:
    """Live map of stored states with a high-water mark and step counters."""

    def __init__(self):
        self._data = {}
        self._stages = {}
        self.high_water = 0
        self.stage_high_water = 0
        self.recomputed_steps = 0
        self.taped_steps = 0

    def put(self, key, z):
        self._data[key] = z
        self.high_water = max(self.high_water, len(self._data))

    def get(self, key):
        try:
            return self._data[key]
        except KeyError:
            raise KeyError(f"missing checkpoint {key!r}") from None

    def has(self, key) -> bool:
        return key in self._data

    def pop(self, key):
        return self._data.pop(key)

    def free_block(self, block):
        for key in [k for k in self._data if len(k) > 1 and k[1] == block]:
            del self._data[key]
        self._stages.pop(block, None)
        self._count_stages()

    def put_stages(self, block, stages):
        self._stages[block] = stages
        self._count_stages()

    def get_stages(self, block):
        return self._stages.get(block)

    def _count_stages(self):
        n = sum(sum(len(s) for s in st) for st in self._stages.values())
        self.stage_high_water = max(self.stage_high_water, n)

    @property
    def live(self) -> int:
        return len(self._data)

    def stats(self, plan: CheckpointPlan | None = None, wall_time=None) -> dict:
        out = {"peak_states": self.high_water, "recomputed_steps": self.recomputed_steps,
               "taped_steps": self.taped_steps, "peak_stage_tensors": self.stage_high_water,
               "wall_time": wall_time}
        if plan is not None:
            out = {"policy": plan.policy, "L": plan.L, "Nt": plan.Nt, "m": plan.m, **out}
        return out


def advance(field, theta, scheme, z, steps):
    """Re-run the given steps from ``z`` with the same arithmetic as :func:`flow_forward`."""
    rhs = _rhs(field, theta)
    tab = as_scheme(scheme).tableau
    for dt in steps:
        if tab.stages == 1:
            z = z + dt * rhs(z)
        else:
            z = rk_step(rhs, z, dt, tab)[0]
    return z


def store_forward(plan: CheckpointPlan, block: int, field, theta, scheme, z0, horizon, nsteps,
                  store: StateStore, steps=None):
    """Forward pass of one block under ``plan``; returns ``(output, steps)``."""
    scheme = as_scheme(scheme)
    if plan.policy == "store_all":
        traj = flow_forward(field, theta, z0, horizon, scheme, nsteps, steps=steps, record_tape=True)
        for i, z in enumerate(traj.states):
            store.put(("tape", block, i), z)
        store.put_stages(block, traj.stages)
        return traj.final, traj.steps
    if plan.policy == "anode_block":
        store.put(("ckpt", block, 0), z0)
        traj = flow_forward(field, theta, z0, horizon, scheme, nsteps, steps=steps, keep_states=False)
        return traj.final, traj.steps
    if scheme.adaptive and steps is None:
        raise ValueError(f"policy {plan.policy} needs a fixed-step scheme or frozen steps")
    if steps is None:
        steps = np.full(nsteps, horizon / nsteps)
    chain = plan.stored_indices[block]
    z = z0
    store.put(("ckpt", block, 0), z0)
    for i in range(len(steps)):
        z = advance(field, theta, scheme, z, steps[i:i + 1])
        if i + 1 in chain:
            store.put(("ckpt", block, i + 1), z)
    return z, np.asarray(steps)


def replay(plan: CheckpointPlan, block: int, field, theta, scheme, store: StateStore, steps) -> Trajectory:
    """Full stage tape of ``block``, regenerated from the nearest stored states.

    ``store_all`` is a lookup; every other policy re-integrates segment by
    segment from the stored checkpoints and puts the tape into ``store``.
    """
    scheme = as_scheme(scheme)
    steps = np.asarray(steps)
    nt = len(steps)
    times = np.concatenate([[0.0], np.cumsum(steps)])
    if plan.policy == "store_all":
        states = [store.get(("tape", block, i)) for i in range(nt + 1)]
        return Trajectory(times, states, steps, scheme, store.get_stages(block), accepted=nt)
    rhs = _rhs(field, theta)
    tab = scheme.tableau
    z = None
    states, stages = [], []
    for i in range(nt + 1):
        if store.has(("ckpt", block, i)):
            z = store.get(("ckpt", block, i))
        elif i > 0:
            store.recomputed_steps += 1
        if i < nt:
            z_new, ys, _ = rk_step(rhs, z, steps[i], tab)
            stages.append(ys)
        store.put(("tape", block, i), z)
        states.append(z)
        if i < nt:
            z = z_new
    store.put_stages(block, stages)
    return Trajectory(times, states, steps, scheme, stages, accepted=nt)


def sweep(plan: CheckpointPlan, block: int, field, theta, scheme, store: StateStore, steps, reverse_step):
    """Drive the ``uniform``/``binomial`` backward schedule of ``block``.

    ``reverse_step(i, z_i)`` is called for ``i = Nt-1 .. 0`` in order.
    """
    if plan.policy not in ("uniform", "binomial"):
        raise ValueError("sweep is for the uniform and binomial policies")
    work_idx, work = None, None
    for act in plan.actions:
        kind = act[0]
        if kind == "advance":
            src, dst = act[1], act[2]
            start = store.get(("ckpt", block, src))
            work = advance(field, theta, scheme, start, steps[src:dst])
            work_idx = dst
            store.recomputed_steps += dst - src
        elif kind == "store":
            store.put(("ckpt", block, act[1]), work)
        elif kind == "free":
            if store.has(("ckpt", block, act[1])):
                store.pop(("ckpt", block, act[1]))
        else:
            i = act[1]
            z = store.get(("ckpt", block, i)) if store.has(("ckpt", block, i)) else None
            if z is None:
                if work_idx != i:
                    raise KeyError(f"state {i} of block {block} is not available")
                z = work
            reverse_step(i, z)


def bench(policy: str, L: int, Nt: int, m: int | None = None, field=None, scheme="euler",
          seed: int = 0, horizon: float = 1.0) -> dict:
    """Run a forward/backward sweep over ``L`` identical-architecture blocks and report costs."""
    from .adjoint_grad import OdeBlock, forward_pass, multi_block_backprop
    from .core_math import Rng, gaussian_tensor
    from .dynamics import Dense

    rng = Rng(seed)
    blocks, thetas = [], []
    for _ in range(L):
        f = field or Dense(gaussian_tensor(rng, (4, 4), 0.0, 0.5), np.zeros(4), "relu")
        blocks.append(OdeBlock(f, horizon, scheme, Nt))
        thetas.append(f.theta)
    x = gaussian_tensor(rng, (4,))
    t0 = time.perf_counter()
    rec = forward_pass(blocks, thetas, x, policy=policy, m=m)
    res = multi_block_backprop(blocks, thetas, rec, np.ones_like(rec.output))
    wall = time.perf_counter() - t0
    stats = rec.store.stats(rec.plan, wall_time=wall)
    stats["predicted_peak_states"] = rec.plan.predicted_peak_states
    stats["predicted_recomputed_steps"] = rec.plan.predicted_recomputed_steps
    stats["grad_norm"] = float(np.linalg.norm(np.concatenate([np.ravel(g) for g in res.grads])))
    return stats


def stats_json(stats: dict) -> str:
    return json.dumps(stats, indent=2, sort_keys=True)
