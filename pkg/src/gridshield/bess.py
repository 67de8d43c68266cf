"""Stage 3 reference machinery: the normalized-action map, feasibility of
battery actions against the post-attack network, the closest-feasible-action
projection, and the desk-scale schedule oracle.

The oracle enumerates the charge/discharge/idle mode lattice per hour
(exact for the unit counts used here), runs a continuous subsolve inside
each mode using power-flow sensitivities, and carries the state of charge
forward greedily.  Network limits are penalized inside the score (they
appear in the objective) while battery and slack limits are hard.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .adversary import post_attack_injection
from .casedata import NetworkCase, case_arrays
from .dispatch import DispatchSlice
from .optim import project_box, projected_descent
from .powerflow import OperatingPoint, PfSensitivity, solve_pf

EPS_H = 1e-6                # equality-residual tolerance for membership
EPS_G = 1e-6                # inequality tolerance
RESIDUAL_CAP = 1e3          # assigned when the power flow diverges
_BIG_RATING = 1e6           # stands in for unlimited thermal ratings


@dataclass(frozen=True)
class StepContext:
    """Frozen surroundings of one Stage-3 hour: dispatch slice, attack
    intensities, and the storage state entering the hour."""
    xs: DispatchSlice
    y_t: np.ndarray
    soc: np.ndarray
    dt: float = 1.0


@dataclass(frozen=True)
class PhysicalAction:
    p_ch: np.ndarray            # p.u., after mode arbitration
    p_dis: np.ndarray
    q: np.ndarray
    p_net: np.ndarray           # p_dis - p_ch (preserved by arbitration)
    mode_ch: np.ndarray         # the exclusive mode bits
    mode_dis: np.ndarray


def raw_action_map(case: NetworkCase, a):
    """Exact affine map from normalized [-1,1] actions to physical ranges:
    -1 is zero power / minimum reactive, +1 is full rating / maximum."""
    b = case.n_bess
    a = np.asarray(a, dtype=float)
    a_ch, a_dis, a_q = a[:b], a[b:2 * b], a[2 * b:]
    arr = case_arrays(case)
    p_ch = 0.5 * arr.p_ch_max * (a_ch + 1.0)
    p_dis = 0.5 * arr.p_dis_max * (a_dis + 1.0)
    q = arr.q_min + 0.5 * (arr.q_max - arr.q_min) * (a_q + 1.0)
    return p_ch, p_dis, q


def action_to_physical(case: NetworkCase, a) -> PhysicalAction:
    """Physical battery setpoints with mutually exclusive modes.

    The raw map can request charge and discharge at once; arbitration keeps
    the net injection p_dis - p_ch and zeroes the losing side, so exactly
    one of the mode bits is set whenever the net power is nonzero.
    """
    p_ch_raw, p_dis_raw, q = raw_action_map(case, a)
    p_net = p_dis_raw - p_ch_raw
    p_dis = np.maximum(p_net, 0.0)
    p_ch = np.maximum(-p_net, 0.0)
    return PhysicalAction(
        p_ch=p_ch, p_dis=p_dis, q=q, p_net=p_net,
        mode_ch=p_ch > 0.0, mode_dis=p_dis > 0.0)


def soc_step(case: NetworkCase, soc, p_ch, p_dis, dt):
    """State-of-charge dynamics with charge/discharge efficiencies."""
    arr = case_arrays(case)
    return soc + (arr.eta_ch * p_ch - p_dis / arr.eta_dis) * dt / arr.e_max


def _warm_start(xs: DispatchSlice) -> OperatingPoint:
    return OperatingPoint(
        v=xs.v.copy(), theta=xs.theta.copy(), p_inj=np.zeros_like(xs.v),
        q_inj=np.zeros_like(xs.v), s_from=np.zeros(0, dtype=complex),
        p_slack=0.0, q_slack=0.0, psi=np.zeros(0), omega=np.zeros_like(xs.v),
        converged=True, iterations=0, mismatch=0.0)


@dataclass(frozen=True)
class ConstraintEval:
    h: np.ndarray               # equality residuals
    g: np.ndarray               # inequality residuals (feasible <= 0)
    op: OperatingPoint | None
    act: PhysicalAction
    soc_next: np.ndarray
    diverged: bool

    @property
    def feasible(self) -> bool:
        return (not self.diverged
                and float(np.max(np.abs(self.h))) <= EPS_H
                and float(np.max(self.g)) <= EPS_G)

    @property
    def violation(self) -> float:
        h_excess = max(float(np.max(np.abs(self.h))) - EPS_H, 0.0)
        return max(h_excess, float(np.max(self.g)))


def constraint_dims(case: NetworkCase):
    n, L, b = case.n_bus, len(case.branches), case.n_bess
    m_e = 2 * (n - 1) + b
    m_i = 2 * n + L + 2 * b + 4 + 6 * b
    return m_e, m_i


def constraint_residuals(case: NetworkCase, ctx: StepContext, a,
                         op: OperatingPoint | None = None) -> ConstraintEval:
    """Evaluate h (power balance, SOC dynamics) and g (voltage, thermal,
    SOC, slack, battery box) for a normalized action at the given context.

    Layout of g: [V-Vmax (n), Vmin-V (n), |S|-Smax (L), soc-socmax (B),
    socmin-soc (B), slack p/q bounds (4), battery box (6B)].
    """
    n, L, b = case.n_bus, len(case.branches), case.n_bess
    act = action_to_physical(case, a)
    soc_next = soc_step(case, ctx.soc, act.p_ch, act.p_dis, ctx.dt)
    inj = post_attack_injection(case, ctx.xs, ctx.y_t,
                                bess_p=act.p_net, bess_q=act.q)
    if op is None:
        op = solve_pf(case, inj, start=_warm_start(ctx.xs))
    m_e, m_i = constraint_dims(case)
    if not op.converged:
        return ConstraintEval(h=np.full(m_e, RESIDUAL_CAP),
                              g=np.full(m_i, RESIDUAL_CAP),
                              op=op, act=act, soc_next=soc_next, diverged=True)

    slack = case.slack_bus
    non_slack = np.arange(n) != slack
    arr = case_arrays(case)
    h = np.concatenate([
        inj.p[non_slack] - op.p_inj[non_slack],
        inj.q[non_slack] - op.q_inj[non_slack],
        np.zeros(b),  # soc_next computed from the dynamics: residual zero
    ])

    sgen = case.generators[case.slack_gen]
    g = np.concatenate([
        op.v - arr.vmax,
        arr.vmin - op.v,
        np.abs(op.s_from) - np.minimum(arr.smax, _BIG_RATING),
        soc_next - arr.soc_max,
        arr.soc_min - soc_next,
        [op.p_slack - sgen.pmax, sgen.pmin - op.p_slack,
         op.q_slack - sgen.qmax, sgen.qmin - op.q_slack],
        act.p_ch - arr.p_ch_max, -act.p_ch,
        act.p_dis - arr.p_dis_max, -act.p_dis,
        act.q - arr.q_max, arr.q_min - act.q,
    ])
    return ConstraintEval(h=h, g=g, op=op, act=act, soc_next=soc_next,
                          diverged=False)


def membership(case: NetworkCase, ctx: StepContext, a) -> bool:
    return constraint_residuals(case, ctx, a).feasible


def constraint_jacobians(case: NetworkCase, ctx: StepContext, a,
                         ce: ConstraintEval):
    """First-order (dh/da, dg/da) around a converged evaluation.

    The equality rows use the frozen-state reading (changing the action
    shifts the scheduled injection while the solved voltages stay put); the
    inequality rows chain power-flow sensitivities through the affine
    action map.  Rows match constraint_residuals' layout.
    """
    n, L, nb = case.n_bus, len(case.branches), case.n_bess
    arr = case_arrays(case)
    d_inj = action_injection_columns(case)
    inj = post_attack_injection(case, ctx.xs, ctx.y_t,
                                bess_p=ce.act.p_net, bess_q=ce.act.q)
    sens = PfSensitivity(case, inj, op=ce.op, columns=d_inj)

    slack = case.slack_bus
    non_slack = np.arange(n) != slack
    dsoc = _dsoc_da(case, ctx, ce)
    dh = np.vstack([
        d_inj[:n][non_slack],
        d_inj[n:][non_slack],
        -dsoc,
    ])
    dpnet = _dpnet_da(case)
    ch_active = (ce.act.p_net < 0).astype(float)
    dis_active = (ce.act.p_net > 0).astype(float)
    dq_box = np.zeros((nb, 3 * nb))
    dq_box[np.arange(nb), 2 * nb + np.arange(nb)] = \
        0.5 * (arr.q_max - arr.q_min)
    dg = np.vstack([
        sens.dv,
        -sens.dv,
        sens.ds_abs,
        dsoc,
        -dsoc,
        sens.dp_slack.reshape(1, -1),
        -sens.dp_slack.reshape(1, -1),
        sens.dq_slack.reshape(1, -1),
        -sens.dq_slack.reshape(1, -1),
        -dpnet * ch_active[:, None],      # p_ch = max(-p_net, 0)
        dpnet * ch_active[:, None],
        dpnet * dis_active[:, None],      # p_dis = max(p_net, 0)
        -dpnet * dis_active[:, None],
        dq_box,
        -dq_box,
    ])
    return dh, dg


def _dpnet_da(case: NetworkCase) -> np.ndarray:
    nb = case.n_bess
    arr = case_arrays(case)
    d = np.zeros((nb, 3 * nb))
    d[np.arange(nb), np.arange(nb)] = -0.5 * arr.p_ch_max
    d[np.arange(nb), nb + np.arange(nb)] = 0.5 * arr.p_dis_max
    return d


def _dsoc_da(case: NetworkCase, ctx: StepContext, ce: ConstraintEval) -> np.ndarray:
    arr = case_arrays(case)
    # charging side slope eta_ch*dt/E, discharging side dt/(eta_dis*E);
    # at p_net == 0 take the charging side (either subgradient is valid)
    slope = np.where(ce.act.p_net > 0,
                     -ctx.dt / (arr.eta_dis * arr.e_max),
                     -arr.eta_ch * ctx.dt / arr.e_max)
    return slope[:, None] * _dpnet_da(case)


# ---------------------------------------------------------------------------
# per-hour cost

def stage3_cost(case: NetworkCase, ctx: StepContext, a,
                ce: ConstraintEval | None = None):
    """Per-hour defense cost: slack generation + battery throughput cost +
    worst-element violation penalties."""
    if ce is None:
        ce = constraint_residuals(case, ctx, a)
    if ce.diverged:
        return math.inf, ce
    op = ce.op
    psi_max = float(np.max(op.psi)) if op.psi.size else 0.0
    omega_max = float(np.max(op.omega))
    arr = case_arrays(case)
    bess_cost = float(np.dot(arr.cost_per_mw, ce.act.p_net)) * case.base_mva
    j3 = (case.slack_cost_value(op.p_slack) + bess_cost
          + case.xi1 * psi_max + case.xi2 * omega_max)
    return j3, ce


# ---------------------------------------------------------------------------
# projection onto the feasible action set

@dataclass(frozen=True)
class ProjectionResult:
    a: np.ndarray
    feasible: bool
    distance: float
    fallback_used: bool


_PROJECTION_CALLS = 0


def projection_call_count() -> int:
    """Total project_action invocations; lets the harness assert that the
    deployment path never touches the projector."""
    return _PROJECTION_CALLS


def _penalty_objective(case, ctx, a_expl, weight):
    """dist^2 + weight * ||[g]_+||^2 with its analytic gradient (the equality
    residuals vanish whenever the inner power flow converges)."""
    cache: dict = {}

    def evaluate(a):
        key = a.tobytes()
        if key not in cache:
            if len(cache) > 512:
                cache.clear()
            cache[key] = constraint_residuals(case, ctx, a)
        return cache[key]

    def f(a):
        ce = evaluate(a)
        if ce.diverged:
            return float(np.dot(a - a_expl, a - a_expl)) + weight * RESIDUAL_CAP
        gp = np.maximum(ce.g, 0.0)
        return float(np.dot(a - a_expl, a - a_expl) + weight * np.dot(gp, gp))

    def grad(a):
        ce = evaluate(a)
        base = 2.0 * (a - a_expl)
        if ce.diverged:
            return base
        gp = np.maximum(ce.g, 0.0)
        if not np.any(gp > 0):
            return base
        _, dg = constraint_jacobians(case, ctx, a, ce)
        return base + 2.0 * weight * (dg.T @ gp)

    return f, grad


def _violation_objective(case, ctx):
    """||[g]_+||^2 alone, for feasibility-seeking descents."""
    cache: dict = {}

    def evaluate(a):
        key = a.tobytes()
        if key not in cache:
            if len(cache) > 512:
                cache.clear()
            cache[key] = constraint_residuals(case, ctx, a)
        return cache[key]

    def f(a):
        ce = evaluate(a)
        if ce.diverged:
            return RESIDUAL_CAP
        gp = np.maximum(ce.g, 0.0)
        return float(np.dot(gp, gp))

    def grad(a):
        ce = evaluate(a)
        if ce.diverged:
            return np.zeros_like(a)
        gp = np.maximum(ce.g, 0.0)
        if not np.any(gp > 0):
            return np.zeros_like(a)
        _, dg = constraint_jacobians(case, ctx, a, ce)
        return 2.0 * (dg.T @ gp)

    return f, grad


class _EvalCache:
    """Per-projection memo of constraint evaluations keyed by the action."""

    def __init__(self, case, ctx):
        self.case = case
        self.ctx = ctx
        self.store: dict = {}

    def __call__(self, a) -> ConstraintEval:
        key = a.tobytes()
        ce = self.store.get(key)
        if ce is None:
            if len(self.store) > 4096:
                self.store.clear()
            ce = constraint_residuals(self.case, self.ctx, a)
            self.store[key] = ce
        return ce

    def feasible(self, a) -> bool:
        return self(a).feasible


def _segment_bisect(cache: "_EvalCache", a_expl, a_feas, iters=30):
    """Closest feasible point on the segment [a_expl, a_feas] by bisection
    on the blend weight (membership is monotone enough in practice; the
    endpoint a_feas passes by construction so the result always passes)."""
    lo, hi = 0.0, 1.0  # 0 -> a_expl, 1 -> a_feas
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cand = (1.0 - mid) * a_expl + mid * a_feas
        if cache.feasible(cand):
            hi = mid
        else:
            lo = mid
    return (1.0 - hi) * a_expl + hi * a_feas


def _pattern_polish(cache: "_EvalCache", a_expl, a0, step0=0.25,
                    step_min=1e-4, probe_budget=200):
    """Shrink-step pattern search toward a_expl under the membership test."""
    a = a0.copy()
    dist = float(np.linalg.norm(a - a_expl))
    step = step0
    dims = a.size
    probes = 0
    while step > step_min and probes < probe_budget:
        improved = False
        directions = [None] * (2 * dims + 1)
        towards = a_expl - a
        nrm = float(np.linalg.norm(towards))
        directions[0] = towards / nrm if nrm > 0 else None
        for i in range(dims):
            e = np.zeros(dims)
            e[i] = 1.0
            directions[1 + 2 * i] = e
            directions[2 + 2 * i] = -e
        for d in directions:
            if d is None:
                continue
            cand = np.clip(a + step * d, -1.0, 1.0)
            cand_dist = float(np.linalg.norm(cand - a_expl))
            if cand_dist < dist - 1e-12:
                probes += 1
                if cache.feasible(cand):
                    a, dist = cand, cand_dist
                    improved = True
        if not improved:
            step *= 0.5
    return a


def project_action(case: NetworkCase, ctx: StepContext, a_expl) -> ProjectionResult:
    """Closest feasible action to a_expl (clipped to the box first).

    Escalating-weight penalty descent seeded at the raw action, with the
    Stage-3 mode scan as a fallback anchor when no feasible point is found,
    then segment bisection plus pattern polish toward a_expl.
    """
    global _PROJECTION_CALLS
    _PROJECTION_CALLS += 1
    a_expl = np.clip(np.asarray(a_expl, dtype=float), -1.0, 1.0)
    cache = _EvalCache(case, ctx)
    if cache.feasible(a_expl):
        return ProjectionResult(a=a_expl, feasible=True, distance=0.0,
                                fallback_used=False)

    box = lambda a: np.clip(a, -1.0, 1.0)
    anchors = []
    a = a_expl.copy()
    for weight in (1e2, 1e4, 1e6):
        f, grad = _penalty_objective(case, ctx, a_expl, weight)
        a, _, _ = projected_descent(f, a, box, grad=grad, max_iter=30,
                                    pg_tol=1e-8, max_backtracks=20)
        if cache.feasible(a):
            anchors.append(a)
    if not anchors:
        # pure feasibility pushes: from the last penalty iterate, then from
        # the conservative idle action (often near the feasible set)
        f, grad = _violation_objective(case, ctx)
        for seed in (a, _mode_anchor_action(case, ctx, ("idle",) * case.n_bess)):
            cand, _, _ = projected_descent(f, seed, box, grad=grad,
                                           max_iter=60, pg_tol=1e-14,
                                           max_backtracks=20)
            if cache.feasible(cand):
                anchors.append(cand)
                break

    fallback_used = False
    if not anchors:
        fallback_used = True
        scanned = _mode_scan_anchor(case, ctx, a_expl)
        if scanned is not None:
            anchors.append(scanned)
    if not anchors:
        # empty feasible set (no mode passes): least-violating point, flagged
        best, best_viol = a, math.inf
        for cand in (a, a_expl, np.zeros_like(a_expl)):
            viol = cache(cand).violation
            if viol < best_viol:
                best, best_viol = cand, viol
        return ProjectionResult(a=best, feasible=False,
                                distance=float(np.linalg.norm(best - a_expl)),
                                fallback_used=True)

    # dedupe anchors that collapsed to the same basin
    distinct = []
    for anchor in anchors:
        if all(float(np.linalg.norm(anchor - other)) > 1e-6 for other in distinct):
            distinct.append(anchor)

    best, best_dist = None, math.inf
    for anchor in distinct:
        a_seg = _segment_bisect(cache, a_expl, anchor)
        a_ref = _refit_distance(case, ctx, cache, a_expl, a_seg)
        a_sld = _boundary_slide(cache, a_expl, a_ref)
        a_pol = _pattern_polish(cache, a_expl, a_sld)
        d = float(np.linalg.norm(a_pol - a_expl))
        if d < best_dist:
            best, best_dist = a_pol, d
    return ProjectionResult(a=best, feasible=True, distance=best_dist,
                            fallback_used=fallback_used)


def _refit_distance(case, ctx, cache, a_expl, a_start):
    """High-weight penalty descent from a near-feasible start: converges to
    a local solution of the projection problem, then membership is restored
    by bisecting back toward the start if the iterate drifted infeasible."""
    box = lambda a: np.clip(a, -1.0, 1.0)
    f, grad = _penalty_objective(case, ctx, a_expl, 1e8)
    a, _, _ = projected_descent(f, a_start, box, grad=grad, max_iter=25,
                                pg_tol=1e-10, max_backtracks=15)
    if float(np.linalg.norm(a - a_expl)) >= float(np.linalg.norm(a_start - a_expl)):
        return a_start
    if cache.feasible(a):
        return a
    if cache.feasible(a_start):
        a_bis = _segment_bisect(cache, a, a_start, iters=30)
        if (cache.feasible(a_bis)
                and float(np.linalg.norm(a_bis - a_expl))
                < float(np.linalg.norm(a_start - a_expl))):
            return a_bis
    return a_start


def _boundary_slide(cache: "_EvalCache", a_expl, a0, max_iter=40, tol=1e-7):
    """Slide a feasible point along the active constraint surface toward
    a_expl: deflate the move direction against active-constraint gradients
    that it would violate, then backtrack on the membership test."""
    case, ctx = cache.case, cache.ctx
    a = a0.copy()
    dist = float(np.linalg.norm(a - a_expl))
    for _ in range(max_iter):
        ce = cache(a)
        if ce.diverged:
            break
        d = a_expl - a
        # box faces act like constraints too
        d[(a >= 1.0 - 1e-12) & (d > 0)] = 0.0
        d[(a <= -1.0 + 1e-12) & (d < 0)] = 0.0
        active = np.flatnonzero(ce.g > -1e-5)
        if active.size:
            _, dg = constraint_jacobians(case, ctx, a, ce)
            rows = dg[active]
            push = rows @ d
            viol = push > 1e-12
            if np.any(viol):
                A = rows[viol]
                try:
                    coef = np.linalg.lstsq(A @ A.T, A @ d, rcond=None)[0]
                    d = d - A.T @ coef
                except np.linalg.LinAlgError:
                    break
        nd = float(np.linalg.norm(d))
        if nd <= tol:
            break
        step = 1.0
        moved = False
        for _ in range(16):
            cand = np.clip(a + step * d, -1.0, 1.0)
            if not cache.feasible(cand):
                cand = _restore_feasibility(cache, cand)
            if cand is not None:
                cand_dist = float(np.linalg.norm(cand - a_expl))
                if cand_dist < dist - 1e-12 and cache.feasible(cand):
                    a, dist = cand, cand_dist
                    moved = True
                    break
            step *= 0.5
        if not moved:
            break
    return a


def _restore_feasibility(cache: "_EvalCache", a0, rounds=3):
    """First-order restoration: Gauss-Newton steps toward g <= 0 for a point
    that drifted just outside the feasible surface."""
    a = a0
    for _ in range(rounds):
        ce = cache(a)
        if ce.feasible:
            return a
        if ce.diverged:
            return None
        bad = np.flatnonzero(ce.g > 1e-8)
        if not bad.size:
            return None
        _, dg = constraint_jacobians(cache.case, cache.ctx, a, ce)
        A = dg[bad]
        target = -(ce.g[bad] + 1e-7)
        try:
            coef = np.linalg.lstsq(A @ A.T, target, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        a = np.clip(a + A.T @ coef, -1.0, 1.0)
    return a if cache(a).feasible else None


def _mode_anchor_action(case, ctx, modes):
    """A conservative in-mode action: small power in the mode direction,
    reactive output centered."""
    b = case.n_bess
    a = np.zeros(3 * b)
    for k, mode in enumerate(modes):
        if mode == "ch":
            a[k] = -0.5          # light charging
            a[b + k] = -1.0
        elif mode == "dis":
            a[k] = -1.0
            a[b + k] = -0.5      # light discharging
        else:
            a[k] = -1.0
            a[b + k] = -1.0
    return a


def _mode_scan_anchor(case, ctx, a_expl):
    """Scan the mode lattice with feasibility-seeking descents; return the
    feasible point nearest to a_expl, if any mode admits one."""
    best, best_dist = None, math.inf
    f, grad = _violation_objective(case, ctx)
    for modes in itertools.product(("idle", "ch", "dis"), repeat=case.n_bess):
        anchor = _mode_anchor_action(case, ctx, modes)
        cand, resid, _ = projected_descent(f, anchor, _mode_box(case, modes, ctx),
                                           grad=grad, max_iter=60, pg_tol=1e-14)
        if resid <= EPS_G ** 2 and membership(case, ctx, cand):
            d = float(np.linalg.norm(cand - a_expl))
            if d < best_dist:
                best, best_dist = cand, d
    return best


def _mode_box(case, modes, ctx: StepContext | None = None):
    """Box projector that pins the inactive power half-axes of each mode.

    With a context the active side is additionally clamped by the SOC
    headroom so the subsolve can never leave the SOC window.
    """
    b = case.n_bess
    arr = case_arrays(case)
    lo = -np.ones(3 * b)
    hi = np.ones(3 * b)
    for k, mode in enumerate(modes):
        if mode in ("idle", "dis"):
            hi[k] = -1.0         # charge action pinned at zero power
        if mode in ("idle", "ch"):
            hi[b + k] = -1.0     # discharge action pinned at zero power
        if ctx is not None and mode == "ch" and arr.p_ch_max[k] > 0:
            room = max(0.0, (arr.soc_max[k] - ctx.soc[k]) * arr.e_max[k]
                       / (arr.eta_ch[k] * ctx.dt))
            hi[k] = min(1.0, 2.0 * min(room, arr.p_ch_max[k])
                        / arr.p_ch_max[k] - 1.0)
        if ctx is not None and mode == "dis" and arr.p_dis_max[k] > 0:
            room = max(0.0, (ctx.soc[k] - arr.soc_min[k]) * arr.e_max[k]
                       * arr.eta_dis[k] / ctx.dt)
            hi[b + k] = min(1.0, 2.0 * min(room, arr.p_dis_max[k])
                            / arr.p_dis_max[k] - 1.0)
    return lambda a: project_box(a, lo, hi)


# ---------------------------------------------------------------------------
# desk-scale schedule oracle

@dataclass(frozen=True)
class BessSchedule:
    p_ch: np.ndarray            # (B, T) p.u.
    p_dis: np.ndarray
    q: np.ndarray
    p_net: np.ndarray
    mode_ch: np.ndarray         # boolean (B, T)
    mode_dis: np.ndarray
    soc: np.ndarray             # (B, T+1) including the initial state
    objective: float            # total J3, $
    per_t: np.ndarray           # (T,) contributions
    feasible: bool
    actions: np.ndarray         # (3B, T) normalized actions actually scored


_SLACK_PEN = 1e5


def _slack_excess(case, op):
    sgen = case.generators[case.slack_gen]
    return (max(op.p_slack - sgen.pmax, 0.0) - max(sgen.pmin - op.p_slack, 0.0),
            max(op.q_slack - sgen.qmax, 0.0) - max(sgen.qmin - op.q_slack, 0.0))


def _subsolve_mode(case, ctx, modes, j3_cache, max_iter=18, start=None):
    """Continuous subsolve inside one mode combination.

    Decision variables stay in the normalized action space restricted to
    the mode's (SOC-clamped) box; gradients come from power-flow
    sensitivities instead of finite differences through the solver.  Slack
    bounds enter as a quadratic penalty whose gradient is included.
    """
    anchor = start if start is not None else _mode_anchor_action(case, ctx, modes)
    project = _mode_box(case, modes, ctx)

    def f(a):
        key = a.tobytes()
        if key not in j3_cache:
            j3, ce = stage3_cost(case, ctx, a)
            if not ce.diverged:
                ep, eq = _slack_excess(case, ce.op)
                j3 += _SLACK_PEN * (ep * ep + eq * eq)
            if len(j3_cache) > 512:
                j3_cache.clear()
            j3_cache[key] = (j3, ce)
        return j3_cache[key][0]

    def grad(a):
        f(a)
        _, ce = j3_cache[a.tobytes()]
        if ce.diverged:
            return np.zeros_like(a)
        return _stage3_grad(case, ctx, a, ce)

    a_opt, j3_pen, _ = projected_descent(f, anchor, project, grad=grad,
                                         max_iter=max_iter, pg_tol=1e-9)
    _, ce = j3_cache[a_opt.tobytes()]
    a_opt, ce = _restore_hard_rows(case, ctx, a_opt, ce, project)
    j3_plain = stage3_cost(case, ctx, a_opt, ce)[0]
    return a_opt, j3_plain, ce


def _hard_row_slice(case):
    lo = 2 * case.n_bus + len(case.branches)
    return slice(lo, lo + 2 * case.n_bess + 4)       # SOC and slack bounds


def _restore_hard_rows(case, ctx, a, ce, project, rounds=12):
    """Gauss-Newton pushback of SOC/slack bound excess left behind by the
    quadratic penalty (network violation terms stay untouched: they are
    legitimately part of the score).  The box projection can clip the
    correction, so the step is overshot progressively when progress stalls.
    """
    hard = _hard_row_slice(case)
    boost = 1.0
    prev = math.inf
    for _ in range(rounds):
        if ce.diverged:
            return a, ce
        g_hard = ce.g[hard]
        bad = np.flatnonzero(g_hard > 1e-9)
        if not bad.size:
            return a, ce
        worst = float(g_hard[bad].max())
        boost = min(boost * 2.0, 64.0) if worst > 0.5 * prev else 1.0
        prev = worst
        _, dg = constraint_jacobians(case, ctx, a, ce)
        A = dg[hard][bad]
        target = -boost * (g_hard[bad] + 1e-10)
        try:
            coef = np.linalg.lstsq(A @ A.T, target, rcond=None)[0]
        except np.linalg.LinAlgError:
            return a, ce
        a_new = project(a + A.T @ coef)
        if np.array_equal(a_new, a):
            return a, ce
        a = a_new
        ce = constraint_residuals(case, ctx, a)
    return a, ce


def action_injection_columns(case: NetworkCase) -> np.ndarray:
    """d(scheduled injection)/d(action): (2n, 3B), the affine map slopes."""
    n, nb = case.n_bus, case.n_bess
    arr = case_arrays(case)
    d_inj = np.zeros((2 * n, 3 * nb))
    for k in range(nb):
        bus = arr.bess_bus[k]
        d_inj[bus, k] = -0.5 * arr.p_ch_max[k]          # a_ch raises charging
        d_inj[bus, nb + k] = 0.5 * arr.p_dis_max[k]
        d_inj[n + bus, 2 * nb + k] = 0.5 * (arr.q_max[k] - arr.q_min[k])
    return d_inj


def _stage3_grad(case, ctx, a, ce: ConstraintEval):
    """Analytic gradient of the per-hour cost wrt the normalized action."""
    nb = case.n_bess
    arr = case_arrays(case)
    op = ce.op
    inj = post_attack_injection(case, ctx.xs, ctx.y_t,
                                bess_p=ce.act.p_net, bess_q=ce.act.q)
    sens = PfSensitivity(case, inj, op, columns=action_injection_columns(case))

    c2, c1, _ = case.slack_cost
    dcost_dps = (2.0 * c2 * case.mw(op.p_slack) + c1) * case.base_mva
    grad = dcost_dps * sens.dp_slack

    cb = arr.cost_per_mw * case.base_mva
    grad[:nb] += -0.5 * arr.p_ch_max * cb               # p_net = p_dis - p_ch
    grad[nb:2 * nb] += 0.5 * arr.p_dis_max * cb

    if op.psi.size and float(np.max(op.psi)) > 0.0:
        k = int(np.argmax(op.psi))
        grad += case.xi1 * sens.ds_abs[k]
    omega_max = float(np.max(op.omega))
    if omega_max > 0.0:
        i = int(np.argmax(op.omega))
        sign = 1.0 if op.v[i] > case.buses[i].vmax else -1.0
        grad += case.xi2 * sign * sens.dv[i]

    ep, eq = _slack_excess(case, op)
    if ep != 0.0:
        grad += 2.0 * _SLACK_PEN * ep * sens.dp_slack
    if eq != 0.0:
        grad += 2.0 * _SLACK_PEN * eq * sens.dq_slack
    return grad


def solve_stage3(case: NetworkCase, xsol, attack, soc0) -> BessSchedule:
    """Greedy-in-time mode-enumeration solve of the defense problem."""
    nb = case.n_bess
    T = attack.y.shape[1]
    soc = np.asarray(soc0, dtype=float).copy()
    p_ch = np.zeros((nb, T))
    p_dis = np.zeros((nb, T))
    q = np.zeros((nb, T))
    p_net = np.zeros((nb, T))
    mode_ch = np.zeros((nb, T), dtype=bool)
    mode_dis = np.zeros((nb, T), dtype=bool)
    soc_traj = np.zeros((nb, T + 1))
    soc_traj[:, 0] = soc
    per_t = np.zeros(T)
    actions = np.zeros((3 * nb, T))
    feasible = True

    all_modes = list(itertools.product(("idle", "ch", "dis"), repeat=nb))
    exhaustive = len(all_modes) <= 27
    refine_top = max(3 ** min(nb, 2), 8) if exhaustive else 6
    subsolve_top = len(all_modes) if exhaustive else 24
    for t in range(T):
        ctx = StepContext(xs=xsol.slices[t], y_t=attack.y[:, t], soc=soc.copy(),
                          dt=1.0)
        # coarse pass: score every combination at its anchor action, then
        # short-subsolve only the most promising ones (all of them at small
        # unit counts, where the lattice is cheap to cover exactly)
        candidates = all_modes
        if not exhaustive:
            anchored = []
            for modes in all_modes:
                a0 = _mode_box(case, modes, ctx)(_mode_anchor_action(case, ctx, modes))
                j3_a, _ = stage3_cost(case, ctx, a0)
                anchored.append((j3_a, modes))
            anchored.sort(key=lambda c: c[0])
            candidates = [m for _, m in anchored[:subsolve_top]]
        screened = []
        for modes in candidates:
            cache: dict = {}
            a_opt, j3_opt, ce = _subsolve_mode(case, ctx, modes, cache,
                                               max_iter=4)
            screened.append((j3_opt, modes, a_opt, ce))
        screened.sort(key=lambda c: c[0])
        # refinement pass on the most promising combinations
        best = None
        for j3_scr, modes, a_scr, _ in screened[:refine_top]:
            cache = {}
            a_opt, j3_opt, ce = _subsolve_mode(case, ctx, modes, cache,
                                               max_iter=30, start=a_scr)
            hard_ok = bool(not ce.diverged
                           and np.max(ce.g[2 * case.n_bus + len(case.branches):
                                           2 * case.n_bus + len(case.branches)
                                           + 2 * nb + 4]) <= EPS_G)
            cand = (j3_opt, hard_ok, a_opt, ce)
            if best is None or (hard_ok, -j3_opt) > (best[1], -best[0]):
                best = cand
        j3_t, hard_ok, a_t, ce = best
        if not hard_ok:
            feasible = False
        per_t[t] = j3_t if not math.isinf(j3_t) else RESIDUAL_CAP
        actions[:, t] = a_t
        p_ch[:, t] = ce.act.p_ch
        p_dis[:, t] = ce.act.p_dis
        q[:, t] = ce.act.q
        p_net[:, t] = ce.act.p_net
        mode_ch[:, t] = ce.act.mode_ch
        mode_dis[:, t] = ce.act.mode_dis
        soc = ce.soc_next
        soc_traj[:, t + 1] = soc

    return BessSchedule(p_ch=p_ch, p_dis=p_dis, q=q, p_net=p_net,
                        mode_ch=mode_ch, mode_dis=mode_dis, soc=soc_traj,
                        objective=float(per_t.sum()), per_t=per_t,
                        feasible=feasible, actions=actions)


def schedule_to_csv(case: NetworkCase, sched: BessSchedule) -> str:
    header = ["t", "j3_dollars"]
    for k in range(case.n_bess):
        header += [f"p_net{k + 1}_mw", f"q{k + 1}_mvar", f"soc{k + 1}"]
    lines = [",".join(header)]
    T = sched.p_net.shape[1]
    for t in range(T):
        row = [str(t + 1), f"{sched.per_t[t]:.6f}"]
        for k in range(case.n_bess):
            row += [f"{case.mw(sched.p_net[k, t]):.6f}",
                    f"{case.mw(sched.q[k, t]):.6f}",
                    f"{sched.soc[k, t + 1]:.8f}"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
