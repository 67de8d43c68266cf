"""Stage 1: per-timestep economic-dispatch AC-OPF.

Reduced-space formulation: the decision vector holds non-slack generator
active outputs and per-generator voltage setpoints; the power-flow solve
eliminates the balance equations, and the remaining operating limits
(slack bounds, generator reactive bounds, PQ voltage bounds, thermal
limits) enter an augmented-Lagrangian penalty.  No external NLP solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .casedata import LoadProfile, NetworkCase
from .optim import box_projector, project_box, projected_descent
from .powerflow import OperatingPoint, make_injection, solve_pf

BOUND_TOL = 1e-6          # p.u. tolerance on (2d)-(2e) style limits
STATIONARITY_TOL = 1e-5   # projected-gradient norm of the scaled augmented objective


@dataclass(frozen=True)
class DispatchSlice:
    t: int
    pd: np.ndarray               # demand served at this hour, p.u.
    qd: np.ndarray
    gen_p: np.ndarray            # per generator, p.u. (slack entry implied by PF)
    gen_q: np.ndarray            # implied reactive output per generator, p.u.
    v: np.ndarray                # per bus
    theta: np.ndarray
    objective: float             # J1 contribution, $
    feasible: bool
    stationarity: float          # final projected-gradient norm (scaled)
    max_bound_violation: float   # p.u.
    report: tuple[str, ...]      # named residual bound violations


@dataclass(frozen=True)
class DispatchSolution:
    slices: tuple[DispatchSlice, ...]

    @property
    def objective(self) -> float:
        return sum(s.objective for s in self.slices)

    @property
    def feasible(self) -> bool:
        return all(s.feasible for s in self.slices)


def _constraint_values(case: NetworkCase, op: OperatingPoint, inj, gen_p_full):
    """Named inequality residuals g <= 0 at an operating point."""
    names, vals = [], []
    sg = case.slack_gen
    slack_g = case.generators[sg]
    names += ["slack_p_max", "slack_p_min"]
    vals += [op.p_slack - slack_g.pmax, slack_g.pmin - op.p_slack]
    for gi, g in enumerate(case.generators):
        q_impl = op.q_inj[g.bus] - inj.q[g.bus]
        names += [f"gen{gi + 1}_q_max", f"gen{gi + 1}_q_min"]
        vals += [q_impl - g.qmax, g.qmin - q_impl]
    for i, bus in enumerate(case.buses):
        if np.isfinite(inj.v_setpoint[i]):
            continue  # setpoint buses are box-constrained directly
        names += [f"bus{bus.bus_id}_v_max", f"bus{bus.bus_id}_v_min"]
        vals += [op.v[i] - bus.vmax, bus.vmin - op.v[i]]
    s_abs = np.abs(op.s_from)
    for b, br in enumerate(case.branches):
        if math.isinf(br.s_max):
            continue
        names.append(f"branch{b + 1}_thermal")
        vals.append(s_abs[b] - br.s_max)
    return names, np.array(vals)


def _gen_cost_total(case: NetworkCase, gen_p_full) -> float:
    return sum(g.cost(gen_p_full[gi], case.base_mva)
               for gi, g in enumerate(case.generators))


def solve_stage1(case: NetworkCase, profile: LoadProfile, t: int, *,
                 max_outer: int = 8, max_inner: int = 150) -> DispatchSlice:
    """Augmented-Lagrangian dispatch solve for hour t."""
    pd, qd = profile.demand(case, t)
    sg = case.slack_gen
    free = [gi for gi in range(len(case.generators)) if gi != sg]
    ng_free = len(free)

    # decision vector: [p_g (free gens); V setpoints (all gens)]
    p_lo = np.array([case.generators[gi].pmin for gi in free])
    p_hi = np.array([case.generators[gi].pmax for gi in free])
    v_lo = np.array([case.buses[g.bus].vmin for g in case.generators])
    v_hi = np.array([case.buses[g.bus].vmax for g in case.generators])
    lo = np.concatenate([p_lo, v_lo])
    hi = np.concatenate([p_hi, v_hi])

    # proportional-by-capacity start, flat voltage
    cap = np.array([case.generators[gi].pmax for gi in free])
    total_cap = cap.sum() + case.generators[sg].pmax
    share = pd.sum() * cap / total_cap if total_cap > 0 else np.zeros(ng_free)
    u0 = np.concatenate([project_box(share, p_lo, p_hi),
                         project_box(np.ones(len(case.generators)), v_lo, v_hi)])

    state = {"op": None}

    def unpack(u):
        gen_p = np.zeros(len(case.generators))
        for k, gi in enumerate(free):
            gen_p[gi] = u[k]
        gen_v = u[ng_free:]
        return gen_p, gen_v

    def solve_at(u):
        gen_p, gen_v = unpack(u)
        inj = make_injection(case, pd, qd, gen_p=gen_p, gen_v=gen_v)
        op = solve_pf(case, inj, start=state["op"])
        if op.converged:
            state["op"] = op
        return gen_p, inj, op

    def evaluate(u):
        gen_p, inj, op = solve_at(u)
        if not op.converged:
            return None, None, None, math.inf, None
        gen_p_full = gen_p.copy()
        gen_p_full[sg] = op.p_slack
        j1 = _gen_cost_total(case, gen_p_full)
        names, g = _constraint_values(case, op, inj, gen_p_full)
        return gen_p_full, inj, op, j1, (names, g)

    _, _, op0, j1_0, cg0 = evaluate(u0)
    if op0 is None:
        # collapsed demand: retry from max dispatch / max voltage, else flag
        state["op"] = None
        u0 = np.concatenate([p_hi, v_hi])
        _, _, op0, j1_0, cg0 = evaluate(u0)
    if op0 is None:
        return DispatchSlice(
            t=t, pd=pd, qd=qd, gen_p=np.full(len(case.generators), np.nan),
            gen_q=np.full(len(case.generators), np.nan),
            v=np.full(case.n_bus, np.nan), theta=np.full(case.n_bus, np.nan),
            objective=math.nan, feasible=False, stationarity=math.inf,
            max_bound_violation=math.inf,
            report=("power flow diverged at every initialization",))
    scale = max(1.0, abs(j1_0))
    m = len(cg0[1])
    mu = np.zeros(m)
    rho = 1e3

    def augmented(u, mu, rho):
        _, _, op, j1, cg = evaluate(u)
        if op is None:
            return 1e6  # diverged PF: repel the iterate
        g = cg[1]
        shifted = np.maximum(0.0, mu / rho + g)
        return j1 / scale + (rho / (2.0 * scale)) * float(
            np.sum(shifted ** 2) - np.sum((mu / rho) ** 2))

    u = u0
    prev_viol = math.inf
    pg = math.inf
    for _ in range(max_outer):
        f = lambda v: augmented(v, mu, rho)
        u, _, pg = projected_descent(
            f, u, box_projector(lo, hi), max_iter=max_inner,
            pg_tol=STATIONARITY_TOL * 0.3, fd_step=1e-6)
        _, _, op, j1, (names, g) = evaluate(u)
        viol = float(np.max(np.maximum(g, 0.0))) if len(g) else 0.0
        if viol <= BOUND_TOL and pg <= STATIONARITY_TOL:
            break
        mu = np.maximum(0.0, mu + rho * g)
        if viol > 0.25 * prev_viol and rho < 1e6:
            rho = min(rho * 10.0, 1e6)
        prev_viol = viol

    gen_p_full, inj, op, j1, (names, g) = evaluate(u)
    viol = float(np.max(np.maximum(g, 0.0))) if len(g) else 0.0
    report = tuple(f"{names[i]}: {g[i]:.3e}" for i in np.flatnonzero(g > BOUND_TOL))
    gen_q = np.array([op.q_inj[gen.bus] - inj.q[gen.bus] for gen in case.generators])
    return DispatchSlice(
        t=t, pd=pd, qd=qd, gen_p=gen_p_full, gen_q=gen_q, v=op.v.copy(), theta=op.theta.copy(),
        objective=j1, feasible=(viol <= BOUND_TOL and op.mismatch <= 1e-6),
        stationarity=pg, max_bound_violation=viol, report=report)


def solve_horizon(case: NetworkCase, profile: LoadProfile) -> DispatchSolution:
    """Independent per-hour solves over the whole profile."""
    slices = tuple(solve_stage1(case, profile, t) for t in range(profile.horizon))
    return DispatchSolution(slices=slices)


def dispatch_to_csv(case: NetworkCase, sol: DispatchSolution) -> str:
    header = ["t", "J1_dollars", "feasible"]
    header += [f"pg{gi + 1}_mw" for gi in range(len(case.generators))]
    header += [f"vg{gi + 1}_pu" for gi in range(len(case.generators))]
    lines = [",".join(header)]
    for s in sol.slices:
        row = [str(s.t + 1), f"{s.objective:.6f}", str(int(s.feasible))]
        row += [f"{case.mw(p):.6f}" for p in s.gen_p]
        row += [f"{s.v[g.bus]:.8f}" for g in case.generators]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
