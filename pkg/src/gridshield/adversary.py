"""Stage 2: worst-case N-K generator attack search against a fixed dispatch.

An attack scales both active and reactive output of targeted generators by
(1 - y); the slack machine absorbs the imbalance while every other
generator output stays frozen, so the post-attack network is re-solved
with all non-slack buses as PQ.  The attack objective combines the
residual cost of the attacked units, the slack generation cost, and
weighted worst-element violation measures.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .casedata import NetworkCase
from .dispatch import DispatchSlice, DispatchSolution
from .optim import project_capped_simplex, projected_descent
from .powerflow import OperatingPoint, make_injection, solve_pf

BLACKOUT_FACTOR = 10.0      # cap for diverged power flows: 10x best converged J2
FD_STEP = 1e-4              # central-difference step for the ascent


@dataclass(frozen=True)
class AttackEval:
    j2: float                   # per-timestep objective contribution, $
    op: OperatingPoint
    psi_max: float              # worst line violation, p.u.
    omega_max: float            # worst voltage violation, p.u.
    slack_violation: float      # slack bound excess (reported, not penalized)
    diverged: bool


@dataclass(frozen=True)
class AttackVector:
    y: np.ndarray               # (|G_a|, T) intensities in [0, 1]
    budget: float               # K
    strategy: str = "worst"
    j2: float | None = None     # populated by the worst-attack search
    evals: tuple[AttackEval, ...] = ()

    def __post_init__(self):
        if np.any(self.y < -1e-12) or np.any(self.y > 1 + 1e-12):
            raise ValueError("attack intensities must lie in [0, 1]")
        if np.any(self.y.sum(axis=0) > self.budget + 1e-9):
            raise ValueError("attack budget exceeded")


def attacked_outputs(case: NetworkCase, xs: DispatchSlice, y_t: np.ndarray):
    """Generator (P, Q) after scaling targeted units by (1 - y)."""
    gen_p = xs.gen_p.copy()
    gen_q = xs.gen_q.copy()
    for k, gi in enumerate(case.attackable):
        gen_p[gi] *= 1.0 - y_t[k]
        gen_q[gi] *= 1.0 - y_t[k]
    return gen_p, gen_q


def _pf_start(xs: DispatchSlice) -> OperatingPoint:
    return OperatingPoint(
        v=xs.v.copy(), theta=xs.theta.copy(), p_inj=np.zeros_like(xs.v),
        q_inj=np.zeros_like(xs.v), s_from=np.zeros(0, dtype=complex),
        p_slack=0.0, q_slack=0.0, psi=np.zeros(0), omega=np.zeros_like(xs.v),
        converged=True, iterations=0, mismatch=0.0)


def post_attack_injection(case: NetworkCase, xs: DispatchSlice, y_t,
                          bess_p=None, bess_q=None):
    """Injection spec with attacked generator outputs frozen and only the
    slack bus voltage-controlled."""
    pd, qd = xs.pd, xs.qd
    gen_p, gen_q = attacked_outputs(case, xs, y_t)
    sg = case.slack_gen
    gen_q = gen_q.copy()
    gen_q[sg] = 0.0  # slack Q re-balances freely; exclude its stage-1 value
    inj = make_injection(case, pd, qd, gen_p=gen_p, gen_q=gen_q,
                         bess_p=bess_p, bess_q=bess_q)
    vset = np.full(case.n_bus, np.nan)
    vset[case.slack_bus] = xs.v[case.slack_bus]
    return type(inj)(p=inj.p, q=inj.q, v_setpoint=vset, slack=inj.slack)


def eval_attack(case: NetworkCase, xsol: DispatchSolution, y_t, t: int,
                blackout_penalty: float | None = None) -> AttackEval:
    """Objective contribution and post-attack operating point at hour t."""
    xs = xsol.slices[t]
    y_t = np.asarray(y_t, dtype=float)
    inj = post_attack_injection(case, xs, y_t)
    op = solve_pf(case, inj, start=_pf_start(xs))
    if not op.converged:
        if blackout_penalty is None:
            base = eval_attack(case, xsol, np.zeros_like(y_t), t,
                               blackout_penalty=math.inf)
            blackout_penalty = BLACKOUT_FACTOR * abs(base.j2)
        return AttackEval(j2=blackout_penalty, op=op, psi_max=math.inf,
                          omega_max=math.inf, slack_violation=math.inf,
                          diverged=True)

    gen_p, _ = attacked_outputs(case, xs, y_t)
    residual_cost = sum(case.generators[gi].cost(gen_p[gi], case.base_mva)
                        for gi in case.attackable)
    slack_cost = case.slack_cost_value(op.p_slack)
    psi_max = float(np.max(op.psi)) if op.psi.size else 0.0
    omega_max = float(np.max(op.omega))
    j2 = residual_cost + slack_cost + case.xi1 * psi_max + case.xi2 * omega_max

    sgen = case.generators[case.slack_gen]
    slack_violation = max(op.p_slack - sgen.pmax, sgen.pmin - op.p_slack,
                          op.q_slack - sgen.qmax, sgen.qmin - op.q_slack, 0.0)
    return AttackEval(j2=j2, op=op, psi_max=psi_max, omega_max=omega_max,
                      slack_violation=slack_violation, diverged=False)


def worst_attack(case: NetworkCase, xsol: DispatchSolution, k: float, t: int,
                 ascent_iters: int = 60):
    """Best attack found at hour t: binary enumeration then projected ascent.

    Enumerates every on/off pattern within budget, then runs central-FD
    projected gradient ascent from the best binary seed over the
    capped-simplex set.  Never returns less than the binary seed.
    """
    na = len(case.attackable)
    if k > na:
        raise ValueError(f"budget K={k} exceeds |G_a|={na}")
    best_y = np.zeros(na)
    best = eval_attack(case, xsol, best_y, t)
    max_converged = abs(best.j2)
    k_int = int(math.floor(k + 1e-12))
    for m in range(1, k_int + 1):
        for combo in itertools.combinations(range(na), m):
            y = np.zeros(na)
            y[list(combo)] = 1.0
            cand = eval_attack(case, xsol, y, t,
                               blackout_penalty=BLACKOUT_FACTOR * max_converged)
            if not cand.diverged:
                max_converged = max(max_converged, abs(cand.j2))
            if cand.j2 > best.j2:
                best, best_y = cand, y

    if na and k > 0:
        def neg_j2(y):
            ev = eval_attack(case, xsol, y, t,
                             blackout_penalty=BLACKOUT_FACTOR * max_converged)
            return -ev.j2

        project = lambda y: project_capped_simplex(y, k)
        y_asc, neg_best, _ = projected_descent(
            neg_j2, best_y, project, max_iter=ascent_iters, pg_tol=1e-8,
            fd_step=FD_STEP)
        if -neg_best > best.j2:
            cand = eval_attack(case, xsol, y_asc, t,
                               blackout_penalty=BLACKOUT_FACTOR * max_converged)
            if cand.j2 >= best.j2:
                best, best_y = cand, y_asc
    return best_y, best


def worst_attack_horizon(case: NetworkCase, xsol: DispatchSolution,
                         k: float) -> AttackVector:
    na = len(case.attackable)
    T = len(xsol.slices)
    y = np.zeros((na, T))
    evals = []
    for t in range(T):
        y[:, t], ev = worst_attack(case, xsol, k, t)
        evals.append(ev)
    return AttackVector(y=y, budget=k, strategy="worst",
                        j2=float(sum(e.j2 for e in evals)), evals=tuple(evals))


class ScenarioSampler:
    """Seeded mixture over worst-case, random-binary, and partial-intensity
    attacks; the worst-case horizon is computed once and reused."""

    STRATEGIES = ("worst", "random_binary", "partial")

    def __init__(self, case, xsol, k, mixture=(0.5, 0.3, 0.2), seed=0):
        if len(mixture) != 3 or min(mixture) < 0 or sum(mixture) <= 0:
            raise ValueError("mixture must be three nonnegative weights")
        self.case = case
        self.xsol = xsol
        self.k = k
        self.weights = np.asarray(mixture, dtype=float) / sum(mixture)
        self.rng = np.random.default_rng(seed)
        self._worst: AttackVector | None = None

    def worst(self) -> AttackVector:
        if self._worst is None:
            self._worst = worst_attack_horizon(self.case, self.xsol, self.k)
        return self._worst

    def sample(self) -> AttackVector:
        na = len(self.case.attackable)
        T = len(self.xsol.slices)
        strategy = self.STRATEGIES[self.rng.choice(3, p=self.weights)]
        if strategy == "worst":
            w = self.worst()
            return AttackVector(y=w.y, budget=w.budget, strategy="worst",
                                j2=w.j2, evals=w.evals)
        y = np.zeros((na, T))
        k_int = int(math.floor(self.k + 1e-12))
        for t in range(T):
            if strategy == "random_binary":
                m = int(self.rng.integers(0, k_int + 1))
                targets = self.rng.choice(na, size=min(m, na), replace=False)
                y[targets, t] = 1.0
            else:
                raw = self.rng.uniform(0.0, 1.0, size=na)
                y[:, t] = project_capped_simplex(raw, self.k)
        return AttackVector(y=y, budget=self.k, strategy=strategy)


def heatmap_csvs(case: NetworkCase, attack: AttackVector):
    """Per-hour violation heatmaps (voltage per bus, thermal per branch)."""
    omega_lines = ["t," + ",".join(f"bus_{b.bus_id}" for b in case.buses)]
    psi_lines = ["t," + ",".join(f"branch_{i + 1}" for i in range(len(case.branches)))]
    for t, ev in enumerate(attack.evals):
        omega_lines.append(f"{t + 1}," + ",".join(f"{w:.10g}" for w in ev.op.omega))
        psi_lines.append(f"{t + 1}," + ",".join(f"{p:.10g}" for p in ev.op.psi))
    return "\n".join(omega_lines) + "\n", "\n".join(psi_lines) + "\n"


def attack_to_csv(case: NetworkCase, attack: AttackVector) -> str:
    header = ["t"] + [f"y_gen{gi + 1}" for gi in case.attackable] + ["j2_dollars"]
    lines = [",".join(header)]
    for t in range(attack.y.shape[1]):
        j2 = f"{attack.evals[t].j2:.6f}" if attack.evals else ""
        lines.append(f"{t + 1}," + ",".join(f"{v:.10g}" for v in attack.y[:, t])
                     + f",{j2}")
    return "\n".join(lines) + "\n"
