"""CMDP environment for battery coordination under generator attacks.

State: [V; theta; P_inj; soc], dimension 3N + B.  The episode walks the
hourly horizon of one attack scenario against a fixed dispatch; each step
maps the normalized action to physical battery setpoints, re-solves the
network, pays the negative operational cost, and advances the state of
charge.  Alongside the reward the step reports the executed-action
constraint residuals and a linearization of (h, g) around the executed
action, which the agent's augmented-Lagrangian actor loss consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adversary import AttackVector, post_attack_injection
from .bess import (
    ConstraintEval,
    StepContext,
    constraint_dims,
    constraint_jacobians,
    constraint_residuals,
    stage3_cost,
)
from .casedata import LoadProfile, NetworkCase
from .dispatch import DispatchSolution
from .powerflow import solve_pf

DEFAULT_SOC0 = 0.9
FALLBACK_R_CAP = 1e3


class ScenarioRejected(RuntimeError):
    """Raised when the pre-action power flow diverges at reset; the caller
    is expected to log and resample the scenario."""


@dataclass(frozen=True)
class Surrogate:
    """First-order model of the constraints around the executed action."""
    a0: np.ndarray
    h0: np.ndarray
    g0: np.ndarray
    dh: np.ndarray              # (m_e, 3B)
    dg: np.ndarray              # (m_i, 3B)


@dataclass(frozen=True)
class StepInfo:
    r_lambda: np.ndarray        # equality residuals of the executed action
    r_mu: np.ndarray            # positive-part inequality residuals
    diverged: bool
    cost: float                 # positive operating cost (reward = -cost)
    ce: ConstraintEval | None
    surrogate: Surrogate


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    surrogate: Surrogate

    def __post_init__(self):
        if not math.isfinite(self.r):
            raise ValueError("non-finite reward")
        if np.any(np.abs(self.a) > 1 + 1e-9):
            raise ValueError("action outside [-1, 1]")


class GridEnv:
    """One scenario episode at a time; reset() binds the scenario."""

    def __init__(self, case: NetworkCase, profile: LoadProfile,
                 dispatch: DispatchSolution, soc0: float = DEFAULT_SOC0):
        self.case = case
        self.profile = profile
        self.dispatch = dispatch
        self.soc0_default = soc0
        self.horizon = len(dispatch.slices)
        self.m_e, self.m_i = constraint_dims(case)
        self.n_state = 3 * case.n_bus + case.n_bess
        self.n_action = 3 * case.n_bess
        self.r_cap = FALLBACK_R_CAP     # refreshed from observed |r|
        self._max_abs_r = 0.0
        self.scenario: AttackVector | None = None
        self.t = 0
        self.soc = None
        self._pre_op = None

    # -- state assembly ------------------------------------------------------

    def _assemble_state(self, op, soc):
        return np.concatenate([op.v, op.theta, op.p_inj, soc])

    def _pre_action_op(self, t):
        xs = self.dispatch.slices[t]
        inj = post_attack_injection(self.case, xs, self.scenario.y[:, t])
        from .bess import _warm_start
        return solve_pf(self.case, inj, start=_warm_start(xs))

    def reset(self, scenario: AttackVector, soc0: float | None = None):
        if scenario.y.shape[1] < self.horizon:
            raise ValueError("scenario shorter than the dispatch horizon")
        self.scenario = scenario
        self.t = 0
        soc0 = self.soc0_default if soc0 is None else soc0
        self.soc = np.full(self.case.n_bess, float(soc0))
        op = self._pre_action_op(0)
        if not op.converged:
            raise ScenarioRejected("power flow diverged at scenario reset")
        self._pre_op = op
        return self._assemble_state(op, self.soc)

    def context(self) -> StepContext:
        return StepContext(xs=self.dispatch.slices[self.t],
                           y_t=self.scenario.y[:, self.t],
                           soc=self.soc.copy(), dt=self.profile.dt)

    def step(self, a_final):
        if self.scenario is None:
            raise RuntimeError("reset() before step()")
        a_final = np.asarray(a_final, dtype=float)
        ctx = self.context()
        ce = constraint_residuals(self.case, ctx, a_final)

        if ce.diverged:
            cost = self.r_cap
            surrogate = Surrogate(
                a0=a_final.copy(), h0=np.full(self.m_e, 0.0),
                g0=np.full(self.m_i, 0.0),
                dh=np.zeros((self.m_e, self.n_action)),
                dg=np.zeros((self.m_i, self.n_action)))
            r_lambda = np.full(self.m_e, self.r_cap)
            r_mu = np.full(self.m_i, self.r_cap)
        else:
            cost, _ = stage3_cost(self.case, ctx, a_final, ce)
            self._max_abs_r = max(self._max_abs_r, abs(cost))
            self.r_cap = max(FALLBACK_R_CAP, 10.0 * self._max_abs_r)
            dh, dg = constraint_jacobians(self.case, ctx, a_final, ce)
            surrogate = Surrogate(a0=a_final.copy(), h0=ce.h.copy(),
                                  g0=ce.g.copy(), dh=dh, dg=dg)
            r_lambda = ce.h.copy()
            r_mu = np.maximum(ce.g, 0.0)

        reward = -cost
        self.soc = ce.soc_next.copy()
        self.t += 1
        done = self.t >= self.horizon
        if not done:
            op_next = self._pre_action_op(self.t)
            if op_next.converged:
                self._pre_op = op_next
            # on divergence keep the last converged snapshot for the state
        s_next = self._assemble_state(self._pre_op, self.soc)
        info = StepInfo(r_lambda=r_lambda, r_mu=r_mu, diverged=ce.diverged,
                        cost=cost, ce=None if ce.diverged else ce,
                        surrogate=surrogate)
        return s_next, reward, done, info
