"""AC power flow: polar Newton-Raphson, branch flows, violation measures.

The solver treats three bus roles per solve, derived from the injection
spec rather than the case file so the same network can be solved with
generator voltage control (dispatch) or with every non-slack bus as PQ
(post-attack re-dispatch, where generator outputs are frozen):

* slack: V and theta fixed, P and Q free (residual absorbed there);
* voltage-controlled (PV): V fixed at a setpoint, theta and Q free;
* PQ: scheduled P and Q, V and theta free.

``InjectionSpec.p``/``q`` hold the scheduled injection at every bus
*excluding* whatever the slack (and, for Q, any voltage-controlled)
generator produces; those outputs are read back off the solved state.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace

import numpy as np

from .casedata import AdmittanceMatrix, NetworkCase, build_ybus, per_case_cache


class SingularJacobianError(RuntimeError):
    def __init__(self, bus_id):
        self.bus_id = bus_id
        super().__init__(f"singular power-flow Jacobian, pivot at bus {bus_id}")


@dataclass(frozen=True)
class InjectionSpec:
    p: np.ndarray               # scheduled P per bus, p.u. (excl. slack gen)
    q: np.ndarray               # scheduled Q per bus, p.u. (excl. V-controlled gen Q)
    v_setpoint: np.ndarray      # fixed |V| per bus, NaN where free
    slack: int

    def __post_init__(self):
        for name in ("p", "q"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite scheduled {name}")
        if math.isnan(self.v_setpoint[self.slack]):
            raise ValueError("slack bus requires a voltage setpoint")


def make_injection(case: NetworkCase, pd, qd, gen_p=None, gen_q=None,
                   gen_v=None, bess_p=None, bess_q=None) -> InjectionSpec:
    """Assemble an InjectionSpec from per-generator and per-BESS terms.

    gen_p: active output per generator (slack entry ignored).
    gen_q: reactive output per generator, or None to voltage-control every
           generator bus (then gen_v supplies setpoints per generator).
    bess_p/bess_q: net injections per BESS unit.
    """
    n = case.n_bus
    p = -np.asarray(pd, dtype=float).copy()
    q = -np.asarray(qd, dtype=float).copy()
    vset = np.full(n, np.nan)
    slack = case.slack_bus
    slack_gen = case.slack_gen
    if gen_p is not None:
        for gi, g in enumerate(case.generators):
            if gi != slack_gen:
                p[g.bus] += gen_p[gi]
    if gen_q is not None:
        for gi, g in enumerate(case.generators):
            if gi != slack_gen:
                q[g.bus] += gen_q[gi]
    if gen_v is not None:
        for gi, g in enumerate(case.generators):
            vset[g.bus] = gen_v[gi]
    if math.isnan(vset[slack]):
        vset[slack] = 1.0
    if bess_p is not None:
        for k, u in enumerate(case.bess):
            p[u.bus] += bess_p[k]
            q[u.bus] += bess_q[k]
    return InjectionSpec(p=p, q=q, v_setpoint=vset, slack=slack)


@dataclass(frozen=True)
class OperatingPoint:
    v: np.ndarray               # |V| p.u.
    theta: np.ndarray           # rad
    p_inj: np.ndarray           # realized net injection, p.u.
    q_inj: np.ndarray
    s_from: np.ndarray          # complex from-end branch flow, p.u.
    p_slack: float              # implied slack generator output, p.u.
    q_slack: float
    psi: np.ndarray             # per-branch thermal violation, p.u.
    omega: np.ndarray           # per-bus voltage violation, p.u.
    converged: bool
    iterations: int
    mismatch: float             # final residual inf-norm

    @property
    def s_from_abs(self) -> np.ndarray:
        return np.abs(self.s_from)


@per_case_cache
def cached_ybus(case: NetworkCase) -> AdmittanceMatrix:
    return build_ybus(case)


def _complex_voltage(v, theta):
    return v * np.exp(1j * theta)


def _dsbus_dv(y, vc):
    """Partials of the complex injection S = V .* conj(Y V) in polar form.

    Broadcast form of the standard diagonal-matrix identities (no O(n^2)
    temporary diagonals): with I = Y V and e = V/|V|,
      dS/dVa[i,k] = j V_i (delta_ik conj(I_i) - conj(Y_ik V_k))
      dS/dVm[i,k] = V_i conj(Y_ik e_k) + delta_ik conj(I_i) e_i
    """
    ibus = y @ vc
    e = vc / np.abs(vc)
    m = -np.conj(y * vc[None, :])
    np.fill_diagonal(m, m.diagonal() + np.conj(ibus))
    ds_dva = 1j * vc[:, None] * m
    ds_dvm = vc[:, None] * np.conj(y * e[None, :])
    np.fill_diagonal(ds_dvm, ds_dvm.diagonal() + np.conj(ibus) * e)
    return ds_dva, ds_dvm


def solve_pf(case: NetworkCase, inj: InjectionSpec,
             start: OperatingPoint | None = None,
             tol: float = 1e-10, max_iter: int = 30) -> OperatingPoint:
    """Newton-Raphson solve of the injection balance equations.

    Returns converged=False (never raises) when the iteration cap is hit;
    a singular Jacobian raises SingularJacobianError naming the pivot bus.
    """
    ybus = cached_ybus(case)
    y = ybus.y
    n = case.n_bus
    slack = inj.slack

    controlled = np.isfinite(inj.v_setpoint)
    is_pv = controlled & (np.arange(n) != slack)
    pvpq = np.flatnonzero(np.arange(n) != slack)          # rows with P equations
    pq = np.flatnonzero(~controlled)                      # rows with Q equations

    if start is not None:
        v = start.v.copy()
        theta = start.theta.copy()
    else:
        v = np.ones(n)
        theta = np.zeros(n)
    v[controlled] = inj.v_setpoint[controlled]

    n1 = len(pvpq)
    converged = False
    mismatch = math.inf
    it = 0
    for it in range(max_iter + 1):
        collapsed = (not np.all(np.isfinite(v)) or not np.all(np.isfinite(theta))
                     or np.any(v <= 1e-6))
        if collapsed:
            # numerical voltage collapse: report non-convergence, not an error
            v = np.where(np.isfinite(v) & (v > 1e-6), v, 1.0)
            theta = np.where(np.isfinite(theta), theta, 0.0)
            mismatch = math.inf
            break
        vc = _complex_voltage(v, theta)
        s = vc * np.conj(y @ vc)
        dp = inj.p - s.real
        dq = inj.q - s.imag
        f = np.concatenate([dp[pvpq], dq[pq]])
        mismatch = float(np.max(np.abs(f))) if f.size else 0.0
        if mismatch <= tol:
            converged = True
            break
        if it == max_iter:
            break
        jac = _mismatch_jacobian(y, vc, pvpq, pq)
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            raise _diagnose_singular(case, jac, pvpq, pq, n1)
        theta[pvpq] += dx[:n1]
        v[pq] += dx[n1:]

    vc = _complex_voltage(v, theta)
    s = vc * np.conj(y @ vc)
    s_from = _branch_flows_complex(case, vc)
    p_slack = float(s.real[slack] - inj.p[slack])
    q_slack = float(s.imag[slack] - inj.q[slack])
    op = OperatingPoint(
        v=v, theta=theta, p_inj=s.real, q_inj=s.imag, s_from=s_from,
        p_slack=p_slack, q_slack=q_slack,
        psi=np.zeros(len(case.branches)), omega=np.zeros(n),
        converged=converged, iterations=it, mismatch=mismatch)
    psi, omega = violations(case, op)
    return replace(op, psi=psi, omega=omega)


def _mismatch_jacobian(y, vc, pvpq, pq):
    ds_dva, ds_dvm = _dsbus_dv(y, vc)
    n1, n2 = len(pvpq), len(pq)
    jac = np.empty((n1 + n2, n1 + n2))
    jac[:n1, :n1] = ds_dva.real[pvpq[:, None], pvpq[None, :]]
    jac[:n1, n1:] = ds_dvm.real[pvpq[:, None], pq[None, :]]
    jac[n1:, :n1] = ds_dva.imag[pq[:, None], pvpq[None, :]]
    jac[n1:, n1:] = ds_dvm.imag[pq[:, None], pq[None, :]]
    return jac


def _diagnose_singular(case, jac, pvpq, pq, n1):
    col_norms = np.linalg.norm(jac, axis=0)
    k = int(np.argmin(col_norms))
    bus_idx = pvpq[k] if k < n1 else pq[k - n1]
    return SingularJacobianError(case.buses[bus_idx].bus_id)


@per_case_cache
def _branch_admittances(case: NetworkCase):
    ys = np.array([1.0 / complex(br.r, br.x) for br in case.branches])
    ysh = np.array([complex(0.0, br.b / 2.0) for br in case.branches])
    fr = np.array([br.from_bus for br in case.branches], dtype=int)
    to = np.array([br.to_bus for br in case.branches], dtype=int)
    return ys, ysh, fr, to


def _branch_flows_complex(case: NetworkCase, vc: np.ndarray) -> np.ndarray:
    if not case.branches:
        return np.zeros(0, dtype=complex)
    ys, ysh, fr, to = _branch_admittances(case)
    return vc[fr] * np.conj((ys + ysh) * vc[fr] - ys * vc[to])


def branch_flows(case: NetworkCase, op: OperatingPoint) -> np.ndarray:
    """From-end apparent-power magnitudes |S_ij| per branch, p.u."""
    vc = _complex_voltage(op.v, op.theta)
    return np.abs(_branch_flows_complex(case, vc))


def violations(case: NetworkCase, op: OperatingPoint):
    """Elementwise thermal and voltage violation measures (>= 0).

    psi_b = max(|S_b| - S_b^max, 0); omega_i = max(V_i - V_i^max,
    V_i^min - V_i, 0).  Evaluated on the from-end flow magnitude.
    """
    from .casedata import case_arrays

    arr = case_arrays(case)
    s_abs = np.abs(op.s_from)
    with np.errstate(invalid="ignore"):
        psi = np.where(np.isinf(arr.smax), 0.0, np.maximum(s_abs - arr.smax, 0.0))
    omega = np.maximum(np.maximum(op.v - arr.vmax, arr.vmin - op.v), 0.0)
    return psi, omega


def op_to_csv(case: NetworkCase, op: OperatingPoint) -> str:
    """Debug dump: bus rows (V, theta, P, Q, omega), branch rows (|S|, psi)."""
    lines = ["kind,index,v,theta,p,q,omega,s_abs,psi"]
    for i, bus in enumerate(case.buses):
        lines.append(
            f"bus,{bus.bus_id},{op.v[i]:.10g},{op.theta[i]:.10g},"
            f"{op.p_inj[i]:.10g},{op.q_inj[i]:.10g},{op.omega[i]:.10g},,")
    s_abs = np.abs(op.s_from)
    for b, br in enumerate(case.branches):
        lines.append(
            f"branch,{b + 1},,,,,,{s_abs[b]:.10g},{op.psi[b]:.10g}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# first-order sensitivities around a converged solve

class PfSensitivity:
    """Linear response of (V, theta, |S|, slack output) to scheduled-injection
    perturbations, from the Jacobian of the last Newton solve.

    ``columns`` restricts the perturbation basis: a (2n, m) matrix whose
    columns are directions in [dP_sched; dQ_sched] space.  Default is the
    identity, i.e. one column per bus P then per bus Q.
    """

    def __init__(self, case: NetworkCase, inj: InjectionSpec, op: OperatingPoint,
                 columns: np.ndarray | None = None):
        ybus = cached_ybus(case)
        y = ybus.y
        n = case.n_bus
        slack = inj.slack
        controlled = np.isfinite(inj.v_setpoint)
        pvpq = np.flatnonzero(np.arange(n) != slack)
        pq = np.flatnonzero(~controlled)
        n1, n2 = len(pvpq), len(pq)

        vc = _complex_voltage(op.v, op.theta)
        ds_dva, ds_dvm = _dsbus_dv(y, vc)
        jac = _mismatch_jacobian(y, vc, pvpq, pq)

        if columns is None:
            columns = np.eye(2 * n)
        self.columns = columns
        m = columns.shape[1]

        # d(state)/d(sched) restricted to the requested directions
        rhs = np.vstack([columns[:n][pvpq], columns[n:][pq]])
        try:
            x = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            raise _diagnose_singular(case, jac, pvpq, pq, n1)

        self.dtheta = np.zeros((n, m))
        self.dtheta[pvpq] = x[:n1]
        self.dv = np.zeros((n, m))
        self.dv[pq] = x[n1:]

        # branch |S| partials wrt the full state, then chain through dstate/dinj
        if case.branches:
            ys, ysh, fr, to = _branch_admittances(case)
            yff, yft = ys + ysh, -ys
            sf = vc[fr] * np.conj(yff * vc[fr] + yft * vc[to])
            sf_abs = np.abs(sf)
            safe = np.where(sf_abs > 1e-12, sf_abs, 1.0)
            # dSf wrt from/to voltage magnitude and angle (per branch)
            e_f, e_t = vc[fr] / op.v[fr], vc[to] / op.v[to]
            dsf_dvf = e_f * np.conj(yff * vc[fr] + yft * vc[to]) + vc[fr] * np.conj(yff * e_f)
            dsf_dvt = vc[fr] * np.conj(yft * e_t)
            dsf_daf = 1j * vc[fr] * np.conj(yff * vc[fr] + yft * vc[to]) \
                + vc[fr] * np.conj(1j * yff * vc[fr])
            dsf_dat = vc[fr] * np.conj(1j * yft * vc[to])
            # |S| gradient: d|S| = Re(conj(S) dS) / |S|
            w = np.conj(sf) / safe
            L = len(case.branches)
            dabs_dstate = np.zeros((L, 2 * n))   # cols: theta(0..n-1), V(n..2n-1)
            rows = np.arange(L)
            np.add.at(dabs_dstate, (rows, fr), (w * dsf_daf).real)
            np.add.at(dabs_dstate, (rows, to), (w * dsf_dat).real)
            np.add.at(dabs_dstate, (rows, n + fr), (w * dsf_dvf).real)
            np.add.at(dabs_dstate, (rows, n + to), (w * dsf_dvt).real)
            dstate = np.vstack([self.dtheta, self.dv])
            self.ds_abs = dabs_dstate @ dstate
        else:
            self.ds_abs = np.zeros((0, m))

        # slack generator output: flow at slack minus scheduled injection there
        dflow_p = ds_dva.real[slack] @ self.dtheta + ds_dvm.real[slack] @ self.dv
        dflow_q = ds_dva.imag[slack] @ self.dtheta + ds_dvm.imag[slack] @ self.dv
        self.dp_slack = dflow_p - columns[slack]
        self.dq_slack = dflow_q - columns[n + slack]
