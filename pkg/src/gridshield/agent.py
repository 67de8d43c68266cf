"""Constrained TD3 agent: twin critics with target smoothing, an actor
trained on an augmented-Lagrangian loss whose constraint terms come from
the environment's linearized surrogate, clipped dual ascent, and the
beta-blended safe-exploration loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bess import project_action
from .env import GridEnv, ScenarioRejected, Surrogate, Transition
from .neuro import Adam, Mlp, polyak


@dataclass
class Hyper:
    batch_size: int = 64
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    kappa: int = 10
    sigma_expl: float = 0.1
    sigma_expl_final: float = 0.02
    smooth_sigma: float = 0.2
    smooth_clip: float = 0.5
    rho: float = 10.0
    alpha_dual: float = 0.5
    lambda_max: float = 100.0
    mu_max: float = 100.0
    warmup: int = 1000              # replay size before updates begin
    buffer_capacity: int = 100_000
    hidden: tuple = (256, 256)
    rho_growth: float = 2.0
    rho_window: int = 2000          # steps without improvement before growth
    rho_eps: float = 1e-2           # tolerance in the penalty-threshold cap


@dataclass
class DualState:
    """Clipped multipliers for the equality and inequality residuals."""
    lmbda: np.ndarray
    mu: np.ndarray
    lambda_max: float
    mu_max: float
    alpha_lambda: float
    alpha_mu: float
    rho: float
    kappa: int

    @classmethod
    def fresh(cls, m_e, m_i, hp: Hyper):
        return cls(lmbda=np.zeros(m_e), mu=np.zeros(m_i),
                   lambda_max=hp.lambda_max, mu_max=hp.mu_max,
                   alpha_lambda=hp.alpha_dual, alpha_mu=hp.alpha_dual,
                   rho=hp.rho, kappa=hp.kappa)

    def update(self, r_lambda, r_mu):
        """One clipped dual ascent step (in place)."""
        self.lmbda = np.clip(self.lmbda + self.alpha_lambda * r_lambda,
                             -self.lambda_max, self.lambda_max)
        self.mu = np.clip(np.maximum(self.mu + self.alpha_mu * r_mu, 0.0),
                          0.0, self.mu_max)

    def bounded(self) -> bool:
        return (float(np.max(np.abs(self.lmbda), initial=0.0)) <= self.lambda_max
                and float(np.min(self.mu, initial=0.0)) >= 0.0
                and float(np.max(self.mu, initial=0.0)) <= self.mu_max)


@dataclass(frozen=True)
class BlendSchedule:
    """beta_t = 0 for the hold window, then a linear ramp to 1.

    With hold=0 this is exactly min(t / t_beta, 1).
    """
    t_beta: int
    hold: int = 0

    def beta(self, step: int) -> float:
        if step < self.hold:
            return 0.0
        if self.t_beta <= 0:
            return 1.0
        return min((step - self.hold) / self.t_beta, 1.0)

    @property
    def end(self) -> int:
        return self.hold + self.t_beta


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.data: list[Transition] = []
        self.head = 0

    def __len__(self):
        return len(self.data)

    def add(self, tr: Transition):
        if len(self.data) < self.capacity:
            self.data.append(tr)
        else:
            self.data[self.head] = tr
            self.head = (self.head + 1) % self.capacity

    def sample(self, rng, batch_size):
        idx = rng.integers(0, len(self.data), size=batch_size)
        return [self.data[i] for i in idx]


class Agent:
    def __init__(self, n_state, n_action, hp: Hyper, seed=0):
        self.hp = hp
        self.n_state = n_state
        self.n_action = n_action
        rng = np.random.default_rng(seed)
        dims_a = [n_state, *hp.hidden, n_action]
        dims_c = [n_state + n_action, *hp.hidden, 1]
        self.actor = Mlp(dims_a, head="tanh", rng=rng)
        self.critic1 = Mlp(dims_c, head="linear", rng=rng)
        self.critic2 = Mlp(dims_c, head="linear", rng=rng)
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()
        self.opt_actor = Adam(self.actor.parameters(), lr=hp.lr)
        self.opt_c1 = Adam(self.critic1.parameters(), lr=hp.lr)
        self.opt_c2 = Adam(self.critic2.parameters(), lr=hp.lr)
        self.noise_rng = np.random.default_rng(seed + 1)
        self.grad_q_norm = 1.0      # running estimate for the rho cap

    # -- acting ---------------------------------------------------------------

    def policy(self, s):
        return self.actor.forward(s)

    def select_action(self, env: GridEnv, s, beta: float, sigma: float):
        """Exploration action, its projection (skipped once beta == 1), and
        the blended executed action."""
        noise = self.noise_rng.normal(0.0, sigma, size=self.n_action) \
            if sigma > 0 else 0.0
        a_expl = np.clip(self.policy(s) + noise, -1.0, 1.0)
        if beta >= 1.0:
            return a_expl, None, a_expl, False
        proj = project_action(env.case, env.context(), a_expl)
        a_final = beta * a_expl + (1.0 - beta) * proj.a
        return a_expl, proj.a, a_final, True

    # -- critic ---------------------------------------------------------------

    def critic_update(self, batch):
        hp = self.hp
        s = np.stack([tr.s for tr in batch])
        a = np.stack([tr.a for tr in batch])
        r = np.array([tr.r for tr in batch])
        s2 = np.stack([tr.s_next for tr in batch])
        d = np.array([float(tr.done) for tr in batch])

        eps = self.noise_rng.normal(0.0, hp.smooth_sigma, size=a.shape)
        eps = np.clip(eps, -hp.smooth_clip, hp.smooth_clip)
        a2 = np.clip(self.actor_target.forward(s2) + eps, -1.0, 1.0)
        x2 = np.concatenate([s2, a2], axis=1)
        q_next = np.minimum(self.critic1_target.forward(x2)[:, 0],
                            self.critic2_target.forward(x2)[:, 0])
        y = r + hp.gamma * (1.0 - d) * q_next

        losses = []
        x = np.concatenate([s, a], axis=1)
        for critic, opt in ((self.critic1, self.opt_c1),
                            (self.critic2, self.opt_c2)):
            q, cache = critic.forward_cached(x)
            err = q[:, 0] - y
            losses.append(float(np.mean(err ** 2)))
            grads, _ = critic.backward(cache, (2.0 * err / len(batch))[:, None])
            opt.step(critic.parameters(), grads)
        return tuple(losses)

    # -- actor ----------------------------------------------------------------

    def actor_loss_and_grad(self, batch, duals: DualState):
        """Augmented-Lagrangian actor loss and its parameter gradient.

        Constraint terms are evaluated through each transition's stored
        linearization at the current policy action.
        """
        hp = self.hp
        rho = duals.rho
        s = np.stack([tr.s for tr in batch])
        a_pi, cache_pi = self.actor.forward_cached(s)
        x = np.concatenate([s, a_pi], axis=1)
        q, cache_q = self.critic1.forward_cached(x)
        q_term = -float(np.mean(q))

        # dQ/da via the critic's input gradient (actor part of the input)
        _, gx = self.critic1.backward(cache_q, np.ones_like(q) / len(batch))
        ga = -gx[:, self.n_state:]
        self.grad_q_norm = 0.9 * self.grad_q_norm + 0.1 * float(
            np.linalg.norm(gx[:, self.n_state:]))

        lagrange = 0.0
        penalty = 0.0
        for i, tr in enumerate(batch):
            sur = tr.surrogate
            da = a_pi[i] - sur.a0
            h = sur.h0 + sur.dh @ da
            g = sur.g0 + sur.dg @ da
            gp = np.maximum(g, 0.0)
            lagrange += float(duals.lmbda @ h + duals.mu @ gp)
            penalty += 0.5 * rho * float(h @ h + gp @ gp)
            gc = (sur.dh.T @ (duals.lmbda + rho * h)
                  + sur.dg.T @ ((duals.mu + rho * gp) * (g > 0)))
            ga[i] += gc / len(batch)
        lagrange /= len(batch)
        penalty /= len(batch)

        grads, _ = self.actor.backward(cache_pi, ga)
        loss = q_term + lagrange + penalty
        return loss, grads, {"q": q_term, "lagrange": lagrange,
                             "penalty": penalty, "total": loss}

    def actor_update(self, batch, duals: DualState):
        loss, grads, breakdown = self.actor_loss_and_grad(batch, duals)
        self.opt_actor.step(self.actor.parameters(), grads)
        polyak(self.actor_target, self.actor, self.hp.tau)
        polyak(self.critic1_target, self.critic1, self.hp.tau)
        polyak(self.critic2_target, self.critic2, self.hp.tau)
        return breakdown

    def rho_cap(self, duals: DualState) -> float:
        """Penalty-threshold cap from the running Q-gradient estimate."""
        return max((self.grad_q_norm + duals.lambda_max) / self.hp.rho_eps,
                   duals.mu_max / self.hp.rho_eps)

    def params_finite(self) -> bool:
        nets = (self.actor, self.critic1, self.critic2,
                self.actor_target, self.critic1_target, self.critic2_target)
        return all(np.all(np.isfinite(p)) for net in nets
                   for p in net.parameters())


@dataclass
class TrainLogRow:
    step: int
    episode: int
    t: int
    reward: float
    r_lambda_norm: float
    r_mu_norm: float
    r_lambda_inf: float
    r_mu_inf: float
    beta: float
    lambda_inf: float
    mu_inf: float
    actor_loss: float
    critic_loss: float
    rho: float
    projection_invoked: int
    diverged: int
    wall_ms: float


@dataclass
class TrainResult:
    agent: Agent
    duals: DualState
    log: list
    episodes: int
    steps: int
    scenario_rejections: int


def train(case, profile, dispatch, sampler, *, episodes, schedule: BlendSchedule,
          hp: Hyper | None = None, seed=0, soc0=0.9,
          projection_counter=None) -> TrainResult:
    """Run the blended-safe-exploration training loop.

    sampler: object with .sample() -> AttackVector (seeded by the caller).
    projection_counter: optional list whose [0] counts projection calls.
    """
    hp = hp or Hyper()
    env = GridEnv(case, profile, dispatch, soc0=soc0)
    agent = Agent(env.n_state, env.n_action, hp, seed=seed)
    duals = DualState.fresh(env.m_e, env.m_i, hp)
    buffer = ReplayBuffer(hp.buffer_capacity)
    sample_rng = np.random.default_rng(seed + 10_000)

    total_steps = episodes * env.horizon
    log: list[TrainLogRow] = []
    rejections = 0
    global_step = 0
    rho_best = math.inf
    rho_since = 0
    mu_norm_hist: list[float] = []

    for episode in range(episodes):
        scenario = sampler.sample()
        for _ in range(20):
            try:
                s = env.reset(scenario)
                break
            except ScenarioRejected:
                rejections += 1
                scenario = sampler.sample()
        else:
            raise RuntimeError("could not find a startable scenario")

        done = False
        while not done:
            t0 = time.perf_counter()
            beta = schedule.beta(global_step)
            frac = global_step / max(total_steps - 1, 1)
            sigma = hp.sigma_expl + frac * (hp.sigma_expl_final - hp.sigma_expl)
            a_expl, a_proj, a_final, proj_used = agent.select_action(
                env, s, beta, sigma)
            if proj_used and projection_counter is not None:
                projection_counter[0] += 1
            s2, r, done, info = env.step(a_final)
            buffer.add(Transition(s=s, a=a_final, r=r, s_next=s2, done=done,
                                  surrogate=info.surrogate))

            actor_loss = math.nan
            critic_loss = math.nan
            if len(buffer) >= hp.warmup:
                batch = buffer.sample(sample_rng, hp.batch_size)
                c_losses = agent.critic_update(batch)
                critic_loss = 0.5 * (c_losses[0] + c_losses[1])
                if global_step % hp.kappa == 0:
                    duals.update(info.r_lambda, info.r_mu)
                if global_step % hp.policy_delay == 0:
                    breakdown = agent.actor_update(batch, duals)
                    actor_loss = breakdown["total"]
                if not agent.params_finite():
                    raise FloatingPointError(
                        f"NaN in parameters at step {global_step}; "
                        f"episode {episode}, beta {beta:.3f}, rho {duals.rho}")

                # adaptive penalty growth when violations stop improving
                mu_norm_hist.append(float(np.linalg.norm(info.r_mu)))
                rho_since += 1
                if rho_since >= hp.rho_window:
                    recent = float(np.mean(mu_norm_hist[-hp.rho_window:]))
                    if recent >= rho_best - 1e-9:
                        duals.rho = min(duals.rho * hp.rho_growth,
                                        agent.rho_cap(duals))
                    rho_best = min(rho_best, recent)
                    rho_since = 0

            log.append(TrainLogRow(
                step=global_step, episode=episode, t=env.t - 1, reward=r,
                r_lambda_norm=float(np.linalg.norm(info.r_lambda)),
                r_mu_norm=float(np.linalg.norm(info.r_mu)),
                r_lambda_inf=float(np.max(np.abs(info.r_lambda))),
                r_mu_inf=float(np.max(info.r_mu, initial=0.0)),
                beta=beta,
                lambda_inf=float(np.max(np.abs(duals.lmbda), initial=0.0)),
                mu_inf=float(np.max(duals.mu, initial=0.0)),
                actor_loss=actor_loss, critic_loss=critic_loss,
                rho=duals.rho,
                projection_invoked=int(proj_used), diverged=int(info.diverged),
                wall_ms=(time.perf_counter() - t0) * 1e3))
            s = s2
            global_step += 1

    return TrainResult(agent=agent, duals=duals, log=log, episodes=episodes,
                       steps=global_step, scenario_rejections=rejections)


LOG_COLUMNS = [f.name for f in
               __import__("dataclasses").fields(TrainLogRow)
               if f.name != "wall_ms"]


def log_to_csv(log) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in log:
        vals = []
        for col in LOG_COLUMNS:
            v = getattr(row, col)
            vals.append(f"{v:.10g}" if isinstance(v, float) else str(v))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def timing_to_csv(log) -> str:
    lines = ["step,wall_ms"]
    for row in log:
        lines.append(f"{row.step},{row.wall_ms:.6f}")
    return "\n".join(lines) + "\n"
