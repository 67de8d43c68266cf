"""Exploratory desk-scale run on the bundled 30-bus case: training then
evaluation vs the oracle, with the untrained baseline for comparison."""
import json, time
import numpy as np
from gridshield.casedata import load_case, load_profile
from gridshield.data import bundled_case_path
from gridshield.dispatch import solve_horizon
from gridshield.adversary import ScenarioSampler
from gridshield.agent import Agent, BlendSchedule, Hyper, train
from gridshield.env import GridEnv
from gridshield.harness import evaluate

case = load_case(bundled_case_path("case30.m"))
prof = load_profile(open(bundled_case_path("profile24.csv")).read(), case)
t0 = time.time()
xsol = solve_horizon(case, prof)
print(f"[{time.time()-t0:7.1f}s] stage1 done J1={xsol.objective:.0f}", flush=True)

EPISODES = 160
K = 4
SEED = 11
total = EPISODES * 24
sched = BlendSchedule(t_beta=int(0.3*total), hold=int(0.3*total))
hp = Hyper()
sampler = ScenarioSampler(case, xsol, K, mixture=(0.5, 0.3, 0.2), seed=SEED)
_ = sampler.worst()
print(f"[{time.time()-t0:7.1f}s] worst attack cached", flush=True)

# untrained baseline gap
env = GridEnv(case, prof, xsol)
untrained = Agent(env.n_state, env.n_action, hp, seed=SEED)
rep_u, _ = evaluate(case, prof, xsol, untrained.actor, scenarios=100, k=K,
                    seed=SEED, mixture=(0.5, 0.3, 0.2))
print(f"[{time.time()-t0:7.1f}s] untrained mean gap {rep_u.mean_gap:.1f}% "
      f"max {rep_u.max_gap:.1f}% violsteps {rep_u.violation_steps_total}", flush=True)

res = train(case, prof, xsol, sampler, episodes=EPISODES, schedule=sched,
            hp=hp, seed=SEED)
print(f"[{time.time()-t0:7.1f}s] training done steps={res.steps} "
      f"rejections={res.scenario_rejections}", flush=True)

# safety stats
hold_rows = [r for r in res.log if r.beta == 0.0]
viol_hold = sum(1 for r in hold_rows if r.r_mu_inf > 1e-6 or r.r_lambda_inf > 1e-6+1e-8)
final = res.log[int(0.9*len(res.log)):]
viol_final = sum(1 for r in final if r.r_mu_inf > 1e-6 or r.r_lambda_inf > 1e-6+1e-8)
print(f"hold window: {len(hold_rows)} steps, violations {viol_hold}")
print(f"final 10%: {len(final)} steps, violations {viol_final} ({100*viol_final/len(final):.2f}%)")
rew = [r.reward for r in res.log]
print(f"reward first100 mean {np.mean(rew[:100]):.0f}  last100 mean {np.mean(rew[-100:]):.0f}")

rep_t, _ = evaluate(case, prof, xsol, res.agent.actor, scenarios=100, k=K,
                    seed=SEED, mixture=(0.5, 0.3, 0.2))
print(f"[{time.time()-t0:7.1f}s] trained mean gap {rep_t.mean_gap:.1f}% "
      f"max {rep_t.max_gap:.1f}% violsteps {rep_t.violation_steps_total} "
      f"lat p95 {rep_t.latency_ms['p95']:.3f}ms", flush=True)

from gridshield.harness import save_agent
save_agent("exp/ckpt160.npz", res)
with open("exp/explore30.json", "w") as fh:
    json.dump({"untrained_gap": rep_u.mean_gap, "trained_gap": rep_t.mean_gap,
               "viol_hold": viol_hold, "hold_steps": len(hold_rows),
               "viol_final_pct": 100*viol_final/len(final)}, fh)
print("saved", flush=True)
