import sys, time
import numpy as np
sys.path.insert(0, "tests")
from conftest import THREE_BUS_TEXT
from gridshield.casedata import parse_case, flat_profile
from gridshield.dispatch import solve_horizon
from gridshield.adversary import ScenarioSampler
from gridshield.agent import BlendSchedule, Hyper, train

case = parse_case(THREE_BUS_TEXT)
prof = flat_profile(case, 24)
xsol = solve_horizon(case, prof)

def final_mu(rho, episodes, seed, lr, sigma):
    hp = Hyper(rho=rho, warmup=200, hidden=(64, 64), lr=lr,
               sigma_expl=sigma, sigma_expl_final=sigma, rho_window=10**9)
    sampler = ScenarioSampler(case, xsol, 1, mixture=(1.0, 0.0, 0.0), seed=seed)
    res = train(case, prof, xsol, sampler, episodes=episodes,
                schedule=BlendSchedule(t_beta=1, hold=0), hp=hp, seed=seed)
    tail = res.log[int(0.8 * len(res.log)):]
    rew = np.mean([r.reward for r in tail])
    return float(np.mean([r.r_mu_norm for r in tail])), float(rew)

t0=time.time()
for label, eps, lr, sg in (("long", 200, 3e-4, 0.05),
                           ("long-lowlr", 200, 1e-4, 0.05),
                           ("long-nonoise", 200, 3e-4, 0.02)):
    vals = []
    for rho in (1.0, 10.0, 100.0):
        m, rew = final_mu(rho, eps, 21, lr, sg)
        vals.append(m)
        print(f"{label} rho={rho:6.1f}: mu={m:.6f} rew={rew:.1f}  [{time.time()-t0:.0f}s]", flush=True)
    ok = vals[0] >= vals[1] >= vals[2]
    print(f"{label}: non-increasing = {ok}", flush=True)
