"""Prototype the rho-sweep trend check (criterion 8) on the 3-bus fixture."""
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

def final_mu(rho, episodes=80, seed=21):
    hp = Hyper(rho=rho, warmup=200, hidden=(64, 64),
               rho_window=10**9)  # freeze adaptive growth for the sweep
    sampler = ScenarioSampler(case, xsol, 1, mixture=(1.0, 0.0, 0.0), seed=seed)
    res = train(case, prof, xsol, sampler, episodes=episodes,
                schedule=BlendSchedule(t_beta=1, hold=0), hp=hp, seed=seed)
    tail = res.log[int(0.8 * len(res.log)):]
    return float(np.mean([r.r_mu_norm for r in tail]))

t0 = time.time()
for rho in (1.0, 10.0, 100.0):
    m = final_mu(rho)
    print(f"rho={rho:6.1f}: final mean ||r_mu|| = {m:.6f}   [{time.time()-t0:.0f}s]", flush=True)
