import numpy as np
import pytest

from gridshield.casedata import parse_case

# Two-bus textbook case: slack (bus 1) feeding a PQ load of 0.5+j0.2 p.u.
# over a pure reactance x=0.1 p.u.  Used for the brute-force power-flow
# oracle.
TWO_BUS_TEXT = """\
function mpc = case2
mpc.baseMVA = 100;
% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
    1 3  0  0 0 0 1 1 0 135 1 1.10 0.90;
    2 1 50 20 0 0 1 1 0 135 1 1.10 0.90;
];
% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
    1 0 0 100 -100 1.0 100 1 200 0;
];
% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax
mpc.branch = [
    1 2 0 0.1 0 0 0 0 0 0 1 -360 360;
];
% model startup shutdown n c2 c1 c0
mpc.gencost = [
    2 0 0 3 0.02 30 0;
];
"""

# Three-bus lossless fixture: expensive slack at bus 1, cheap generator at
# bus 2, dominant load plus one BESS unit at bus 3.  Zero branch resistance
# keeps the slack balance independent of the voltage profile, which makes
# the exhaustive dispatch oracle one-dimensional.
THREE_BUS_TEXT = """\
function mpc = case3
mpc.baseMVA = 100;
mpc.bus = [
    1 3  0  0 0 0 1 1 0 135 1 1.05 0.95;
    2 2 20 10 0 0 1 1 0 135 1 1.05 0.95;
    3 1 90 40 0 5 1 1 0 135 1 1.05 0.95;
];
mpc.gen = [
    1 0 0 100 -100 1.0 100 1 250 0;
    2 0 0  80  -80 1.0 100 1 150 0;
];
mpc.branch = [
    1 2 0 0.06 0.04 150 0 0 0 0 1 -360 360;
    1 3 0 0.24 0     50 0 0 0 0 1 -360 360;
    2 3 0 0.18 0    120 0 0 0 0 1 -360 360;
];
mpc.gencost = [
    2 0 0 3 0.02 40 0;
    2 0 0 3 0.01 20 0;
];
%%sidecar-begin
% {
%  "bess": [
%   {"bus": 3, "p_ch_max_mw": 50, "p_dis_max_mw": 50,
%    "q_min_mvar": -30, "q_max_mvar": 30, "e_max_mwh": 200,
%    "eta_ch": 0.99, "eta_dis": 0.99,
%    "soc_min": 0.1, "soc_max": 0.9, "cost_per_mw": 5.0}
%  ],
%  "attackable_gens": [2],
%  "slack_cost": {"c2": 0.02, "c1": 40.0, "c0": 0.0},
%  "xi1": 100.0, "xi2": 100.0
% }
%%sidecar-end
"""


@pytest.fixture(scope="session")
def two_bus():
    return parse_case(TWO_BUS_TEXT)


@pytest.fixture(scope="session")
def three_bus():
    return parse_case(THREE_BUS_TEXT)


@pytest.fixture(scope="session")
def case30():
    from gridshield.data import bundled_case_path
    from gridshield.casedata import load_case
    return load_case(bundled_case_path("case30.m"))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240811)
