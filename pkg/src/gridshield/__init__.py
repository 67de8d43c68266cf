"""gridshield: tri-level power-grid cyber-defense laboratory.

Stage 1 computes baseline AC-OPF dispatch, Stage 2 searches worst-case
N-K generator attacks, Stage 3 coordinates battery storage either through
an exact desk-scale oracle or a constrained TD3 policy trained with
beta-blended safe exploration and primal-dual constraint enforcement.
"""

__version__ = "0.1.0"
