"""
Regret as the number of teams grows
===================================

A small version of the team-count sweep: every learner is fitted to the
same simulated datasets, and its greedy policy and the oracle policy are
rolled out on the same random numbers. The results land in a CSV that
can be resumed, and the plot shows mean regret with one standard error.
The full-size run is ``gfqi sweep --config demos/configs/team_count.json``.
"""

from gfqi import ExperimentConfig
from gfqi.evaluation import EvalProtocol
from gfqi.experiments import SweepSpec, plot_results, read_results, run_sweep

spec = SweepSpec(
    base=ExperimentConfig(cluster_size=5, horizon=5, gamma=0.9, seed=3),
    axis="n_clusters",
    values=(5, 10, 20),
    learners=("fqi", "gfqi-exchangeable"),
    replications=10,
    protocol=EvalProtocol(n_traj=100),
)
run_sweep(spec, "team_count.csv")

rows = read_results("team_count.csv")
for n in spec.values:
    line = [f"n={n:>2}"]
    for name in spec.learners:
        r = [row.regret_discounted for row in rows if row.learner == name and row.axis_value == n]
        line.append(f"{name} {sum(r) / len(r):.3f}")
    print("  ".join(line))

plot_results("team_count.csv", "team_count.svg")
