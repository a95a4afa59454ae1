# %% [markdown]
# # A small replication study
#
# Repeat generate, cut, fit and forecast over many simulated trials and check
# how often the 95% forecast interval contains the realized recruitment time.
# The bundled plans run 500 replications; 60 keeps this walkthrough quick.

# %%
from pgrecruit.config import load
from pgrecruit.study import ForecastSettings, part1_plan, run_study

plan = part1_plan(n_replications=60, forecast=ForecastSettings(n_paths=1000))
report = run_study(plan)
print(f"{report.n_ok} replications, observed duration {report.observed_mean:.3f} (sd {report.observed_sd:.3f})")

# %% [markdown]
# ## Estimator behaviour
#
# The recruitment parameters and the mean randomization probability settle
# quickly; the individual beta parameters of A2 are far noisier than their ratio.

# %%
for t1 in plan.interim_times:
    row = {p: report.estimate("A2", t1, p) for p in ("alpha", "mu", "psi1", "psi_ratio")}
    print(f"t1={t1}: " + ", ".join(f"{p} {r['mean']:.3f} ({r['sd']:.3f})" for p, r in row.items()))

# %% [markdown]
# ## Forecast accuracy
#
# `pct_bias` is the mean absolute relative error of the forecast mean, in
# percent; `coverage` is the share of replications whose interval holds the
# realized time.

# %%
print("model  t1   mean    sd  %bias  coverage")
for row in report.durations:
    print(f"{row['model']:>5} {row['t1']:4} {row['mean']:6.3f} {row['sd']:5.3f} {row['pct_bias']:6.2f} "
          f"{row['coverage']:8.3f}")

# %% [markdown]
# ## The same from a plan file
#
# Bundled plans load by name; `pgrecruit study --config part2 --out results/`
# runs the full screening study from the command line and writes the tables
# as CSV.

# %%
cfg = load("part2")
print(cfg.plan.name, [m.value for m in cfg.plan.models], cfg.plan.interim_times, cfg.plan.n_replications)
