# %% [markdown]
# # Cost model and planner
#
# Closed-form MACs/s and parameter counts for the nine reference configurations,
# and what the planner picks for a given budget.

# %%
from mptscale.complexity import cost_report, fmt_si, plan, reference_configs

for listed_macs, listed_params, cfg in reference_configs():
    rep = cost_report(cfg)
    print(f"K={cfg.K:2d} B={cfg.B} E={cfg.E:3d} C={cfg.C} {cfg.rnn:4s} causal={cfg.causal!s:5s}"
          f"  MACs/s {fmt_si(rep.total_macs_per_s):>7} (listed {fmt_si(listed_macs):>7})"
          f"  params {fmt_si(rep.total_params):>7} (listed {fmt_si(listed_params):>7})")

# %% [markdown]
# Per-component breakdown of the 102M row. The transformer blocks dominate;
# the mask head is a handful of multiplies per bin.

# %%
print(cost_report(reference_configs()[1][2]).table())

# %% [markdown]
# The planner chooses K, B, E on a grid to land closest to a budget in log ratio.

# %%
for budget in (5e6, 2e7, 8e7, 102e6, 1e9, 4.1e9):
    cfg = plan(budget)
    got = cost_report(cfg).total_macs_per_s
    print(f"{fmt_si(budget):>6} -> K={cfg.K} B={cfg.B} E={cfg.E} C={cfg.C} {cfg.rnn}"
          f" deep_filter={cfg.deep_filter} h={cfg.df_hidden}  ({got / budget:.3f}x)")
