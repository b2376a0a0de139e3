# %% [markdown]
# # Overlapping compute with rotation
#
# Each worker has a compute stream and a comm stream. FSDP must finish the
# first all-gather before any compute. Out-of-place rotation starts computing
# at once and hides each rotation behind the current step.

# %%
from fractions import Fraction

from rtp.analysis.cost import CostModel
from rtp.analysis.timeline import SCHEDULES, simulate_timeline, uniform_units, unit_costs
from rtp.config import TOY_PRESETS

# %% [markdown]
# ## Uniform units, exact arithmetic
#
# With compute 5 and rotation 3 per step, out-of-place takes N*5 and in-place
# takes N*5 + (N-1)*3.

# %%
n = 4
units = uniform_units(2, Fraction(5), Fraction(3), n)
for s in SCHEDULES:
    tl = simulate_timeline(s, units, n)
    print(f"{s:>15}  makespan={tl.makespan}  startup={tl.startup_latency()}  idle={tl.idle()}")

# %% [markdown]
# ## The toy transformer under the alpha-beta-gamma model

# %%
units = unit_costs(TOY_PRESETS["toy-gpt"], 8, n, CostModel())
for s in SCHEDULES:
    tl = simulate_timeline(s, units, n)
    print(f"{s:>15}  makespan={tl.makespan:.3e}s  startup={tl.startup_latency():.3e}s  "
          f"idle={tl.idle_fraction():.1%}")
