# %% [markdown]
# # Where the bytes go
#
# The closed-form rows give total-system memory for seven strategies. The
# instrumented ledger measures the same quantities on an actual run.

# %%
from rtp.analysis.instrumented import batch_sweep, ledger_instrumented_run, model_bytes
from rtp.analysis.memory import table1_rows
from rtp.config import TOY_PRESETS

# %% [markdown]
# ## Closed form
#
# With W = G = 4, A = 2, A_p = 1 and N = 8, FSDP keeps N-1 gathered copies
# while out-of-place rotation keeps one.

# %%
for name, act, param, dup in table1_rows(4, 4, 2, 1, 8):
    print(f"{name:>17}  activation={act:>3}  param={param:>3}  duplication={dup:>3}")

# %% [markdown]
# ## Measured per worker
#
# In-place rotation holds exactly (W+G)/N of parameters and gradients. The
# out-of-place variant adds one shard-sized buffer, the shard of the largest
# unit.

# %%
cfg = TOY_PRESETS["toy-gpt"]
W = model_bytes(cfg)
for strategy in ("rtp-inplace", "rtp-outofplace"):
    rep = ledger_instrumented_run(cfg, strategy, 4, 4)
    peak = rep.peak
    print(strategy, {k: peak[k] for k in ("Param+Grad", "CommBuffer", "Activation", "Total")},
          "(W+G)/N =", 2 * W // 4)

# %% [markdown]
# ## Batch sweep
#
# Peak memory grows linearly in the batch: parameters are fixed and
# activations scale with the number of local samples.

# %%
for strategy in ("rtp-inplace", "rtp-outofplace"):
    pts = batch_sweep(cfg, strategy, 4, (1, 2, 4, 8))
    slopes = [(y1 - y0) / (x1 - x0) for (x0, y0), (x1, y1) in zip(pts, pts[1:])]
    print(strategy, pts, "slopes:", slopes)
