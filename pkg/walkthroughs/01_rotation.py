# %% [markdown]
# # Rotating shards around a ring
#
# Each worker owns one shard of every layer's weights. Instead of gathering
# the full weight, workers pass shards to their neighbour after each compute
# step. After N steps every shard has met every worker's batch slice.

# %%
import numpy as np

from rtp.partition import flatten, shard_view
from rtp.ring import ShardSlot, WorkerGroup

# %% [markdown]
# ## Flat parameters
#
# A layer's tensors are packed into one buffer, padded to a multiple of N.

# %%
fp = flatten([("w", np.arange(5.0)), ("b", np.arange(5.0, 7.0))], 4)
print("flat:", fp.flat, "pad:", fp.pad_len, "shard_len:", fp.shard_len)
print("shard on rank 2:", shard_view(fp, 2))

# %% [markdown]
# ## One clockwise rotation on four workers
#
# Rank r receives the shard of rank r-1.

# %%
n = 4
slots = [ShardSlot(np.full(2, float(r)), np.zeros(2), r) for r in range(n)]
group = WorkerGroup(n)
group.rotate_clockwise(slots)
print([s.logical_id for s in slots])

# %% [markdown]
# After N-1 rotations each worker holds the shard of the next worker. The
# backward pass runs N-1 counter-clockwise rotations and every shard comes home.

# %%
for _ in range(n - 2):
    group.rotate_clockwise(slots)
print("after forward:", [s.logical_id for s in slots])
for _ in range(n - 1):
    group.rotate_counterclockwise(slots)
print("after backward:", [s.logical_id for s in slots])

# %% [markdown]
# ## A full training step
#
# The rotated transformer gives the same logits and gradients as the serial
# model on the gathered batch, up to floating-point reassociation.

# %%
from rtp.analysis.verify import compare_to_serial
from rtp.config import TOY_PRESETS

for variant in ("inplace", "outofplace"):
    r = compare_to_serial(TOY_PRESETS["toy-gpt"], 4, variant)
    print(f"{variant:>10}: output {r.output_error:.2e}  grads {r.max_grad_error:.2e}  ok={r.ok}")

# %% [markdown]
# The shard-id check catches a shard arriving out of order. Here a hook
# corrupts one worker's id between forward and backward.

# %%
from rtp.config import init_params, make_batch
from rtp.errors import ProtocolError
from rtp.model import run_rtp

cfg = TOY_PRESETS["toy-gpt"]
ids, target = make_batch(cfg, 4, 0)


def corrupt(rank, model):
    if rank == 0:
        model.rotated_layers()[-1].slot.logical_id = -1


try:
    run_rtp(cfg, init_params(cfg, 0), ids, target, 2, hook=corrupt)
except ProtocolError as exc:
    print("caught:", exc)
