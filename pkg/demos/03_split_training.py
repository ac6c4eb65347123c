"""
Split training end to end
=========================

A small VGG-style network is cut after its first conv block. The client half
and the server half talk only through framed messages, and every byte is
ledgered. With a zero threshold and no quantization the run is plain split
learning, which is identical to ordinary training of the whole network.
"""

# %%
import numpy as np

from splitstream import nn
from splitstream.config import ExperimentConfig
from splitstream.experiments import build_engine, load_datasets

cfg = ExperimentConfig(epochs=15, n_train=1000, n_test=300)
train_set, test_set = load_datasets(cfg)
print("train", train_set.x.shape, "test", test_set.x.shape)

# %%
# Synchronous reference run, and the same split run in 64-bit against the
# unsplit trainer.
sync = build_engine(cfg.replace(schedule="always_A", precision="float64"), train_set, test_set)
ref = sync.model.copy()
with sync:
    sync.train(3)
for _ in range(3):
    for _, xb, yb in sync.clients[0].batches():
        nn.monolithic_step(ref, xb, yb, cfg.lr)
print("bit-identical to the unsplit trainer:", sync.model.to_checkpoint() == ref.to_checkpoint())

# %%
# Loss-based states with FP8 transfers.
with build_engine(cfg.replace(quantize=True, l_thred=0.05), train_set, test_set) as eng:
    eng.train(cfg.epochs)
log = eng.log
print("states ", "".join(log.states))
print("act fmt", [r.act_fp8_format for r in log.records[:3]])
for r in log.records[:6]:
    print(f"epoch {r.epoch} {r.state} loss {r.avg_loss:.3f} acc {r.test_accuracy:.3f} "
          f"payload {r.payload} (raw {r.payload_up_raw + r.payload_down_raw})")
print("final accuracy", log.final_accuracy)

# %%
# Client-side work only happens in A and B epochs.
print("client forward passes per epoch ", [r.client_forward for r in log.records])
print("client backward passes per epoch", [r.client_backward for r in log.records])
