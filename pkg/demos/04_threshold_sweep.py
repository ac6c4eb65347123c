"""
Accuracy against communication
==============================

Sweeping the loss threshold trades client updates for bytes. The baseline is
synchronous split learning without quantization; each treated run uses the
loss-based states with FP8 transfers. Takes about half a minute.
"""

# %%
import tempfile

from splitstream.config import ExperimentConfig
from splitstream.experiments import compare_naive, sweep_threshold

cfg = ExperimentConfig(epochs=30, quantize=True, thresholds=[0.01, 0.05, 0.2])
out = tempfile.mkdtemp(prefix="sweep-")
res = sweep_threshold(cfg, out)
print(f"baseline accuracy {res['baseline_accuracy']:.3f}, payload {res['baseline_payload_bytes']} B")
for p in res["points"]:
    print(f"l_thred {p['l_thred']:<5} acc {p['accuracy']:.3f}  "
          f"comm x{p['communication_reduction']:.1f}  compute x{p['computation_reduction']:.1f}  "
          f"A epochs {p['update_epochs']}")
print("reports under", out)

# %%
# Same number of client updates, placed by loss drop or evenly.
cmp = compare_naive(cfg.replace(cut="large", quantize=False), tempfile.mkdtemp(prefix="naive-"))
print("loss-based", cmp["loss_based_states"], cmp["loss_based_accuracy"])
print("naive     ", cmp["naive_states"], cmp["naive_accuracy"])
