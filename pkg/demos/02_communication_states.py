"""
Loss-driven communication states
================================

Each epoch runs in one of three states. In A the client sends activations and
receives gradients, so it trains. In B it only sends fresh activations, since
it changed during the previous A epoch. In C nothing is sent and the server
trains on cached activations. A new A epoch starts once the average loss has
fallen by at least ``l_thred`` since the last A epoch.
"""

# %%
import numpy as np

from splitstream.protocol import CommState, LossTracker, naive_schedule, update_state

# a loss curve that flattens out
epochs = np.arange(1, 41)
losses = 0.4 + 2.0 * np.exp(-epochs / 8)


def run(l_thred):
    state, tracker, seq = CommState.A, LossTracker(l_thred, num_batch=1), []
    for loss in losses:
        seq.append(str(state))
        step = update_state(state, tracker.reset().add(float(loss)))
        state, tracker = step.state, step.tracker
    return "".join(seq)


for thr in [0.0, 0.02, 0.1, 0.3]:
    s = run(thr)
    print(f"l_thred={thr:<5} {s}  ({s.count('A')} client updates)")

# %%
# The naive baseline spreads the same number of updates evenly instead.
budget = run(0.1).count("A")
print("naive       ", "".join(str(naive_schedule(e, 40, budget)) for e in epochs))
