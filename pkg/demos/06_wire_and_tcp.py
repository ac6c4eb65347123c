"""
Frames on the wire
==================

Every message is a self-describing frame: magic, version, a small header with
the tensor shape (plus the FP8 exponent width and bias when quantized), then
the payload and, for activations, the labels. The same frames travel over an
in-memory queue or a loopback TCP socket.
"""

# %%
import numpy as np

from splitstream import fp8, transport
from splitstream.config import ExperimentConfig
from splitstream.experiments import build_engine, load_datasets
from splitstream.transport import MsgType

act = np.random.default_rng(0).standard_normal((32, 8, 4, 4)).astype(np.float32)
raw = transport.tensor_message(MsgType.ACT, 1, 0, 0, act, labels=range(32))
q = transport.tensor_message(MsgType.ACT, 1, 0, 0, fp8.quantize_tensor(act, fp8.search_format(act)),
                             labels=range(32))
for name, m in [("raw32", raw), ("fp8", q)]:
    frame = transport.encode_message(m)
    print(f"{name}: frame {len(frame)} B = tensor {m.tensor_nbytes} + labels {m.label_nbytes} "
          f"+ header {transport.frame_overhead(m.dims.__len__(), m.fp8 is not None)}")

# %%
try:
    transport.decode_message(transport.encode_message(raw)[:-7])
except transport.DecodeError as exc:
    print(type(exc).__name__, exc)

# %%
# The same run over both transports produces the same bytes.
cfg = ExperimentConfig(epochs=4, n_train=300, n_test=100, clients=3, quantize=True)
data = load_datasets(cfg)
frames = {}
for kind in ("memory", "tcp"):
    with build_engine(cfg, *data, transport=kind) as eng:
        eng.train(cfg.epochs)
        frames[kind] = eng.transcript()
print(len(frames["tcp"]), "frames, identical:", frames["memory"] == frames["tcp"])
