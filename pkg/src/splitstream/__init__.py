"""Split learning with loss-based asynchronous client updates and FP8 transfers."""
from .fp8 import Fp8Format, search_format, quantize_tensor, dequantize_tensor
from .nn import SplitModel, build_model, vgg_desk_spec
from .protocol import CommState, LossBasedSchedule, NaiveSchedule, AlwaysASchedule, FixedSchedule
from .engine import SplitEngine, partition
from .metrics import MetricsLog, distance_correlation, evaluate_accuracy, reduction_report

__version__ = "0.1.0"
