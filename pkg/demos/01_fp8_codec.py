"""
FP8 with a searched exponent bias
=================================

An 8-bit float here is sign | ebit exponent bits | (7 - ebit) mantissa bits,
with a free integer bias that slides the representable range up or down.
The search picks the narrowest exponent width whose range, centred on the
tensor's median magnitude, clips fewer than 1% of the elements.
"""

# %%
import numpy as np

from splitstream import fp8
from splitstream.fp8 import Fp8Format

for fmt in [Fp8Format(3, 0), Fp8Format(4, 7), Fp8Format(5, 15), Fp8Format(6, 31)]:
    lo, hi = fp8.format_range(fmt)
    print(f"{fmt}: smallest {lo:.3g}, largest {hi:.3g}")

# %%
# Encoding rounds to nearest with ties to the even code; values above the
# range clamp and values below the smallest subnormal flush to zero.
fmt = Fp8Format(4, 7)
for x in [1.0, 1.0625, 1.1875, 1e6, 1e-4, -0.3]:
    code, flag = fp8.encode_value(x, fmt)
    print(f"{x:>10g} -> 0x{code:02x} -> {fp8.decode_value(code, fmt):<10g} {flag or ''}")

# %%
# A ReLU-like activation and a small gradient land on different formats.
rng = np.random.default_rng(0)
act = np.maximum(rng.standard_normal(4096) * 2.0, 0)
grad = rng.standard_normal(4096) * 3e-4
for name, t in [("activation", act), ("gradient", grad)]:
    f = fp8.search_format(t)
    q = fp8.quantize_tensor(t, f)
    back = fp8.dequantize_tensor(q, np.float64)
    nz = t != 0
    rel = np.abs(back[nz] - t[nz]) / np.abs(t[nz])
    print(f"{name}: {f}, clipped {q.stats.proportion:.4f}, median rel err {np.median(rel):.3f}")

# %%
# Spreads wider than any candidate range make the search give up, and the
# caller sends the tensor unquantized.
wide = 10.0 ** rng.uniform(-12, 12, 1000)
print("24 decades ->", fp8.search_format(wide))
print("all zeros  ->", fp8.search_format(np.zeros(8)))
