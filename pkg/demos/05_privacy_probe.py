"""
How much do cut activations reveal?
===================================

Distance correlation between raw inputs and what the server sees at the cut.
A value of 1 means the activations determine the inputs up to a similarity
transform; independent data would score near 0, though the empirical score
has a floor that grows with dimension.
"""

# %%
import tempfile

import numpy as np

from splitstream.config import ExperimentConfig
from splitstream.experiments import privacy_probe
from splitstream.metrics import distance_correlation

rng = np.random.default_rng(1)
x = rng.standard_normal((300, 4))
print("self        ", distance_correlation(x, x).score)
print("linear map  ", distance_correlation(x, x @ rng.standard_normal((4, 6))).score)
print("independent ", distance_correlation(x[:, 0], rng.standard_normal(300)).score)

# %%
res = privacy_probe(ExperimentConfig(epochs=20), tempfile.mkdtemp(prefix="privacy-"))
for row in res["rows"]:
    print(f"{row['setting']:<12} dCor {row['dcor']:.3f}  acc {row['accuracy']:.3f}")
