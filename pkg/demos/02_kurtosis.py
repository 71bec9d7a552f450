"""Kurtosis as a measure of how quantization-friendly a tensor is.

Kurtosis is the fourth standardized moment. A uniform distribution scores
1.8, a Gaussian 3, and a peaked tensor with a few large outliers can score
in the thousands. Low kurtosis means the values fill the quantization grid.
"""
import numpy as np

from kurtq import ModelConfig, generate_pretrained_like, kurtosis, kurtosis_report, make_rng
from kurtq.model import matmul_weight_names
from kurtq.tensor import Normal, StudentT, Uniform, rand_tensor

rng = make_rng(0)
for label, dist in [("uniform(-1, 1)", Uniform(-1, 1)), ("normal(0, 1)", Normal(0, 1)),
                    ("student-t(2.5)", StudentT(2.5, 1.0))]:
    print(f"{label:16s} K = {kurtosis(rand_tensor(rng, (10**5,), dist)):8.2f}")

# A 12-block model with a pretrained-looking weight distribution: most tensors
# are near Gaussian, one FFN tensor per block carries a heavy-tailed outlier.
cfg = ModelConfig(num_blocks=12)
params = generate_pretrained_like(make_rng(0), cfg)
names = matmul_weight_names(cfg)
report = kurtosis_report({n: params[n] for n in names}, threshold=100)
print(f"\n{len(report.excluded_names)} of {len(names)} weight tensors have kurtosis above 100:")
for e in report.entries:
    if not e.included:
        print(f"  {e.name:20s} K = {e.kurtosis:9.1f}  (log10 {np.log10(e.kurtosis):.2f})")
print(f"typical included tensor: K = {np.median([e.kurtosis for e in report.entries if e.included]):.2f}")
