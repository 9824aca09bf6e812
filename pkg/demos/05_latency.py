"""
Inference latency against image size
====================================

Median time of one inference-mode generator forward at several sizes. A
depth-4 generator accepts every size below, including the non-square 512x400.
"""

from lunggan.evaluation import benchmark_latency
from lunggan.models import build_generator

G = build_generator(256, base_channels=32, depth=4)
print(f"generator: {G.param_count()} parameters")

results = benchmark_latency(G, [(256, 256), (400, 400), (512, 400), (512, 512), (1024, 1024)], repeats=3)
for (h, w), t in results:
    print(f"{h:5d} x {w:<5d} {h * w:>9,d} px  {t * 1000:8.1f} ms")
