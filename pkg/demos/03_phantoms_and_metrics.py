"""
Synthetic chest phantoms and overlap metrics
============================================

Generate a few lung-like phantoms, write them to disk, then score a
deliberately eroded mask against the ground truth with Dice, IoU and the
over/under-segmentation flag.
"""

import sys
from pathlib import Path

import numpy as np

from lunggan.data import save_overlay_png, synth_phantoms, write_dataset
from lunggan.evaluation import anomaly, confusion, dice, iou

out = Path(sys.argv[1] if len(sys.argv) > 1 else "phantom_demo")
samples = synth_phantoms(4, (128, 128), seed=7)
write_dataset(samples, out)
print("wrote", len(samples), "phantoms under", out)

for s in samples:
    print(f"{s.id}: foreground fraction {s.mask.data.mean():.3f}")

# shrink the first mask by one pixel on every side to fake an under-segmentation
gt = samples[0].mask.data[0, 0].astype(bool)
eroded = gt.copy()
eroded[1:, :] &= gt[:-1, :]
eroded[:-1, :] &= gt[1:, :]
eroded[:, 1:] &= gt[:, :-1]
eroded[:, :-1] &= gt[:, 1:]

for name, pred in (("identical", gt), ("eroded", eroded), ("shifted", np.roll(gt, 6, axis=1))):
    c = confusion(pred, gt)
    print(f"{name:9s} tp={c.tp:5d} fp={c.fp:5d} fn={c.fn:5d}  dice={dice(c):.4f}  iou={iou(c):.4f}  "
          f"flag={anomaly(c)}")

save_overlay_png(samples[0].image, eroded, out / "eroded_overlay.png")
print("overlay:", out / "eroded_overlay.png")
