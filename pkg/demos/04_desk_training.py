"""
Training the GAN on phantoms
============================

A short desk-scale run: a depth-4 U-Net generator against the 70-pixel patch
discriminator on 64x64 phantoms. Pass an epoch count as the first argument
(the acceptance run uses 200; 20 already gives a usable model).
"""

import sys
import time

import numpy as np

from lunggan.data import split_dataset, synth_phantoms
from lunggan.evaluation import confusion, dice, iou
from lunggan.training import TrainConfig, predict, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 20

samples = {s.id: s for s in synth_phantoms(80, (64, 64), seed=1)}
split = split_dataset(sorted(samples), (60, 10, 10), seed=1)
cfg = TrainConfig(discriminator_kind="D3", epochs=epochs, resolution=(64, 64), seed=1,
                  base_channels=16, depth=4, d_base_channels=32)
print(cfg.to_text())


def show(epoch, history):
    last = history.steps[-1]
    print(f"epoch {epoch:3d}  d={last.d_loss:.3f}  g_adv={last.g_adv:.3f}  l1={last.g_l1:.4f}  "
          f"val_dice={history.val_dice[-1][1]:.4f}")


t0 = time.perf_counter()
state, history = train(cfg, split, samples, on_epoch=show)
print(f"trained {len(history.steps)} steps in {time.perf_counter() - t0:.0f}s")

counts = [confusion(predict(state.generator, samples[i].image), samples[i].mask.data[0, 0].astype(np.uint8))
          for i in split.test]
print(f"test mean dice {np.mean([dice(c) for c in counts]):.4f}, mean iou {np.mean([iou(c) for c in counts]):.4f}")
