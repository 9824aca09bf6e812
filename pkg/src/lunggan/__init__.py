"""GAN lung segmentation on a small numpy autodiff engine.

A U-Net generator maps a chest radiograph to a lung-mask probability map and a
convolutional discriminator (pixel, patch or image level) judges image/mask
pairs. Everything runs on :mod:`lunggan.tensor`, a tape-based reverse-mode
autodiff over numpy arrays.
"""

from .data import DatasetSplit, SamplePair, load_directory, load_pair, split_dataset, synth_phantoms
from .evaluation import ConfusionCounts, anomaly, benchmark_latency, confusion, dice, iou
from .layers import Adam, batchnorm, leaky_relu, relu, sigmoid
from .losses import LossBundle, d_loss, g_adv_loss, g_total, l1_loss
from .models import ModelGraph, build_discriminator, build_generator, receptive_field
from .tensor import Graph, GraphError, ShapeError, Tensor, conv2d, conv_transpose2d, precision
from .training import TrainConfig, build_state, load_checkpoint, predict, save_checkpoint, train, train_step

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfusionCounts",
    "DatasetSplit",
    "Graph",
    "GraphError",
    "LossBundle",
    "ModelGraph",
    "SamplePair",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "anomaly",
    "batchnorm",
    "benchmark_latency",
    "build_discriminator",
    "build_generator",
    "build_state",
    "confusion",
    "conv2d",
    "conv_transpose2d",
    "d_loss",
    "dice",
    "g_adv_loss",
    "g_total",
    "iou",
    "l1_loss",
    "leaky_relu",
    "load_checkpoint",
    "load_directory",
    "load_pair",
    "precision",
    "predict",
    "receptive_field",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "split_dataset",
    "synth_phantoms",
    "train",
    "train_step",
]
