"""Generator and discriminator builders.

A model is a flat list of :class:`LayerSpec` entries interpreted in order by
:meth:`ModelGraph.forward`. Encoder outputs are stashed with ``save_as`` and
re-injected by ``concat_skip`` layers, which is all the U-Net wiring needs.

Discriminator patch sizes are fixed targets; the layer geometry is chosen so the
receptive field of one output score equals that patch:

====  ==========================================  ===========
kind  conv stack (kernel/stride)                  patch (RF)
====  ==========================================  ===========
D1    1/1, 1/1, 1/1                               1
D2    4/2, 4/1, 4/1                               16
D3    4/2, 4/2, 4/2, 4/1, 4/1                     70
D4    3/2 x5, then a head spanning the remainder  >= input
====  ==========================================  ===========

``mode="paper-literal"`` instead builds every conv as 3/2 with the stated layer
counts, whose receptive fields (63, 63, 15, ...) do not match those patches.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .layers import BatchNormState, batchnorm, init_weights, leaky_relu, relu, sigmoid
from .tensor import ShapeError, Tensor, concat, conv2d, conv_transpose2d, get_default_dtype

__all__ = [
    "LayerSpec",
    "ModelGraph",
    "build_generator",
    "build_discriminator",
    "receptive_field",
    "aggregate_scores",
    "discriminate",
    "DISCRIMINATOR_KINDS",
    "PATCH_SIZES",
]

LAYER_KINDS = ("conv", "conv_transpose", "batchnorm", "leaky_relu", "relu", "sigmoid", "concat_skip")
DISCRIMINATOR_KINDS = ("D1", "D2", "D3", "D4")
PATCH_SIZES = {"D1": 1, "D2": 16, "D3": 70}
LEAKY_SLOPE = 0.2
MAX_CHANNELS = 512

Kernel = Union[int, tuple]


@dataclass
class LayerSpec:
    kind: str
    kernel: Kernel = 1
    stride: int = 1
    padding: int = 0
    out_channels: int = 0
    output_padding: int = 0
    skip_source: Optional[int] = None
    save_as: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if isinstance(self.kernel, list):
            self.kernel = tuple(self.kernel)
        if self.kind in ("conv", "conv_transpose"):
            if min(self.kernel_hw) < 1 or self.stride < 1:
                raise ValueError(f"{self.name or self.kind}: kernel and stride must be >= 1")

    @property
    def kernel_hw(self) -> tuple[int, int]:
        k = self.kernel
        return (k, k) if isinstance(k, (int, np.integer)) else (int(k[0]), int(k[1]))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(self.kernel, tuple):
            d["kernel"] = list(self.kernel)
        return d


def receptive_field(layers: Sequence[LayerSpec], axis: int = 0) -> int:
    """Input extent seen by one output unit of the conv layers in ``layers``.

    Uses ``rf += (k - 1) * jump; jump *= stride`` over conv layers; everything
    else is treated as pointwise.
    """
    rf, jump = 1, 1
    for spec in layers:
        if spec.kind != "conv":
            continue
        k = spec.kernel_hw[axis]
        rf += (k - 1) * jump
        jump *= spec.stride
    return rf


def aggregate_scores(score_map) -> float:
    """Mean of a score map over every position and batch element."""
    data = score_map.data if isinstance(score_map, Tensor) else np.asarray(score_map)
    if data.size == 0:
        raise ValueError("cannot aggregate an empty score map")
    return float(data.mean(dtype=np.float64))


@dataclass
class ModelGraph:
    layers: list
    params: dict
    bn: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._validate()

    def _validate(self) -> None:
        saved = {0}
        for spec in self.layers:
            if spec.kind == "concat_skip":
                if spec.skip_source not in saved:
                    raise ValueError(f"{spec.name}: skip_source {spec.skip_source} is not an earlier encoder stage")
            if spec.save_as is not None:
                saved.add(spec.save_as)
        used = []
        for spec in self.layers:
            if spec.kind in ("conv", "conv_transpose"):
                used += [f"{spec.name}.weight", f"{spec.name}.bias"]
            elif spec.kind == "batchnorm":
                used += [f"{spec.name}.gamma", f"{spec.name}.beta"]
        if sorted(used) != sorted(self.params) or len(set(used)) != len(used):
            raise ValueError("every parameter must be referenced by exactly one layer")

    @property
    def role(self) -> str:
        return self.meta.get("role", "?")

    @property
    def input_shape(self) -> tuple:
        return tuple(self.meta["input_shape"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def conv_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.kind == "conv"]

    def receptive_field(self) -> int:
        return receptive_field(self.layers)

    def _check_input(self, x: Tensor) -> None:
        c, h, w = self.input_shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError(f"{self.role} expects N x {c} x H x W input, got {x.shape}")
        div = self.meta.get("divisor")
        if div and (x.shape[2] % div or x.shape[3] % div):
            raise ShapeError(f"{self.role}: spatial size {x.shape[2:]} must be divisible by {div}")
        if self.meta.get("fixed_size") and tuple(x.shape[2:]) != (h, w):
            raise ShapeError(f"{self.role} is built for {h}x{w} input, got {x.shape[2]}x{x.shape[3]}")

    def forward(self, x, mode: str = "train", track_stats: bool = True, zero_skips: bool = False,
                rng: Optional[np.random.Generator] = None, trace: Optional[list] = None) -> Tensor:
        """Run the layer list on ``x``.

        ``zero_skips`` replaces every skip tensor by zeros (ablation); ``trace``
        collects each layer's output shape.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if self.meta.get("noise") and x.ndim == 4 and x.shape[1] == self.input_shape[0] - 1:
            rng = rng if rng is not None else np.random.default_rng(0)
            z = rng.standard_normal((x.shape[0], 1, *x.shape[2:])).astype(x.dtype)
            x = concat(x, Tensor(z, dtype=x.dtype))
        self._check_input(x)
        saved = {0: x}
        h = x
        for spec in self.layers:
            k = spec.kind
            if k == "conv":
                h = conv2d(h, self.params[f"{spec.name}.weight"], self.params[f"{spec.name}.bias"],
                           stride=spec.stride, padding=spec.padding)
            elif k == "conv_transpose":
                h = conv_transpose2d(h, self.params[f"{spec.name}.weight"], self.params[f"{spec.name}.bias"],
                                     stride=spec.stride, padding=spec.padding, output_padding=spec.output_padding)
            elif k == "batchnorm":
                h = batchnorm(h, self.bn[spec.name], mode=mode, track_stats=track_stats)
            elif k == "leaky_relu":
                h = leaky_relu(h, LEAKY_SLOPE)
            elif k == "relu":
                h = relu(h)
            elif k == "sigmoid":
                h = sigmoid(h)
            elif k == "concat_skip":
                src = saved[spec.skip_source]
                if zero_skips:
                    src = Tensor(np.zeros_like(src.data), dtype=src.dtype)
                h = concat(h, src)
            if spec.save_as is not None:
                saved[spec.save_as] = h
            if trace is not None:
                trace.append(tuple(h.shape))
        return h

    __call__ = forward

    def summary(self) -> str:
        """Plain-text table: layer, kernel, stride, output shape, params, cumulative RF."""
        c, h, w = self.input_shape
        if self.meta.get("noise"):
            c -= 1
        shapes: list = []
        self.forward(np.zeros((1, c, h, w), get_default_dtype()), mode="infer", trace=shapes)
        rows = [("layer", "kind", "kernel", "stride", "output", "params", "rf")]
        rf, jump, rf_valid = 1, 1, True
        for spec, shape in zip(self.layers, shapes):
            n_params = 0
            for suffix in ("weight", "bias", "gamma", "beta"):
                p = self.params.get(f"{spec.name}.{suffix}")
                n_params += p.size if p is not None else 0
            if spec.kind == "conv_transpose":
                rf_valid = False
            if spec.kind == "conv" and rf_valid:
                rf += (spec.kernel_hw[0] - 1) * jump
                jump *= spec.stride
            conv_like = spec.kind in ("conv", "conv_transpose")
            kernel = "x".join(map(str, spec.kernel_hw)) if conv_like else "-"
            rows.append((spec.name, spec.kind, kernel, str(spec.stride) if conv_like else "-",
                         "x".join(map(str, shape[1:])), str(n_params), str(rf) if rf_valid else "-"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        lines.append(f"{self.role}: {self.param_count()} parameters, input {c}x{h}x{w}")
        return "\n".join(lines)

    # serialization helpers used by checkpoints
    def architecture(self) -> dict:
        return {"layers": [s.to_dict() for s in self.layers], "meta": self.meta,
                "bn": {k: {"momentum": st.momentum, "eps": st.eps} for k, st in self.bn.items()}}

    @classmethod
    def from_architecture(cls, arch: dict, arrays: dict) -> "ModelGraph":
        layers = [LayerSpec(**d) for d in arch["layers"]]
        params = {}
        bn = {}
        for spec in layers:
            if spec.kind in ("conv", "conv_transpose"):
                for suffix in ("weight", "bias"):
                    key = f"{spec.name}.{suffix}"
                    params[key] = Tensor(arrays[f"param/{key}"], requires_grad=True, name=key,
                                         dtype=arrays[f"param/{key}"].dtype)
            elif spec.kind == "batchnorm":
                opts = arch["bn"][spec.name]
                g_key, b_key = f"{spec.name}.gamma", f"{spec.name}.beta"
                gamma = Tensor(arrays[f"param/{g_key}"], requires_grad=True, name=g_key,
                               dtype=arrays[f"param/{g_key}"].dtype)
                beta = Tensor(arrays[f"param/{b_key}"], requires_grad=True, name=b_key,
                              dtype=arrays[f"param/{b_key}"].dtype)
                params[g_key], params[b_key] = gamma, beta
                bn[spec.name] = BatchNormState(gamma, beta, arrays[f"buffer/{spec.name}.running_mean"].copy(),
                                               arrays[f"buffer/{spec.name}.running_var"].copy(),
                                               momentum=opts["momentum"], eps=opts["eps"])
        return cls(layers, params, bn, dict(arch["meta"]))

    def arrays(self) -> dict:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"buffer/{name}.running_mean"] = st.running_mean
            out[f"buffer/{name}.running_var"] = st.running_var
        return out


class _Builder:
    def __init__(self, in_channels: int, seed):
        self.layers: list[LayerSpec] = []
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.channels = in_channels
        self.saved_channels = {0: in_channels}
        self._seeds = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)

    def conv(self, name, out, kernel, stride, padding, transpose=False, output_padding=0):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        shape = (self.channels, out, kh, kw) if transpose else (out, self.channels, kh, kw)
        self.params[f"{name}.weight"] = init_weights(shape, self._seeds.spawn(1)[0], name=f"{name}.weight")
        self.params[f"{name}.bias"] = Tensor(np.zeros(out, get_default_dtype()), requires_grad=True,
                                             name=f"{name}.bias")
        self.layers.append(LayerSpec("conv_transpose" if transpose else "conv", kernel, stride, padding, out,
                                     output_padding, name=name))
        self.channels = out

    def batchnorm(self, name):
        st = BatchNormState.create(self.channels, name=name)
        self.bn[name] = st
        self.params[f"{name}.gamma"], self.params[f"{name}.beta"] = st.gamma, st.beta
        self.layers.append(LayerSpec("batchnorm", out_channels=self.channels, name=name))

    def act(self, kind, name):
        self.layers.append(LayerSpec(kind, out_channels=self.channels, name=name))

    def save(self, stage):
        self.layers[-1].save_as = stage
        self.saved_channels[stage] = self.channels

    def skip(self, stage, name):
        self.channels += self.saved_channels[stage]
        self.layers.append(LayerSpec("concat_skip", out_channels=self.channels, skip_source=stage, name=name))


def _spatial(input_size) -> tuple[int, int]:
    if isinstance(input_size, (int, np.integer)):
        return int(input_size), int(input_size)
    h, w = input_size
    return int(h), int(w)


def build_generator(input_size=512, base_channels: int = 32, depth: int = 5, in_channels: int = 1,
                    noise: bool = False, seed=0) -> ModelGraph:
    """U-Net style generator mapping an image to a same-size mask probability map.

    ``depth`` stride-2 encoder blocks (channels ``base_channels * 2**i`` capped at
    512, the last being the bottleneck) are mirrored by ``depth`` stride-2
    transposed-conv blocks, each followed by concatenation of the encoder feature
    at the same resolution (the raw input for the last one). A 3x3 conv and a
    sigmoid produce the single output channel.

    ``input_size`` is a power of two >= 64, or an ``(H, W)`` pair whose sides are
    both divisible by ``2**depth``.
    """
    h, w = _spatial(input_size)
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if isinstance(input_size, (int, np.integer)):
        if h < 64 or h & (h - 1):
            raise ValueError(f"input_size must be a power of two >= 64, got {h}")
    div = 2 ** depth
    for side in (h, w):
        if side % div or side // div < 4:
            raise ValueError(f"input side {side} is incompatible with depth {depth}: "
                             f"need a multiple of {div} with at least 4 cells at the bottleneck")
    if base_channels < 1:
        raise ValueError("base_channels must be positive")

    def ch(level):
        return base_channels if level == 0 else min(base_channels * 2 ** (level - 1), MAX_CHANNELS)

    total_in = in_channels + (1 if noise else 0)
    b = _Builder(total_in, seed)
    for level in range(1, depth + 1):
        name = f"enc{level}"
        b.conv(f"{name}.conv", ch(level), 3, 2, 1)
        if level > 1:
            b.batchnorm(f"{name}.bn")
        b.act("leaky_relu", f"{name}.act")
        b.save(level)
    for level in range(depth - 1, -1, -1):
        name = f"dec{level}"
        b.conv(f"{name}.up", ch(level), 3, 2, 1, transpose=True, output_padding=1)
        b.batchnorm(f"{name}.bn")
        b.act("relu", f"{name}.act")
        b.skip(level, f"{name}.skip")
    b.conv("head.conv", 1, 3, 1, 1)
    b.act("sigmoid", "head.act")

    meta = {"role": "G", "input_shape": [total_in, h, w], "output_shape": [1, h, w], "depth": depth,
            "base_channels": base_channels, "noise": bool(noise), "divisor": div,
            "bottleneck_shape": [ch(depth), h // div, w // div]}
    return ModelGraph(b.layers, b.params, b.bn, meta)


def _disc_stack(kind: str, mode: str, base: int):
    """(out_channels, kernel, stride, padding, batchnorm, activation) per conv block."""
    c = lambda m: min(base * m, MAX_CHANNELS)  # noqa: E731
    if mode == "derived":
        if kind == "D1":
            return [(c(1), 1, 1, 0, False, "leaky_relu"), (c(2), 1, 1, 0, True, "leaky_relu"),
                    (1, 1, 1, 0, False, "sigmoid")]
        if kind == "D2":
            return [(c(1), 4, 2, 1, False, "leaky_relu"), (c(2), 4, 1, 1, True, "leaky_relu"),
                    (1, 4, 1, 1, False, "sigmoid")]
        if kind == "D3":
            return [(c(1), 4, 2, 1, False, "leaky_relu"), (c(2), 4, 2, 1, True, "leaky_relu"),
                    (c(4), 4, 2, 1, True, "leaky_relu"), (c(8), 4, 1, 1, True, "leaky_relu"),
                    (1, 4, 1, 1, False, "sigmoid")]
    elif mode == "paper-literal":
        # layer counts as stated, every conv 3x3 stride 2
        n_convs, act = {"D1": (5, "leaky_relu"), "D2": (5, "relu"), "D3": (3, "relu")}.get(kind, (0, ""))
        if n_convs:
            blocks = [(c(2 ** min(i, 3)), 3, 2, 1, i > 0, act) for i in range(n_convs - 1)]
            return blocks + [(1, 3, 2, 1, False, "sigmoid")]
    else:
        raise ValueError(f"unknown discriminator mode {mode!r}")
    act = "leaky_relu" if mode == "derived" else "relu"
    return [(c(m), 3, 2, 1, i > 0, act) for i, m in enumerate((1, 2, 4, 8, 8))]


def build_discriminator(kind: str = "D3", input_size=256, conditioning: str = "conditional",
                        base_channels: int = 64, mode: str = "derived", image_channels: int = 1,
                        seed=0) -> ModelGraph:
    """Build discriminator ``kind`` (D1..D4) producing a map of sigmoid scores.

    Conditional discriminators see image and mask concatenated on the channel
    axis; unconditional ones see the mask alone. D4 ends in a conv spanning the
    whole remaining feature map, so it emits one score per image.
    """
    if kind not in DISCRIMINATOR_KINDS:
        raise ValueError(f"unknown discriminator kind {kind!r}; expected one of {DISCRIMINATOR_KINDS}")
    if conditioning not in ("conditional", "unconditional"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    h, w = _spatial(input_size)
    in_ch = 1 + (image_channels if conditioning == "conditional" else 0)
    b = _Builder(in_ch, seed)
    for i, (out, k, s, p, use_bn, act) in enumerate(_disc_stack(kind, mode, base_channels)):
        b.conv(f"l{i}.conv", out, k, s, p)
        if use_bn:
            b.batchnorm(f"l{i}.bn")
        b.act(act, f"l{i}.act")
    meta = {"role": kind, "input_shape": [in_ch, h, w], "conditioning": conditioning, "mode": mode,
            "base_channels": base_channels}
    if kind == "D4":
        if min(h, w) < 32:
            raise ValueError(f"D4 needs input of at least 32x32 for its five stride-2 stages, got {h}x{w}")
        sh, sw = h, w
        for _ in range(5):
            sh, sw = (sh + 1) // 2, (sw + 1) // 2
        b.conv("head.conv", 1, (sh, sw), 1, 0)
        b.act("sigmoid", "head.act")
        meta["fixed_size"] = True
    model = ModelGraph(b.layers, b.params, b.bn, meta)
    meta["receptive_field"] = receptive_field(model.layers)
    meta["patch_size"] = PATCH_SIZES.get(kind, max(h, w)) if mode == "derived" else meta["receptive_field"]
    return model


def discriminate(disc: ModelGraph, image: Tensor, mask: Tensor, **kwargs) -> Tensor:
    """Score ``mask`` with ``disc``, conditioning on ``image`` if the model is conditional."""
    if disc.meta.get("conditioning") == "conditional":
        return disc.forward(concat(image, mask), **kwargs)
    return disc.forward(mask, **kwargs)
