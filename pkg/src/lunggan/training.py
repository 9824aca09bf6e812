"""Alternating adversarial training, history logging and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from .data import DatasetSplit, SamplePair, stack_batch
from .evaluation import confusion, dice
from .layers import Adam, AdamState
from .losses import LossBundle, d_loss, g_adv_loss, g_total, l1_loss
from .models import DISCRIMINATOR_KINDS, ModelGraph, build_discriminator, build_generator, discriminate
from .tensor import Graph, Tensor

__all__ = [
    "TrainConfig",
    "StepRecord",
    "TrainHistory",
    "TrainState",
    "DivergenceError",
    "CheckpointError",
    "build_state",
    "d_step",
    "g_step",
    "train_step",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A loss became NaN or infinite."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or from another format version."""


@dataclass
class TrainConfig:
    discriminator_kind: str = "D3"
    alpha: float = 100.0
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 350
    batch_size: int = 1
    resolution: tuple = (256, 256)
    seed: int = 0
    conditioning: str = "conditional"
    checkpoint_every: int = 50
    base_channels: int = 32
    depth: int = 5
    d_base_channels: int = 64
    disc_mode: str = "derived"
    adv_loss: str = "nonsaturating"
    lr_decay: float = 1.0
    noise: bool = False
    keep_best: bool = False

    def __post_init__(self):
        if isinstance(self.resolution, str):
            self.resolution = _parse_resolution(self.resolution)
        self.resolution = tuple(int(v) for v in self.resolution)
        if self.discriminator_kind not in DISCRIMINATOR_KINDS:
            raise ValueError(f"discriminator_kind must be one of {DISCRIMINATOR_KINDS}")
        if self.adv_loss not in ("nonsaturating", "saturating"):
            raise ValueError("adv_loss must be 'nonsaturating' or 'saturating'")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1, epochs >= 0")

    def to_text(self) -> str:
        """Flat ``key=value`` lines, parseable by :meth:`from_text`."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "resolution":
                v = f"{v[0]}x{v[1]}"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls(**parse_config_values(text))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})


def _parse_resolution(text: str) -> tuple:
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    return int(parts[0]), int(parts[1])


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    kind = types[name]
    if name == "resolution":
        return _parse_resolution(raw)
    if kind == "bool":
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_values(text: str) -> dict:
    """Parse ``key=value`` lines (``#`` comments and blank lines allowed)."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


@dataclass
class StepRecord:
    epoch: int
    step: int
    d_loss: float
    g_adv: float
    g_l1: float
    g_total: float


@dataclass
class TrainHistory:
    steps: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        """One row per step; ``val_dice`` is filled on each epoch's last row."""
        last_of_epoch = {}
        for i, rec in enumerate(self.steps):
            last_of_epoch[rec.epoch] = i
        dice_by_epoch = dict(self.val_dice)
        rows = ["epoch,step,d_loss,g_adv,g_l1,g_total,val_dice"]
        for i, r in enumerate(self.steps):
            vd = dice_by_epoch.get(r.epoch) if last_of_epoch[r.epoch] == i else None
            vd_s = "" if vd is None or math.isnan(vd) else f"{vd:.6f}"
            rows.append(f"{r.epoch},{r.step},{r.d_loss:.8g},{r.g_adv:.8g},{r.g_l1:.8g},{r.g_total:.8g},{vd_s}")
        Path(path).write_text("\n".join(rows) + "\n")

    def loss_trace(self) -> list:
        return [(r.d_loss, r.g_adv, r.g_l1, r.g_total) for r in self.steps]


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    generator: ModelGraph
    discriminator: ModelGraph
    opt_g: Adam
    opt_d: Adam
    config: TrainConfig
    epoch: int = 0
    step: int = 0


def build_state(cfg: TrainConfig) -> TrainState:
    g_seed, d_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    G = build_generator(cfg.resolution, cfg.base_channels, cfg.depth, noise=cfg.noise, seed=g_seed)
    D = build_discriminator(cfg.discriminator_kind, cfg.resolution, cfg.conditioning, cfg.d_base_channels,
                            cfg.disc_mode, seed=d_seed)
    opt_g = Adam(G.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_d = Adam(D.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    return TrainState(G, D, opt_g, opt_d, cfg)


def _guard(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} became {value}; aborting before any parameter update")
    return value


def _noise_rng(cfg: TrainConfig, state_step: int) -> Optional[np.random.Generator]:
    return np.random.default_rng([cfg.seed, 7, state_step]) if cfg.noise else None


def d_step(G: ModelGraph, D: ModelGraph, images: Tensor, masks: Tensor, opt_d: Adam, rng=None) -> float:
    """One discriminator update on a real and a (detached) generated batch."""
    fake = G.forward(images, mode="train", track_stats=False, rng=rng).detach()
    with Graph() as graph:
        real_scores = discriminate(D, images, masks)
        fake_scores = discriminate(D, images, fake)
        loss = d_loss(real_scores, fake_scores)
    _guard(loss.item(), "discriminator loss")
    graph.backward(loss, params=D.parameters())
    opt_d.step()
    return loss.item()


def g_step(G: ModelGraph, D: ModelGraph, images: Tensor, masks: Tensor, opt_g: Adam, alpha: float,
           saturating: bool = False, rng=None) -> tuple[float, float]:
    """One generator update on ``adv + alpha * l1``; D receives no gradient."""
    D.set_requires_grad(False)
    try:
        with Graph() as graph:
            fake = G.forward(images, mode="train", rng=rng)
            scores = discriminate(D, images, fake, track_stats=False)
            adv = g_adv_loss(scores, saturating=saturating)
            l1 = l1_loss(fake, masks)
            total = g_total(adv, l1, alpha)
        _guard(total.item(), "generator loss")
        graph.backward(total, params=G.parameters())
    finally:
        D.set_requires_grad(True)
    opt_g.step()
    return adv.item(), l1.item()


def train_step(G: ModelGraph, D: ModelGraph, batch, opt_g: Adam, opt_d: Adam, cfg: TrainConfig,
               rng=None) -> LossBundle:
    """One D update followed by one G update."""
    images, masks = stack_batch(batch)
    dl = d_step(G, D, images, masks, opt_d, rng=rng)
    adv, l1 = g_step(G, D, images, masks, opt_g, cfg.alpha, cfg.adv_loss == "saturating", rng=rng)
    return LossBundle(dl, adv, l1, g_total(adv, l1, cfg.alpha), cfg.alpha)


def predict(G: ModelGraph, image, threshold: float = 0.5) -> np.ndarray:
    """Binary mask (H, W) from the generator in inference mode."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 2:
        x = Tensor(x.data[None, None])
    prob = G.forward(x, mode="infer", rng=np.random.default_rng(0) if G.meta.get("noise") else None)
    return (prob.data[0, 0] >= threshold).astype(np.uint8)


def _validation_dice(G: ModelGraph, samples: list) -> float:
    if not samples:
        return float("nan")
    scores = [dice(confusion(predict(G, s.image), s.mask.data[0, 0].astype(np.uint8))) for s in samples]
    return float(np.mean(scores))


def _epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, epoch]).permutation(n)


def train(cfg: TrainConfig, split: DatasetSplit, samples: Mapping[str, SamplePair], out_dir=None,
          state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[int, TrainHistory], None]] = None) -> tuple[TrainState, TrainHistory]:
    """Run ``cfg.epochs`` epochs of alternating updates (resuming from ``state`` if given).

    Data order depends only on ``(cfg.seed, epoch)``, so a resumed run replays
    exactly what an uninterrupted one would have done. Checkpoints go to
    ``out_dir/checkpoint.lgck`` every ``cfg.checkpoint_every`` epochs and at the end.
    """
    train_ids = list(split.train)
    if not train_ids:
        raise ValueError("training split is empty")
    for sid in train_ids + list(split.validation):
        got = tuple(samples[sid].image.shape[2:])
        if got != tuple(cfg.resolution):
            raise ValueError(f"sample {sid} is {got[0]}x{got[1]}, config expects "
                             f"{cfg.resolution[0]}x{cfg.resolution[1]}")
    state = state or build_state(cfg)
    state.config = cfg
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    val_samples = [samples[i] for i in split.validation]
    history = TrainHistory()
    best = -1.0
    G, D = state.generator, state.discriminator

    for epoch in range(state.epoch, cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        state.opt_g.lr = state.opt_d.lr = lr
        order = _epoch_order(cfg, epoch, len(train_ids))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[train_ids[i]] for i in order[start:start + cfg.batch_size]]
            bundle = train_step(G, D, batch, state.opt_g, state.opt_d, cfg, rng=_noise_rng(cfg, state.step))
            history.steps.append(StepRecord(epoch, state.step, *bundle.as_row()))
            state.step += 1
        state.epoch = epoch + 1
        vd = _validation_dice(G, val_samples)
        history.val_dice.append((epoch, vd))
        logger.info("epoch %d: d=%.4f g_adv=%.4f g_l1=%.4f val_dice=%.4f", epoch, history.steps[-1].d_loss,
                    history.steps[-1].g_adv, history.steps[-1].g_l1, vd)
        if out_dir is not None:
            if state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs:
                save_checkpoint(state, out_dir / "checkpoint.lgck")
            if cfg.keep_best and not math.isnan(vd) and vd > best:
                best = vd
                save_checkpoint(state, out_dir / "best.lgck")
        if on_epoch is not None:
            on_epoch(epoch, history)

    if out_dir is not None:
        if cfg.epochs == state.epoch and not (out_dir / "checkpoint.lgck").exists():
            save_checkpoint(state, out_dir / "checkpoint.lgck")
        history.write_csv(out_dir / "history.csv")
    return state, history


# ---------------------------------------------------------------------------
# checkpoint container
#
#   magic (8 bytes) | version u32 | manifest length u64 | manifest (utf-8 JSON)
#   | array blocks, little-endian, in manifest order | crc32 u32 of all prior bytes

MAGIC = b"LUNGGAN\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def _adam_arrays(prefix: str, opt: Adam) -> dict:
    out = {}
    for k in opt.params:
        out[f"{prefix}/m/{k}"] = opt.state.m[k]
        out[f"{prefix}/v/{k}"] = opt.state.v[k]
    return out


def _adam_meta(opt: Adam) -> dict:
    s = opt.state
    return {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t}


def save_checkpoint(state: TrainState, path) -> Path:
    """Write the full training state; the file is replaced atomically."""
    arrays = {}
    arrays.update({f"G/{k}": v for k, v in state.generator.arrays().items()})
    arrays.update({f"D/{k}": v for k, v in state.discriminator.arrays().items()})
    arrays.update(_adam_arrays("optG", state.opt_g))
    arrays.update(_adam_arrays("optD", state.opt_d))
    index = []
    blobs = []
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=np.asarray(arr).dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(le.shape)})
        blobs.append(le.tobytes())
    manifest = {
        "config": state.config.to_text(),
        "epoch": state.epoch,
        "step": state.step,
        "generator": state.generator.architecture(),
        "discriminator": state.discriminator.architecture(),
        "adam": {"G": _adam_meta(state.opt_g), "D": _adam_meta(state.opt_d)},
        "arrays": index,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    payload = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> TrainState:
    """Read a checkpoint written by :func:`save_checkpoint`, verifying it fully first."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size + 4:
        raise CheckpointError(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    try:
        manifest = json.loads(body[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
        offset = _HEADER.size + mlen
        arrays = {}
        for entry in manifest["arrays"]:
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            nbytes = count * dt.itemsize
            if offset + nbytes > len(body):
                raise CheckpointError(f"{path}: array {entry['name']} runs past the end of the file")
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
            offset += nbytes
        if offset != len(body):
            raise CheckpointError(f"{path}: {len(body) - offset} unexpected trailing bytes")
        cfg = TrainConfig.from_text(manifest["config"])
        G = ModelGraph.from_architecture(manifest["generator"], _strip(arrays, "G/"))
        D = ModelGraph.from_architecture(manifest["discriminator"], _strip(arrays, "D/"))
        opt_g = _restore_adam(G, manifest["adam"]["G"], _strip(arrays, "optG/"))
        opt_d = _restore_adam(D, manifest["adam"]["D"], _strip(arrays, "optD/"))
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint manifest ({exc})") from exc
    return TrainState(G, D, opt_g, opt_d, cfg, epoch=manifest["epoch"], step=manifest["step"])


def _strip(arrays: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def _restore_adam(model: ModelGraph, meta: dict, arrays: dict) -> Adam:
    st = AdamState(lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], t=meta["t"],
                   m={k: arrays[f"m/{k}"] for k in model.params}, v={k: arrays[f"v/{k}"] for k in model.params})
    return Adam(model.params, state=st)
