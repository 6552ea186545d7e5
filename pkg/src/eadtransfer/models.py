"""Classifier architecture, natural/adversarial training, ensembles, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import PgdConfig, pgd_perturb
from .mnist import Dataset, derive_seed, rng
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

INPUT_SHAPE = (1, 28, 28)
NUM_CLASSES = 10


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated, or inconsistent with its spec."""


@dataclass(frozen=True)
class NetworkSpec:
    """Two 5x5 conv+pool stages followed by two dense layers.

    ``full()`` is the MNIST challenge network (32/64 filters, 1024 hidden
    units); ``desk()`` is a narrow variant that trains in minutes on one core.
    """

    conv1: int = 32
    conv2: int = 64
    hidden: int = 1024
    kernel: int = 5
    classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.classes != NUM_CLASSES:
            raise ValueError("output layer width must be 10")

    @classmethod
    def full(cls):
        return cls()

    @classmethod
    def desk(cls):
        return cls(conv1=8, conv2=16, hidden=128)

    @classmethod
    def named(cls, name):
        try:
            return {"full": cls.full, "desk": cls.desk}[name]()
        except KeyError:
            raise ValueError(f"unknown architecture {name!r} (choose full or desk)") from None

    @property
    def layers(self):
        k = self.kernel
        return (
            ("conv", self.conv1, k),
            ("pool", 2),
            ("conv", self.conv2, k),
            ("pool", 2),
            ("dense", self.hidden),
            ("dense", self.classes),
        )

    def param_shapes(self):
        """Ordered ``(name, shape)`` pairs for every parameter block."""
        k = self.kernel
        flat = self.conv2 * 7 * 7
        return [
            ("conv1.w", (self.conv1, 1, k, k)),
            ("conv1.b", (self.conv1,)),
            ("conv2.w", (self.conv2, self.conv1, k, k)),
            ("conv2.b", (self.conv2,)),
            ("fc1.w", (flat, self.hidden)),
            ("fc1.b", (self.hidden,)),
            ("fc2.w", (self.hidden, self.classes)),
            ("fc2.b", (self.classes,)),
        ]

    def to_dict(self):
        return {"conv1": self.conv1, "conv2": self.conv2, "hidden": self.hidden, "kernel": self.kernel, "classes": self.classes}


@dataclass
class Model:
    """A network spec plus its float32 parameters and training metadata."""

    spec: NetworkSpec
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(self.spec.param_shapes())
        if set(self.params) != set(expected):
            raise CheckpointError(f"parameter names {sorted(self.params)} do not match spec")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {shape}")
        self._tensors = {k: Tensor(v, dtype=np.float32) for k, v in self.params.items()}

    def logits(self, x) -> Tensor:
        """Raw logits for a batch ``N x 1 x 28 x 28`` (or one ``1 x 28 x 28`` image)."""
        return forward(self.spec, self._tensors, x)

    def predict(self, x, batch_size=1000) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x), dtype=np.float32)
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.logits(x[i : i + batch_size]).data.argmax(axis=1))
        return np.concatenate(out)

    def num_params(self):
        return sum(v.size for v in self.params.values())


def forward(spec: NetworkSpec, params: dict[str, Tensor], x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor._wrap(np.asarray(x, dtype=np.float32))
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != INPUT_SHAPE:
        raise T.DimensionError(f"expected images shaped {INPUT_SHAPE}, got {x.shape[1:]}")
    pad = spec.kernel // 2
    h = T.relu(T.add_bias(T.conv2d(x, params["conv1.w"], padding=pad), params["conv1.b"]))
    h = T.maxpool2d(h, 2)
    h = T.relu(T.add_bias(T.conv2d(h, params["conv2.w"], padding=pad), params["conv2.b"]))
    h = T.maxpool2d(h, 2)
    h = T.flatten(h)
    h = T.relu(T.add_bias(T.matmul(h, params["fc1.w"]), params["fc1.b"]))
    out = T.add_bias(T.matmul(h, params["fc2.w"]), params["fc2.b"])
    if single:
        out = T.reshape(out, (spec.classes,))
    return out


def activation_pattern(spec: NetworkSpec, params: dict, x) -> np.ndarray:
    """Concatenated ReLU on/off flags and max-pool winner positions.

    The network is affine in its parameters and input wherever this pattern is
    constant, which is what finite-difference gradient checks need to know.
    """
    p = {k: getattr(v, "data", v) for k, v in params.items()}
    x = np.asarray(getattr(x, "data", x))
    x = x[None] if x.ndim == 3 else x
    pad = spec.kernel // 2
    parts = []

    def pool_winners(h):
        n, c, hh, ww = h.shape
        win = h.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // 2, ww // 2, 4)
        return win.argmax(axis=-1), win.max(axis=-1)

    h = T.conv2d(Tensor(x), Tensor(p["conv1.w"]), padding=pad).data + p["conv1.b"][:, None, None]
    parts.append(h > 0)
    arg, h = pool_winners(np.maximum(h, 0))
    parts.append(arg)
    h = T.conv2d(Tensor(h), Tensor(p["conv2.w"]), padding=pad).data + p["conv2.b"][:, None, None]
    parts.append(h > 0)
    arg, h = pool_winners(np.maximum(h, 0))
    parts.append(arg)
    h = h.reshape(len(h), -1) @ p["fc1.w"] + p["fc1.b"]
    parts.append(h > 0)
    return np.concatenate([q.reshape(-1).astype(np.int64) for q in parts])


def forward_logits(model, image) -> Tensor:
    return model.logits(image)


def init_params(spec: NetworkSpec, seed: int, zero_last=False) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    g = rng(seed)
    params = {}
    for name, shape in spec.param_shapes():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        params[name] = (g.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    if zero_last:
        params["fc2.w"][:] = 0
    return params


class Ensemble:
    """Models fused by averaging their logits."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ValueError("ensemble needs at least one member")
        self.members = members

    def logits(self, x) -> Tensor:
        outs = [m.logits(x) for m in self.members]
        shapes = {o.shape for o in outs}
        if len(shapes) != 1:
            raise T.DimensionError(f"ensemble members disagree on output shape: {sorted(shapes)}")
        total = outs[0]
        for o in outs[1:]:
            total = total + o
        return total * (1.0 / len(outs))

    def predict(self, x, batch_size=1000):
        x = np.asarray(getattr(x, "data", x), dtype=np.float32)
        return np.concatenate([self.logits(x[i : i + batch_size]).data.argmax(axis=1) for i in range(0, len(x), batch_size)])


def ensemble_logits(ensemble, image) -> Tensor:
    return ensemble.logits(image)


def accuracy(model, data: Dataset) -> float:
    return float((model.predict(data.images) == data.labels).mean())


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class AdvTrainConfig:
    epsilon: float
    pgd_steps: int = 40
    step_size: float | None = None  # None -> 2*eps/pgd_steps
    random_start: bool = True
    warmup_steps: int = 0  # ramp epsilon linearly from 0 over this many updates (0 = off)

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.step * self.pgd_steps < self.epsilon - 1e-12:
            raise ValueError("step_size * pgd_steps must reach the epsilon-ball boundary")

    @property
    def step(self):
        return self.step_size if self.step_size is not None else 2.0 * self.epsilon / self.pgd_steps

    def pgd_config(self, update=None):
        """Inner adversary for training update ``update`` (None: the full-strength one)."""
        if self.epsilon == 0:
            return None
        scale = 1.0
        if update is not None and self.warmup_steps:
            scale = min(1.0, (update + 1) / self.warmup_steps)
        return PgdConfig(self.epsilon * scale, self.pgd_steps, self.step * scale, self.random_start)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 50
    lr: float = 1e-3
    seed: int = 0
    max_examples: int | None = None  # truncate each epoch's pass (desk runs)


def train_natural(spec, train_set: Dataset, config: TrainConfig = TrainConfig(), **kw) -> Model:
    return _train(spec, train_set, config, None, **kw)


def train_adversarial(spec, train_set: Dataset, adv: AdvTrainConfig, config: TrainConfig = TrainConfig(), **kw) -> Model:
    """PGD adversarial training: every minibatch is replaced by its PGD perturbation."""
    return _train(spec, train_set, config, adv, **kw)


def _train(spec, train_set, config, adv, check_invariants=False, progress=None):
    if len(train_set) == 0:
        raise ValueError("empty training set")
    params = init_params(spec, derive_seed(config.seed, 0))
    names = [n for n, _ in spec.param_shapes()]
    opt = Adam([params[n].shape for n in names], lr=config.lr, dtype=np.float32)
    order_rng = rng(derive_seed(config.seed, 1))
    n = len(train_set)
    step = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        if config.max_examples is not None:
            order = order[: config.max_examples]
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = train_set.images[idx]
            y = train_set.labels[idx]
            pgd_cfg = adv.pgd_config(step) if adv is not None else None
            if pgd_cfg is not None:
                frozen = Model(spec, params)
                x_adv = pgd_perturb(frozen, x, y, np.zeros(len(y), dtype=bool), pgd_cfg, seed=derive_seed(config.seed, 2, step))
                if check_invariants:
                    assert np.all(np.abs(x_adv - x) <= adv.epsilon + 1e-6), "PGD left the epsilon-ball"
                    assert x_adv.min() >= 0 and x_adv.max() <= 1, "PGD left the [0,1] box"
                x = x_adv
            tensors = {k: Tensor._wrap(v) for k, v in params.items()}
            with T.GradientTape() as tape:
                tape.watch(*tensors.values())
                loss = T.mean(T.softmax_cross_entropy(forward(spec, tensors, x), y))
            value = float(loss.item())
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} at step {step}")
            grads = T.backward(tape, loss)
            new = opt.step([params[k] for k in names], [grads[tensors[k]].data for k in names])
            params = dict(zip(names, new))
            step += 1
            if progress is not None:
                progress(epoch, step, value)
        log.info("epoch %d done after %d steps", epoch, step)
    meta = {
        "mode": "natural" if adv is None else "adversarial",
        "epsilon": 0.0 if adv is None else adv.epsilon,
        "pgd_step": None if adv is None else adv.step,
        "warmup_steps": 0 if adv is None else adv.warmup_steps,
        "seed": config.seed,
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "max_examples": config.max_examples,
        "train_size": n,
    }
    return Model(spec, params, meta)


def prediction_collapse(model, data: Dataset, threshold=0.95):
    """(collapsed?, share of the most common prediction, that class)."""
    pred = model.predict(data.images)
    counts = np.bincount(pred, minlength=NUM_CLASSES)
    top = int(counts.argmax())
    share = counts[top] / len(pred)
    return bool(share > threshold), float(share), top


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u32 len + spec json | u32 len + meta json |
#         float32 LE parameter blocks in spec order | sha256 of all preceding bytes

MAGIC = b"EADCKPT\x00"
VERSION = 1


def _json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (_json(model.spec.to_dict()), _json(model.meta)):
        parts += [struct.pack("<I", len(blob)), blob]
    for name, _ in model.spec.param_shapes():
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def parse_checkpoint(raw: bytes) -> Model:
    if len(raw) < len(MAGIC) + 4 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch (truncated or corrupted file)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 4
    blobs = []
    for _ in range(2):
        (length,) = struct.unpack_from("<I", body, pos)
        pos += 4
        blobs.append(json.loads(body[pos : pos + length]))
        pos += length
    spec = NetworkSpec(**blobs[0])
    params = {}
    for name, shape in spec.param_shapes():
        count = int(np.prod(shape))
        end = pos + 4 * count
        if end > len(body):
            raise CheckpointError(f"parameter block {name} truncated")
        params[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        pos = end
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} unexpected bytes after parameters (count mismatch with spec)")
    return Model(spec, params, blobs[1])


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
