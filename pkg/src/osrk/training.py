"""Mini-batch SGD over network weights, reciprocal points and the radius, plus checkpoints."""

from __future__ import annotations

import contextlib
import json
import logging
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from ._io import atomic_write_bytes
from .errors import ArgumentError, ChecksumError, ConfigError, NumericalError, ParseError, ShapeError, TruncationError, VersionError
from .kvconfig import coerce_fields, parse_bool
from .network import Network, NetworkConfig, build_network
from .rpl import RplHead, loss_total

log = logging.getLogger(__name__)

CKPT_MAGIC = b"OSRK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    batch_size: int = 64
    lam: float = 0.1
    gamma: float = 1.0
    momentum: float = 0.9
    seed: int = 0
    deterministic: bool = True
    clip_norm: float | None = None
    per_class_radius: bool = False

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if not self.learning_rate > 0:
            problems.append("learning_rate: must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if not self.lam >= 0:
            problems.append("lambda: must be >= 0")
        if not self.gamma > 0:
            problems.append("gamma: must be > 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum: must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            problems.append("clip_norm: must be > 0 when set")
        if problems:
            raise ConfigError("invalid training configuration: " + "; ".join(problems))

    @classmethod
    def from_mapping(cls, values, **overrides) -> "TrainConfig":
        def opt_float(s):
            return None if s.strip().lower() in ("", "none", "off") else float(s)

        conv = {
            "epochs": int, "learning_rate": float, "batch_size": int, "lambda": float, "lam": float,
            "gamma": float, "momentum": float, "seed": int, "deterministic": parse_bool,
            "clip_norm": opt_float, "per_class_radius": parse_bool,
        }
        kw = coerce_fields(values, conv, section="training", allow_unknown=True)
        if "lambda" in kw:
            kw["lam"] = kw.pop("lambda")
        kw.update(overrides)
        return cls(**kw)

    def to_mapping(self) -> dict:
        return asdict(self)


def make_head(n_classes: int, dim: int, cfg: TrainConfig) -> RplHead:
    return RplHead.create(
        n_classes, dim, gamma=cfg.gamma, lam=cfg.lam, seed=cfg.seed + 1, per_class_radius=cfg.per_class_radius
    )


def sgd_step(params, grads, velocities, lr: float, momentum: float) -> None:
    """In-place heavy-ball update: ``v = momentum * v + g``; ``p = p - lr * v``."""
    if not (len(params) == len(grads) == len(velocities)):
        raise ShapeError("params, grads and velocities must have equal length")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= momentum
        v += g
        p -= lr * v


@dataclass
class TrainState:
    velocities: dict[str, np.ndarray]
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0

    @classmethod
    def fresh(cls, net: Network, head: RplHead, seed: int) -> "TrainState":
        vel = {name: np.zeros_like(p.data) for name, p in net.named_params()}
        vel["head.points"] = np.zeros_like(head.points)
        vel["head.radius"] = np.zeros_like(head.radius)
        return cls(vel, np.random.default_rng(seed))


@dataclass
class EpochLog:
    epoch: int
    total: float
    classification: float
    boundary: float
    radius: float


@dataclass
class FitResult:
    net: Network
    head: RplHead
    epochs: list[EpochLog]
    step_losses: list[float]
    state: TrainState


@contextlib.contextmanager
def thread_limit(n: int | None):
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _global_norm(arrays):
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in arrays)))


def fit(
    net: Network,
    head: RplHead,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    state: TrainState | None = None,
    on_epoch_end: Callable[[int, TrainState], None] | None = None,
) -> FitResult:
    """Train until ``cfg.epochs`` epochs have run; resumes from ``state.epoch`` when given."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if n == 0:
        raise ArgumentError("training set is empty")
    if images.shape[0] != n:
        raise ShapeError(f"{images.shape[0]} images but {n} labels")
    if labels.min() < 0 or labels.max() >= head.n_classes:
        raise ArgumentError(f"labels must lie in [0, {head.n_classes}), got [{labels.min()}, {labels.max()}]")
    if state is None:
        state = TrainState.fresh(net, head, cfg.seed)

    named = [(name, p) for name, p in net.named_params() if p.trainable]
    epochs: list[EpochLog] = []
    step_losses: list[float] = []
    with thread_limit(1 if cfg.deterministic else None):
        for epoch in range(state.epoch, cfg.epochs):
            order = state.rng.permutation(n)
            sums = np.zeros(3)
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                net.zero_grad()
                emb = net.forward(images[idx])
                try:
                    terms = loss_total(emb, labels[idx], head)
                except NumericalError as exc:
                    raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from exc
                if not np.isfinite(terms.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                net.backward(terms.grad_features)

                arrays = [p.data for _, p in named] + [head.points, head.radius]
                grads = [p.grad for _, p in named] + [terms.grad_points, terms.grad_radius]
                if cfg.clip_norm is not None:
                    norm = _global_norm(grads)
                    if norm > cfg.clip_norm:
                        grads = [g * (cfg.clip_norm / norm) for g in grads]
                vels = [state.velocities[name] for name, _ in named] + [
                    state.velocities["head.points"],
                    state.velocities["head.radius"],
                ]
                sgd_step(arrays, grads, vels, cfg.learning_rate, cfg.momentum)
                head.clamp_radius()
                state.step += 1
                step_losses.append(terms.total)
                sums += len(idx) * np.array([terms.total, terms.classification, terms.boundary])
            state.epoch = epoch + 1
            mean = sums / n
            entry = EpochLog(epoch + 1, float(mean[0]), float(mean[1]), float(mean[2]), float(np.mean(head.radius)))
            epochs.append(entry)
            log.info("epoch %d: loss %.6g (cls %.6g, boundary %.6g) R=%.4g", entry.epoch, *mean, entry.radius)
            if on_epoch_end is not None:
                on_epoch_end(epoch + 1, state)
    return FitResult(net, head, epochs, step_losses, state)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    network_config: NetworkConfig
    net_state: dict[str, np.ndarray]
    head: RplHead
    velocities: dict[str, np.ndarray]
    rng_state: dict
    epoch: int = 0
    step: int = 0
    train_config: dict = field(default_factory=dict)
    format_version: int = CKPT_VERSION

    @classmethod
    def capture(cls, net: Network, head: RplHead, state: TrainState | None = None, train_config=None):
        if state is None:
            state = TrainState.fresh(net, head, 0)
        return cls(
            network_config=net.config,
            net_state=net.state_dict(),
            head=RplHead(head.points.copy(), head.radius.copy(), head.gamma, head.lam),
            velocities={k: v.copy() for k, v in state.velocities.items()},
            rng_state=state.rng.bit_generator.state,
            epoch=state.epoch,
            step=state.step,
            train_config=dict(train_config.to_mapping() if isinstance(train_config, TrainConfig) else train_config or {}),
        )

    def restore(self) -> tuple[Network, RplHead, TrainState]:
        cfg = self.network_config
        # bank weights are in the stored tensors; avoid re-reading the bank file
        net = build_network(NetworkConfig(cfg.input_size, cfg.layers, cfg.embedding_dim,
                                          freeze_first_layer=cfg.freeze_first_layer))
        net.config = cfg
        net.load_state_dict(self.net_state)
        head = RplHead(self.head.points.copy(), self.head.radius.copy(), self.head.gamma, self.head.lam)
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        state = TrainState({k: v.copy() for k, v in self.velocities.items()}, rng, self.epoch, self.step)
        return net, head, state


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype("<f8").tobytes()


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    return struct.pack("<I", len(tensors)) + b"".join(_pack_tensor(k, v) for k, v in tensors.items())


def _pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {f"net.{k}": v for k, v in ckpt.net_state.items()}
    tensors["head.points"] = ckpt.head.points
    tensors["head.radius"] = ckpt.head.radius
    tensors["head.gamma"] = np.asarray(ckpt.head.gamma)
    tensors["head.lambda"] = np.asarray(ckpt.head.lam)
    body = CKPT_MAGIC + struct.pack("<I", ckpt.format_version)
    body += _pack_table(tensors)
    body += _pack_table(ckpt.velocities)
    body += _pack_json(ckpt.rng_state)
    meta = {
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "network_config": ckpt.network_config.to_mapping(),
        "train_config": ckpt.train_config,
    }
    body += _pack_json(meta)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"checkpoint truncated while reading {what}", offset=len(self.data))
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def table(self, what: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", f"{what} count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "tensor name length")
            try:
                name = self.take(nlen, "tensor name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ParseError("tensor name is not UTF-8", offset=self.pos - nlen) from exc
            (rank,) = self.unpack("<B", f"rank of {name}")
            shape = self.unpack(f"<{rank}I", f"extents of {name}")
            size = int(np.prod(shape)) if rank else 1
            payload = self.take(8 * size, f"payload of {name}")
            out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        return out

    def json(self, what: str):
        (n,) = self.unpack("<I", f"{what} length")
        return json.loads(self.take(n, what).decode("utf-8"))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise ParseError(f"bad checkpoint magic {magic!r}", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {CKPT_VERSION})")
    tensors = r.table("tensor table")
    velocities = r.table("optimizer block")
    rng_state = r.json("rng block")
    meta = r.json("metadata block")
    body_end = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes after checksum", offset=r.pos)
    actual = zlib.crc32(data[:body_end]) & 0xFFFFFFFF
    if crc != actual:
        raise ChecksumError(f"checkpoint CRC32 mismatch: stored {crc:08x}, computed {actual:08x}")
    net_state = {k[4:]: v for k, v in tensors.items() if k.startswith("net.")}
    head = RplHead(
        tensors["head.points"], tensors["head.radius"], float(tensors["head.gamma"]), float(tensors["head.lambda"])
    )
    return Checkpoint(
        network_config=NetworkConfig.from_mapping(meta["network_config"]),
        net_state=net_state,
        head=head,
        velocities=velocities,
        rng_state=rng_state,
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        train_config=meta.get("train_config", {}),
        format_version=version,
    )


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_bytes(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
