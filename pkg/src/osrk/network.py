"""Configurable AlexNet-style backbone producing embeddings ``f(x)``.

A ReLU follows every conv and dense layer except the last dense layer,
whose output is the embedding.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .asc import KernelBank
from .errors import ConfigError, ShapeError
from .kvconfig import parse_bool, read_kv_file
from .nn import Conv2d, Dense, Flatten, Layer, MaxPool2d, Param, ReLU, conv_output_size, pool_output_size


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | dense
    kernel: int = 0
    count: int = 0  # conv output channels or dense output width
    stride: int = 1
    padding: int = 0

    def to_text(self) -> str:
        if self.kind == "conv":
            return f"conv,k={self.kernel},c={self.count},s={self.stride},p={self.padding}"
        if self.kind == "pool":
            return f"pool,k={self.kernel},s={self.stride}"
        return f"dense,n={self.count}"

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        parts = [t.strip() for t in text.split(",") if t.strip()]
        if not parts:
            raise ValueError("empty layer description")
        kind = parts[0]
        kv = {}
        for item in parts[1:]:
            if "=" not in item:
                raise ValueError(f"bad layer attribute {item!r}")
            k, v = item.split("=", 1)
            kv[k.strip()] = int(v)
        if kind == "conv":
            unknown = set(kv) - {"k", "c", "s", "p"}
            if unknown or "k" not in kv or "c" not in kv:
                raise ValueError(f"conv layer needs k and c (allowed k,c,s,p): {text!r}")
            return cls("conv", kv["k"], kv["c"], kv.get("s", 1), kv.get("p", 0))
        if kind == "pool":
            if set(kv) - {"k", "s"} or "k" not in kv:
                raise ValueError(f"pool layer needs k (allowed k,s): {text!r}")
            return cls("pool", kv["k"], 0, kv.get("s", kv["k"]))
        if kind == "dense":
            if set(kv) != {"n"}:
                raise ValueError(f"dense layer needs exactly n: {text!r}")
            return cls("dense", 0, kv["n"])
        raise ValueError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int
    layers: tuple[LayerSpec, ...]
    embedding_dim: int
    first_layer_init: str = "random"  # random | asc_bank
    bank_path: str | None = None
    freeze_first_layer: bool = False

    def validate(self) -> None:
        problems = []
        if self.input_size < 1:
            problems.append("input_size: must be >= 1")
        if self.embedding_dim < 2:
            problems.append("embedding_dim: must be >= 2")
        if not self.layers or self.layers[0].kind != "conv":
            problems.append("layer.1: first layer must be a conv layer")
        if not self.layers or self.layers[-1].kind != "dense":
            problems.append("layers: last layer must be dense (the embedding layer)")
        elif self.layers[-1].count != self.embedding_dim:
            problems.append(
                f"embedding_dim: {self.embedding_dim} does not match last dense width {self.layers[-1].count}"
            )
        seen_dense = False
        for i, spec in enumerate(self.layers, start=1):
            if spec.kind == "dense":
                seen_dense = True
            elif seen_dense:
                problems.append(f"layer.{i}: {spec.kind} layer after a dense layer")
        if self.first_layer_init not in ("random", "asc_bank"):
            problems.append(f"first_layer_init: {self.first_layer_init!r} not in ('random', 'asc_bank')")
        if self.first_layer_init == "asc_bank" and not self.bank_path:
            problems.append("bank_path: required when first_layer_init = asc_bank")
        if problems:
            raise ConfigError("invalid network configuration: " + "; ".join(problems))

    def to_mapping(self) -> dict[str, str]:
        out = {
            "input_size": str(self.input_size),
            "embedding_dim": str(self.embedding_dim),
            "first_layer_init": self.first_layer_init,
            "freeze_first_layer": "true" if self.freeze_first_layer else "false",
        }
        if self.bank_path:
            out["bank_path"] = self.bank_path
        for i, spec in enumerate(self.layers, start=1):
            out[f"layer.{i}"] = spec.to_text()
        return out

    @classmethod
    def from_mapping(cls, values) -> "NetworkConfig":
        problems = []
        layer_items = []
        kw = {}
        for key, raw in values.items():
            try:
                if key.startswith("layer."):
                    layer_items.append((int(key.split(".", 1)[1]), LayerSpec.parse(raw)))
                elif key in ("input_size", "embedding_dim"):
                    kw[key] = int(raw)
                elif key == "first_layer_init":
                    kw[key] = raw
                elif key == "bank_path":
                    kw[key] = raw or None
                elif key == "freeze_first_layer":
                    kw[key] = parse_bool(raw)
                else:
                    problems.append(f"{key}: unknown key")
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        for key in ("input_size", "embedding_dim"):
            if key not in kw and not any(p.startswith(key) for p in problems):
                problems.append(f"{key}: missing")
        if not layer_items:
            problems.append("layer.N: no layers given")
        if problems:
            raise ConfigError("invalid network configuration: " + "; ".join(problems))
        layers = tuple(spec for _, spec in sorted(layer_items, key=lambda t: t[0]))
        cfg = cls(layers=layers, **kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "NetworkConfig":
        return cls.from_mapping(read_kv_file(path))


def table_i_config(embedding_dim: int = 10, **kw) -> NetworkConfig:
    """Full-size network: 31x31 first-layer kernels on 227x227 inputs."""
    layers = (
        LayerSpec("conv", 31, 961, 4, 2),
        LayerSpec("pool", 3, 0, 2),
        LayerSpec("conv", 5, 512, 1, 2),
        LayerSpec("pool", 3, 0, 2),
        LayerSpec("conv", 3, 384, 1, 1),
        LayerSpec("conv", 3, 256, 1, 1),
        LayerSpec("conv", 3, 256, 1, 1),
        LayerSpec("pool", 3, 0, 2),
        LayerSpec("dense", count=1024),
        LayerSpec("dense", count=1024),
        LayerSpec("dense", count=embedding_dim),
    )
    return NetworkConfig(227, layers, embedding_dim, **kw)


def desk_config(embedding_dim: int = 32, **kw) -> NetworkConfig:
    """CI-sized network: 64x64 inputs, 100 first-layer 11x11 kernels."""
    layers = (
        LayerSpec("conv", 11, 100, 2, 2),
        LayerSpec("pool", 3, 0, 2),
        LayerSpec("conv", 3, 32, 1, 1),
        LayerSpec("pool", 3, 0, 2),
        LayerSpec("dense", count=128),
        LayerSpec("dense", count=embedding_dim),
    )
    return NetworkConfig(64, layers, embedding_dim, **kw)


class Network:
    def __init__(self, config: NetworkConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers

    @property
    def conv1(self) -> Conv2d:
        return self.layers[0]

    def conv_layers(self) -> list[Conv2d]:
        return [l for l in self.layers if isinstance(l, Conv2d)]

    def named_params(self) -> Iterator[tuple[str, Param]]:
        for layer in self.layers:
            for p in layer.params():
                yield p.name, p

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params())

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x: np.ndarray, upto: int | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        n = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (1, n, n):
            raise ShapeError(f"network expects input shape (B, 1, {n}, {n}), got {x.shape}")
        layers = self.layers if upto is None else self.layers[:upto]
        for layer in layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_embedding: np.ndarray) -> None:
        g = grad_embedding
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_params())
        if set(own) != set(state):
            raise ConfigError(f"parameter names differ: expected {sorted(own)}, got {sorted(state)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: expected shape {p.data.shape}, got {arr.shape}")
            p.data[...] = arr

    def conv1_checksum(self) -> str:
        return hashlib.sha256(self.conv1.weight.data.astype("<f4").tobytes()).hexdigest()


def _build_layers(config: NetworkConfig) -> list[Layer]:
    layers: list[Layer] = []
    shape: tuple[int, ...] = (1, config.input_size, config.input_size)
    n_conv = n_dense = 0
    last = len(config.layers)
    for i, spec in enumerate(config.layers, start=1):
        try:
            if spec.kind == "conv":
                n_conv += 1
                layer = Conv2d(shape[0], spec.count, spec.kernel, spec.stride, spec.padding, name=f"conv{n_conv}")
                shape = layer.output_shape(shape)
                layers += [layer, ReLU()]
            elif spec.kind == "pool":
                layer = MaxPool2d(spec.kernel, spec.stride)
                shape = layer.output_shape(shape)
                layers.append(layer)
            else:
                if len(shape) == 3:
                    flat = Flatten()
                    shape = flat.output_shape(shape)
                    layers.append(flat)
                n_dense += 1
                layer = Dense(shape[0], spec.count, name=f"dense{n_dense}")
                shape = layer.output_shape(shape)
                layers.append(layer)
                if i != last:
                    layers.append(ReLU())
            if min(shape) < 1:
                raise ShapeError(f"output shape {shape} is empty")
        except ShapeError as exc:
            raise ConfigError(f"layer.{i} ({spec.to_text()}): {exc}") from exc
    layers[0].needs_input_grad = False
    return layers


def network_shapes(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(layer kind, output shape) for each configured layer, without allocating weights."""
    shape: tuple[int, ...] = (1, config.input_size, config.input_size)
    out = []
    for i, spec in enumerate(config.layers, start=1):
        if spec.kind == "dense":
            shape = (spec.count,)
        else:
            c, h, w = shape
            pad = spec.padding if spec.kind == "conv" else 0
            if spec.kernel > h + 2 * pad or spec.kernel > w + 2 * pad:
                raise ConfigError(f"layer.{i} ({spec.to_text()}): kernel {spec.kernel} exceeds input {shape}")
            if spec.kind == "conv":
                shape = (spec.count, conv_output_size(h, spec.kernel, spec.stride, pad),
                         conv_output_size(w, spec.kernel, spec.stride, pad))
            else:
                shape = (c, pool_output_size(h, spec.kernel, spec.stride), pool_output_size(w, spec.kernel, spec.stride))
        if min(shape) < 1:
            raise ConfigError(f"layer.{i} ({spec.to_text()}): output shape {shape} is empty")
        out.append((spec.kind, shape))
    return out


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases, deterministic in ``seed``."""
    config.validate()
    layers = _build_layers(config)
    rng = np.random.default_rng(seed)
    for layer in layers:
        if isinstance(layer, (Conv2d, Dense)):
            w = layer.weight.data
            fan_in = int(np.prod(w.shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
    net = Network(config, layers)
    if config.first_layer_init == "asc_bank":
        init_conv1_from_bank(net, KernelBank.load(config.bank_path))
    if config.freeze_first_layer:
        net.conv1.weight.trainable = False
        net.conv1.bias.trainable = False
    return net


def init_conv1_from_bank(net: Network, bank: KernelBank) -> Network:
    """Copy the bank into the first conv layer (channel j <- kernel j) and zero its bias."""
    conv = net.conv1
    problems = []
    if conv.kernel_size != bank.kernel_size:
        problems.append(f"kernel size: network has {conv.kernel_size}, bank has {bank.kernel_size}")
    if conv.out_channels != bank.count:
        problems.append(f"kernel count: network expects {conv.out_channels}, bank has {bank.count}")
    if conv.in_channels != 1:
        problems.append(f"input channels: network has {conv.in_channels}, bank kernels are single-channel")
    if problems:
        raise ConfigError("cannot initialize first layer from kernel bank: " + "; ".join(problems))
    conv.weight.data[:, 0] = bank.kernels
    conv.bias.data[...] = 0.0
    trainable = not net.config.freeze_first_layer
    conv.weight.trainable = conv.bias.trainable = trainable
    return net


def forward_embedding(net: Network, batch: np.ndarray) -> np.ndarray:
    return net.forward(batch)


def with_bank(config: NetworkConfig, bank_path: str | Path) -> NetworkConfig:
    return replace(config, first_layer_init="asc_bank", bank_path=str(bank_path))
