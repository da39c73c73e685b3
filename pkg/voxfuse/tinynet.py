"""
Small fully connected networks: forward, exact reverse-mode backward, plain SGD.

Initialization is Xavier-uniform driven by a SplitMix64 generator, so the same
seed gives bit-identical parameters on every platform.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from voxfuse.errors import ContractError

ACTIVATIONS = ("relu", "sigmoid", "identity")
_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits"""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    return z


def activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    """d activation / dz given pre-activation z and output a"""
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation '{self.activation}'")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ContractError(f"bias length {self.bias.shape[0]} != weight rows {self.weight.shape[0]}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ContractError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class DenseNet:
    layers: List[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ContractError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ContractError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [layer.weight.shape for layer in self.layers]

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], seed: int = 0) -> DenseNet:
        """
        Xavier-uniform weights, zero biases.
        sizes = [in, hidden..., out], one activation per layer.
        """
        if len(activations) != len(sizes) - 1:
            raise ContractError("need one activation per layer")
        rng = SplitMix64(seed)
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (n_in + n_out))
            draws = np.array([rng.uniform() for _ in range(n_in * n_out)])
            weight = ((2.0 * draws - 1.0) * limit).reshape(n_out, n_in)
            layers.append(DenseLayer(weight, np.zeros(n_out), act))
        return cls(layers)

    def copy(self) -> DenseNet:
        return DenseNet([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def _check_input(net: DenseNet, x: np.ndarray):
    if x.shape[-1] != net.input_dim:
        raise ContractError(f"input has {x.shape[-1]} features, network expects {net.input_dim}")


def forward(net: DenseNet, x) -> np.ndarray:
    """Affine + activation composition; x is one vector or an (N, in) batch of rows"""
    a = np.asarray(x, dtype=np.float64)
    _check_input(net, a)
    for layer in net.layers:
        a = activate(a @ layer.weight.T + layer.bias, layer.activation)
    return a


def forward_trace(net: DenseNet, x) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Forward pass keeping (input, pre-activation, output) of every layer"""
    a = np.asarray(x, dtype=np.float64)
    _check_input(net, a)
    cache = []
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        out = activate(z, layer.activation)
        cache.append((a, z, out))
        a = out
    return a, cache


def backward(net: DenseNet, x, upstream) -> Tuple[List[LayerGrad], np.ndarray]:
    """
    Gradients of <upstream, forward(net, x)> with respect to every layer's
    parameters and to x. x and upstream are single vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("backward takes a single input vector")
    if upstream.shape != (net.output_dim,):
        raise ContractError(f"upstream gradient has shape {upstream.shape}, expected ({net.output_dim},)")
    grads, dx = backward_batch(net, x[None, :], upstream[None, :])
    return grads, dx[0]


def backward_batch(net: DenseNet, x, upstream) -> Tuple[List[LayerGrad], np.ndarray]:
    """
    Batched backward over (N, in) rows: parameter gradients are summed over the
    batch, the input gradient keeps one row per sample.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.ndim != 2 or upstream.shape != (x.shape[0], net.output_dim):
        raise ContractError(f"batch shapes {x.shape} / {upstream.shape} do not fit the network")
    _, cache = forward_trace(net, x)
    grads: List[LayerGrad] = [None] * len(net.layers)
    delta = upstream
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        a_in, z, out = cache[i]
        dz = delta * activation_grad(z, out, layer.activation)
        grads[i] = LayerGrad(weight=dz.T @ a_in, bias=dz.sum(axis=0))
        delta = dz @ layer.weight
    return grads, delta


def step(net: DenseNet, grads: Sequence[LayerGrad], lr: float) -> DenseNet:
    """New network with parameters - lr * grads"""
    if len(grads) != len(net.layers):
        raise ContractError("gradient list does not match network layers")
    layers = []
    for layer, grad in zip(net.layers, grads):
        if grad.weight.shape != layer.weight.shape or grad.bias.shape != layer.bias.shape:
            raise ContractError("gradient shape does not match layer shape")
        layers.append(DenseLayer(layer.weight - lr * grad.weight, layer.bias - lr * grad.bias, layer.activation))
    return DenseNet(layers)


# --- parameter file ----------------------------------------------------------


class LayerRecord(BaseModel):
    shape: Tuple[int, int]  # (out, in)
    activation: str
    weight: List[float]  # row-major
    bias: List[float]


class NetRecord(BaseModel):
    layers: List[LayerRecord]


def net_to_record(net: DenseNet) -> NetRecord:
    return NetRecord(
        layers=[
            LayerRecord(
                shape=layer.weight.shape,
                activation=layer.activation,
                weight=layer.weight.ravel().tolist(),
                bias=layer.bias.tolist(),
            )
            for layer in net.layers
        ]
    )


def record_to_net(record: NetRecord) -> DenseNet:
    layers = []
    for rec in record.layers:
        if len(rec.weight) != rec.shape[0] * rec.shape[1]:
            raise ContractError(f"weight list of length {len(rec.weight)} does not fit shape {rec.shape}")
        layers.append(DenseLayer(np.array(rec.weight).reshape(rec.shape), np.array(rec.bias), rec.activation))
    return DenseNet(layers)


def save_net(net: DenseNet) -> str:
    return json.dumps(net_to_record(net).model_dump(), indent=2) + "\n"


def load_net(text: str) -> DenseNet:
    return record_to_net(NetRecord.model_validate_json(text))
