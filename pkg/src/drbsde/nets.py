"""Fixed-topology feedforward networks with analytic backprop and Adam.

The networks are plain tanh MLPs evaluated in float64. Forward returns a
tape of activations; backward replays the chain rule exactly, so gradients
can be validated against central finite differences at tight tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "MlpSpec",
    "MlpParams",
    "ForwardTape",
    "GradientBundle",
    "AdamState",
    "init_params",
    "forward",
    "backward",
    "adam_step",
    "params_to_bytes",
    "params_from_bytes",
    "spec_manifest",
]


@dataclass(frozen=True)
class MlpSpec:
    """Topology: input -> hidden_layers x hidden_width (tanh) -> linear output."""

    input_dim: int
    hidden_width: int
    hidden_layers: int
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        for name in ("input_dim", "hidden_width", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_layers < 0:
            raise ConfigError("hidden_layers must be >= 0")
        if self.activation != "tanh":
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights (fan_in x fan_out, applied as x @ W + b) and biases per layer."""

    spec: MlpSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = self.spec.layer_dims()
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ConfigError("parameter count does not match the spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ConfigError(f"layer {i} has shape {w.shape}/{b.shape}, expected "
                                  f"({dims[i]}, {dims[i + 1]})/({dims[i + 1]},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericalError(f"non-finite parameters in layer {i}")
            w.flags.writeable = False
            b.flags.writeable = False

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass(frozen=True, eq=False)
class ForwardTape:
    """Activation cache; valid only for the params object that produced it."""

    params: MlpParams
    activations: tuple[np.ndarray, ...]  # input plus each post-tanh hidden output


@dataclass(frozen=True, eq=False)
class GradientBundle:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    m_weights: tuple[np.ndarray, ...]
    v_weights: tuple[np.ndarray, ...]
    m_biases: tuple[np.ndarray, ...]
    v_biases: tuple[np.ndarray, ...]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zw = tuple(np.zeros_like(w) for w in params.weights)
        zb = tuple(np.zeros_like(b) for b in params.biases)
        return cls(m_weights=zw, v_weights=tuple(np.zeros_like(w) for w in params.weights),
                   m_biases=zb, v_biases=tuple(np.zeros_like(b) for b in params.biases),
                   step_count=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases, deterministic from the seed."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims()
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec=spec, weights=tuple(weights), biases=tuple(biases))


def forward(params: MlpParams, inputs: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Evaluate the network on a batch; returns (outputs, tape)."""
    a = np.asarray(inputs, dtype=float)
    if a.ndim != 2 or a.shape[1] != params.spec.input_dim:
        raise ValueError(f"input batch must be (M, {params.spec.input_dim}), got {a.shape}")
    activations = [a]
    n = params.n_layers
    for i in range(n - 1):
        a = np.tanh(a @ params.weights[i] + params.biases[i])
        activations.append(a)
    out = a @ params.weights[n - 1] + params.biases[n - 1]
    return out, ForwardTape(params=params, activations=tuple(activations))


def backward(params: MlpParams, tape: ForwardTape, output_grad: np.ndarray) -> GradientBundle:
    """Exact reverse-mode gradients for the loss whose d(loss)/d(output) is
    ``output_grad``; any 1/M averaging must already be baked into it."""
    if tape.params is not params:
        raise ValueError("tape was produced by a different parameter set")
    g = np.asarray(output_grad, dtype=float)
    acts = tape.activations
    if g.shape != (acts[0].shape[0], params.spec.output_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match the forward batch")
    n = params.n_layers
    grad_w: list[np.ndarray | None] = [None] * n
    grad_b: list[np.ndarray | None] = [None] * n
    delta = g
    for i in range(n - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            # tanh'(z) = 1 - tanh(z)^2, with tanh(z) cached as acts[i]
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return GradientBundle(weights=tuple(grad_w), biases=tuple(grad_b))


def _check_finite_grads(grads: GradientBundle) -> None:
    for kind, arrays in (("weights", grads.weights), ("biases", grads.biases)):
        for i, arr in enumerate(arrays):
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite gradient in {kind}[{i}]")


def adam_step(params: MlpParams, grads: GradientBundle, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    _check_finite_grads(grads)
    t = state.step_count + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t

    def update(p, g, m, v):
        m_new = state.beta1 * m + (1.0 - state.beta1) * g
        v_new = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = state.lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
        return p - step, m_new, v_new

    new_w, new_mw, new_vw = [], [], []
    for p, g, m, v in zip(params.weights, grads.weights, state.m_weights, state.v_weights):
        pn, mn, vn = update(p, g, m, v)
        new_w.append(pn); new_mw.append(mn); new_vw.append(vn)
    new_b, new_mb, new_vb = [], [], []
    for p, g, m, v in zip(params.biases, grads.biases, state.m_biases, state.v_biases):
        pn, mn, vn = update(p, g, m, v)
        new_b.append(pn); new_mb.append(mn); new_vb.append(vn)

    new_params = MlpParams(spec=params.spec, weights=tuple(new_w), biases=tuple(new_b))
    new_state = replace(state, m_weights=tuple(new_mw), v_weights=tuple(new_vw),
                        m_biases=tuple(new_mb), v_biases=tuple(new_vb), step_count=t)
    return new_params, new_state


def params_to_bytes(params: MlpParams) -> bytes:
    """Flat little-endian float64 blob: W_0, b_0, W_1, b_1, ... in C order."""
    chunks = []
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(spec: MlpSpec, raw: bytes) -> MlpParams:
    flat = np.frombuffer(raw, dtype="<f8").astype(float)
    dims = spec.layer_dims()
    expected = sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))
    if flat.size != expected:
        raise ConfigError(f"parameter blob holds {flat.size} values, expected {expected}")
    weights, biases, pos = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out].copy())
        pos += fan_out
    return MlpParams(spec=spec, weights=tuple(weights), biases=tuple(biases))


def spec_manifest(spec: MlpSpec, seed: int | None = None) -> dict:
    """JSON-ready shape manifest accompanying a parameter blob."""
    manifest = {
        "layer_dims": spec.layer_dims(),
        "hidden_layers": spec.hidden_layers,
        "activation": spec.activation,
        "dtype": "<f8",
    }
    if seed is not None:
        manifest["seed"] = int(seed)
    return manifest


def spec_from_manifest(manifest: dict) -> MlpSpec:
    dims = manifest["layer_dims"]
    hidden_layers = int(manifest["hidden_layers"])
    width = dims[1] if hidden_layers > 0 else 1
    return MlpSpec(input_dim=int(dims[0]), hidden_width=int(width),
                   hidden_layers=hidden_layers, output_dim=int(dims[-1]),
                   activation=manifest.get("activation", "tanh"))


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True)
