"""
Small recurrent function approximators for the Q and M networks.

Layers: dense, ReLU, one Elman recurrent layer h_t = tanh(W x_t + U h_{t-1} + b),
inverted dropout, and a linear output layer. Forward and backward passes run
on (batch, time, features) arrays; backward is exact reverse-mode through time
and includes the L2 weight penalty. Parameters are plain dicts of float64
arrays keyed "<layer>.<W|U|b>".
"""

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax
from scipy.special import softmax as _softmax

from ml.errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

Parameters = Dict[str, np.ndarray]
Gradients = Dict[str, np.ndarray]

CHECKPOINT_FORMAT_VERSION = 1


class LayerKind(Enum):
    DENSE = "dense"
    RELU = "relu"
    RECURRENT = "recurrent"
    DROPOUT = "dropout"
    OUTPUT = "output"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    size: Optional[int] = None
    rate: float = 0.0

    @property
    def has_weights(self) -> bool:
        return self.kind in (LayerKind.DENSE, LayerKind.RECURRENT, LayerKind.OUTPUT)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'kind': self.kind.value}
        if self.size is not None:
            data['size'] = self.size
        if self.kind is LayerKind.DROPOUT:
            data['rate'] = self.rate
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LayerSpec':
        return cls(kind=LayerKind(data['kind']), size=data.get('size'), rate=data.get('rate', 0.0))


def dense(size: int) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, size)


def relu() -> LayerSpec:
    return LayerSpec(LayerKind.RELU)


def recurrent(size: int) -> LayerSpec:
    return LayerSpec(LayerKind.RECURRENT, size)


def dropout(rate: float) -> LayerSpec:
    return LayerSpec(LayerKind.DROPOUT, rate=rate)


def output(size: int) -> LayerSpec:
    return LayerSpec(LayerKind.OUTPUT, size)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list; sizes chain from input_size, output layer last"""
    input_size: int
    layers: Tuple[LayerSpec, ...]
    l2_scale: float = 0.01
    cell: str = 'elman'

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, 'layers', layers)
        if self.input_size < 1:
            raise ShapeError(f"input_size must be positive, got {self.input_size}")
        if not layers or layers[-1].kind is not LayerKind.OUTPUT:
            raise ShapeError("the last layer must be an output layer")
        if sum(layer.kind is LayerKind.OUTPUT for layer in layers) != 1:
            raise ShapeError("exactly one output layer is allowed")
        if sum(layer.kind is LayerKind.RECURRENT for layer in layers) > 1:
            raise ShapeError("at most one recurrent layer is allowed")
        if self.cell != 'elman':
            raise ShapeError(f"unsupported recurrent cell {self.cell!r}")
        for index, layer in enumerate(layers):
            if layer.has_weights and (layer.size is None or layer.size < 1):
                raise ShapeError(f"layer {index} ({layer.kind.value}) needs a positive size")
            if layer.kind is LayerKind.DROPOUT and not 0.0 <= layer.rate < 1.0:
                raise ShapeError(f"dropout rate must lie in [0, 1), got {layer.rate}")

    @property
    def output_size(self) -> int:
        return self.layers[-1].size

    def layer_inputs(self) -> List[int]:
        """Feature size entering each layer"""
        sizes, current = [], self.input_size
        for layer in self.layers:
            sizes.append(current)
            if layer.has_weights:
                current = layer.size
        return sizes

    @classmethod
    def drqn(cls, input_size: int, hidden_sizes: Sequence[int], recurrent_size: int, output_size: int,
             dropout_rate: float = 0.0, l2_scale: float = 0.01) -> 'NetworkSpec':
        """Fully connected ReLU stack, one recurrent layer, linear output"""
        layers: List[LayerSpec] = []
        for size in hidden_sizes:
            layers.extend([dense(size), relu()])
            if dropout_rate > 0:
                layers.append(dropout(dropout_rate))
        layers.extend([recurrent(recurrent_size), output(output_size)])
        return cls(input_size=input_size, layers=tuple(layers), l2_scale=l2_scale)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_size': self.input_size,
            'layers': [layer.to_dict() for layer in self.layers],
            'l2_scale': self.l2_scale,
            'cell': self.cell,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkSpec':
        return cls(
            input_size=data['input_size'],
            layers=tuple(LayerSpec.from_dict(layer) for layer in data['layers']),
            l2_scale=data.get('l2_scale', 0.01),
            cell=data.get('cell', 'elman'),
        )


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> Parameters:
    """Glorot-uniform weights, zero biases"""
    params: Parameters = {}
    for index, (layer, fan_in) in enumerate(zip(spec.layers, spec.layer_inputs())):
        if not layer.has_weights:
            continue
        limit = np.sqrt(6.0 / (fan_in + layer.size))
        params[f'{index}.W'] = rng.uniform(-limit, limit, size=(layer.size, fan_in))
        if layer.kind is LayerKind.RECURRENT:
            limit = np.sqrt(6.0 / (2 * layer.size))
            params[f'{index}.U'] = rng.uniform(-limit, limit, size=(layer.size, layer.size))
        params[f'{index}.b'] = np.zeros(layer.size)
    return params


def copy_params(params: Parameters) -> Parameters:
    return {name: value.copy() for name, value in params.items()}


def is_weight(name: str) -> bool:
    return not name.endswith('.b')


def l2_penalty(params: Parameters, spec: NetworkSpec) -> float:
    return float(spec.l2_scale * sum(np.sum(value * value) for name, value in params.items() if is_weight(name)))


@dataclass
class ForwardTrace:
    """Per-layer caches needed by backward"""
    caches: List[Any] = field(default_factory=list)
    squeeze: bool = False


def forward(params: Parameters, spec: NetworkSpec, inputs: np.ndarray, train: bool = False,
            rng: Union[None, int, np.random.Generator] = None) -> Tuple[np.ndarray, ForwardTrace]:
    """
    Run a sequence (time, features) or batch (batch, time, features).

    The recurrent state starts at zero for every sequence. Dropout is active
    only when `train` is set and draws its masks from `rng`.
    """
    x = np.asarray(inputs, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != spec.input_size:
        raise ShapeError(f"expected inputs (..., {spec.input_size}), got shape {np.shape(inputs)}")
    generator = None
    if train and any(layer.kind is LayerKind.DROPOUT and layer.rate > 0 for layer in spec.layers):
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng or seed")
        generator = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    trace = ForwardTrace(squeeze=squeeze)
    for index, layer in enumerate(spec.layers):
        if layer.kind in (LayerKind.DENSE, LayerKind.OUTPUT):
            trace.caches.append(x)
            x = x @ params[f'{index}.W'].T + params[f'{index}.b']
        elif layer.kind is LayerKind.RELU:
            mask = x > 0
            trace.caches.append(mask)
            x = x * mask
        elif layer.kind is LayerKind.DROPOUT:
            if generator is None or layer.rate == 0:
                trace.caches.append(None)
            else:
                mask = (generator.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
                trace.caches.append(mask)
                x = x * mask
        else:
            W, U, b = params[f'{index}.W'], params[f'{index}.U'], params[f'{index}.b']
            projected = x @ W.T + b
            states = np.empty(x.shape[:2] + (layer.size,))
            h = np.zeros((x.shape[0], layer.size))
            for t in range(x.shape[1]):
                h = np.tanh(projected[:, t] + h @ U.T)
                states[:, t] = h
            trace.caches.append((x, states))
            x = states

    return (x[0] if squeeze else x), trace


def backward(params: Parameters, spec: NetworkSpec, trace: ForwardTrace, grad_outputs: np.ndarray) -> Gradients:
    """Gradients of <grad_outputs, outputs> + l2_penalty with respect to every parameter"""
    g = np.asarray(grad_outputs, dtype=np.float64)
    if trace.squeeze:
        g = g[None]
    grads: Gradients = {}

    for index in reversed(range(len(spec.layers))):
        layer, cache = spec.layers[index], trace.caches[index]
        if layer.kind in (LayerKind.DENSE, LayerKind.OUTPUT):
            W = params[f'{index}.W']
            grads[f'{index}.W'] = g.reshape(-1, g.shape[-1]).T @ cache.reshape(-1, cache.shape[-1])
            grads[f'{index}.b'] = g.sum(axis=(0, 1))
            g = g @ W
        elif layer.kind is LayerKind.RELU:
            g = g * cache
        elif layer.kind is LayerKind.DROPOUT:
            if cache is not None:
                g = g * cache
        else:
            x, states = cache
            W, U = params[f'{index}.W'], params[f'{index}.U']
            dW, dU = np.zeros_like(W), np.zeros_like(U)
            db = np.zeros(layer.size)
            dx = np.empty_like(x)
            dh_next = np.zeros((x.shape[0], layer.size))
            for t in reversed(range(x.shape[1])):
                da = (g[:, t] + dh_next) * (1.0 - states[:, t] ** 2)
                h_prev = states[:, t - 1] if t > 0 else np.zeros_like(dh_next)
                dW += da.T @ x[:, t]
                dU += da.T @ h_prev
                db += da.sum(axis=0)
                dx[:, t] = da @ W
                dh_next = da @ U
            grads[f'{index}.W'], grads[f'{index}.U'], grads[f'{index}.b'] = dW, dU, db
            g = dx

    for name, value in params.items():
        if is_weight(name):
            grads[name] = grads[name] + 2.0 * spec.l2_scale * value
    return grads


def cross_entropy_loss(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ShapeError(f"label {label} out of range [0, {logits.size})")
    loss = -float(log_softmax(logits)[label])
    grad = _softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row losses and gradients for logits (n, classes)"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ShapeError(f"labels must lie in [0, {logits.shape[-1]})")
    rows = np.arange(len(labels))
    losses = -log_softmax(logits, axis=-1)[rows, labels]
    grads = _softmax(logits, axis=-1)
    grads[rows, labels] -= 1.0
    return losses, grads


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Parameters, lr: float = 0.001) -> 'AdamState':
        return cls(lr=lr,
                   m={name: np.zeros_like(value) for name, value in params.items()},
                   v={name: np.zeros_like(value) for name, value in params.items()})

    def copy(self) -> 'AdamState':
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, t=self.t,
                         m=copy_params(self.m), v=copy_params(self.v))


def adam_step(params: Parameters, grads: Gradients, state: AdamState) -> Tuple[Parameters, AdamState]:
    """Bias-corrected Adam update; returns new parameters and state"""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient {name} has shape {grad.shape}, parameter has {params[name].shape}")

    t = state.t + 1
    step_size = state.lr / (1.0 - state.beta1 ** t)
    bias2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = grads[name]
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * grad * grad
        new_params[name] = value - step_size * m / (np.sqrt(v / bias2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                                 t=t, m=new_m, v=new_v)


def clip_gradients(grads: Gradients, max_norm: float = 5.0) -> Tuple[Gradients, float]:
    """Scale all gradients together so their global norm is at most max_norm"""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


# Finite-difference verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: Tuple[int, ...]
    entries_checked: int
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            'max_rel_error': self.max_rel_error,
            'worst_param': self.worst_param,
            'worst_index': list(self.worst_index),
            'entries_checked': self.entries_checked,
            'passed': self.passed,
        }


def random_network(rng: np.random.Generator) -> Tuple[NetworkSpec, Parameters, np.ndarray]:
    """Small random spec with a recurrent layer, its parameters and a batch of inputs"""
    input_size = int(rng.integers(2, 6))
    layers = [dense(int(rng.integers(3, 7))), relu()]
    if rng.random() < 0.5:
        layers.append(dropout(0.25))
    layers.extend([recurrent(int(rng.integers(3, 6))), output(int(rng.integers(2, 5)))])
    spec = NetworkSpec(input_size=input_size, layers=tuple(layers))
    params = init_params(spec, rng)
    # non-zero biases so every parameter contributes
    for name in params:
        if name.endswith('.b'):
            params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    inputs = rng.normal(size=(2, int(rng.integers(2, 5)), input_size))
    return spec, params, inputs


def gradient_check(spec: NetworkSpec, params: Parameters, inputs: np.ndarray, seed: int = 0,
                   step: float = 1e-5, rel_tol: float = 1e-4, abs_floor: float = 1e-7,
                   sign_flip: bool = False) -> GradCheckReport:
    """
    Compare backward against central differences of L = <w, outputs> + l2_penalty
    for a random weighting w. An entry passes when its absolute difference is
    below abs_floor or its relative difference is below rel_tol. `sign_flip`
    negates one analytic gradient entry to exercise the detector.
    """
    rng = np.random.default_rng(seed)
    dropout_seed = int(rng.integers(2 ** 31))
    outputs, trace = forward(params, spec, inputs, train=True, rng=dropout_seed)
    weights = rng.normal(size=outputs.shape)

    def loss(current: Parameters) -> float:
        out, _ = forward(current, spec, inputs, train=True, rng=dropout_seed)
        return float(np.sum(weights * out)) + l2_penalty(current, spec)

    analytic = backward(params, spec, trace, weights)
    if sign_flip:
        first = sorted(analytic)[0]
        flipped = analytic[first].copy()
        largest = int(np.argmax(np.abs(flipped)))
        flipped.flat[largest] = -flipped.flat[largest] if flipped.flat[largest] != 0 else 1.0
        analytic[first] = flipped

    worst = (0.0, '', ())
    failed = False
    checked = 0
    for name in sorted(params):
        for index in np.ndindex(params[name].shape):
            perturbed = copy_params(params)
            perturbed[name][index] += step
            plus = loss(perturbed)
            perturbed[name][index] -= 2 * step
            minus = loss(perturbed)
            numeric = (plus - minus) / (2 * step)
            exact = analytic[name][index]
            diff = abs(exact - numeric)
            checked += 1
            if diff <= abs_floor:
                continue
            rel = diff / max(abs(exact), abs(numeric))
            if rel > rel_tol:
                failed = True
            if rel > worst[0]:
                worst = (rel, name, tuple(int(i) for i in index))

    return GradCheckReport(max_rel_error=float(worst[0]), worst_param=worst[1], worst_index=worst[2],
                           entries_checked=checked, passed=not failed)


# Checkpoints

def save_checkpoint(filepath: str, spec: NetworkSpec, params: Parameters, step_counter: int = 0,
                    rng_state: Optional[Dict[str, Any]] = None):
    """JSON container: format_version, spec, per-parameter shape + flat data, rng_state, step_counter"""
    directory = os.path.dirname(filepath)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'spec': spec.to_dict(),
        'params': {name: {'shape': list(value.shape), 'data': value.ravel().tolist()}
                   for name, value in sorted(params.items())},
        'rng_state': rng_state,
        'step_counter': int(step_counter),
    }
    with open(filepath, 'w') as f:
        json.dump(payload, f)
    logger.debug(f"Checkpoint saved to {filepath}")


def load_checkpoint(filepath: str) -> Tuple[NetworkSpec, Parameters, Dict[str, Any]]:
    with open(filepath, 'r') as f:
        payload = json.load(f)
    version = payload.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r} in {filepath}")
    spec = NetworkSpec.from_dict(payload['spec'])
    params = {name: np.asarray(entry['data'], dtype=np.float64).reshape(entry['shape'])
              for name, entry in payload['params'].items()}
    expected = init_params(spec, np.random.default_rng(0))
    for name, value in expected.items():
        if name not in params or params[name].shape != value.shape:
            raise ShapeError(f"checkpoint parameter {name} is missing or has the wrong shape")
    return spec, params, {'rng_state': payload.get('rng_state'), 'step_counter': payload.get('step_counter', 0)}
