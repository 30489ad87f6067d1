"""LSTM layers, stacks and the quantile projection.

Gate rows are stacked in the order input, forget, cell, output, so that
``W[0:H]`` drives the input gate, ``W[H:2H]`` the forget gate and so on.
Sequences are time-major: ``(T, features)`` or ``(T, batch, features)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

CHECKPOINT_FORMAT = "hydra-lstm-parameters/1"


class EmptySequenceError(ValueError):
    pass


def _uniform(rng: np.random.Generator, bound: float, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class LstmLayerParams:
    W: Tensor  # (4H, input)
    U: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    def __post_init__(self):
        h4, n_in = self.W.shape
        if n_in <= 0 or h4 <= 0 or h4 % 4:
            raise DimensionError(f"invalid input weight shape {self.W.shape}")
        h = h4 // 4
        if self.U.shape != (h4, h) or self.b.shape != (h4,):
            raise DimensionError(
                f"inconsistent LSTM parameter shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, rng: np.random.Generator):
        """Uniform(-1/sqrt(H), 1/sqrt(H)) weights with the forget-gate bias raised by one."""
        if input_size <= 0 or hidden_size <= 0:
            raise ValueError("input_size and hidden_size must be positive")
        bound = 1.0 / math.sqrt(hidden_size)
        W = _uniform(rng, bound, (4 * hidden_size, input_size))
        U = _uniform(rng, bound, (4 * hidden_size, hidden_size))
        b = _uniform(rng, bound, (4 * hidden_size,))
        b.data[hidden_size : 2 * hidden_size] += 1.0
        return cls(W, U, b)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int):
        return cls(
            Tensor(np.zeros((4 * hidden_size, input_size)), requires_grad=True),
            Tensor(np.zeros((4 * hidden_size, hidden_size)), requires_grad=True),
            Tensor(np.zeros(4 * hidden_size), requires_grad=True),
        )

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.U": self.U, f"{prefix}.b": self.b}


def lstm_step(params: LstmLayerParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM step composed from elementary primitives.

    Accepts 1-D vectors or ``(batch, features)`` matrices and returns
    ``(h_t, c_t)`` with the same leading layout.
    """
    vector = x_t.data.ndim == 1
    if vector:
        x_t = ad.reshape(x_t, (1, -1))
        h_prev = ad.reshape(h_prev, (1, -1))
        c_prev = ad.reshape(c_prev, (1, -1))
    H = params.hidden_size
    if x_t.shape[1] != params.input_size:
        raise DimensionError(
            f"lstm_step: input has {x_t.shape[1]} features, layer expects {params.input_size}"
        )
    if h_prev.shape != (x_t.shape[0], H) or c_prev.shape != (x_t.shape[0], H):
        raise DimensionError(
            f"lstm_step: state shapes {h_prev.shape}, {c_prev.shape} do not match hidden size {H}"
        )
    z = ad.add(ad.add(ad.matmul(x_t, params.W.T), ad.matmul(h_prev, params.U.T)), params.b)
    i = ad.sigmoid(ad.slice_last(z, 0, H))
    f = ad.sigmoid(ad.slice_last(z, H, 2 * H))
    g = ad.tanh(ad.slice_last(z, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_last(z, 3 * H, 4 * H))
    c_t = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h_t = ad.mul(o, ad.tanh(c_t))
    if vector:
        return ad.reshape(h_t, (H,)), ad.reshape(c_t, (H,))
    return h_t, c_t


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_layer(params: LstmLayerParams, x: Tensor) -> Tensor:
    """Run one layer over a ``(T, B, F)`` sequence from zero state.

    A single fused primitive: the forward loop stores gate activations and
    the backward pass is hand-written backpropagation through time. It must
    agree with folding :func:`lstm_step` over the timesteps.
    """
    T, B, F = x.shape
    H = params.hidden_size
    if F != params.input_size:
        raise DimensionError(
            f"lstm_layer: input has {F} features, layer expects {params.input_size}"
        )
    W, U, bias = params.W.data, params.U.data, params.b.data
    xd = x.data
    xw = (xd.reshape(T * B, F) @ W.T).reshape(T, B, 4 * H) + bias
    gates = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = xw[t] + h @ U.T
        gt = gates[t]
        gt[:, : 2 * H] = _sigmoid(a[:, : 2 * H])
        gt[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        gt[:, 3 * H :] = _sigmoid(a[:, 3 * H :])
        c = gt[:, H : 2 * H] * c + gt[:, :H] * gt[:, 2 * H : 3 * H]
        h = gt[:, 3 * H :] * np.tanh(c)
        cells[t] = c
        hs[t] = h

    def backward_fn(gout: np.ndarray):
        dA = np.empty((T, B, 4 * H))
        dU = np.zeros_like(U)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            gt = gates[t]
            i, f, g, o = gt[:, :H], gt[:, H : 2 * H], gt[:, 2 * H : 3 * H], gt[:, 3 * H :]
            tc = np.tanh(cells[t])
            c_prev = cells[t - 1] if t > 0 else np.zeros((B, H))
            dh = gout[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = dA[t]
            da[:, :H] = dc * g * i * (1.0 - i)
            da[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
            da[:, 3 * H :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            if t > 0:
                dU += da.T @ hs[t - 1]
            dh_next = da @ U
        flat = dA.reshape(T * B, 4 * H)
        dW = flat.T @ xd.reshape(T * B, F)
        db = flat.sum(axis=0)
        dx = (flat @ W).reshape(T, B, F) if x.requires_grad else None
        return dx, dW, dU, db

    return ad.record(hs, (x, params.W, params.U, params.b), backward_fn, "lstm_layer")


@dataclass
class LstmStack:
    layers: list[LstmLayerParams]
    dropout: float = 0.0
    training: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an LSTM stack needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for k in range(1, len(self.layers)):
            if self.layers[k].input_size != self.layers[k - 1].hidden_size:
                raise DimensionError(
                    f"layer {k} expects {self.layers[k].input_size} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1].hidden_size}"
                )

    @classmethod
    def initialize(cls, input_size: int, hidden_sizes, rng: np.random.Generator, dropout=0.0):
        layers = []
        n_in = input_size
        for h in hidden_sizes:
            layers.append(LstmLayerParams.initialize(n_in, h, rng))
            n_in = h
        return cls(layers, dropout=dropout)

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.layer{k}"))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters("x").values())

    def run_sequence(self, inputs: Tensor, rng: np.random.Generator | int | None = None) -> Tensor:
        """Hidden states of the last layer for every timestep.

        Dropout masks are drawn once per call and per layer boundary and then
        held fixed across timesteps; kept activations are rescaled by
        1/(1-p). With ``training`` off the result does not depend on ``rng``.
        """
        if inputs.shape[0] == 0:
            raise EmptySequenceError("cannot run an LSTM over an empty sequence")
        squeeze = inputs.data.ndim == 2
        x = ad.reshape(inputs, (inputs.shape[0], 1, inputs.shape[1])) if squeeze else inputs
        if x.data.ndim != 3:
            raise DimensionError(f"expected (T, F) or (T, B, F) input, got shape {inputs.shape}")
        if x.shape[2] != self.input_size:
            raise DimensionError(
                f"input has {x.shape[2]} features, stack expects {self.input_size}"
            )
        use_dropout = self.training and self.dropout > 0.0
        if use_dropout and not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        for k, layer in enumerate(self.layers):
            x = lstm_layer(layer, x)
            if use_dropout and k < len(self.layers) - 1:
                keep = 1.0 - self.dropout
                mask = (rng.random((x.shape[1], x.shape[2])) < keep) / keep
                x = ad.mul(x, Tensor(np.broadcast_to(mask, x.shape)))
        if squeeze:
            x = ad.reshape(x, (x.shape[0], x.shape[2]))
        return x


@dataclass
class Projection:
    """Affine map from a hidden state to the (q10, q50, q90) outputs."""

    W: Tensor  # (3, H)
    b: Tensor  # (3,)

    @classmethod
    def initialize(cls, hidden_size: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(hidden_size)
        return cls(_uniform(rng, bound, (3, hidden_size)), _uniform(rng, bound, (3,)))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    def __call__(self, h_last: Tensor) -> Tensor:
        return linear_head(self.W, self.b, h_last)


def linear_head(W: Tensor, b: Tensor, h_last: Tensor) -> Tensor:
    if W.data.ndim != 2 or b.shape != (W.shape[0],) or h_last.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"linear_head: shapes W{W.shape} b{b.shape} h{h_last.shape} are inconsistent"
        )
    if h_last.data.ndim == 1:
        out = ad.matmul(ad.reshape(h_last, (1, -1)), W.T)
        return ad.reshape(ad.add(out, b), (W.shape[0],))
    return ad.add(ad.matmul(h_last, W.T), b)


def save_parameters(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write parameters as JSON: name, shape, row-major float64 values.

    Floats are written with ``repr`` so loading reproduces them exactly, and
    names are sorted so identical parameters give identical bytes.
    """
    entries = []
    for name in sorted(params):
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        entries.append(
            {"name": name, "shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
        )
    doc = {"format": CHECKPOINT_FORMAT, "parameters": entries}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_parameters(path: str | Path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    out = {}
    for entry in doc["parameters"]:
        arr = np.asarray(entry["values"], dtype=np.float64)
        out[entry["name"]] = arr.reshape(entry["shape"])
    return out


def assign_parameters(targets: Mapping[str, Tensor], values: Mapping[str, np.ndarray]) -> None:
    missing = sorted(set(targets) - set(values))
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for name, tensor in targets.items():
        arr = np.asarray(values[name], dtype=np.float64)
        if arr.shape != tensor.shape:
            raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {tensor.shape}")
        tensor.data[...] = arr
