"""Layers and the four-component multi-task model.

Architecture: a two-layer fully-connected encoder for static features and
a two-layer bidirectional LSTM encoder for the bucketed temporal features
are shared; their outputs are concatenated once and fed to two independent
three-layer heads (attrition, weight outcome), each ending in a sigmoid.
Every layer except the heads' output layers is followed by batch
normalization and dropout, in that order.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = "attrinet-ckpt-1"

_ACTIVATIONS = ("sigmoid", "tanh", "relu", "none")


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class DenseLayer:
    """Affine map with optional activation. Weight is (out, in)."""

    def __init__(self, in_width: int, out_width: int, activation: str = "none",
                 rng: np.random.Generator | None = None, name: str = "dense"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if in_width < 1 or out_width < 1:
            raise ValueError("layer widths must be positive")
        rng = rng or np.random.default_rng(0)
        self.activation = activation
        self.weight = Tensor(_glorot(rng, (out_width, in_width), in_width, out_width),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_width), requires_grad=True, name=f"{name}.bias")

    @property
    def in_width(self):
        return self.weight.shape[1]

    @property
    def out_width(self):
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_width:
            raise ad.ShapeMismatchError("dense_forward", x.shape, self.weight.shape)
        z = ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)
        if self.activation == "sigmoid":
            return ad.sigmoid(z)
        if self.activation == "tanh":
            return ad.tanh(z)
        if self.activation == "relu":
            return ad.relu(z)
        return z

    def parameters(self):
        return [self.weight, self.bias]


def dense_forward(layer: DenseLayer, x) -> Tensor:
    """activation(W x + b) applied to each row of a (B, in) batch."""
    return layer.forward(x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x)))


class BiLstmLayer:
    """Bidirectional LSTM: forward and backward passes over the sequence,
    concatenated along the feature axis (output width 2H). Both directions
    have identically-shaped parameters; gate order is [i, f, g, o] with the
    forget-gate bias initialized to +1.
    """

    def __init__(self, in_width: int, hidden: int,
                 rng: np.random.Generator | None = None, name: str = "bilstm"):
        if in_width < 1 or hidden < 1:
            raise ValueError("layer widths must be positive")
        rng = rng or np.random.default_rng(0)
        self.hidden = hidden

        def make(direction):
            wx = Tensor(_glorot(rng, (in_width, 4 * hidden), in_width, 4 * hidden),
                        requires_grad=True, name=f"{name}.{direction}.wx")
            wh = Tensor(_glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden),
                        requires_grad=True, name=f"{name}.{direction}.wh")
            b = np.zeros(4 * hidden)
            b[hidden : 2 * hidden] = 1.0
            return wx, wh, Tensor(b, requires_grad=True, name=f"{name}.{direction}.bias")

        self.fwd = make("fwd")
        self.bwd = make("bwd")

    @property
    def in_width(self):
        return self.fwd[0].shape[0]

    def forward(self, seq: Tensor) -> Tensor:
        if seq.data.ndim != 3 or seq.shape[2] != self.in_width:
            raise ad.ShapeMismatchError("bilstm_forward", seq.shape, self.fwd[0].shape)
        if seq.shape[1] < 1:
            raise ValueError("bilstm_forward: empty sequence")
        hf = ad.lstm_sequence(seq, *self.fwd, reverse=False)
        hb = ad.lstm_sequence(seq, *self.bwd, reverse=True)
        return ad.concat([hf, hb], axis=2)

    def parameters(self):
        return [*self.fwd, *self.bwd]


def bilstm_forward(layer: BiLstmLayer, seq) -> tuple[Tensor, Tensor]:
    """Run the layer over a (B, T, F) batch.

    Returns (output sequence (B, T, 2H), final state (B, 2H)) where the
    final state concatenates the forward direction at t=T-1 with the
    backward direction at t=0.
    """
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    out = layer.forward(seq)
    return out, bilstm_final_state(out, layer.hidden)


def bilstm_final_state(out_seq: Tensor, hidden: int) -> Tensor:
    batch, steps = out_seq.shape[0], out_seq.shape[1]
    last_f = ad.reshape(
        ad.slice_axis(ad.slice_axis(out_seq, steps - 1, steps, axis=1), 0, hidden, axis=2),
        (batch, hidden),
    )
    first_b = ad.reshape(
        ad.slice_axis(ad.slice_axis(out_seq, 0, 1, axis=1), hidden, 2 * hidden, axis=2),
        (batch, hidden),
    )
    return ad.concat([last_f, first_b], axis=1)


class BatchNormState:
    """Learned per-feature scale/shift plus running statistics."""

    def __init__(self, width: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.scale = Tensor(np.ones(width), requires_grad=True, name=f"{name}.scale")
        self.shift = Tensor(np.zeros(width), requires_grad=True, name=f"{name}.shift")
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return ad.batch_norm(x, self.scale, self.shift, self.running_mean,
                             self.running_var, self.momentum, self.eps, train)

    def parameters(self):
        return [self.scale, self.shift]


class RegBlock:
    """Batch normalization followed by dropout, with a private RNG stream so
    masks drawn here never perturb other blocks' streams."""

    def __init__(self, width: int, dropout_rate: float, momentum: float, eps: float,
                 seed_key, name: str = "reg"):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate {dropout_rate} outside [0, 1)")
        self.bn = BatchNormState(width, momentum, eps, name=name)
        self.dropout_rate = dropout_rate
        self._seed_key = tuple(seed_key)
        self.rng = np.random.default_rng(self._seed_key)
        self.frozen_stats = False

    def reseed(self, salt: int = 0):
        self.rng = np.random.default_rng(self._seed_key + (salt,))

    def forward(self, x: Tensor, train: bool) -> Tensor:
        bn_train = train and not self.frozen_stats
        y = self.bn.forward(x, bn_train)
        return ad.dropout(y, self.dropout_rate, self.rng, train)

    def parameters(self):
        return self.bn.parameters()


def regularization_forward(x, dropout_rate: float, bn: BatchNormState, mode: str,
                           rng: np.random.Generator | None = None) -> Tensor:
    """Normalize then (in train mode) drop units: batch statistics and a
    fresh mask in train mode, running statistics and identity in inference.
    """
    train = _check_mode(mode) == "train"
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = bn.forward(x, train)
    return ad.dropout(y, dropout_rate, rng or np.random.default_rng(0), train)


def _check_mode(mode: str) -> str:
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    return mode


@dataclass
class ModelConfig:
    """Widths, rates and the build seed for the multi-task model."""

    static_width: int
    temporal_width: int
    static_hidden: tuple[int, int] = (32, 16)
    lstm_hidden: tuple[int, int] = (32, 32)
    head_hidden: tuple[int, int] = (64, 32)
    dropout_rate: float = 0.2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def head_in_width(self) -> int:
        return self.static_hidden[-1] + 2 * self.lstm_hidden[-1]


class MultiTaskModel:
    """Shared static + temporal encoders feeding two task heads.

    Built through :func:`build_multitask_model`; identical (config, seed)
    pairs produce bit-identical parameters.
    """

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        self.frozen_shared = False
        pr = lambda k: np.random.default_rng((seed, 101, k))  # param streams

        s0, s1 = config.static_hidden
        self.static_layers = [
            DenseLayer(config.static_width, s0, "relu", pr(0), "static.0"),
            DenseLayer(s0, s1, "relu", pr(1), "static.1"),
        ]
        l0, l1 = config.lstm_hidden
        self.lstm_layers = [
            BiLstmLayer(config.temporal_width, l0, pr(2), "temporal.0"),
            BiLstmLayer(2 * l0, l1, pr(3), "temporal.1"),
        ]
        h0, h1 = config.head_hidden
        head_in = config.head_in_width()
        self.attrition_layers = [
            DenseLayer(head_in, h0, "relu", pr(4), "attrition.0"),
            DenseLayer(h0, h1, "relu", pr(5), "attrition.1"),
            DenseLayer(h1, 1, "sigmoid", pr(6), "attrition.2"),
        ]
        self.outcome_layers = [
            DenseLayer(head_in, h0, "relu", pr(7), "outcome.0"),
            DenseLayer(h0, h1, "relu", pr(8), "outcome.1"),
            DenseLayer(h1, 1, "sigmoid", pr(9), "outcome.2"),
        ]

        mk = lambda w, k: RegBlock(w, config.dropout_rate, config.bn_momentum,
                                   config.bn_eps, (seed, 977, k), name=f"reg.{k}")
        self.static_reg = [mk(s0, 0), mk(s1, 1)]
        self.lstm_reg = [mk(2 * l0, 2), mk(2 * l1, 3)]
        self.attrition_reg = [mk(h0, 4), mk(h1, 5)]
        self.outcome_reg = [mk(h0, 6), mk(h1, 7)]

    # -- structure -----------------------------------------------------

    def components(self) -> dict[str, list[Tensor]]:
        comp = {
            "static_encoder": [p for l in self.static_layers for p in l.parameters()]
            + [p for r in self.static_reg for p in r.parameters()],
            "temporal_encoder": [p for l in self.lstm_layers for p in l.parameters()]
            + [p for r in self.lstm_reg for p in r.parameters()],
            "attrition_head": [p for l in self.attrition_layers for p in l.parameters()]
            + [p for r in self.attrition_reg for p in r.parameters()],
            "outcome_head": [p for l in self.outcome_layers for p in l.parameters()]
            + [p for r in self.outcome_reg for p in r.parameters()],
        }
        return comp

    def parameters(self) -> list[Tensor]:
        return [p for plist in self.components().values() for p in plist]

    def _reg_blocks(self):
        return self.static_reg + self.lstm_reg + self.attrition_reg + self.outcome_reg

    def reseed_dropout(self, salt: int = 0):
        """Reset every dropout stream; equal salts reproduce equal masks."""
        for r in self._reg_blocks():
            r.reseed(salt)

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        names = ["static.0", "static.1", "temporal.0", "temporal.1",
                 "attrition.0", "attrition.1", "outcome.0", "outcome.1"]
        for name, r in zip(names, self._reg_blocks()):
            out.append((f"{name}.running_mean", r.bn.running_mean))
            out.append((f"{name}.running_var", r.bn.running_var))
        return out

    # -- forward -------------------------------------------------------

    def encode(self, static: Tensor, temporal: Tensor, train: bool) -> Tensor:
        x = static
        for layer, reg in zip(self.static_layers, self.static_reg):
            x = reg.forward(layer.forward(x), train)
        seq = temporal
        for layer, reg in zip(self.lstm_layers, self.lstm_reg):
            seq = layer.forward(seq)
            b, t, w = seq.shape
            flat = reg.forward(ad.reshape(seq, (b * t, w)), train)
            seq = ad.reshape(flat, (b, t, w))
        summary = bilstm_final_state(seq, self.lstm_layers[-1].hidden)
        return ad.concat([x, summary], axis=1)

    def _head(self, layers, regs, fused: Tensor, train: bool) -> Tensor:
        h = fused
        for layer, reg in zip(layers[:-1], regs):
            h = reg.forward(layer.forward(h), train)
        out = layers[-1].forward(h)
        return ad.reshape(out, (out.shape[0],))

    def forward(self, static, temporal, mode: str = "inference") -> tuple[Tensor, Tensor]:
        train = _check_mode(mode) == "train"
        static = static if isinstance(static, Tensor) else Tensor(np.atleast_2d(static))
        temporal = temporal if isinstance(temporal, Tensor) else Tensor(temporal)
        if temporal.data.ndim == 2:
            temporal = Tensor(temporal.data[None, :, :])
        if static.shape[1] != self.config.static_width:
            raise ad.ShapeMismatchError("model_forward", static.shape,
                                        (None, self.config.static_width))
        if temporal.shape[2] != self.config.temporal_width:
            raise ad.ShapeMismatchError("model_forward", temporal.shape,
                                        (None, None, self.config.temporal_width))
        fused = self.encode(static, temporal, train)
        p_att = self._head(self.attrition_layers, self.attrition_reg, fused, train)
        p_out = self._head(self.outcome_layers, self.outcome_reg, fused, train)
        return p_att, p_out

    def predict(self, static: np.ndarray, temporal: np.ndarray, batch: int = 1024):
        """Inference-mode probabilities for numpy inputs, in chunks."""
        pa, po = [], []
        for k in range(0, len(static), batch):
            a, o = self.forward(static[k : k + batch], temporal[k : k + batch], "inference")
            pa.append(a.data)
            po.append(o.data)
        return np.concatenate(pa), np.concatenate(po)


def build_multitask_model(config: ModelConfig, seed: int) -> MultiTaskModel:
    """Construct and initialize the model. Weights are fan-scaled uniform
    draws, biases zero (LSTM forget gates +1); same seed, same bits."""
    return MultiTaskModel(config, seed)


def model_forward(model: MultiTaskModel, static, temporal, mode: str = "inference"):
    """Run encoders once, concatenate once, evaluate both heads."""
    return model.forward(static, temporal, mode)


def freeze_shared(model: MultiTaskModel) -> MultiTaskModel:
    """Mark the shared encoders untrainable.

    Their weights stop receiving optimizer updates, and their batch-norm
    sites switch to running statistics permanently so no buffer drifts
    during fine-tuning.
    """
    comp = model.components()
    for p in comp["static_encoder"] + comp["temporal_encoder"]:
        p.requires_grad = False
    for r in model.static_reg + model.lstm_reg:
        r.frozen_stats = True
    model.frozen_shared = True
    return model


def component_checksum(model: MultiTaskModel, names=("static_encoder", "temporal_encoder")) -> str:
    """SHA-256 over the selected components' parameters and BN buffers."""
    comp = model.components()
    hasher = hashlib.sha256()
    for name in names:
        for p in comp[name]:
            hasher.update(p.data.tobytes())
    prefixes = tuple(n.split("_")[0] for n in names)
    for bufname, arr in model.buffers():
        if bufname.startswith(prefixes):
            hasher.update(arr.tobytes())
    return hasher.hexdigest()


# ---------------------------------------------------------------------------
# checkpointing


def _named_params(model: MultiTaskModel) -> list[tuple[str, Tensor]]:
    return [(p.name, p) for p in model.parameters()]


def save_model(model: MultiTaskModel, path) -> None:
    """Write a versioned npz checkpoint: layer config as JSON plus every
    parameter and running-statistic array. Round-trips bit-exactly."""
    arrays = {"param/" + name: p.data for name, p in _named_params(model)}
    for name, arr in model.buffers():
        arrays["buffer/" + name] = arr
    header = {
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "frozen_shared": model.frozen_shared,
        "config": asdict(model.config),
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> MultiTaskModel:
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"].tobytes()).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']!r}")
        cfg = header["config"]
        for key in ("static_hidden", "lstm_hidden", "head_hidden"):
            cfg[key] = tuple(cfg[key])
        model = MultiTaskModel(ModelConfig(**cfg), header["seed"])
        for name, p in _named_params(model):
            p.data = np.ascontiguousarray(z["param/" + name], dtype=np.float64)
        for name, arr in model.buffers():
            arr[:] = z["buffer/" + name]
    if header["frozen_shared"]:
        freeze_shared(model)
    return model
