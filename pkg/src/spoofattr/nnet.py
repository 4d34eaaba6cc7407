"""Small dense networks: ReLU hidden layers, softmax head, Adam, mini-batches.

Everything runs in float64 numpy.  One seeded generator drives initialisation
and per-epoch shuffling, so identical seeds give bit-identical trajectories.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, MagicMismatch, NonFiniteActivation, NonFiniteLoss

LOG_CLAMP = 1e-12
CKPT_MAGIC = b"PAM1"
ACTIVATIONS = ("relu", "softmax", "linear")


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(pred, target) -> float:
    """``-log pred[target]`` for a one-hot target, with pred clamped at 1e-12."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"prediction shape {pred.shape} vs target shape {target.shape}")
    return float(-np.sum(target * np.log(np.maximum(pred, LOG_CLAMP)), axis=-1))


@dataclass
class Dense:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DimensionMismatch(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not match"
            )

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


@dataclass
class MLP:
    layers: list

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise DimensionMismatch(f"layer output {a.n_out} does not feed input {b.n_in}")

    @classmethod
    def build(cls, sizes, rng: np.random.Generator, head: str = "softmax") -> "MLP":
        """He-uniform weights, zero biases; ``sizes`` = [in, h1, ..., out]."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / n_in)
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            act = head if i == len(sizes) - 2 else "relu"
            layers.append(Dense(w, np.zeros(n_out), act))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def copy(self) -> "MLP":
        return MLP([Dense(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers])

    def parameters(self) -> list:
        return [p for l in self.layers for p in (l.weights, l.biases)]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for l in self.layers:
            n = l.weights.size
            l.weights = vec[pos:pos + n].reshape(l.weights.shape).copy()
            pos += n
            l.biases = vec[pos:pos + l.n_out].copy()
            pos += l.n_out
        if pos != vec.size:
            raise DimensionMismatch(f"flat vector has {vec.size} entries, model needs {pos}")

    def _activations(self, x):
        outs = [x]
        h = x
        for l in self.layers:
            z = h @ l.weights.T + l.biases
            if l.activation == "relu":
                h = np.maximum(z, 0.0)
            elif l.activation == "softmax":
                h = softmax(z)
            else:
                h = z
            outs.append(h)
        return outs

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise DimensionMismatch(f"input has {x.shape[-1]} features, network expects {self.n_in}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteActivation("non-finite input")
        out = self._activations(x)[-1]
        if not np.all(np.isfinite(out)):
            raise NonFiniteActivation("network produced a non-finite output")
        return out

    __call__ = forward

    def loss_and_grads(self, x, y):
        """Mean cross-entropy over the batch and its gradients.

        Requires a softmax head.  Gradients come back in ``parameters()`` order.
        """
        if self.layers[-1].activation != "softmax":
            raise ValueError("cross-entropy training needs a softmax head")
        acts = self._activations(x)
        p = acts[-1]
        n = x.shape[0]
        loss = float(-np.sum(y * np.log(np.maximum(p, LOG_CLAMP))) / n)
        delta = (p - y) / n
        grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h_prev = acts[i]
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ h_prev)
            if i:
                delta = (delta @ layer.weights) * (h_prev > 0)
        grads.reverse()
        return loss, grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, params: list, grads: list) -> None:
        """In-place Adam step with bias correction."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: MLP
    snapshots: list  # flat parameter vector after each epoch
    losses: list  # mean training cross-entropy per epoch


def train(model: MLP, x, y, opt: AdamState, epochs: int = 100, batch_size: int = 256, seed: int = 0) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy; shuffles every epoch.

    The model is updated in place.  A snapshot of the parameters is taken
    after each epoch so callers can pick the epoch externally.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataset("no training samples")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} inputs for {y.shape[0]} targets")
    if y.shape[1] != model.n_out or x.shape[1] != model.n_in:
        raise DimensionMismatch("data does not match network dimensions")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("targets must be one-hot rows")
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    params = model.parameters()
    snapshots, losses = [], []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = model.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: loss {loss}")
            total += loss * len(idx)
            opt.update(params, grads)
        losses.append(total / n)
        snapshots.append(model.flat())
    return TrainResult(model, snapshots, losses)


# ---------------------------------------------------------------------------
# checkpoints: b"PAM1" | u32 header bytes | JSON header | float32 LE parameters


def save_checkpoint(model: MLP, path) -> None:
    header = json.dumps(
        {"layers": [{"in": l.n_in, "out": l.n_out, "activation": l.activation} for l in model.layers]},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(model.flat().astype("<f4").tobytes())


def load_checkpoint(path) -> MLP:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise MagicMismatch(f"{path}: not a PAM1 checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    params = np.frombuffer(raw[8 + hlen:], dtype="<f4").astype(np.float64)
    layers = [
        Dense(np.zeros((spec["out"], spec["in"])), np.zeros(spec["out"]), spec["activation"])
        for spec in header["layers"]
    ]
    model = MLP(layers)
    model.set_flat(params)
    return model


def round_to_f32(model: MLP) -> MLP:
    """Copy with parameters rounded to float32, i.e. exactly what a checkpoint stores."""
    out = model.copy()
    out.set_flat(out.flat().astype(np.float32).astype(np.float64))
    return out
