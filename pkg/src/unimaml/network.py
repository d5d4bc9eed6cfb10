"""MLP encoder with bias-free per-class linear heads.

The classifier is ``argmax_c heads[c] . f(x)`` where ``f`` is a stack of
affine layers, each followed by a ReLU. With no layers ``f`` is the
identity. Everything is float64.

Losses over a batch are *summed*, not averaged.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .episodes import Permutation
from .errors import FormatError, HeadModeError

CHECKPOINT_MAGIC = b"UMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Encoder layers ``(W, b)`` plus a head matrix.

    ``heads`` has shape ``(N, F)``; when ``shared`` is set it holds exactly one
    row, the single head that gets duplicated per class at adaptation time.
    The same type doubles as a gradient container.
    """

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    heads: np.ndarray
    shared: bool = False

    def __post_init__(self):
        width = None
        for i, (W, b) in enumerate(self.layers):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} do not match")
            if width is not None and W.shape[1] != width:
                raise ValueError(f"layer {i} expects input width {W.shape[1]}, previous layer emits {width}")
            width = W.shape[0]
        if self.heads.ndim != 2:
            raise ValueError(f"heads must be 2-D, got shape {self.heads.shape}")
        if width is not None and self.heads.shape[1] != width:
            raise ValueError(f"head length {self.heads.shape[1]} != feature width {width}")
        if self.shared and self.heads.shape[0] != 1:
            raise ValueError("a shared head set carries exactly one vector")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1] if self.layers else self.heads.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.heads.shape[1]

    @property
    def n_heads(self) -> int:
        return self.heads.shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [W.shape[0] for W, _ in self.layers]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in declaration order: W0, b0, W1, b1, ..., heads."""
        out = []
        for W, b in self.layers:
            out += [W, b]
        out.append(self.heads)
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> ParamSet:
        arrays = list(arrays)
        n = len(self.layers)
        if len(arrays) != 2 * n + 1:
            raise ValueError(f"expected {2 * n + 1} arrays, got {len(arrays)}")
        for old, new in zip(self.arrays(), arrays):
            if old.shape != new.shape:
                raise ValueError(f"array shape {new.shape} does not match {old.shape}")
        layers = tuple((arrays[2 * i], arrays[2 * i + 1]) for i in range(n))
        return ParamSet(layers, arrays[-1], self.shared)

    def copy(self) -> ParamSet:
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> ParamSet:
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equals(self, other: ParamSet) -> bool:
        """Bit-exact equality of structure and values."""
        if self.shared != other.shared or len(self.layers) != len(other.layers):
            return False
        return all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


GradSet = ParamSet


def check_congruent(a: ParamSet, b: ParamSet) -> None:
    if a.shared != b.shared or len(a.layers) != len(b.layers):
        raise ValueError("parameter sets differ in structure")
    for x, y in zip(a.arrays(), b.arrays()):
        if x.shape != y.shape:
            raise ValueError(f"parameter shapes differ: {x.shape} vs {y.shape}")


def init_params(
    input_dim: int,
    layer_sizes: Sequence[int],
    n_heads: int,
    seed: int,
    shared: bool = False,
) -> ParamSet:
    """He-uniform encoder, zero biases, heads from Uniform(-1/sqrt(F), 1/sqrt(F))."""
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = input_dim
    for width in layer_sizes:
        bound = math.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(width, fan_in)), np.zeros(width)))
        fan_in = width
    heads = random_heads(1 if shared else n_heads, fan_in, rng)
    return ParamSet(tuple(layers), heads, shared)


def random_heads(n: int, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    bound = 1.0 / math.sqrt(feature_dim)
    return rng.uniform(-bound, bound, size=(n, feature_dim))


# --- forward / backward -----------------------------------------------------


def _as_batch(params: ParamSet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(f"input of shape {x.shape} does not match input dim {params.input_dim}")
    return x


def _encode(params: ParamSet, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    h = x
    for W, b in params.layers:
        h = np.maximum(h @ W.T + b, 0.0)
        acts.append(h)
    return acts


def _head_logits(features: np.ndarray, heads: np.ndarray) -> np.ndarray:
    # Each logit is reduced on its own, so permuting the heads permutes the
    # logits bit-for-bit (a BLAS product may take different paths per column).
    return (features[:, None, :] * heads[None, :, :]).sum(axis=-1)


def features(params: ParamSet, x: np.ndarray) -> np.ndarray:
    return _encode(params, _as_batch(params, x))[-1]


def forward_logits(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Logits ``heads[c] . f(x)`` for one vector (shape (N,)) or a batch (shape (B, N))."""
    if params.shared:
        raise HeadModeError("shared head must be duplicated before classification")
    single = np.ndim(x) == 1
    logits = _head_logits(features(params, x), params.heads)
    return logits[0] if single else logits


def predict(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """1-based argmax labels; ties go to the smallest label."""
    return np.argmax(np.atleast_2d(forward_logits(params, x)), axis=1) + 1


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(y: np.ndarray, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) == 0:
        raise ValueError("batch must be a non-empty 1-D label array")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 1 or y.max() > n:
        raise ValueError(f"labels must be integers in [1, {n}]")
    return y


def batch_loss(params: ParamSet, x: np.ndarray, y: np.ndarray) -> float:
    """Summed softmax cross-entropy."""
    logits = np.atleast_2d(forward_logits(params, x))
    y = _check_labels(y, params.n_heads)
    return float(-log_softmax(logits)[np.arange(len(y)), y - 1].sum())


def batch_loss_and_grad(
    params: ParamSet,
    x: np.ndarray,
    y: np.ndarray,
    encoder_grad: bool = True,
) -> tuple[float, GradSet]:
    """Summed cross-entropy and its exact gradient.

    With ``encoder_grad=False`` the layer gradients are left at zero, which
    is all a frozen-encoder inner loop needs.
    """
    if params.shared:
        raise HeadModeError("shared head must be duplicated before computing a loss")
    x = _as_batch(params, x)
    y = _check_labels(y, params.n_heads)
    if len(y) != len(x):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    acts = _encode(params, x)
    feats = acts[-1]
    logp = log_softmax(_head_logits(feats, params.heads))
    rows = np.arange(len(y))
    loss = float(-logp[rows, y - 1].sum())

    dlogits = np.exp(logp)
    dlogits[rows, y - 1] -= 1.0
    dheads = (dlogits[:, :, None] * feats[:, None, :]).sum(axis=0)

    dlayers = []
    if encoder_grad and params.layers:
        delta = dlogits @ params.heads
        for i in range(len(params.layers) - 1, -1, -1):
            W, _ = params.layers[i]
            delta = delta * (acts[i + 1] > 0)
            dlayers.append((delta.T @ acts[i], delta.sum(axis=0)))
            if i:
                delta = delta @ W
        dlayers.reverse()
    else:
        dlayers = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.layers]
    return loss, ParamSet(tuple(dlayers), dheads, False)


def accuracy(params: ParamSet, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(params, x) == np.asarray(y)))


def grad_check(params: ParamSet, x: np.ndarray, y: np.ndarray, epsilon: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    _, grad = batch_loss_and_grad(params, x, y)
    worst = 0.0
    arrays = [a.copy() for a in params.arrays()]
    for k, arr in enumerate(arrays):
        analytic = grad.arrays()[k]
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = batch_loss(params.with_arrays(arrays), x, y)
            arr[idx] = orig - epsilon
            down = batch_loss(params.with_arrays(arrays), x, y)
            arr[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


# --- head manipulation ------------------------------------------------------


def duplicate_head(params: ParamSet, n: int) -> ParamSet:
    """Copy a shared head into ``n`` identical per-class heads."""
    if not params.shared:
        raise HeadModeError("duplicate_head needs a shared head")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    heads = np.repeat(params.heads, n, axis=0)
    return ParamSet(tuple((W.copy(), b.copy()) for W, b in params.layers), heads, False)


def aggregate_head_grads(grad: GradSet) -> GradSet:
    """Fold per-class head gradients into the gradient of one shared head (their sum)."""
    if grad.shared:
        raise HeadModeError("gradient already has a shared head")
    return ParamSet(grad.layers, grad.heads.sum(axis=0, keepdims=True), True)


def average_heads(params: ParamSet) -> ParamSet:
    """Replace every head by the mean of all heads."""
    if params.shared:
        raise HeadModeError("average_heads needs per-class heads")
    mean = params.heads.mean(axis=0, keepdims=True)
    return replace(params, heads=np.repeat(mean, params.n_heads, axis=0))


def permute_heads(params: ParamSet, pi: Permutation) -> ParamSet:
    """Move head ``c`` to slot ``pi(c)``.

    Pairing the permuted heads with an episode is the same as pairing the
    original heads with that episode relabeled by ``pi``'s inverse.
    """
    if params.shared:
        raise HeadModeError("permute_heads needs per-class heads")
    if pi.n != params.n_heads:
        raise ValueError(f"permutation of size {pi.n} for {params.n_heads} heads")
    heads = np.empty_like(params.heads)
    heads[np.asarray(pi.mapping) - 1] = params.heads
    return replace(params, heads=heads)


def expand_for(params: ParamSet, n_way: int) -> ParamSet:
    """Per-class heads ready for an ``n_way`` episode."""
    if params.shared:
        return duplicate_head(params, n_way)
    if params.n_heads != n_way:
        raise ValueError(f"model has {params.n_heads} heads, episode is {n_way}-way")
    return params


# --- outer optimizer --------------------------------------------------------


@dataclass
class OuterOptimizer:
    """Momentum SGD with coupled weight decay and step-wise decay.

    Two parameter groups: encoder layers and heads. The learning rate of a
    group at ``epoch`` is ``base * decay_factor ** (epoch // decay_epochs)``.
    """

    lr_encoder: float = 0.001
    lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 0.1
    decay_epochs: int = 20
    velocity: ParamSet | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr_encoder < 0 or self.lr_heads < 0:
            raise ValueError("learning rates must be non-negative")
        if self.decay_epochs < 1:
            raise ValueError("decay_epochs must be >= 1")

    def learning_rates(self, epoch: int) -> tuple[float, float]:
        scale = self.decay_factor ** (epoch // self.decay_epochs)
        return self.lr_encoder * scale, self.lr_heads * scale


def outer_step(opt: OuterOptimizer, params: ParamSet, grad: GradSet, epoch: int) -> ParamSet:
    """One momentum-SGD step; updates ``opt.velocity`` in place, returns new params."""
    check_congruent(params, grad)
    if opt.velocity is None:
        opt.velocity = params.zeros_like()
    check_congruent(params, opt.velocity)
    lr_enc, lr_head = opt.learning_rates(epoch)
    theta = params.arrays()
    n_enc = len(theta) - 1
    new_theta, new_v = [], []
    for k, (p, g, v) in enumerate(zip(theta, grad.arrays(), opt.velocity.arrays())):
        if opt.weight_decay:
            g = g + opt.weight_decay * p
        v = opt.momentum * v + g if opt.momentum else g
        lr = lr_enc if k < n_enc else lr_head
        new_v.append(v)
        new_theta.append(p - lr * v)
    opt.velocity = params.with_arrays(new_v)
    return params.with_arrays(new_theta)


def sgd_step(params: ParamSet, grad: GradSet, lr: float, update_encoder: bool = True) -> ParamSet:
    """Plain ``theta - lr * g``; used by the inner loop."""
    layers = params.layers
    if update_encoder:
        layers = tuple((W - lr * gW, b - lr * gb) for (W, b), (gW, gb) in zip(params.layers, grad.layers))
    return ParamSet(layers, params.heads - lr * grad.heads, params.shared)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(params: ParamSet, path: str | Path, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta.update(
        input_dim=params.input_dim,
        layer_sizes=params.layer_sizes,
        n_heads=params.n_heads,
        head_mode="shared" if params.shared else "per_class",
    )
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    parts += [np.asarray(a, dtype="<f8").tobytes() for a in params.arrays()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", offset=0)
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if 12 + meta_len > len(data):
        raise FormatError(f"{path}: metadata runs past end of file", offset=12)
    try:
        meta = json.loads(data[12 : 12 + meta_len].decode("utf-8"))
        input_dim = int(meta["input_dim"])
        sizes = [int(s) for s in meta["layer_sizes"]]
        n_heads = int(meta["n_heads"])
        shared = meta["head_mode"] == "shared"
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad metadata ({exc})", offset=12) from exc

    shapes = []
    fan_in = input_dim
    for width in sizes:
        shapes += [(width, fan_in), (width,)]
        fan_in = width
    shapes.append((n_heads, fan_in))
    offset = 12 + meta_len
    arrays = []
    for shape in shapes:
        count = math.prod(shape)
        if offset + 8 * count > len(data):
            raise FormatError(f"{path}: parameter data truncated", offset=offset)
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy())
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset=offset)
    layers = tuple((arrays[2 * i], arrays[2 * i + 1]) for i in range(len(sizes)))
    try:
        params = ParamSet(layers, arrays[-1], shared)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}", offset=12) from exc
    return params, meta
