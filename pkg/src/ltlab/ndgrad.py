"""Small dense-tensor core with tape-based reverse-mode differentiation.

Only the handful of operations the long-tail model needs are provided:
affine maps, ReLU, softmax cross-entropy, scalar arithmetic for combining
losses, SGD with momentum, a cosine learning-rate schedule and exact
quarter-turn rotation of square image batches.

Everything is float64. A :class:`Tape` records operations in execution order,
which is already a topological order, so :func:`backward` simply walks the
record in reverse.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "StaleTapeError",
    "Tensor",
    "Tape",
    "linear",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "per_sample_cross_entropy",
    "add",
    "scale",
    "total",
    "backward",
    "SGD",
    "sgd_step",
    "cosine_lr",
    "rotate90",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class StaleTapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    """A float64 array, optionally recorded on a tape.

    Tensors are treated as immutable once created; operations always return
    new tensors.
    """

    __slots__ = ("data", "tape", "index", "name", "parents", "grad_fn")

    def __init__(self, data, tape=None, index=-1, name=None, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.tape = tape
        self.index = index
        self.name = name
        self.parents = parents
        self.grad_fn = grad_fn

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


class Tape:
    """Records differentiable operations for a single backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def param(self, data, name):
        """Register a leaf whose gradient should be reported under ``name``."""
        return self._push(Tensor(data, name=name))

    def constant(self, data):
        return Tensor(data)

    def record(self, data, parents, grad_fn):
        if self.consumed:
            raise StaleTapeError("tape already consumed by backward(); record a new one")
        out = Tensor(data, parents=parents, grad_fn=grad_fn)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("operation produced non-finite values")
        return self._push(out)

    def _push(self, t):
        t.tape = self
        t.index = len(self.nodes)
        self.nodes.append(t)
        return t


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _emit(data, parents, grad_fn):
    tape = _tape_of(*parents)
    if tape is None:
        out = Tensor(data)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("operation produced non-finite values")
        return out
    return tape.record(data, parents, grad_fn)


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for x of shape (B, D_in) and weight (D_out, D_in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"linear expects 2-D input/weight and 1-D bias, got "
                         f"{x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}, "
                         f"bias {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def grad_fn(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit(out, (x, weight, bias), grad_fn)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def grad_fn(g):
        return (g * mask,)

    return _emit(out, (x,), grad_fn)


def softmax(logits):
    """Row-wise softmax of a plain array (max-subtracted)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_targets(targets, n_rows, n_classes):
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != n_rows:
        raise ShapeError(f"expected {n_rows} targets, got shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if n_rows and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValueError(f"target out of range [0, {n_classes})")
    return targets


def per_sample_cross_entropy(logits, targets):
    """Per-row ``-log softmax(logits)[target]`` on plain arrays."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = _check_targets(targets, logits.shape[0], logits.shape[1])
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    return log_norm - z[np.arange(len(targets)), targets]


def softmax_cross_entropy(logits, targets):
    """Mean cross-entropy over the batch; returns a scalar tensor."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    b, c = logits.shape
    targets = _check_targets(targets, b, c)
    if b == 0:
        raise ShapeError("empty batch")
    losses = per_sample_cross_entropy(logits.data, targets)
    out = np.array(losses.mean())
    probs = softmax(logits.data)

    def grad_fn(g):
        d = probs.copy()
        d[np.arange(b), targets] -= 1.0
        return (d * (g / b),)

    return _emit(out, (logits,), grad_fn)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g, g

    return _emit(a.data + b.data, (a, b), grad_fn)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _emit(a.data * s, (a,), grad_fn)


def total(a):
    """Sum of all entries as a scalar tensor."""
    a = _as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape),)

    return _emit(np.array(a.data.sum()), (a,), grad_fn)


def backward(tape, loss):
    """Reverse-mode pass from a scalar ``loss``.

    Returns ``{name: gradient}`` for every named leaf on the tape. Leaves the
    loss does not reach get an exact zero gradient. A tape can be
    differentiated once.
    """
    if tape.consumed:
        raise StaleTapeError("backward() already called on this tape")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    tape.consumed = True

    grads: list = [None] * len(tape.nodes)
    grads[loss.index] = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads[node.index]
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if parent.tape is not tape:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = np.array(pg, dtype=np.float64)
            else:
                grads[parent.index] = grads[parent.index] + pg

    out = {}
    for node in tape.nodes:
        if node.name is None:
            continue
        g = grads[node.index]
        out[node.name] = np.zeros_like(node.data) if g is None else np.asarray(g).reshape(node.shape)
    return out


class SGD:
    """SGD with heavy-ball momentum: ``v = m*v + g; p -= lr*v`` (in place).

    With ``weight_decay`` > 0 the gradient becomes ``g + weight_decay * p``
    for every block that takes part in the step. Blocks whose gradient is
    exactly zero and which have no velocity yet are skipped entirely, decay
    included, so untouched heads stay bit-identical.
    """

    def __init__(self, momentum=0.9, weight_decay=0.0):
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            v = self.velocity.get(name)
            if v is None:
                if not np.any(g):
                    # untouched block: keep it bit-identical
                    continue
                if self.weight_decay:
                    g = g + self.weight_decay * p
                v = g.copy()
            else:
                if self.weight_decay:
                    g = g + self.weight_decay * p
                v = self.momentum * v + g
            self.velocity[name] = v
            params[name] = p - lr * v
        return params

    def reset(self, names=None):
        if names is None:
            self.velocity.clear()
        else:
            for n in names:
                self.velocity.pop(n, None)


def sgd_step(params, grads, lr, momentum=0.0, velocity=None):
    """Functional form of one momentum step; returns (new_params, new_velocity)."""
    opt = SGD(momentum)
    opt.velocity = {k: v.copy() for k, v in (velocity or {}).items()}
    new = opt.step({k: v.copy() for k, v in params.items()}, grads, lr)
    return new, opt.velocity


def cosine_lr(step, total_steps, lr0):
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def rotate90(batch, quarter_turns):
    """Rotate each B x H x W image counter-clockwise by 90 degrees * quarter_turns.

    ``quarter_turns`` is an int or a length-B integer array with values in
    {0, 1, 2, 3}. Pure index permutation; values are copied unchanged.
    """
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] != batch.shape[2]:
        raise ShapeError(f"rotate90 needs a B x H x W batch of square images, got {batch.shape}")
    turns = np.broadcast_to(np.asarray(quarter_turns, dtype=np.int64), (batch.shape[0],))
    if np.any((turns < 0) | (turns > 3)):
        raise ValueError("quarter_turns must be in {0, 1, 2, 3}")
    out = np.empty_like(batch)
    for k in range(4):
        sel = turns == k
        if np.any(sel):
            out[sel] = np.rot90(batch[sel], k, axes=(1, 2))
    return out


# ---------------------------------------------------------------------------
# checkpoint files

CKPT_MAGIC = b"LTCK"
CKPT_VERSION = 1


def save_checkpoint(path, blocks):
    """Write named float64 blocks (insertion order kept) to ``path``."""
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Read blocks written by :func:`save_checkpoint`; raises CheckpointError on damage."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        blocks[name] = arr
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last block")
    return blocks
