"""Shared MLP feature extractor with three linear heads and the joint loss.

Parameter blocks are kept in a plain dict of float64 arrays:

    phi.fc1.weight / phi.fc1.bias   flatten -> hidden
    phi.fc2.weight / phi.fc2.bias   hidden  -> feature_dim
    head_cbs.weight / .bias         C-way classifier used for prediction
    head_rrs.weight / .bias         auxiliary C-way classifier
    head_ss.weight  / .bias         4-way rotation classifier

All heads read the same ``phi`` features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndgrad import Tensor, linear, relu, rotate90, scale, add, softmax_cross_entropy

HEAD_CBS = "head_cbs"
HEAD_RRS = "head_rrs"
HEAD_SS = "head_ss"
HEADS = (HEAD_CBS, HEAD_RRS, HEAD_SS)
NUM_ROTATIONS = 4


@dataclass
class ModelParams:
    blocks: dict
    num_classes: int
    input_shape: tuple
    hidden: int
    feature_dim: int

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.blocks.items()}, self.num_classes,
                           self.input_shape, self.hidden, self.feature_dim)

    def head_names(self, head):
        return f"{head}.weight", f"{head}.bias"

    def block_names(self, prefix):
        return [n for n in self.blocks if n.startswith(prefix)]

    def equal(self, other):
        return (self.blocks.keys() == other.blocks.keys()
                and all(np.array_equal(v, other.blocks[k]) for k, v in self.blocks.items()))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def scaled(self, s):
        return LossWeights(self.lambda1 * s, self.lambda2 * s, self.lambda3 * s)


@dataclass
class BatchTriple:
    cbs_images: np.ndarray
    cbs_labels: np.ndarray
    rrs_images: np.ndarray
    rrs_labels: np.ndarray
    rot_images: np.ndarray | None = None
    rot_labels: np.ndarray | None = None


def _gaussian(rng, fan_out, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


def init_head(blocks, head, out_dim, feature_dim, rng):
    blocks[f"{head}.weight"] = _gaussian(rng, out_dim, feature_dim)
    blocks[f"{head}.bias"] = np.zeros(out_dim)


def init_params(num_classes, input_shape, hidden, feature_dim, rng):
    """He-style Gaussian weights, zero biases."""
    d_in = int(np.prod(input_shape))
    blocks = {
        "phi.fc1.weight": _gaussian(rng, hidden, d_in),
        "phi.fc1.bias": np.zeros(hidden),
        "phi.fc2.weight": _gaussian(rng, feature_dim, hidden),
        "phi.fc2.bias": np.zeros(feature_dim),
    }
    init_head(blocks, HEAD_CBS, num_classes, feature_dim, rng)
    init_head(blocks, HEAD_RRS, num_classes, feature_dim, rng)
    init_head(blocks, HEAD_SS, NUM_ROTATIONS, feature_dim, rng)
    return ModelParams(blocks, int(num_classes), tuple(input_shape), int(hidden), int(feature_dim))


def bind(params, tape):
    """Register every parameter block on ``tape``; returns name -> leaf tensor."""
    return {name: tape.param(arr, name) for name, arr in params.blocks.items()}


def _weights(params):
    if isinstance(params, ModelParams):
        return {k: Tensor(v) for k, v in params.blocks.items()}
    return params


def forward_features(params, images):
    """phi(x): flatten -> fc1 -> relu -> fc2 -> relu.

    ``params`` is either a :class:`ModelParams` (no gradient tracking) or the
    mapping returned by :func:`bind`.
    """
    w = _weights(params)
    x = np.asarray(images, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    d_in = w["phi.fc1.weight"].shape[1]
    if x.shape[1] != d_in:
        raise ValueError(f"images flatten to {x.shape[1]} values, backbone expects {d_in}")
    h = relu(linear(x, w["phi.fc1.weight"], w["phi.fc1.bias"]))
    return relu(linear(h, w["phi.fc2.weight"], w["phi.fc2.bias"]))


def head_logits(params, head, features):
    w = _weights(params)
    return linear(features, w[f"{head}.weight"], w[f"{head}.bias"])


def head_loss(params, head, images, labels):
    """Mean cross-entropy of ``head`` on (images, labels)."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    w = _weights(params)
    arity = w[f"{head}.bias"].shape[0]
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= arity):
        raise ValueError(f"labels outside [0, {arity}) for head {head}")
    return softmax_cross_entropy(head_logits(w, head, forward_features(w, images)), labels)


def joint_loss(params, triple, weights, parts=None):
    """lambda1 * l_cbs + lambda2 * l_rrs + lambda3 * l_ss.

    Terms with zero weight, or whose batch is missing, are left out of the
    graph entirely so their heads receive no gradient. If ``parts`` is a
    dict, the individual (unweighted) loss tensors are stored in it.
    """
    w = _weights(params)
    terms = [
        (weights.lambda1, HEAD_CBS, triple.cbs_images, triple.cbs_labels),
        (weights.lambda2, HEAD_RRS, triple.rrs_images, triple.rrs_labels),
        (weights.lambda3, HEAD_SS, triple.rot_images, triple.rot_labels),
    ]
    out = None
    for lam, head, images, labels in terms:
        if lam == 0 or images is None:
            continue
        loss = head_loss(w, head, images, labels)
        if parts is not None:
            parts[head] = loss
        term = scale(loss, lam)
        out = term if out is None else add(out, term)
    if out is None:
        raise ValueError("no active loss term")
    return out


def make_rotation_batch(cbs_images, rrs_images, rng):
    """Concatenate CBS then RRS images and rotate each by a random quarter-turn.

    Returns (rotated images, angle labels in {0, 1, 2, 3}).
    """
    images = np.concatenate([np.asarray(cbs_images), np.asarray(rrs_images)])
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"rotation batch needs square images, got {images.shape[1:]}")
    turns = rng.integers(0, NUM_ROTATIONS, size=images.shape[0])
    return rotate90(images, turns), turns


def rotation_copies(images, labels):
    """Four rotated copies of each image, keeping its class label (augmentation)."""
    images = np.asarray(images)
    rotated = np.concatenate([rotate90(images, k) for k in range(NUM_ROTATIONS)])
    return rotated, np.tile(np.asarray(labels), NUM_ROTATIONS)


def predict(params, images, head=HEAD_CBS):
    """Arg-max class from ``head``; ties go to the lowest index."""
    logits = head_logits(params, head, forward_features(params, images)).data
    return np.argmax(logits, axis=1)


def to_blocks(params):
    return dict(params.blocks)


def from_blocks(blocks, input_shape):
    fc1 = blocks["phi.fc1.weight"]
    fc2 = blocks["phi.fc2.weight"]
    if int(np.prod(input_shape)) != fc1.shape[1]:
        raise ValueError("checkpoint input size does not match image shape")
    return ModelParams(dict(blocks), blocks["head_cbs.weight"].shape[0], tuple(input_shape),
                       fc1.shape[0], fc2.shape[0])
