"""Training loops for the proposed joint model and all baselines."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .ndgrad import SGD, NonFiniteError, Tape, backward, cosine_lr, per_sample_cross_entropy
from .sampling import (STREAM_INIT, STREAM_ROT, ClassBalancedSampler, RandomSampler,
                       make_rng)

log = logging.getLogger(__name__)

RRS_ONLY = "RRSOnly"
CBS_ONLY = "CBSOnly"
CBS_RRS = "CBS_RRS"
CBS_RRS_SS = "CBS_RRS_SS"
FT_RRS_CBS = "FtRRSThenCBS"
ROT_AUGMENT = "RotAugment"
STRATEGIES = (RRS_ONLY, CBS_ONLY, CBS_RRS, CBS_RRS_SS, FT_RRS_CBS, ROT_AUGMENT)

STREAM_HEAD_REINIT = 5


class TrainingDiverged(RuntimeError):
    def __init__(self, message, record, log=None):
        super().__init__(message)
        self.record = record
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = CBS_RRS
    iterations: int = 4000
    batch_size: int = 64
    per_class: int = 4
    weights: M.LossWeights = field(default_factory=M.LossWeights)
    lr0: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 0
    stage1_fraction: float = 0.5
    stage2_lr_fraction: float = 0.1
    hidden: int = 128
    feature_dim: int = 64
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.uses_cbs and (self.per_class < 1 or self.batch_size % self.per_class):
            raise ValueError(f"Z={self.per_class} must divide S={self.batch_size}")
        if not 0 < self.stage1_fraction < 1:
            raise ValueError("stage1_fraction must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.lr0 < 0 or self.stage2_lr_fraction < 0:
            raise ValueError("learning rates must be non-negative")

    @property
    def uses_cbs(self):
        return self.strategy != RRS_ONLY

    @property
    def uses_rrs(self):
        return self.strategy != CBS_ONLY

    def active_weights(self):
        """Loss weights with the strategy's mask applied."""
        w = self.weights
        if self.strategy in (CBS_RRS, ROT_AUGMENT):
            return M.LossWeights(w.lambda1, w.lambda2, 0.0)
        if self.strategy == CBS_RRS_SS:
            return w
        # single-head baselines feed head_cbs with weight 1
        return M.LossWeights(1.0, 0.0, 0.0)


@dataclass
class TrainLog:
    """Per-iteration losses, evaluation rows and per-class loss tallies.

    ``class_loss[src]`` / ``class_count[src]`` hold, for each iteration, the
    summed per-sample training loss and the sample count per class for the
    batch drawn by sampler ``src`` ("cbs" or "rrs").
    """

    num_classes: int
    iteration: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    loss_cbs: list = field(default_factory=list)
    loss_rrs: list = field(default_factory=list)
    loss_ss: list = field(default_factory=list)
    loss_final: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    class_loss: dict = field(default_factory=lambda: {"cbs": [], "rrs": []})
    class_count: dict = field(default_factory=lambda: {"cbs": [], "rrs": []})

    def __len__(self):
        return len(self.iteration)

    def append(self, it, lr, parts, final, tallies):
        self.iteration.append(it)
        self.lr.append(lr)
        self.loss_cbs.append(parts.get("cbs", 0.0))
        self.loss_rrs.append(parts.get("rrs", 0.0))
        self.loss_ss.append(parts.get("ss", 0.0))
        self.loss_final.append(final)
        zeros = np.zeros(self.num_classes)
        for src in ("cbs", "rrs"):
            if src in tallies:
                self.class_loss[src].append(tallies[src][0])
                self.class_count[src].append(tallies[src][1])
            else:
                self.class_loss[src].append(zeros)
                self.class_count[src].append(zeros)

    def class_arrays(self, src):
        """(M x C summed loss, M x C counts) for one sampler."""
        if not self.iteration:
            z = np.zeros((0, self.num_classes))
            return z, z
        return np.vstack(self.class_loss[src]), np.vstack(self.class_count[src])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "lr", "loss_cbs", "loss_rrs", "loss_ss", "loss_final"])
            for row in zip(self.iteration, self.lr, self.loss_cbs, self.loss_rrs,
                           self.loss_ss, self.loss_final):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def write_eval_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "acc_overall", "acc_many", "acc_medium", "acc_low"])
            for rec in self.evals:
                w.writerow([rec["iteration"]] + [repr(float(rec[k])) for k in
                                                 ("acc_overall", "acc_many", "acc_medium", "acc_low")])


def _tally(num_classes, labels, losses):
    return (np.bincount(labels, weights=losses, minlength=num_classes),
            np.bincount(labels, minlength=num_classes).astype(np.float64))


class _Runner:
    """Shared state for one training run: samplers, optimizer, log."""

    def __init__(self, config, dataset, params, log_, evaluator=None):
        self.cfg = config
        self.ds = dataset
        self.params = params
        self.log = log_
        self.evaluator = evaluator
        self.opt = SGD(config.momentum, config.weight_decay)
        c = dataset.num_classes
        self.rrs = RandomSampler(dataset.total, config.batch_size, config.seed)
        self.cbs = ClassBalancedSampler(dataset.labels, c, config.batch_size,
                                        config.per_class, config.seed)
        self.rot_rng = make_rng(config.seed, STREAM_ROT)

    def _batch(self, sampler):
        idx = sampler.next_batch()
        return self.ds.images[idx], self.ds.labels[idx]

    def step(self, strategy, it, lr):
        cfg, c = self.cfg, self.ds.num_classes
        weights = replace(cfg, strategy=strategy).active_weights()
        tape = Tape()
        w = M.bind(self.params, tape)
        feeds = {}  # sampler -> (head, images, labels)

        if strategy == RRS_ONLY:
            feeds["rrs"] = (M.HEAD_CBS,) + self._batch(self.rrs)
        elif strategy == CBS_ONLY:
            feeds["cbs"] = (M.HEAD_CBS,) + self._batch(self.cbs)
        else:
            feeds["cbs"] = (M.HEAD_CBS,) + self._batch(self.cbs)
            feeds["rrs"] = (M.HEAD_RRS,) + self._batch(self.rrs)

        rot = None
        if strategy == CBS_RRS_SS:
            rot = M.make_rotation_batch(feeds["cbs"][1], feeds["rrs"][1], self.rot_rng)
        elif strategy == ROT_AUGMENT:
            for src in ("cbs", "rrs"):
                head, x, y = feeds[src]
                feeds[src] = (head,) + M.rotation_copies(x, y)

        lam = {M.HEAD_CBS: weights.lambda1, M.HEAD_RRS: weights.lambda2}
        total = None
        parts, tallies = {}, {}
        try:
            for src, (head, x, y) in feeds.items():
                logits = M.head_logits(w, head, M.forward_features(w, x))
                per = per_sample_cross_entropy(logits.data, y)
                parts[src] = float(per.mean())
                tallies[src] = _tally(c, y, per)
                if lam[head] == 0:
                    continue
                term = M.scale(M.softmax_cross_entropy(logits, y), lam[head])
                total = term if total is None else M.add(total, term)
            if rot is not None:
                loss_ss = M.head_loss(w, M.HEAD_SS, *rot)
                parts["ss"] = loss_ss.item()
                if weights.lambda3 > 0:
                    term = M.scale(loss_ss, weights.lambda3)
                    total = term if total is None else M.add(total, term)
            final = total.item()
            grads = backward(tape, total)
        except NonFiniteError as exc:
            rec = {"iteration": it, "lr": lr, **parts}
            raise TrainingDiverged(f"non-finite values at iteration {it}: {exc}", rec,
                                   self.log) from exc
        if not np.isfinite(final):
            raise TrainingDiverged(f"non-finite loss at iteration {it}",
                                   {"iteration": it, "lr": lr, **parts}, self.log)
        self.opt.step(self.params.blocks, grads, lr)
        self.log.append(it, lr, parts, final, tallies)

    def run(self, strategy, iterations, lr0, start=0):
        for t in range(iterations):
            lr = cosine_lr(t, iterations, lr0)
            it = start + t + 1
            self.step(strategy, it, lr)
            if self.evaluator and self.cfg.eval_every and it % self.cfg.eval_every == 0:
                self.log.evals.append({"iteration": it, **self.evaluator(self.params)})


def initial_params(config, dataset):
    rng = make_rng(config.seed, STREAM_INIT)
    return M.init_params(dataset.num_classes, dataset.image_size, config.hidden,
                         config.feature_dim, rng)


def _check(config, dataset):
    if config.batch_size > dataset.total:
        raise ValueError(f"S={config.batch_size} exceeds N={dataset.total}")
    if config.uses_cbs and config.batch_size // config.per_class > dataset.num_classes:
        raise ValueError("k = S/Z exceeds the number of classes")


def train(config, dataset, evaluator=None):
    """Run ``config.iterations`` steps of ``config.strategy``.

    ``evaluator``, if given, maps ModelParams to a dict with acc_overall,
    acc_many, acc_medium and acc_low; it is called every ``eval_every``
    iterations.
    """
    if config.strategy == FT_RRS_CBS:
        return train_stagewise(config, dataset, evaluator)
    if config.strategy == ROT_AUGMENT:
        return train_rotation_augmentation(config, dataset, evaluator)
    return _train(config, dataset, evaluator)


def _train(config, dataset, evaluator):
    _check(config, dataset)
    params = initial_params(config, dataset)
    tlog = TrainLog(dataset.num_classes)
    runner = _Runner(config, dataset, params, tlog, evaluator)
    runner.run(config.strategy, config.iterations, config.lr0)
    log.debug("finished %s seed=%d after %d iterations", config.strategy, config.seed,
              config.iterations)
    return runner.params, tlog


def stage_lengths(config):
    m = config.iterations
    if m < 2:
        return m, 0
    m1 = min(max(int(round(config.stage1_fraction * m)), 1), m - 1)
    return m1, m - m1


def train_stagewise(config, dataset, evaluator=None):
    """RRS-only pre-training, then CBS fine-tuning with a fresh head_cbs.

    Both stages run their own cosine schedule; stage 2 starts from
    ``stage2_lr_fraction * lr0`` with reset momentum.
    """
    if config.strategy != FT_RRS_CBS:
        raise ValueError("train_stagewise needs strategy FtRRSThenCBS")
    _check(config, dataset)
    params = initial_params(config, dataset)
    tlog = TrainLog(dataset.num_classes)
    runner = _Runner(config, dataset, params, tlog, evaluator)
    m1, m2 = stage_lengths(config)
    runner.run(RRS_ONLY, m1, config.lr0)
    if m2:
        rng = make_rng(config.seed, STREAM_HEAD_REINIT)
        M.init_head(runner.params.blocks, M.HEAD_CBS, dataset.num_classes,
                    config.feature_dim, rng)
        runner.opt.reset()
        runner.run(CBS_ONLY, m2, config.lr0 * config.stage2_lr_fraction, start=m1)
    return runner.params, tlog


def train_rotation_augmentation(config, dataset, evaluator=None):
    """CBS+RRS loop where every image is replaced by its four rotations."""
    if config.strategy != ROT_AUGMENT:
        raise ValueError("train_rotation_augmentation needs strategy RotAugment")
    return _train(config, dataset, evaluator)


def _trailing_sum(x, window):
    """Sum over the last ``window`` entries ending at each position (fewer at the start)."""
    c = np.cumsum(np.concatenate([[0.0], np.asarray(x, dtype=np.float64)]))
    hi = np.arange(1, len(c))
    return c[hi] - c[np.maximum(hi - window, 0)]


def moving_average(x, window):
    """Trailing moving average; the first ``window - 1`` points average what is available."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    return _trailing_sum(x, window) / np.minimum(np.arange(1, len(x) + 1), window)


def log_group_losses(tlog, groups, window=50):
    """Smoothed mean training loss restricted to class groups.

    ``groups`` maps a group name to a collection of class indices. Returns
    ``{(group, sampler): (trace, contributing_sample_counts)}``. Point ``t``
    of a trace is the sample-weighted mean loss of the group's samples drawn
    in the trailing ``window`` iterations ending at ``t`` (NaN where none
    were drawn); the counts are per iteration, unsmoothed.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not len(tlog):
        raise ValueError("training log is empty")
    out = {}
    for name, classes in groups.items():
        classes = np.asarray(sorted(classes), dtype=np.int64)
        if classes.size == 0:
            raise ValueError(f"class group {name!r} is empty")
        for src in ("cbs", "rrs"):
            loss, count = tlog.class_arrays(src)
            if not count.any():
                continue
            gl = _trailing_sum(loss[:, classes].sum(axis=1), window)
            gn = count[:, classes].sum(axis=1)
            gc = _trailing_sum(gn, window)
            with np.errstate(invalid="ignore", divide="ignore"):
                trace = np.where(gc > 0, gl / np.where(gc > 0, gc, 1), np.nan)
            out[(name, src)] = (trace, gn)
    return out


def final_quarter_class_loss(tlog, src):
    """Per-class mean training loss over the last quarter of iterations."""
    loss, count = tlog.class_arrays(src)
    start = len(loss) - len(loss) // 4
    s, n = loss[start:].sum(axis=0), count[start:].sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, s / np.where(n > 0, n, 1), np.nan)
