"""Resumable, seed-deterministic minibatch samplers.

``RandomSampler`` (RRS) walks shuffled permutations of all sample indices.
``ClassBalancedSampler`` (CBS) picks ``k = S / Z`` distinct classes from a
shuffled class list and ``Z`` samples from each picked class's own shuffled
list. Every list is consumed front to back and reshuffled when exhausted.

Random streams come from numpy's PCG64 bit generator seeded through a
``SeedSequence`` of ``(seed, stream)``, so samplers built with the same seed
but a different stream id are independent.
"""

from __future__ import annotations

import numpy as np

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

RRS = "RRS"
CBS = "CBS"

STREAM_RRS = 1
STREAM_CBS = 2
STREAM_ROT = 3
STREAM_INIT = 4


def make_rng(seed, stream=0):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


class _Cursor:
    """Front-to-back walk over a permutation that reshuffles when it runs out."""

    __slots__ = ("items", "order", "pos", "cycles")

    def __init__(self, items, rng):
        self.items = np.asarray(items)
        self.order = self.items[rng.permutation(self.items.size)]
        self.pos = 0
        self.cycles = 0

    @property
    def remaining(self):
        return self.order.size - self.pos

    def reshuffle(self, rng):
        self.order = self.items[rng.permutation(self.items.size)]
        self.pos = 0
        self.cycles += 1

    def take(self, n):
        out = self.order[self.pos:self.pos + n]
        self.pos += out.size
        return out


class RandomSampler:
    """Uniform-over-samples batches; the tail of each epoch (< S indices) is dropped."""

    mode = RRS

    def __init__(self, num_samples, batch_size, seed, stream=STREAM_RRS):
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        if batch_size > num_samples:
            raise ValueError(f"batch size {batch_size} exceeds dataset size {num_samples}")
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.rng = make_rng(seed, stream)
        self.cursor = _Cursor(np.arange(num_samples), self.rng)

    @property
    def epoch(self):
        return self.cursor.cycles

    def next_batch(self):
        if self.cursor.remaining < self.batch_size:
            self.cursor.reshuffle(self.rng)
        return self.cursor.take(self.batch_size)


class ClassBalancedSampler:
    """Batches of ``k = S / Z`` distinct classes with ``Z`` samples each."""

    mode = CBS

    def __init__(self, labels, num_classes, batch_size, per_class, seed, stream=STREAM_CBS):
        labels = np.asarray(labels)
        if per_class < 1 or batch_size % per_class:
            raise ValueError(f"Z={per_class} must divide S={batch_size}")
        k = batch_size // per_class
        if k > num_classes:
            raise ValueError(f"k = S/Z = {k} exceeds the number of classes {num_classes}")
        self.batch_size = int(batch_size)
        self.per_class = int(per_class)
        self.k = k
        self.seed = int(seed)
        self.rng = make_rng(seed, stream)
        self.class_cursor = _Cursor(np.arange(num_classes), self.rng)
        order = np.argsort(labels, kind="stable")
        bounds = np.searchsorted(labels[order], np.arange(num_classes + 1))
        if np.any(np.diff(bounds) == 0):
            raise ValueError("every class needs at least one sample")
        self.class_cursors = [_Cursor(order[bounds[c]:bounds[c + 1]], self.rng)
                              for c in range(num_classes)]

    def _take_classes(self):
        cur = self.class_cursor
        taken = cur.take(self.k)
        short = self.k - taken.size
        if short:
            # new cycle; classes already in this batch are pushed past the
            # part drawn now so the batch stays duplicate-free
            cur.reshuffle(self.rng)
            order = cur.order
            clash = np.isin(order, taken)
            head = order[~clash][:short]
            rest = order[~np.isin(order, head)]
            cur.order = np.concatenate([head, rest])
            taken = np.concatenate([taken, cur.take(short)])
        return taken

    def _take_samples(self, c):
        cur = self.class_cursors[c]
        parts = []
        need = self.per_class
        while need:
            if cur.remaining == 0:
                cur.reshuffle(self.rng)
            got = cur.take(need)
            parts.append(got)
            need -= got.size
        return parts[0] if len(parts) == 1 else np.concatenate(parts)

    def next_batch(self):
        classes = self._take_classes()
        return np.concatenate([self._take_samples(int(c)) for c in classes])


def next_batch_rrs(state):
    if state.mode != RRS:
        raise ValueError("sampler is not in RRS mode")
    return state.next_batch()


def next_batch_cbs(state):
    if state.mode != CBS:
        raise ValueError("sampler is not in CBS mode")
    return state.next_batch()
