"""Experiment configuration files.

The format is INI (``configparser``): ``[section]`` headers followed by
``key = value`` lines, ``#`` or ``;`` comments. Lists are comma separated;
loss-weight ratios are written ``a:b:c`` (or ``a:b`` for the CBS_RRS sweep
ratios, whose rotation weight is zero). Recognised sections and
keys, with defaults, are listed in ``DEFAULTS``.
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .model import LossWeights
from .sampling import RNG_ALGORITHM
from .train import STRATEGIES, TrainConfig

DEFAULTS = {
    "dataset": {
        "classes": "50",
        "n_max": "500",
        "n_min": "5",
        "image_size": "12",
        "noise_sd": "0.25",
        "contrast": "0.3",
        "background": "0.3",
        "test_per_class": "40",
        "t_many": "100",
        "t_low": "20",
        "seed": "0",
        "path": "",
        "test_path": "",
    },
    "model": {
        "feature_dim": "64",
        "hidden": "128",
    },
    "train": {
        "strategy": "CBS_RRS_SS",
        "iterations": "4000",
        "batch_size": "64",
        "per_class": "4",
        "lambdas": "0.5:1:1",
        "lr0": "0.1",
        "momentum": "0.9",
        "weight_decay": "0.0005",
        "seed": "0",
        "eval_every": "0",
        "stage1_fraction": "0.5",
        "stage2_lr_fraction": "0.1",
        "rng": RNG_ALGORITHM,
    },
    "sweep": {
        "strategies": "",
        "lambda_ratios": "",
        "seeds": "",
    },
    "output": {
        "dir": "runs",
        "loss_window": "50",
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    classes: int
    n_max: int
    n_min: int
    image_size: int
    noise_sd: float
    contrast: float
    background: float
    test_per_class: int
    t_many: int
    t_low: int
    seed: int
    path: Path | None
    test_path: Path | None


@dataclass(frozen=True)
class Cell:
    """One sweep cell: a strategy, a training seed and loss weights."""

    strategy: str
    seed: int
    weights: LossWeights

    @property
    def name(self):
        w = self.weights
        lam = "-".join(_fmt(v) for v in (w.lambda1, w.lambda2, w.lambda3))
        return f"{self.strategy}_s{self.seed}_l{lam}"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection
    train: TrainConfig
    strategies: tuple
    lambda_ratios: tuple
    seeds: tuple
    out_dir: Path
    loss_window: int
    source: Path | None = None
    raw: dict = field(default_factory=dict, compare=False)

    def cells(self):
        """Cross product of strategies and seeds, then extra CBS_RRS ratio cells.

        A ratio with a zero weight on either head leaves only one classifier
        trained, so ``0:b`` maps to the RRSOnly cell and ``a:0`` to CBSOnly.
        """
        out = []
        base = self.train.weights
        for strategy, seed in itertools.product(self.strategies, self.seeds):
            out.append(Cell(strategy, seed, _cell_weights(strategy, base)))
        for (l1, l2), seed in itertools.product(self.lambda_ratios, self.seeds):
            out.append(ratio_cell(l1, l2, seed))
        seen, uniq = set(), []
        for c in out:
            if c.name not in seen:
                seen.add(c.name)
                uniq.append(c)
        return uniq

    def train_config(self, cell):
        from dataclasses import replace
        return replace(self.train, strategy=cell.strategy, seed=cell.seed, weights=cell.weights)


def ratio_cell(l1, l2, seed):
    """Sweep cell for a lambda1:lambda2 ratio of the two classification losses."""
    if l1 == 0:
        return Cell("RRSOnly", seed, LossWeights(1.0, 0.0, 0.0))
    if l2 == 0:
        return Cell("CBSOnly", seed, LossWeights(1.0, 0.0, 0.0))
    return Cell("CBS_RRS", seed, LossWeights(l1, l2, 0.0))


def _fmt(v):
    return f"{v:g}"


def _cell_weights(strategy, base):
    if strategy in ("CBS_RRS", "RotAugment"):
        return LossWeights(base.lambda1, base.lambda2, 0.0)
    if strategy == "CBS_RRS_SS":
        return base
    return LossWeights(1.0, 0.0, 0.0)


def _get(cp, section, key, conv):
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None


def _ratio(text, parts):
    vals = [float(x) for x in text.split(":")]
    if len(vals) != parts:
        raise ValueError(f"expected {parts} ':'-separated weights")
    return vals


def _list(text, conv=str):
    return tuple(conv(x.strip()) for x in text.split(",") if x.strip())


def _path(text):
    return Path(text) if text.strip() else None


def parse_config(text, source=None, seed_override=None):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    cp.read_dict(DEFAULTS)
    try:
        cp.read_string(text, source=str(source or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        for key in cp[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
    base = Path(source).parent if source else Path.cwd()

    def rel(p):
        if p is None:
            return None
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigError(f"referenced path does not exist: {p}")
        return p

    ds = DatasetSection(
        classes=_get(cp, "dataset", "classes", int),
        n_max=_get(cp, "dataset", "n_max", int),
        n_min=_get(cp, "dataset", "n_min", int),
        image_size=_get(cp, "dataset", "image_size", int),
        noise_sd=_get(cp, "dataset", "noise_sd", float),
        contrast=_get(cp, "dataset", "contrast", float),
        background=_get(cp, "dataset", "background", float),
        test_per_class=_get(cp, "dataset", "test_per_class", int),
        t_many=_get(cp, "dataset", "t_many", int),
        t_low=_get(cp, "dataset", "t_low", int),
        seed=_get(cp, "dataset", "seed", int),
        path=rel(_get(cp, "dataset", "path", _path)),
        test_path=rel(_get(cp, "dataset", "test_path", _path)),
    )
    if not ds.t_many > ds.t_low >= 1:
        raise ConfigError(f"[dataset] need t_many > t_low >= 1, got {ds.t_many}, {ds.t_low}")

    rng_id = cp.get("train", "rng")
    if rng_id != RNG_ALGORITHM:
        raise ConfigError(f"[train] rng = {rng_id!r}: only {RNG_ALGORITHM!r} is available")
    lambdas = _get(cp, "train", "lambdas", lambda t: _ratio(t, 3))
    seed = seed_override if seed_override is not None else _get(cp, "train", "seed", int)
    batch_size = _get(cp, "train", "batch_size", int)
    per_class = _get(cp, "train", "per_class", int)
    strategy = cp.get("train", "strategy")
    strategies = _get(cp, "sweep", "strategies", _list) or (strategy,)
    for s in strategies + (strategy,):
        if s not in STRATEGIES:
            raise ConfigError(f"[train]/[sweep] unknown strategy {s!r}; choose from "
                              f"{', '.join(STRATEGIES)}")
    if per_class < 1 or batch_size % per_class:
        raise ConfigError(f"[train] per_class (Z={per_class}) must divide "
                          f"batch_size (S={batch_size})")
    try:
        weights = LossWeights(*lambdas)
        train = TrainConfig(
            strategy=strategy,
            iterations=_get(cp, "train", "iterations", int),
            batch_size=batch_size,
            per_class=per_class,
            weights=weights,
            lr0=_get(cp, "train", "lr0", float),
            momentum=_get(cp, "train", "momentum", float),
            weight_decay=_get(cp, "train", "weight_decay", float),
            seed=seed,
            eval_every=_get(cp, "train", "eval_every", int),
            stage1_fraction=_get(cp, "train", "stage1_fraction", float),
            stage2_lr_fraction=_get(cp, "train", "stage2_lr_fraction", float),
            hidden=_get(cp, "model", "hidden", int),
            feature_dim=_get(cp, "model", "feature_dim", int),
        )
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None

    ratios = _get(cp, "sweep", "lambda_ratios", lambda t: _list(t, lambda x: tuple(_ratio(x, 2))))
    for r in ratios:
        if min(r) < 0 or max(r) <= 0:
            raise ConfigError(f"[sweep] lambda_ratios entry {r} must be non-negative, not all zero")
    if seed_override is not None:
        seeds = (seed_override,)
    else:
        seeds = _get(cp, "sweep", "seeds", lambda t: _list(t, int)) or (seed,)

    return ExperimentConfig(
        dataset=ds,
        train=train,
        strategies=strategies,
        lambda_ratios=ratios,
        seeds=seeds,
        out_dir=Path(cp.get("output", "dir")),
        loss_window=_get(cp, "output", "loss_window", int),
        source=Path(source) if source else None,
        raw={s: dict(cp[s]) for s in cp.sections()},
    )


def load_config(path, seed_override=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=path, seed_override=seed_override)
