import pytest

from ltlab.config import ConfigError, DEFAULTS, load_config, parse_config, ratio_cell
from ltlab.model import LossWeights


def test_defaults_describe_reference_benchmark():
    cfg = parse_config("")
    ds, t = cfg.dataset, cfg.train
    assert (ds.classes, ds.n_max, ds.n_min, ds.image_size) == (50, 500, 5, 12)
    assert (ds.noise_sd, ds.test_per_class, ds.t_many, ds.t_low) == (0.25, 40, 100, 20)
    assert (t.iterations, t.batch_size, t.per_class, t.lr0, t.momentum) == (4000, 64, 4, 0.1, 0.9)
    assert t.weights == LossWeights(0.5, 1.0, 1.0)
    assert t.feature_dim == 64 and t.weight_decay == 5e-4
    assert cfg.seeds == (0,) and cfg.strategies == ("CBS_RRS_SS",)


def test_sections_and_comments():
    cfg = parse_config("""
[train]
strategy = RRSOnly   # baseline
iterations = 10
; a comment line
[sweep]
seeds = 1, 2,3
""")
    assert cfg.train.strategy == "RRSOnly" and cfg.train.iterations == 10
    assert cfg.seeds == (1, 2, 3)


def test_weight_decay_key():
    assert parse_config("[train]\nweight_decay = 0\n").train.weight_decay == 0.0
    with pytest.raises(ConfigError, match="weight_decay"):
        parse_config("[train]\nweight_decay = -1\n")


def test_z_must_divide_s():
    with pytest.raises(ConfigError, match="must divide"):
        parse_config("[train]\nbatch_size = 10\nper_class = 4\n")


@pytest.mark.parametrize("text, match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[train]\nspeed = 1\n", "unknown key"),
    ("[train]\niterations = lots\n", "iterations"),
    ("[train]\nstrategy = Magic\n", "unknown strategy"),
    ("[train]\nrng = mt19937\n", "rng"),
    ("[train]\nlambdas = 1:1\n", "lambdas"),
    ("[dataset]\nt_many = 10\nt_low = 20\n", "t_many"),
    ("[dataset]\npath = /nonexistent/train.ltds\n", "does not exist"),
    ("[train\n", "line: 1"),
])
def test_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_sweep_cells_and_naming():
    cfg = parse_config("""
[sweep]
strategies = RRSOnly, CBS_RRS, CBS_RRS_SS
lambda_ratios = 0:1, 0.5:1, 1:1, 1:0
seeds = 0, 1
""")
    names = [c.name for c in cfg.cells()]
    assert names == [
        "RRSOnly_s0_l1-0-0", "RRSOnly_s1_l1-0-0",
        "CBS_RRS_s0_l0.5-1-0", "CBS_RRS_s1_l0.5-1-0",
        "CBS_RRS_SS_s0_l0.5-1-1", "CBS_RRS_SS_s1_l0.5-1-1",
        "CBS_RRS_s0_l1-1-0", "CBS_RRS_s1_l1-1-0",
        "CBSOnly_s0_l1-0-0", "CBSOnly_s1_l1-0-0",
    ]


def test_ratio_endpoints_map_to_baselines():
    assert ratio_cell(0, 1, 3).strategy == "RRSOnly"
    assert ratio_cell(1, 0, 3).strategy == "CBSOnly"
    assert ratio_cell(1, 0.5, 3).weights == LossWeights(1, 0.5, 0)


def test_seed_override(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[sweep]\nseeds = 1, 2\n")
    cfg = load_config(path, seed_override=9)
    assert cfg.seeds == (9,) and cfg.train.seed == 9


def test_relative_paths_resolve_against_config(tmp_path):
    (tmp_path / "d.ltds").write_bytes(b"")
    (tmp_path / "t.ltds").write_bytes(b"")
    path = tmp_path / "c.ini"
    path.write_text("[dataset]\npath = d.ltds\ntest_path = t.ltds\n")
    cfg = load_config(path)
    assert cfg.dataset.path == tmp_path / "d.ltds"


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_every_default_key_is_accepted():
    text = "\n".join(f"[{s}]\n" + "\n".join(f"{k} = {v}" for k, v in keys.items())
                     for s, keys in DEFAULTS.items())
    parse_config(text)
