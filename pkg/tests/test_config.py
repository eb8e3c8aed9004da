import os

import pytest

from wishart_sde.config import load_config, override, parse_config
from wishart_sde.errors import ConfigError
from wishart_sde.train import config_hash

BASE = """
[data]
path = data.csv
targets = y1, y2
[model]
variant = DiffWGP
rho = 3
nu = 4
[flow]
steps = 7
[train]
total_iters = 20
phase1_iters = 5
batch_size = 8
clip_norm =
[forecast]
pairs = 0:1, 1:2
[ablate]
seeds = 0, 3
[run]
seed = 11
out = results
"""


def test_parse_values_and_alias():
    cfg = parse_config(BASE, base_dir="/work")
    assert cfg.data.targets == ["y1", "y2"]
    assert (cfg.model.variant, cfg.model.rho, cfg.model.nu) == ("DiffWGP", 3, 4)
    assert cfg.flow.num_steps == 7
    assert cfg.train.clip_norm is None
    assert cfg.forecast.pairs == [(0, 1), (1, 2)]
    assert cfg.ablate.seeds == [0, 3]
    assert (cfg.seed, cfg.out) == (11, "results")
    assert cfg.resolve("data.csv") == os.path.normpath("/work/data.csv")
    assert cfg.resolve("/abs/x.csv") == "/abs/x.csv"


def test_defaults():
    cfg = parse_config("")
    assert cfg.seed is None and cfg.model.variant == "DiffWGP"
    assert (cfg.train.phase1_iters, cfg.train.total_iters, cfg.train.anneal_iters) == (
        10000, 50000, 4000)


@pytest.mark.parametrize("text, where", [
    ("[model]\ncolour = red\n", "model.colour"),
    ("[extras]\na = 1\n", "extras"),
    ("[run]\nseed = x\n", "run.seed"),
    ("[run]\nverbose = 1\n", "run.verbose"),
    ("[model]\nrho = two\n", "model.rho"),
    ("[train]\nfreeze_inducing = maybe\n", "train.freeze_inducing"),
    ("[flow]\nsteps = 0\n", "flow"),
    ("not an ini", "config"),
])
def test_parse_errors_name_the_field(text, where):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == where
    assert where in str(info.value)


def test_validate_requires_seed(tmp_path):
    (tmp_path / "data.csv").write_text("x,y1,y2\n")
    cfg = parse_config(BASE.replace("seed = 11", "seed ="), base_dir=str(tmp_path))
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert info.value.field == "run.seed"
    override(cfg, seed=2).validate()


def test_validate_variant_and_data(tmp_path):
    cfg = parse_config(BASE, base_dir=str(tmp_path))
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert info.value.field == "data.path"
    (tmp_path / "data.csv").write_text("x,y1,y2\n")
    cfg.validate()
    cfg.model.variant = "diffwgp"
    assert cfg.validate().model.variant == "DiffWGP"
    cfg.model.variant = "GP"
    with pytest.raises(ConfigError) as info:
        cfg.validate()
    assert info.value.field == "model.variant"


def test_validate_dynamics_variants():
    cfg = parse_config("[model]\nkind = dynamics\nvariant = nodrift\n[run]\nseed = 0\n"
                       "[ablate]\nvariants = wishart, diagonal\n")
    cfg.validate(need_data=False)
    cfg.model.variant = "DiffWGP"
    with pytest.raises(ConfigError) as info:
        cfg.validate(need_data=False)
    assert info.value.field == "model.variant"


@pytest.mark.parametrize("text, where", [
    ("[model]\nkind = images\n", "model.kind"),
    ("[model]\nrho = 0\n", "model.rho"),
    ("[forecast]\nbins = 3\n[model]\nnum_inducing = 0\n", "model.num_inducing"),
    ("[ablate]\nvariants = SGP, Foo\n", "ablate.variants"),
    ("[train]\nphase1_iters = 10\ntotal_iters = 5\n", "train"),
])
def test_validate_ranges(text, where):
    cfg = parse_config("[data]\ntargets = y\n[run]\nseed = 0\n" + text)
    with pytest.raises(ConfigError) as info:
        cfg.validate(need_data=False)
    assert info.value.field == where


def test_schedule_defaults_depend_on_kind():
    reg = parse_config("").schedule()
    dyn = parse_config("[model]\nkind = dynamics\n").schedule()
    assert (reg.beta1, reg.clip_norm) == (0.9, None)
    assert (dyn.beta1, dyn.clip_norm) == (0.5, 100.0)
    off = parse_config("[model]\nkind = dynamics\n[train]\nclip_norm = 0\n").schedule()
    assert off.clip_norm is None


def test_override_only_applies_given_flags():
    cfg = parse_config(BASE)
    override(cfg, seed=None, variant="SGP", rho=None, steps=2, mc_samples=4, horizon=12.0)
    assert (cfg.seed, cfg.model.variant, cfg.model.rho) == (11, "SGP", 3)
    assert (cfg.flow.num_steps, cfg.flow.mc_samples, cfg.forecast.horizon) == (2, 4, 12.0)
    with pytest.raises(ConfigError):
        override(cfg, steps=0)


def test_text_round_trip_and_hash():
    cfg = parse_config(BASE)
    again = parse_config(cfg.to_text())
    assert again.to_text() == cfg.to_text()
    moved = parse_config(BASE.replace("out = results", "out = elsewhere"))
    assert config_hash(moved.to_text()) == config_hash(cfg.to_text())
    reseeded = parse_config(BASE.replace("seed = 11", "seed = 12"))
    assert config_hash(reseeded.to_text()) != config_hash(cfg.to_text())


def test_load_config_resolves_relative_to_file(tmp_path):
    path = tmp_path / "sub" / "run.ini"
    path.parent.mkdir()
    path.write_text(BASE)
    cfg = load_config(str(path))
    assert cfg.resolve(cfg.data.path) == str(tmp_path / "sub" / "data.csv")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.ini"))


def test_validate_split_range():
    cfg = parse_config("[data]\ntargets = y\nsplit = 1.0\n[run]\nseed = 0\n")
    with pytest.raises(ConfigError) as info:
        cfg.validate(need_data=False)
    assert info.value.field == "data.split"
