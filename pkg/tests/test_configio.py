import configparser
import os

import pytest

from compogen.bootstrap import BootstrapConfig
from compogen.configio import (SCHEMA, ConfigError, load_config,
                               render_config)
from compogen.denoisers import DenoiserConfig
from compogen.edm import EDMConfig
from compogen.env import EnvConfig
from compogen.rl import TD3BCConfig
from compogen.training import DiffusionTrainConfig

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _write(tmp_path, text):
    path = str(tmp_path / "exp.cfg")
    with open(path, "w") as f:
        f.write(text)
    return path


def test_rendered_defaults_equal_bare_dataclasses(tmp_path):
    cfg = load_config(_write(tmp_path, render_config()))
    assert cfg.env == EnvConfig()
    assert cfg.model == DenoiserConfig()
    assert cfg.edm == EDMConfig()
    assert cfg.diffusion == DiffusionTrainConfig()
    assert cfg.policy == TD3BCConfig()
    assert cfg.bootstrap == BootstrapConfig()
    assert cfg.grid == "desk" and cfg.fixed_robot is None
    assert cfg.generator_variant == "semantic_compositional"


def test_empty_file_is_all_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, ""))
    assert cfg.policy == TD3BCConfig()
    assert cfg.n_train == 6


def test_partial_override_keeps_other_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, "[policy]\nsteps = 5\n"))
    assert cfg.policy.steps == 5
    assert cfg.policy.batch_size == TD3BCConfig().batch_size


def test_unknown_field_error_names_it(tmp_path):
    with pytest.raises(ConfigError, match=r"\[policy\] stepz"):
        load_config(_write(tmp_path, "[policy]\nstepz = 5\n"))


def test_unknown_section_error_names_it(tmp_path):
    with pytest.raises(ConfigError, match=r"\[frobnicator\]"):
        load_config(_write(tmp_path, "[frobnicator]\nx = 1\n"))


def test_unparsable_value_error_names_field(tmp_path):
    with pytest.raises(ConfigError, match=r"\[policy\] steps"):
        load_config(_write(tmp_path, "[policy]\nsteps = banana\n"))
    with pytest.raises(ConfigError, match=r"\[generation\] churn"):
        load_config(_write(tmp_path, "[generation]\nchurn = maybe\n"))
    with pytest.raises(ConfigError, match=r"\[bootstrap\] variant"):
        load_config(_write(tmp_path, "[bootstrap]\nvariant = huge\n"))


def test_component_rejection_names_section(tmp_path):
    # the value parses but the owning component refuses it
    with pytest.raises(ConfigError, match=r"\[edm\]"):
        load_config(_write(tmp_path, "[edm]\nsampling_steps = 1\n"))
    with pytest.raises(ConfigError, match=r"\[policy\]"):
        load_config(_write(tmp_path, "[policy]\ndiscount = 1.5\n"))


def test_missing_file_is_config_error():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/exp.cfg")


def test_blank_optionals_mean_per_variant_defaults(tmp_path):
    cfg = load_config(_write(tmp_path, "[diffusion]\nlr =\nweight_decay =\n"))
    assert cfg.diffusion.lr is None
    assert cfg.diffusion.resolve_opt("monolithic") == (3e-4, 0.0)
    assert cfg.diffusion.resolve_opt("semantic")[1] == 0.01


def test_rl_seed_list_parses_with_spaces(tmp_path):
    cfg = load_config(_write(tmp_path, "[bootstrap]\nrl_seeds = 0, 1, 2\n"))
    assert cfg.bootstrap.rl_seeds == (0, 1, 2)


def test_n_train_must_fit_grid(tmp_path):
    with pytest.raises(ConfigError, match="n_train"):
        load_config(_write(tmp_path, "[space]\nn_train = 16\n"))


def test_fixed_robot_bounds_and_restriction(tmp_path):
    with pytest.raises(ConfigError, match="fixed_robot"):
        load_config(_write(tmp_path,
                           "[space]\ngrid = full\nfixed_robot = 9\n"))
    cfg = load_config(_write(tmp_path,
                             "[space]\ngrid = full\nfixed_robot = 1\n"
                             "n_train = 10\n"))
    train, held = cfg.split()
    assert len(train) == 10 and len(held) == 54
    assert all(t[0] == 1 for t in train + held)


def test_split_is_deterministic(tmp_path):
    path = _write(tmp_path, render_config())
    assert load_config(path).split() == load_config(path).split()


def test_render_rejects_unknown_override():
    with pytest.raises(KeyError):
        render_config(overrides={("space", "gridz"): "desk"})


@pytest.mark.parametrize("name", ["desk", "full"])
def test_shipped_config_lists_every_field_with_help(name):
    path = os.path.join(CONFIGS, f"{name}.cfg")
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#",))
    parser.read(path)
    text = open(path).read()
    for section, fields in SCHEMA.items():
        assert parser.has_section(section), section
        for key, field in fields.items():
            assert parser.has_option(section, key), (section, key)
            assert f"# {field.help}" in text, (section, key)
    load_config(path)


def test_desk_config_matches_library_defaults_except_sampling():
    cfg = load_config(os.path.join(CONFIGS, "desk.cfg"))
    assert cfg.edm.sampling_steps == 48
    assert cfg.edm == EDMConfig(sampling_steps=48)
    assert cfg.model == DenoiserConfig()
    assert cfg.diffusion == DiffusionTrainConfig()
    assert cfg.policy == TD3BCConfig()
    assert cfg.bootstrap == BootstrapConfig()


def test_full_config_space_and_scale():
    cfg = load_config(os.path.join(CONFIGS, "full.cfg"))
    assert cfg.grid == "full" and cfg.fixed_robot == 0
    train, held = cfg.split()
    assert len(train) == 32 and len(held) == 32
    assert cfg.diffusion.batch_size == 1024
    assert cfg.edm.sampling_steps == 128
