"""Influence and attention probes: diagonality, zeros, determinism, I/O."""
import numpy as np
import pytest

from compogen.analysis import (MatrixResult, attention_average,
                               influence_matrix, load_matrix, model_hash)
from compogen.denoisers import DenoiserConfig, UnsupportedVariantError, build
from compogen.edm import EDMConfig, sigma_midpoint
from compogen.env import desk_space

TINY = DenoiserConfig(width=16, heads=2, depth=1, noise_feature_dim=8,
                      mono_width=16, mono_layers=2)
SPACE = desk_space()
TASKS = [(0, 0, 0, 0), (1, 0, 1, 1)]
EDM = EDMConfig()


def _perturb(model, seed=1, scale=0.05):
    rng = np.random.default_rng(seed)
    for name in sorted(model.store.values):
        v = model.store.values[name]
        v += rng.normal(scale=scale, size=v.shape).astype(v.dtype)


def test_fresh_model_influence_is_strictly_diagonal():
    # at initialization the attention blocks are exact identities, so the
    # decoder sees precisely what the encoder wrote: masking input token i
    # can only move output token i
    model = build("semantic_compositional", TINY, SPACE, seed=0)
    res = influence_matrix(model, TASKS, n_samples=8, edm_cfg=EDM, seed=0)
    k = len(res.labels)
    assert res.matrix.shape == (k, k) and k == 11
    off = res.matrix[~np.eye(k, dtype=bool)]
    assert np.all(off == 0.0)
    assert np.all(np.diag(res.matrix) > 0.0)


def test_constant_model_influence_is_zero():
    model = build("semantic", TINY, SPACE, seed=0)
    # silence every encoder: the token stream no longer depends on the input
    for codec in model.codecs.values():
        model.store.values[f"{codec.name}.enc.w"][...] = 0.0
        model.store.values[f"{codec.name}.enc.b"][...] = 0.0
    res = influence_matrix(model, TASKS, n_samples=4, edm_cfg=EDM, seed=0)
    assert np.all(res.matrix == 0.0)


def test_influence_deterministic_and_perturbed_offdiag():
    model = build("semantic_compositional", TINY, SPACE, seed=2)
    _perturb(model)
    a = influence_matrix(model, TASKS, n_samples=6, edm_cfg=EDM, seed=5)
    b = influence_matrix(model, TASKS, n_samples=6, edm_cfg=EDM, seed=5)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    c = influence_matrix(model, TASKS, n_samples=6, edm_cfg=EDM, seed=6)
    assert not np.array_equal(a.matrix, c.matrix)
    # once attention mixes tokens, silencing one input reaches other outputs
    assert np.all(np.isfinite(a.matrix)) and np.all(a.matrix >= 0.0)
    k = len(a.labels)
    assert a.matrix[~np.eye(k, dtype=bool)].max() > 0.0


def test_influence_probe_level_is_schedule_midpoint():
    model = build("semantic_compositional", TINY, SPACE, seed=0)
    res = influence_matrix(model, TASKS, n_samples=2, edm_cfg=EDM, seed=0)
    assert res.sigma == sigma_midpoint(EDM)
    assert res.n_samples == 2
    assert res.tasks == TASKS


def test_influence_rejects_unsupported_models():
    mono = build("monolithic", TINY, SPACE, seed=0)
    with pytest.raises(UnsupportedVariantError):
        influence_matrix(mono, TASKS, 2, EDM, seed=0)
    std = build("standard", TINY, SPACE, seed=0)
    with pytest.raises(UnsupportedVariantError):
        influence_matrix(std, TASKS, 2, EDM, seed=0)
    model = build("semantic", TINY, SPACE, seed=0)
    with pytest.raises(ValueError):
        influence_matrix(model, TASKS, 0, EDM, seed=0)
    with pytest.raises(ValueError):
        influence_matrix(model, [], 2, EDM, seed=0)


def test_attention_rows_sum_to_one():
    model = build("semantic_compositional", TINY, SPACE, seed=3)
    _perturb(model)
    res = attention_average(model, TASKS, n_samples=16, edm_cfg=EDM, seed=0)
    assert res.matrix.shape == (11, 11)
    np.testing.assert_allclose(res.matrix.sum(axis=1), np.ones(11), atol=1e-5)
    assert res.labels[0] == "robot_state"


def test_attention_average_deterministic_and_depth_agnostic():
    deeper = DenoiserConfig(width=16, heads=2, depth=2, noise_feature_dim=8,
                            mono_width=16, mono_layers=2)
    model = build("semantic", deeper, SPACE, seed=4)
    a = attention_average(model, TASKS, n_samples=8, edm_cfg=EDM, seed=1)
    b = attention_average(model, TASKS, n_samples=8, edm_cfg=EDM, seed=1)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    np.testing.assert_allclose(a.matrix.sum(axis=1), np.ones(11), atol=1e-5)


def test_attention_standard_patches_and_monolithic_rejected():
    std = build("standard", TINY, SPACE, seed=0)
    res = attention_average(std, TASKS, n_samples=4, edm_cfg=EDM, seed=0)
    assert res.matrix.shape == (3, 3)
    mono = build("monolithic", TINY, SPACE, seed=0)
    with pytest.raises(UnsupportedVariantError):
        attention_average(mono, TASKS, 4, EDM, seed=0)


def test_matrix_save_load_roundtrip(tmp_path):
    model = build("semantic_compositional", TINY, SPACE, seed=0)
    res = influence_matrix(model, TASKS, n_samples=4, edm_cfg=EDM, seed=0)
    path = str(tmp_path / "influence.csv")
    res.save(path)
    back = load_matrix(path)
    np.testing.assert_array_equal(back.matrix, res.matrix)
    assert back.labels == res.labels
    assert back.sigma == res.sigma
    assert back.model_hash == res.model_hash
    assert back.tasks == TASKS
    assert (tmp_path / "influence.csv.meta.json").exists()


def test_model_hash_tracks_parameters():
    a = build("semantic", TINY, SPACE, seed=0)
    b = build("semantic", TINY, SPACE, seed=0)
    assert model_hash(a) == model_hash(b)
    _perturb(b)
    assert model_hash(a) != model_hash(b)
