"""Dataset store: pooled stats, normalization round trips, binary format."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from compogen.data import (
    FORMAT_VERSION,
    MAGIC,
    STD_FLOOR,
    DatasetIOError,
    DatasetManifest,
    MagicError,
    ManifestEntry,
    NormStats,
    Provenance,
    TransitionBatch,
    TruncationError,
    VersionError,
    denormalize,
    load,
    normalize,
    pool_stats,
    save,
)


def _batch(rows, task=(0, 0, 0, 0), prov=None):
    return TransitionBatch(np.asarray(rows, dtype=np.float32), task,
                           prov or Provenance.real())


def test_pool_stats_standardized_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 6))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    x[:, -1] = 0.0
    stats = pool_stats([_batch(x)])
    assert np.all(np.abs(stats.mean[:-1]) < 1e-6)
    assert np.all(np.abs(stats.std[:-1] - 1.0) < 1e-4)
    assert stats.mean[-1] == 0.0 and stats.std[-1] == 1.0


def test_pool_stats_duplication_invariant():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 5)).astype(np.float32)
    one = pool_stats([_batch(x)])
    two = pool_stats([_batch(x), _batch(x)])
    assert np.allclose(one.mean, two.mean, atol=1e-12)
    assert np.allclose(one.std, two.std, atol=1e-12)


def test_pool_stats_constant_dim_floored():
    x = np.ones((10, 3), dtype=np.float32) * 4.0
    x[:, -1] = 0.0
    stats = pool_stats([_batch(x)])
    assert stats.std[0] == STD_FLOOR
    assert stats.std[1] == STD_FLOOR
    assert stats.mean[0] == 4.0


def test_pool_stats_errors():
    with pytest.raises(ValueError):
        pool_stats([])
    with pytest.raises(ValueError):
        pool_stats([_batch(np.zeros((1, 4)))])
    with pytest.raises(ValueError):
        pool_stats([_batch(np.zeros((3, 4))), _batch(np.zeros((3, 5)))])


def test_normalize_round_trip_tight():
    rng = np.random.default_rng(2)
    x = rng.normal(scale=3.0, size=(800, 7)).astype(np.float32)
    x[:, -1] = (x[:, -1] > 0).astype(np.float32)
    stats = pool_stats([_batch(x)])
    back = denormalize(normalize(x, stats), stats)
    assert float(np.abs(back - x).max()) < 1e-9


def test_normalize_identity_on_standardized():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5000, 4))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    x[:, -1] = 1.0
    stats = pool_stats([_batch(x)])
    z = normalize(x, stats)
    assert float(np.abs(z[:, :-1] - x[:, :-1]).max()) < 1e-3
    assert np.array_equal(z[:, -1], x[:, -1])


def test_denormalize_thresholds_terminal():
    stats = NormStats(np.zeros(3), np.ones(3), passthrough=2)
    z = np.array([[0.5, -0.5, 0.73], [1.0, 2.0, 0.49], [0.0, 0.0, 0.5]])
    out = denormalize(z, stats)
    assert out[:, 2].tolist() == [1.0, 0.0, 1.0]


def test_normalize_dim_mismatch():
    stats = NormStats(np.zeros(4), np.ones(4), passthrough=3)
    with pytest.raises(ValueError):
        normalize(np.zeros((2, 5)), stats)
    with pytest.raises(ValueError):
        denormalize(np.zeros((2, 3)), stats)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, (17, 6),
              elements=st.floats(-100, 100, allow_nan=False, width=32)))
def test_round_trip_property(x):
    x[:, -1] = np.where(x[:, -1] > 0, 1.0, 0.0)
    stats = pool_stats([_batch(x)])
    back = denormalize(normalize(x, stats), stats)
    assert float(np.abs(back[:, :-1] - x[:, :-1]).max()) < 1e-9
    assert np.array_equal(back[:, -1], x[:, -1])


def test_save_load_bit_identical(tmp_path):
    rng = np.random.default_rng(4)
    rows = rng.normal(size=(64, 41)).astype(np.float32)
    b = TransitionBatch(rows, (1, 2, 3, 0), Provenance.synthetic(2))
    p = str(tmp_path / "d.cdif")
    save(b, p)
    out = load(p)
    assert np.array_equal(out.rows, rows)
    assert out.task == (1, 2, 3, 0)
    assert out.provenance == Provenance.synthetic(2)


def test_save_load_real_provenance(tmp_path):
    b = TransitionBatch(np.zeros((3, 5), dtype=np.float32), (0, 0, 0, 0))
    p = str(tmp_path / "r.cdif")
    save(b, p)
    assert load(p).provenance == Provenance.real()


def test_load_rejects_bad_magic(tmp_path):
    p = str(tmp_path / "x.cdif")
    save(_batch(np.zeros((2, 3))), p)
    raw = bytearray(open(p, "rb").read())
    raw[:4] = b"XDIF"
    open(p, "wb").write(bytes(raw))
    with pytest.raises(MagicError):
        load(p)


def test_load_rejects_bad_version(tmp_path):
    p = str(tmp_path / "x.cdif")
    save(_batch(np.zeros((2, 3))), p)
    raw = bytearray(open(p, "rb").read())
    raw[4] = FORMAT_VERSION + 1
    open(p, "wb").write(bytes(raw))
    with pytest.raises(VersionError):
        load(p)


def test_load_rejects_truncation(tmp_path):
    p = str(tmp_path / "x.cdif")
    save(_batch(np.ones((10, 4))), p)
    raw = open(p, "rb").read()
    open(p, "wb").write(raw[:-8])
    with pytest.raises(TruncationError):
        load(p)
    open(p, "wb").write(raw[:10])
    with pytest.raises(TruncationError):
        load(p)


def test_provenance_validation():
    with pytest.raises(ValueError):
        Provenance("made_up")
    with pytest.raises(ValueError):
        Provenance("synthetic")
    with pytest.raises(ValueError):
        Provenance("real", round=3)
    assert Provenance.synthetic(0).round == 0


def test_batch_validate():
    rows = np.zeros((4, 41), dtype=np.float32)
    _batch(rows).validate()
    bad = rows.copy()
    bad[0, 21] = 1.5
    with pytest.raises(ValueError):
        _batch(bad).validate()
    bad2 = rows.copy()
    bad2[0, -1] = 0.3
    with pytest.raises(ValueError):
        _batch(bad2).validate()


def test_manifest_round_trip(tmp_path):
    m = DatasetManifest(split_seed=0)
    b = _batch(np.ones((5, 41)) * 0.5)
    path = "task_a.cdif"
    save(b, str(tmp_path / path))
    m.add(ManifestEntry((0, 0, 0, 0), path, 5, 41, Provenance.real(), 0))
    mp = str(tmp_path / "manifest.json")
    m.save(mp)
    m2 = DatasetManifest.load(mp)
    assert m2.to_json() == m.to_json()
    m2.verify(str(tmp_path))


def test_manifest_verify_catches_drift(tmp_path):
    m = DatasetManifest(split_seed=0)
    m.add(ManifestEntry((0, 0, 0, 0), "missing.cdif", 5, 41, Provenance.real(), 0))
    with pytest.raises(DatasetIOError):
        m.verify(str(tmp_path))
    b = _batch(np.zeros((4, 41)))
    save(b, str(tmp_path / "missing.cdif"))
    with pytest.raises(DatasetIOError):
        m.verify(str(tmp_path))  # row count mismatch: manifest says 5


def test_manifest_training_set_identity(tmp_path):
    m = DatasetManifest(split_seed=7)
    m.add(ManifestEntry((0, 0, 0, 0), "real_a.cdif", 3, 41, Provenance.real(), 0))
    m.add(ManifestEntry((0, 0, 0, 1), "real_b.cdif", 3, 41, Provenance.real(), 0))
    m.add(ManifestEntry((1, 0, 0, 0), "syn_c.cdif", 3, 41, Provenance.synthetic(0), 0))
    m.add(ManifestEntry((1, 1, 0, 0), "syn_d.cdif", 3, 41, Provenance.synthetic(1), 1))
    picked = m.training_entries(solved={(1, 0, 0, 0)})
    assert [e.path for e in picked] == ["real_a.cdif", "real_b.cdif", "syn_c.cdif"]
    everything = m.training_entries(solved=None)
    assert len(everything) == 4
