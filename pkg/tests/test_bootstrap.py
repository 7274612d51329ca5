"""Bootstrap loop semantics under mocked stages: admission, threshold decay,
failure isolation, persistence, resume byte-identity."""
import json
import os

import numpy as np
import pytest

from compogen.bootstrap import (BootstrapConfig, BootstrapOps, BootstrapState,
                                RoundReport, run, run_round)
from compogen.data import (DatasetManifest, ManifestEntry, Provenance,
                           TransitionBatch, save)
from compogen.env import TRANSITION_DIM

T0 = (0, 0, 1, 0)
T1 = (1, 0, 1, 1)
T2 = (0, 1, 0, 0)
TARGETS = (T0, T1, T2)


def _marker(task, k):
    return float(k * 100 + task[0] * 8 + task[1] * 4 + task[2] * 2 + task[3])


def _seed_corpus(run_dir, tasks=((0, 0, 0, 0),)):
    os.makedirs(os.path.join(run_dir, "data"), exist_ok=True)
    manifest = DatasetManifest(split_seed=0)
    for task in tasks:
        rows = np.zeros((4, TRANSITION_DIM), dtype=np.float32)
        rel = os.path.join("data", "real_" + "-".join(map(str, task)) + ".cdif")
        save(TransitionBatch(rows, task=task), os.path.join(run_dir, rel))
        manifest.add(ManifestEntry(task=task, path=rel, rows=4,
                                   dim=TRANSITION_DIM,
                                   provenance=Provenance.real(),
                                   round_added=0))
    return manifest


def _ops(success_fn, trained=None, fail_tasks=(), per_seed_bump=0.0):
    def train_model(batches, k):
        if trained is not None:
            trained.append((k, sorted((b.task, float(b.rows[0, 0]))
                                      for b in batches)))
        return {"round": k}

    def synthesize(model, task, k):
        assert model == {"round": k}
        rows = np.full((8, TRANSITION_DIM), _marker(task, k), dtype=np.float32)
        return TransitionBatch(rows, task=task,
                               provenance=Provenance.synthetic(k))

    def policy_success(task, batch, k, rl_seed):
        if task in fail_tasks:
            raise RuntimeError("policy evaluation exploded")
        assert float(batch.rows[0, 0]) == _marker(task, k)
        return success_fn(task, k) + per_seed_bump * rl_seed

    return BootstrapOps(train_model, synthesize, policy_success)


def test_config_validation():
    for bad in (dict(tau_min=0.9), dict(tau_step=0.0), dict(patience=0),
                dict(max_rounds=0), dict(rl_seeds=())):
        with pytest.raises(ValueError):
            BootstrapConfig(**bad)
    assert BootstrapConfig().warm_start is False


def test_state_invariants_and_roundtrip(tmp_path):
    cfg = BootstrapConfig()
    manifest = _seed_corpus(str(tmp_path))
    state = BootstrapState.fresh(TARGETS, cfg, manifest)
    state.solved = {T0}
    state.tau = 0.7
    state.check(cfg)

    path = str(tmp_path / "state.json")
    state.save(path)
    back = BootstrapState.load(path)
    assert back.targets == state.targets
    assert back.solved == {T0}
    assert back.tau == 0.7
    assert back.manifest.to_json() == manifest.to_json()

    state.solved = {(9, 9, 9, 9)}
    with pytest.raises(ValueError, match="targets"):
        state.check(cfg)
    state.solved = set()
    state.tau = 0.2
    with pytest.raises(ValueError, match="threshold"):
        state.check(cfg)


def test_round_admits_only_above_threshold(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(rl_seeds=(0,))
    manifest = _seed_corpus(run_dir)
    state = BootstrapState.fresh(TARGETS, cfg, manifest)

    # T0 clears 0.8, T1 sits exactly on it (strict comparison: no), T2 low
    sr = {T0: 0.9, T1: 0.8, T2: 0.3}
    report = run_round(state, cfg, _ops(lambda t, k: sr[t]), run_dir)

    assert state.solved == {T0}
    assert report.newly_solved == [T0]
    assert report.failed_tasks == []
    assert report.success_rates == sr
    assert report.tau_before == 0.8 and report.tau_after == 0.8
    assert state.patience_used == 0
    assert state.round_index == 1

    # the admitted file holds the exact batch that was evaluated
    assert len(report.admitted) == 1
    entry = report.admitted[0]
    assert entry.task == T0 and entry.provenance.round == 0
    from compogen.data import load
    stored = load(os.path.join(run_dir, entry.path))
    assert np.all(stored.rows == np.float32(_marker(T0, 0)))
    state.manifest.verify(base_dir=run_dir)


def test_success_is_mean_over_policy_seeds(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(rl_seeds=(0, 1))
    state = BootstrapState.fresh((T0,), cfg, _seed_corpus(run_dir))
    # seeds give 0.7 and 0.95: mean 0.825 > 0.8 admits
    report = run_round(state, cfg, _ops(lambda t, k: 0.7, per_seed_bump=0.25),
                       run_dir)
    assert report.success_rates[T0] == pytest.approx(0.825)
    assert state.solved == {T0}


def test_threshold_decays_and_holds_at_floor(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(max_rounds=6, rl_seeds=(0,))
    manifest = _seed_corpus(run_dir)
    state, reports = run(cfg, _ops(lambda t, k: 0.0), TARGETS, manifest,
                         run_dir)
    assert len(reports) == 6
    assert state.solved == set()
    assert [r.tau_before for r in reports] == [0.8, 0.7, 0.6, 0.5, 0.5, 0.5]
    assert [r.tau_after for r in reports] == [0.7, 0.6, 0.5, 0.5, 0.5, 0.5]
    assert state.tau == 0.5


def test_patience_gates_decay(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(patience=2, max_rounds=4, rl_seeds=(0,))
    state, reports = run(cfg, _ops(lambda t, k: 0.0), TARGETS,
                         _seed_corpus(run_dir), run_dir)
    # two stalled rounds per decay step
    assert [r.tau_after for r in reports] == [0.8, 0.7, 0.7, 0.6]


def test_all_solved_in_first_round_stops_after_one(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(max_rounds=5, rl_seeds=(0,))
    state, reports = run(cfg, _ops(lambda t, k: 0.95), TARGETS,
                         _seed_corpus(run_dir), run_dir)
    assert len(reports) == 1
    assert state.solved == set(TARGETS)
    assert reports[0].newly_solved == sorted(TARGETS)


def test_solved_set_monotone_and_corpus_grows(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(max_rounds=3, rl_seeds=(0,))
    order = sorted(TARGETS)
    trained = []

    # task i clears the bar starting at round i
    def sr(task, k):
        return 0.95 if order.index(task) <= k else 0.1

    state, reports = run(cfg, _ops(sr, trained=trained), TARGETS,
                         _seed_corpus(run_dir), run_dir)
    assert state.solved == set(TARGETS)
    seen = set()
    for rep in reports:
        seen |= set(rep.newly_solved)
    assert seen == set(TARGETS)
    assert [len(r.newly_solved) for r in reports] == [1, 1, 1]

    # the corpus each round is the real data plus every batch admitted so far
    assert [k for k, _ in trained] == [0, 1, 2]
    assert [len(bs) for _, bs in trained] == [1, 2, 3]
    for k, bs in trained:
        markers = [m for _, m in bs]
        assert markers[0] == 0.0   # the real seed batch
        expected = sorted(_marker(order[i], i) for i in range(k))
        assert sorted(markers[1:]) == expected


def test_evaluator_failure_marks_task_and_continues(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(rl_seeds=(0,))
    state = BootstrapState.fresh(TARGETS, cfg, _seed_corpus(run_dir))
    report = run_round(state, cfg,
                       _ops(lambda t, k: 0.9, fail_tasks=(T1,)), run_dir)
    assert report.failed_tasks == [T1]
    assert report.success_rates[T1] is None
    assert state.solved == {T0, T2}
    payload = report.to_json()
    assert payload["success_rates"][",".join(map(str, T1))] is None


def test_model_training_failure_aborts_round(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(rl_seeds=(0,))
    state = BootstrapState.fresh(TARGETS, cfg, _seed_corpus(run_dir))

    def broken(batches, k):
        raise RuntimeError("model diverged")

    ops = _ops(lambda t, k: 0.9)
    with pytest.raises(RuntimeError, match="diverged"):
        run_round(state, cfg,
                  BootstrapOps(broken, ops.synthesize, ops.policy_success),
                  run_dir)
    # nothing advanced or was admitted
    assert state.round_index == 0
    assert state.solved == set()
    assert state.manifest.synthetic_entries() == []


def _round_files(run_dir):
    return sorted(f for f in os.listdir(run_dir) if f.startswith("round_"))


def test_resume_reproduces_identical_bytes(tmp_path):
    cfg = BootstrapConfig(max_rounds=3, rl_seeds=(0,))
    order = sorted(TARGETS)

    def sr(task, k):
        return 0.95 if order.index(task) <= k else 0.1

    dir_a = str(tmp_path / "a")
    run(cfg, _ops(sr), TARGETS, _seed_corpus(dir_a), dir_a)

    # second run: the model trainer explodes at round 1, then we resume
    dir_b = str(tmp_path / "b")
    good = _ops(sr)

    def flaky(batches, k):
        if k == 1:
            raise RuntimeError("interrupted")
        return good.train_model(batches, k)

    with pytest.raises(RuntimeError, match="interrupted"):
        run(cfg, BootstrapOps(flaky, good.synthesize, good.policy_success),
            TARGETS, _seed_corpus(dir_b), dir_b)
    assert _round_files(dir_b) == ["round_00.json"]

    state, reports = run(cfg, good, TARGETS, None, dir_b)  # resumes from disk
    assert [r.round_index for r in reports] == [1, 2]

    assert _round_files(dir_a) == _round_files(dir_b) == [
        "round_00.json", "round_01.json", "round_02.json"]
    for name in _round_files(dir_a):
        a = open(os.path.join(dir_a, name), "rb").read()
        b = open(os.path.join(dir_b, name), "rb").read()
        assert a == b, name
    sa = open(os.path.join(dir_a, "state.json"), "rb").read()
    sb = open(os.path.join(dir_b, "state.json"), "rb").read()
    assert sa == sb


def test_second_invocation_is_a_no_op(tmp_path):
    run_dir = str(tmp_path)
    cfg = BootstrapConfig(max_rounds=2, rl_seeds=(0,))
    ops = _ops(lambda t, k: 0.95)
    run(cfg, ops, TARGETS, _seed_corpus(run_dir), run_dir)
    before = {f: open(os.path.join(run_dir, f), "rb").read()
              for f in _round_files(run_dir) + ["state.json"]}
    state, reports = run(cfg, ops, TARGETS, None, run_dir)
    assert reports == []
    after = {f: open(os.path.join(run_dir, f), "rb").read()
             for f in _round_files(run_dir) + ["state.json"]}
    assert before == after


def test_report_json_is_canonical():
    rep = RoundReport(round_index=0, tau_before=0.8, tau_after=0.7,
                      success_rates={T0: 0.5, T1: None},
                      newly_solved=[], failed_tasks=[T1], admitted=[],
                      wall_clock_s=12.34)
    payload = rep.to_json()
    assert "wall_clock_s" not in payload
    assert json.dumps(payload, sort_keys=True) == json.dumps(payload,
                                                             sort_keys=True)
