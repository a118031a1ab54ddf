from __future__ import annotations

import math

import numpy as np
import pytest

from nodiff.checkpoint import load_checkpoint
from nodiff.errors import ConfigError, DataError, NumericError, TrainingError
from nodiff.harness import TrainConfig, build_windows, fit, fit_norm_stats, load_config
from nodiff.harness.evaluate import (
    ExpertPlanner,
    PolicyPlanner,
    RandomPlanner,
    bench,
    read_reports_csv,
    reports_to_csv,
    rollout_eval,
    run_episode,
)
from nodiff.harness.tables import (
    ABLATION_SETUPS,
    METHODS,
    checkpoint_name,
    method_config,
    run_ablation,
    run_table1,
    train_table1_checkpoints,
)
from nodiff.harness.train import prepare
from nodiff.ndmath import RngStream
from nodiff.policy import Policy
from nodiff.toyworld import EpisodeRecord, generate_dataset, load_dataset

TINY = dict(
    feature_dim=8, encoder_hidden=8, denoiser_hidden=(16, 16), head_hidden=8, k_embed_dim=4,
    K_m=10, K_eval=(1, 5), iterations=20, batch_size=8, log_interval=5, seeds=(0,),
)


def tiny(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="module")
def reach_ds(tmp_path_factory):
    return generate_dataset("reach", 6, 0, tmp_path_factory.mktemp("ds") / "reach.ds")


@pytest.fixture(scope="module")
def episodes(reach_ds):
    return load_dataset(reach_ds)[1]


# -- windows and normalisation ------------------------------------------------


def test_one_window_per_time_index(episodes):
    ep = episodes[0]
    windows = build_windows(ep, 2, 16, (1, 16, 16, 1))
    assert len(windows) == len(ep)


def test_first_window_front_padded(episodes):
    w, _ = build_windows(episodes[0], 2, 16, (1, 16, 16, 1))[0]
    assert np.array_equal(w.states[0], w.states[1]) and np.array_equal(w.images[0], w.images[1])


def test_last_window_back_padded(episodes):
    ep = episodes[1]
    _, motion = build_windows(ep, 2, 16, (1, 16, 16, 1))[-1]
    assert np.array_equal(motion, np.repeat(ep.actions[-1:], 16, axis=0))


def test_window_in_the_middle_is_a_slice(episodes):
    ep = episodes[2]
    w, motion = build_windows(ep, 2, 4, (1, 16, 16, 1))[3]
    assert np.array_equal(w.states, ep.states[2:4]) and np.array_equal(motion, ep.actions[3:7])


def test_empty_episode_rejected():
    empty = EpisodeRecord("reach", 0, np.zeros((0, 3)), np.zeros((0, 256)), np.zeros((0, 3)), False)
    with pytest.raises(DataError):
        build_windows(empty, 2, 16, (1, 16, 16, 1))


def test_dataset_actions_normalise_and_round_trip(episodes):
    norm = fit_norm_stats(episodes)
    acts = np.concatenate([ep.actions for ep in episodes])
    z = norm.normalize_actions(acts)
    assert z.min() >= -1.0 and z.max() <= 1.0
    np.testing.assert_allclose(norm.denormalize_actions(z), acts, rtol=0, atol=1e-12)


# -- config -------------------------------------------------------------------


def test_config_defaults():
    c = TrainConfig()
    assert (c.T_o, c.T_p, c.T_a, c.K_m, c.iterations) == (2, 16, 8, 100, 30_000)
    assert c.K_eval == (1, 10, 50, 100)


@pytest.mark.parametrize("bad", [dict(T_a=0), dict(T_a=17), dict(K_eval=(1, 101)), dict(task="fly")])
def test_config_invariants(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_file_round_trip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("setup: IV\nlr: 0.001\nK_eval: [1, 10]\nclip_sample: false\n")
    c = load_config(p)
    assert (c.setup, c.lr, c.K_eval, c.clip_sample) == ("IV", 1e-3, (1, 10), False)
    p.write_text("nested: {a: 1}\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("colour: red\n")
    with pytest.raises(ConfigError, match="colour"):
        load_config(p)


# -- training -----------------------------------------------------------------


def test_zero_iterations_is_initialisation(reach_ds, tmp_path):
    c = tiny(iterations=0)
    res = fit(c, reach_ds, tmp_path / "c0.json")
    init, _, _ = prepare(c, reach_ds)
    loaded, doc = load_checkpoint(res.checkpoint)
    assert loaded.params.tobytes() == init.params.tobytes()
    assert doc["meta"]["iterations"] == 0
    norm = fit_norm_stats(load_dataset(reach_ds)[1])
    assert loaded.norm.to_dict() == norm.to_dict()


def test_training_is_bitwise_reproducible(reach_ds, tmp_path):
    a = fit(tiny(), reach_ds, tmp_path / "a.json")
    b = fit(tiny(), reach_ds, tmp_path / "b.json")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.log_path.read_bytes() == b.log_path.read_bytes()
    c = fit(tiny(seed=1), reach_ds, tmp_path / "c.json")
    assert c.checkpoint.read_bytes() != a.checkpoint.read_bytes()


def test_training_log_records(reach_ds):
    res = fit(tiny(iterations=12), reach_ds)
    assert [r["iteration"] for r in res.log] == [5, 10, 12]
    for r in res.log:
        assert math.isclose(r["total"], r["L_diff"] + 1.0 * r["L_mu"] + 0.1 * r["L_sigma"], rel_tol=1e-12)


def test_training_reduces_diffusion_loss(reach_ds):
    res = fit(tiny(iterations=300, lr=1e-3, log_interval=50), reach_ds)
    assert res.log[-1]["L_diff"] < 0.5 * res.log[0]["L_diff"]


def test_task_mismatch_rejected(reach_ds):
    with pytest.raises(DataError):
        fit(tiny(task="push"), reach_ds)


def test_non_finite_loss_stops_with_last_good(reach_ds, tmp_path, monkeypatch):
    real = Policy.loss_total
    calls = {"n": 0}

    def flaky(self, *a, **k):
        calls["n"] += 1
        if calls["n"] == 4:
            raise NumericError("non-finite loss: L_diff=nan", component="policy")
        return real(self, *a, **k)

    monkeypatch.setattr(Policy, "loss_total", flaky)
    with pytest.raises(TrainingError, match="iteration 4") as info:
        fit(tiny(), reach_ds, tmp_path / "x.json")
    saved, doc = load_checkpoint(tmp_path / "x.json.last_good.json")
    assert doc["meta"]["iterations"] == 3
    assert saved.params.tobytes() == info.value.last_good.tobytes()
    assert not (tmp_path / "x.json").exists()


# -- evaluation ---------------------------------------------------------------


@pytest.mark.parametrize("task", ["reach", "push", "pickplace"])
def test_expert_planner_succeeds_everywhere(task):
    rep = rollout_eval(ExpertPlanner(), task, 50, 1, seed=3)
    assert rep.success_rate == 100.0 and rep.successes == rep.episodes == 50


@pytest.fixture(scope="module")
def untrained(reach_ds):
    policy, _, _ = prepare(tiny(), reach_ds)
    return policy


def test_untrained_policy_matches_random_baseline(untrained):
    n = 200
    a = rollout_eval(untrained, "reach", n, 1, seed=11)
    b = rollout_eval(RandomPlanner(norm=untrained.norm), "reach", n, 1, seed=11)
    p = (a.successes + b.successes) / (2 * n)
    se = math.sqrt(max(2 * p * (1 - p) / n, 1e-12))
    assert abs(a.success_rate - b.success_rate) / 100.0 <= max(3 * se, 0.02)


def test_evaluation_is_deterministic(untrained):
    a = rollout_eval(untrained, "reach", 10, 3, seed=5)
    b = rollout_eval(untrained, "reach", 10, 3, seed=5)
    assert a == b and reports_to_csv([a]) == reports_to_csv([b])
    for x, y in zip(a.outcomes, b.outcomes):
        assert x.path.tobytes() == y.path.tobytes()


def test_evaluation_independent_of_episode_order(untrained):
    planner = PolicyPlanner(untrained)
    forward = [run_episode(planner, "reach", i, 2, 7, 8) for i in range(6)]
    backward = [run_episode(planner, "reach", i, 2, 7, 8) for i in reversed(range(6))][::-1]
    for x, y in zip(forward, backward):
        assert (x.success, x.length, x.chunk_sizes) == (y.success, y.length, y.chunk_sizes)
        assert x.path.tobytes() == y.path.tobytes()


def test_parallel_evaluation_matches_serial(untrained):
    a = rollout_eval(untrained, "reach", 6, 1, seed=2)
    b = rollout_eval(untrained, "reach", 6, 1, seed=2, jobs=2)
    assert a.row() == b.row()


class RecordingPlanner:
    """Wraps a planner and keeps every chunk it hands out."""

    def __init__(self, inner):
        self.inner, self.T_o, self.T_p, self.name = inner, inner.T_o, inner.T_p, "rec"
        self.chunks = []

    def check_K(self, K):
        self.inner.check_K(K)

    def plan(self, *args):
        out = self.inner.plan(*args)
        self.chunks.append(out.copy())
        return out


@pytest.mark.parametrize("T_a", [1, 8, 16])
def test_receding_horizon_accounting(untrained, T_a):
    rec = RecordingPlanner(PolicyPlanner(untrained))
    out = run_episode(rec, "reach", 0, 1, 4, T_a)
    assert out.infer_calls == len(rec.chunks) == len(out.chunk_sizes)
    assert sum(out.chunk_sizes) == out.length
    remaining = 80
    for n in out.chunk_sizes[:-1]:
        assert n == min(T_a, remaining)
        remaining -= n
    # replay: executing the recorded prefixes reproduces the path
    from nodiff.toyworld import episode_seed, reset, step

    state, _ = reset("reach", episode_seed(4, 0, "eval"))
    path = [state.robot]
    for chunk, n in zip(rec.chunks, out.chunk_sizes):
        for a in chunk[:n]:
            state, _ = step(state, a)
            path.append(state.robot)
    assert np.array_equal(np.array(path), out.path)


def test_expert_stops_early_on_success():
    out = run_episode(ExpertPlanner(), "reach", 0, 1, 0, 8)
    assert out.success and out.length < 8 * out.infer_calls + 1 and out.length < 80


def test_rollout_rejects_bad_K_and_T_a(untrained):
    with pytest.raises(ConfigError):
        rollout_eval(untrained, "reach", 1, 11, seed=0)
    with pytest.raises(ConfigError):
        rollout_eval(untrained, "reach", 1, 1, seed=0, T_a=17)


def test_report_invariants_and_csv_round_trip(untrained):
    rep = rollout_eval(untrained, "reach", 7, 1, seed=9)
    assert rep.success_rate == 100.0 * rep.successes / rep.episodes
    text = reports_to_csv([rep])
    assert text.endswith("\n") and "\r" not in text
    row = read_reports_csv(text)[0]
    assert row["success_rate"] == rep.success_rate and row["mean_length"] == rep.mean_length


# -- benchmark ----------------------------------------------------------------


def test_bench_call_accounting(untrained):
    before = untrained.denoise_calls
    rep = bench(untrained, [1, 3, 5], 30, warmup=2)
    assert rep.denoise_calls == (1 + 3 + 5) * 30
    assert untrained.denoise_calls - before == (1 + 3 + 5) * (30 + 2)
    assert [r.K for r in rep.rows] == [1, 3, 5] and all(r.calls == 30 for r in rep.rows)
    assert all(r.mean_s > 0 for r in rep.rows) and "thread" in rep.hardware


def test_bench_single_row_and_minimum(untrained):
    assert len(bench(untrained, [1], 30).rows) == 1
    with pytest.raises(ConfigError):
        bench(untrained, [1], 29)
    with pytest.raises(ConfigError):
        bench(untrained, [11], 30)


# -- tables -------------------------------------------------------------------


def test_method_configs():
    base = tiny()
    assert method_config(base, "NO-Diffusion", 2).setup == "I"
    d = method_config(base, "NO-Diffusion-dagger", 0, 5)
    assert d.train_steps == 5 and d.schedule().K_m == 5
    assert d.schedule().alpha_bar[-1] == base.schedule().alpha_bar[-1]
    assert method_config(base, "ISO-BASELINE", 1).setup == "ISO-BASELINE"
    assert checkpoint_name("NO-Diffusion-dagger", 1, 5) == "no_diffusion_dagger_K5_s1.json"


@pytest.fixture(scope="module")
def table_dir(reach_ds, tmp_path_factory):
    d = tmp_path_factory.mktemp("table")
    errs = train_table1_checkpoints(tiny(iterations=5), reach_ds, d)
    assert not any(errs.values())
    return d


def test_table1_structure_and_bytes(table_dir):
    t1 = run_table1(table_dir, "reach", (1, 5), (0,), n_episodes=4)
    t2 = run_table1(table_dir, "reach", (1, 5), (0,), n_episodes=4)
    lines = t1.to_csv().splitlines()
    assert lines[0] == "method,K=1,K=5"
    assert [ln.split(",")[0] for ln in lines[1:]] == list(METHODS)
    assert not t1.missing
    assert t1.to_csv() == t2.to_csv() and t1.reports_csv() == t2.reports_csv()


def test_table1_missing_checkpoint_is_listed(table_dir):
    t = run_table1(table_dir, "reach", (1, 5), (0, 1), n_episodes=2, methods=("ISO-BASELINE",))
    assert len(t.missing) == 2 and all("seed=1" in m for m in t.missing)
    assert t.to_csv().splitlines()[1] == "ISO-BASELINE,NA,NA"


def test_table_checkpoints_are_reused(reach_ds, table_dir):
    path = table_dir / checkpoint_name("NO-Diffusion", 0)
    stamp = path.stat().st_mtime_ns
    train_table1_checkpoints(tiny(iterations=5), reach_ds, table_dir, methods=("NO-Diffusion",))
    assert path.stat().st_mtime_ns == stamp


def test_ablation_rows(reach_ds, tmp_path):
    text, rows = run_ablation(tiny(iterations=3), reach_ds, tmp_path, n_episodes=2)
    assert [r["setup"] for r in rows] == list(ABLATION_SETUPS)
    assert text.splitlines()[0] == "setup,loss,encoder,sigma,conditioning,success_rate,param_count,note"
    counts = {r["setup"]: r["param_count"] for r in rows}
    one, _ = load_checkpoint(tmp_path / "ablation_I_s0.json")
    assert counts["III"] == counts["I"] + one.param_count("psi")
    again, _ = run_ablation(tiny(iterations=3), reach_ds, tmp_path, n_episodes=2)
    assert again == text


def test_ablation_failure_becomes_note(reach_ds, tmp_path, monkeypatch):
    import nodiff.harness.tables as tables

    def boom(config, dataset, path):
        raise NumericError("non-finite loss", component="policy")

    monkeypatch.setattr(tables, "fit", boom)
    _, rows = run_ablation(tiny(iterations=1), reach_ds, tmp_path, setups=("V",), n_episodes=1)
    assert rows[0]["success_rate"] == "NA" and "non-finite" in rows[0]["note"]


def test_rng_streams_are_named():
    a = RngStream.named(0, "batches").integers(0, 100, 5)
    b = RngStream.named(0, "training-noise").integers(0, 100, 5)
    assert not np.array_equal(a, b)
