import json
import math

import numpy as np
import pytest

from fsosar.episodes import EpisodeSpec, sample_known_task, sample_unknown_task, stack_tasks
from fsosar.numeric import DenseNet
from fsosar.openset import DiscriminatorState
from fsosar.runner import (
    ConfigError,
    ExperimentConfig,
    batch_loss,
    compare,
    correlation_report,
    evaluate,
    init_model,
    load_data,
    make_config,
    parse_config_text,
    pearson,
    rng_streams,
    run_experiment,
    train,
)

from oracles import central_diff, pearson_direct, rel_err

SMALL = dict(num_classes=20, items_per_class=8, d_in=6, d_feat=5, eval_pairs=100)


def small_cfg(**kw):
    return ExperimentConfig(**{**SMALL, **kw})


def _batch(cfg, ds, split, rng, size=6):
    spec = EpisodeSpec(cfg.k_way, cfg.n_shot, "train")
    tasks = [(sample_known_task if i % 2 == 0 else sample_unknown_task)(ds, split, spec, rng) for i in range(size)]
    return stack_tasks(tasks)


@pytest.mark.parametrize(
    "technique, head",
    [("softmax-mls", "cosine"), ("eos", "cosine"), ("eos", "neg_distance"), ("gc", "cosine"), ("gc", "neg_distance"), ("fr-disc", "cosine"), ("fr-disc", "neg_distance")],
)
def test_batch_loss_gradients_match_finite_differences(technique, head):
    cfg = small_cfg(technique=technique, head_kind=head, n_shot=2)
    ds, split = load_data(cfg)
    rng = np.random.default_rng(0)
    worst = {}
    for case in range(100):
        model = init_model(cfg, ds.d_in)
        model.head.net.layers[0].W[...] = rng.normal(size=model.head.net.layers[0].W.shape)
        if model.garbage is not None:
            model.garbage.prototype[...] = rng.normal(size=cfg.d_feat)
        if model.disc is not None:
            model.disc = DiscriminatorState(DenseNet.build([cfg.d_feat, 3, 1], ["relu", "sigmoid"], rng))
        batch = _batch(cfg, ds, split, rng)

        def f():
            return batch_loss(model, batch, cfg, np.random.default_rng(case)).loss

        out = batch_loss(model, batch, cfg, np.random.default_rng(case))
        for name, arr in model.params().items():
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            group = name.split(".")[0]
            err = rel_err(out.grads[name][idx], central_diff(f, arr, idx))
            worst[group] = max(worst.get(group, 0.0), err)
    assert max(worst.values()) < 1e-4, worst
    expected = {"phi"} | ({"garbage"} if technique == "gc" else set()) | ({"disc"} if technique == "fr-disc" else set())
    assert set(worst) == expected


def test_detached_discriminator_leaves_features_alone():
    cfg = small_cfg(technique="fr-disc", detach_disc=True)
    ds, split = load_data(cfg)
    model = init_model(cfg, ds.d_in)
    rng = np.random.default_rng(1)
    model.disc = DiscriminatorState(DenseNet.build([cfg.d_feat, 3, 1], ["relu", "sigmoid"], rng))
    batch = _batch(cfg, ds, split, rng, size=16)
    attached = batch_loss(model, batch, ExperimentConfig(**{**cfg.to_dict(), "detach_disc": False}), np.random.default_rng(0))
    detached = batch_loss(model, batch, cfg, np.random.default_rng(0))
    base = batch_loss(model, batch, ExperimentConfig(**{**cfg.to_dict(), "alpha_disc": 0.0}), np.random.default_rng(0))
    np.testing.assert_array_equal(detached.grads["phi.0.W"], base.grads["phi.0.W"])
    assert attached.n_pos > 0
    assert not np.array_equal(attached.grads["phi.0.W"], base.grads["phi.0.W"])


def test_rng_streams_are_distinct_and_reproducible():
    a, b = rng_streams(3), rng_streams(3)
    draws = {k: g.random() for k, g in a.items()}
    assert draws == {k: g.random() for k, g in b.items()}
    assert len(set(draws.values())) == len(draws)
    assert rng_streams(4)["split"].random() != rng_streams(3)["split"].random()


def test_zero_iterations_is_initialization():
    cfg = small_cfg(train_iterations=0)
    model, losses = train(cfg)
    init = init_model(cfg, cfg.d_in)
    assert losses == [] and model.iteration == 0
    for k, v in init.params().items():
        np.testing.assert_array_equal(model.params()[k], v)


def test_iteration_cap_limits_training():
    model, losses = train(small_cfg(train_iterations=100, iteration_cap=40))
    assert model.iteration == 40
    assert [it for it, _ in losses] == [16, 32, 40]


def test_training_is_deterministic(tmp_path):
    cfg = small_cfg(technique="fr-disc", train_iterations=160)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert a.report == b.report and a.losses == b.losses
    assert (tmp_path / "a" / "report.json").read_text() == (tmp_path / "b" / "report.json").read_text()
    for name in ("report.json", "scores.csv", "losses.csv", "run.json", "model.npz"):
        assert (tmp_path / "a" / name).exists()


@pytest.mark.parametrize("technique, weight", [("eos", "alpha_eos"), ("fr-disc", "alpha_disc")])
def test_zero_weight_auxiliary_loss_leaves_features_unchanged(technique, weight):
    base_cfg = small_cfg(train_iterations=320)
    cfg = small_cfg(train_iterations=320, technique=technique, **{weight: 0.0})
    base, _ = train(base_cfg)
    other, _ = train(cfg)
    np.testing.assert_array_equal(other.head.net.layers[0].W, base.head.net.layers[0].W)


def test_eos_without_weight_evaluates_like_mss():
    mss = small_cfg(train_iterations=320, head_kind="neg_distance", technique="softmax-mss")
    eos = small_cfg(train_iterations=320, head_kind="neg_distance", technique="eos", alpha_eos=0.0)
    a, b = run_experiment(mss), run_experiment(eos)
    assert a.report == b.report


def test_training_beats_chance():
    cfg = ExperimentConfig(inter_class_scale=5.0, intra_class_sigma=0.5, train_iterations=2000)
    ds, split = load_data(cfg)
    model, _ = train(cfg, ds, split)
    rng = np.random.default_rng(123)
    spec = EpisodeSpec(5, 1, "train")
    batch = stack_tasks([sample_known_task(ds, split, spec, rng) for _ in range(200)])
    ce = batch_loss(model, batch, cfg).loss
    assert ce < math.log(5)


def test_untrained_discriminator_is_chance():
    cfg = small_cfg(technique="fr-disc", train_iterations=0)
    rec = run_experiment(cfg)
    assert abs(rec.report.auroc - 0.5) < 1e-9
    assert rec.report.os_acc == 0.5
    assert rec.report.n_known == rec.report.n_unknown == 100


def test_collapsed_clusters_give_perfect_baseline():
    cfg = ExperimentConfig(intra_class_sigma=1e-9, train_iterations=0, eval_pairs=1000)
    rep = run_experiment(cfg).report
    assert rep.fs_acc == 1.0 and rep.auroc > 0.99


def test_eval_pair_count():
    rep = run_experiment(small_cfg(train_iterations=0, eval_pairs=500)).report
    assert rep.n_known == rep.n_unknown == 500


def test_config_parsing_and_overrides(tmp_path):
    text = "# experiment\ntechnique = eos\nk_way = 4\nalpha_eos = 0.25  # weight\ndetach_disc = yes\niteration_cap = none\n"
    values = parse_config_text(text)
    assert values == {"technique": "eos", "k_way": 4, "alpha_eos": 0.25, "detach_disc": True, "iteration_cap": None}
    p = tmp_path / "c.cfg"
    p.write_text(text)
    cfg = make_config(p, k_way="3", seed=None)
    assert (cfg.technique, cfg.k_way, cfg.seed) == ("eos", 3, 0)
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config_text("nope = 1")
    with pytest.raises(ConfigError):
        parse_config_text("k_way = five")
    with pytest.raises(ConfigError, match="bounded"):
        make_config(technique="softmax-mls", head_kind="neg_distance")
    with pytest.raises(ConfigError):
        make_config(tau="1.5")


def test_compare_structure(tmp_path):
    one = compare([small_cfg(train_iterations=32)])
    assert len(one.rows) == 1 and all(v == 0 for v in one.deltas[0].values())
    techs = ["softmax-mls", "eos", "gc", "fr-disc"]
    table = compare([small_cfg(train_iterations=32, technique=t) for t in techs], tmp_path)
    assert table.techniques == techs
    for row, delta in zip(table.rows, table.deltas):
        for c in row:
            assert delta[c] == pytest.approx(row[c] - table.rows[0][c], abs=1e-15)
    header = (tmp_path / "comparison.csv").read_text().splitlines()[0].split(",")
    assert header[1:6] == ["fs_acc", "os_acc", "auroc", "aupr", "oscr"]
    text = (tmp_path / "comparison.txt").read_text().splitlines()[0]
    titles = ["FS ACC", "OS ACC", "AUROC", "AUPR", "OSCR"]
    assert [text.index(t) for t in titles] == sorted(text.index(t) for t in titles)
    assert json.loads((tmp_path / "gc" / "report.json").read_text())["n_known"] == 100


def test_compare_rejects_mismatched_configs():
    with pytest.raises(ConfigError, match="seed"):
        compare([small_cfg(), small_cfg(technique="eos", seed=1)])


def test_correlation_report():
    rep = correlation_report([("a", 0.5, 0.6), ("b", 0.5, 0.6), ("c", 0.5, 0.6)])
    assert math.isnan(rep["pearson"]) and "note" in rep
    rep = correlation_report([("a", 0.1, 0.3), ("b", 0.2, 0.5), ("c", 0.4, 0.9)])
    assert rep["pearson"] == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        correlation_report([("a", 0.1, 0.2), ("b", 0.3, 0.4)])
    rng = np.random.default_rng(0)
    for _ in range(50):
        x, y = rng.random(8), rng.random(8)
        assert abs(pearson(x, y) - pearson_direct(list(x), list(y))) < 1e-9


def test_evaluation_splits_are_disjoint():
    cfg = small_cfg(train_iterations=0)
    ds, split = load_data(cfg)
    ev = evaluate(cfg, init_model(cfg, ds.d_in), ds, split)
    assert len(ev.results) == 200
    assert ev.query_features.shape == (200, cfg.d_feat)
