"""Acceptance suite. Each criterion prints one ``[criterion N] PASS|FAIL`` line.

Run under pytest, or directly with ``python3 tests/test_acceptance.py``.
"""

import functools
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from fsosar.cli import main as cli_main  # noqa: E402
from fsosar.embeddings import Dataset, LabelSplit  # noqa: E402
from fsosar.episodes import EpisodeSpec, check_task, sample_balanced_eval, sample_known_task, sample_unknown_task, stack_tasks  # noqa: E402
from fsosar.metrics import EpisodeResult, MetricsError, aupr, auroc, check_report, os_accuracy, oscr  # noqa: E402
from fsosar.numeric import DenseNet  # noqa: E402
from fsosar.openset import DiscriminatorState  # noqa: E402
from fsosar.runner import ExperimentConfig, batch_loss, init_model, load_data, run_experiment  # noqa: E402

from oracles import brute_oscr, central_diff, dense_aupr, pairwise_auroc, rel_err  # noqa: E402

SEEDS = (0, 1, 2, 3, 4)

# collected for the pytest terminal summary (see conftest.py)
CRITERION_LINES = []


def report(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    CRITERION_LINES.append(line)
    print(line, flush=True)
    return ok


def _instance(rng, ties):
    n = int(rng.integers(1, 501))
    if ties:
        return rng.integers(0, 12, size=n) / 12, rng.integers(0, 12, size=n) / 12, rng.random(n) < 0.6
    return rng.normal(0.4, 1, size=n), rng.normal(0, 1, size=n), rng.random(n) < 0.6


def criterion_1():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    d_auroc = max(abs(auroc(k, u) - pairwise_auroc(k, u)) for k, u, _ in (_instance(rng, i % 2 == 0) for i in range(200)))
    d_oscr = d_aupr = 0.0
    for i in range(100):
        k, u, c = _instance(rng, i % 2 == 0)
        k, u, c = k[:120], u[:120], c[:120]  # brute-force oracles are quadratic in pure Python
        d_oscr = max(d_oscr, abs(oscr(k, c, u) - brute_oscr(k, c, u)))
        d_aupr = max(d_aupr, abs(aupr(k, u) - dense_aupr(k, u)))
    dt = time.perf_counter() - t0
    ok = max(d_auroc, d_oscr, d_aupr) < 1e-9 and dt < 30
    return report(1, ok, f"max |delta| auroc={d_auroc:.1e} oscr={d_oscr:.1e} aupr={d_aupr:.1e}, {dt:.1f}s")


def _fd_group(technique, head, group, cases, rng):
    cfg = ExperimentConfig(num_classes=20, items_per_class=8, d_in=6, d_feat=5, n_shot=2, technique=technique, head_kind=head)
    ds, split = load_data(cfg)
    spec = EpisodeSpec(cfg.k_way, cfg.n_shot)
    worst = 0.0
    for case in range(cases):
        model = init_model(cfg, ds.d_in)
        model.head.net.layers[0].W[...] = rng.normal(size=model.head.net.layers[0].W.shape)
        if model.garbage is not None:
            model.garbage.prototype[...] = rng.normal(size=cfg.d_feat)
        if model.disc is not None:
            model.disc = DiscriminatorState(DenseNet.build([cfg.d_feat, 3, 1], ["relu", "sigmoid"], rng))
        tasks = [(sample_known_task if i % 2 == 0 else sample_unknown_task)(ds, split, spec, rng) for i in range(8)]
        batch = stack_tasks(tasks)

        def f():
            return batch_loss(model, batch, cfg, np.random.default_rng(case)).loss

        grads = batch_loss(model, batch, cfg, np.random.default_rng(case)).grads
        for name, arr in model.params().items():
            if name.split(".")[0] != group:
                continue
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            worst = max(worst, rel_err(grads[name][idx], central_diff(f, arr, idx, h=1e-5)))
    return worst


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    worst = {}
    for head in ("cosine", "neg_distance"):
        worst[f"projection/{head}"] = max(_fd_group(t, head, "phi", 50, rng) for t in ("eos", "gc", "fr-disc"))
        worst[f"garbage/{head}"] = _fd_group("gc", head, "garbage", 100, rng)
        worst[f"disc/{head}"] = _fd_group("fr-disc", head, "disc", 100, rng)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return report(2, ok, f"max rel err {detail}; {dt:.1f}s")


def criterion_3():
    problems = []
    for tech, head in (("softmax-mls", "cosine"), ("softmax-mss", "neg_distance"), ("eos", "cosine"), ("gc", "cosine"), ("fr-disc", "cosine")):
        for seed in (0, 1):
            cfg = ExperimentConfig(technique=tech, head_kind=head, train_iterations=320, eval_pairs=300, seed=seed)
            rep = run_experiment(cfg).report
            problems += [f"{tech}/{seed}: {p}" for p in check_report(rep, tol=0.0)]
    rng = np.random.default_rng(300)
    worst = 0.0
    for i in range(100):
        k, u, _ = _instance(rng, i % 2 == 0)
        base = auroc(k, u)
        sig = lambda x: 1.0 / (1.0 + np.exp(-(5 * x - 2.5)))  # noqa: E731
        worst = max(worst, abs(auroc(k**3, u**3) - base), abs(auroc(sig(k), sig(u)) - base))
    ok = not problems and worst < 1e-9
    return report(3, ok, f"{len(problems)} invariant violations over 10 evaluations; monotone-transform |delta| {worst:.1e}")


def criterion_4():
    base = run_experiment(ExperimentConfig(intra_class_sigma=1e-9, train_iterations=0, eval_pairs=1000)).report
    disc = run_experiment(ExperimentConfig(technique="fr-disc", train_iterations=0, eval_pairs=1000)).report
    ok = base.fs_acc == 1.0 and base.auroc > 0.99 and abs(disc.auroc - 0.5) <= 1e-9
    return report(4, ok, f"sigma->0 FS ACC={base.fs_acc:.4f} AUROC={base.auroc:.4f}; untrained FR-Disc AUROC={disc.auroc:.9f}")


@functools.lru_cache(maxsize=None)
def headline_runs():
    """Mean metrics per (n_shot, technique) over five seeds on the default benchmark."""
    out = {}
    for n_shot in (1, 5):
        for tech in ("softmax-mls", "fr-disc", "eos"):
            reps = [run_experiment(ExperimentConfig(n_shot=n_shot, technique=tech, train_iterations=5000, eval_pairs=1000, seed=s)).report for s in SEEDS]
            out[n_shot, tech] = {m: 100 * float(np.mean([getattr(r, m) for r in reps])) for m in ("fs_acc", "auroc", "oscr")}
    return out


def criterion_5():
    t0 = time.perf_counter()
    runs = headline_runs()
    ok, parts = True, []
    for n_shot in (1, 5):
        b, f = runs[n_shot, "softmax-mls"], runs[n_shot, "fr-disc"]
        shot_ok = f["oscr"] >= b["oscr"] + 1.0 and f["auroc"] >= b["auroc"] + 1.0 and f["fs_acc"] >= b["fs_acc"] - 1.0
        ok &= shot_ok
        parts.append(
            f"{n_shot}-shot OSCR {f['oscr']:.2f} vs {b['oscr']:.2f}, AUROC {f['auroc']:.2f} vs {b['auroc']:.2f}, "
            f"FS {f['fs_acc']:.2f} vs {b['fs_acc']:.2f}"
        )
    return report(5, ok, "FR-Disc vs baseline: " + "; ".join(parts) + f" ({time.perf_counter() - t0:.0f}s)")


def criterion_6():
    runs = headline_runs()
    ok = all(runs[n, "eos"]["auroc"] >= runs[n, "softmax-mls"]["auroc"] for n in (1, 5))
    detail = "; ".join(f"{n}-shot AUROC {runs[n, 'eos']['auroc']:.2f} vs {runs[n, 'softmax-mls']['auroc']:.2f}" for n in (1, 5))
    return report(6, ok, "EOS vs baseline: " + detail)


def criterion_7(tmp_path):
    worst = 0.0
    for tech in ("softmax-mls", "eos", "gc", "fr-disc"):
        cfg = ExperimentConfig(technique=tech, train_iterations=480, eval_pairs=200, seed=7)
        a = run_experiment(cfg, tmp_path / f"{tech}-a")
        b = run_experiment(cfg, tmp_path / f"{tech}-b")
        ja = json.loads((tmp_path / f"{tech}-a" / "report.json").read_text())
        jb = json.loads((tmp_path / f"{tech}-b" / "report.json").read_text())
        for k in ("fs_acc", "os_acc", "auroc", "aupr", "oscr"):
            worst = max(worst, abs(ja[k] - jb[k]), abs(getattr(a.report, k) - getattr(b.report, k)))
    code = cli_main(["compare", "--iterations", "480", "--set", "eval_pairs=200", "--out", str(tmp_path / "cmp")])
    rows = (tmp_path / "cmp" / "comparison.csv").read_text().splitlines() if code == 0 else []
    ok = worst <= 1e-9 and code == 0 and len(rows) == 5
    return report(7, ok, f"repeat-run max |delta|={worst:.1e}; compare exit code {code}, {max(len(rows) - 1, 0)} rows")


def criterion_8():
    unbalanced = [EpisodeResult(True, 0, 0, 0.9, 0.9), EpisodeResult(True, 1, 1, 0.8, 0.8), EpisodeResult(False, -1, 0, 0.1, 0.1)]
    try:
        os_accuracy(unbalanced, 0.5)
        rejected = False
    except MetricsError:
        rejected = True
    rng = np.random.default_rng(800)
    violations, n_tasks = 0, 0
    while n_tasks < 10_000:
        n_classes = int(rng.integers(6, 15))
        per_class = int(rng.integers(2, 8))
        labels = np.repeat(rng.permutation(1000)[:n_classes], per_class)
        ds = Dataset(rng.permutation(100_000)[: len(labels)], labels, rng.normal(size=(len(labels), 4)))
        split = LabelSplit((-1,), tuple(sorted(set(labels.tolist()))))
        k = int(rng.integers(2, min(n_classes - 1, 6) + 1))
        n = int(rng.integers(1, per_class))
        tasks = sample_balanced_eval(ds, split, EpisodeSpec(k, n, "test"), 250, rng)
        violations += sum(len(check_task(t)) for t in tasks)
        violations += int(sum(t.known for t in tasks) != 250)
        n_tasks += len(tasks)
    ok = rejected and violations == 0
    return report(8, ok, f"unbalanced input {'rejected' if rejected else 'ACCEPTED'}; {n_tasks} fuzzed tasks, {violations} violations")


def test_criterion_1_oracle_equivalence():
    assert criterion_1()


def test_criterion_2_gradient_correctness():
    assert criterion_2()


def test_criterion_3_metric_invariants():
    assert criterion_3()


def test_criterion_4_degenerate_limits():
    assert criterion_4()


def test_criterion_5_frdisc_beats_baseline():
    assert criterion_5()


def test_criterion_6_eos_direction():
    assert criterion_6()


def test_criterion_7_reproducibility(tmp_path):
    assert criterion_7(tmp_path)


def test_criterion_8_balanced_contract():
    assert criterion_8()


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        results = [criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5(), criterion_6(), criterion_7(Path(tmp)), criterion_8()]
    sys.exit(0 if all(results) else 1)
