"""Experiment orchestration: config, episodic training with joint losses, balanced evaluation, comparisons."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import (
    HEADS,
    FeatureHead,
    LogitVector,
    PrototypeSet,
    logit_scale,
    mean_prototypes,
    raw_logits,
    raw_logits_backward,
)
from .embeddings import Dataset, LabelSplit, SyntheticConfig, generate_synthetic, load_embeddings, split_labels
from .episodes import (
    UNKNOWN,
    EpisodeSpec,
    TaskBatch,
    sample_balanced_eval,
    sample_known_task,
    sample_unknown_task,
    stack_tasks,
)
from .metrics import EpisodeResult, MetricsReport, check_report, evaluate_results, write_scores
from .numeric import PROB_FLOOR, Adam, net_backward, net_forward, spawn_rngs
from .openset import (
    TECHNIQUES,
    DiscriminatorState,
    GarbageState,
    LossWeights,
    frdisc_batch_loss,
    frdisc_residual,
    frdisc_score,
    gc_decision,
    score_mls,
    score_mss,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("fs_acc", "os_acc", "auroc", "aupr", "oscr")
METRIC_TITLES = ("FS ACC", "OS ACC", "AUROC", "AUPR", "OSCR")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    source: str = "synthetic"  # or a path to an embedding CSV
    num_classes: int = 40
    items_per_class: int = 30
    d_in: int = 64
    inter_class_scale: float = 3.0
    intra_class_sigma: float = 1.0
    data_seed: typing.Optional[int] = None  # defaults to seed
    train_fraction: float = 0.7
    k_way: int = 5
    n_shot: int = 1
    head_kind: str = "cosine"
    technique: str = "softmax-mls"
    alpha_eos: float = 0.5
    alpha_disc: float = 1.0
    detach_disc: bool = False
    garbage_init_scale: float = 0.02
    tau: float = 0.5
    d_feat: int = 64
    temperature: float = 10.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    train_iterations: int = 10000
    iteration_cap: typing.Optional[int] = None
    eval_pairs: int = 1000
    seed: int = 0
    export_features: bool = False
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.technique not in TECHNIQUES:
            raise ConfigError(f"technique must be one of {TECHNIQUES}, got {self.technique!r}")
        if self.head_kind not in HEADS:
            raise ConfigError(f"head_kind must be one of {HEADS}, got {self.head_kind!r}")
        if self.technique == "softmax-mls" and self.head_kind != "cosine":
            raise ConfigError("softmax-mls needs bounded logits: use head_kind=cosine or technique=softmax-mss")
        if self.k_way < 2 or self.n_shot < 1:
            raise ConfigError("k_way must be >= 2 and n_shot >= 1")
        for name in ("train_iterations", "eval_pairs", "batch_size", "d_feat"):
            if getattr(self, name) < (0 if name == "train_iterations" else 1):
                raise ConfigError(f"{name} out of range: {getattr(self, name)}")
        if self.iteration_cap is not None and self.iteration_cap < 0:
            raise ConfigError("iteration_cap must be >= 0")
        if self.alpha_eos < 0 or self.alpha_disc < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must lie in [0, 1]")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.temperature <= 0 or self.learning_rate <= 0:
            raise ConfigError("temperature and learning_rate must be positive")

    @property
    def n_iterations(self) -> int:
        cap = self.train_iterations if self.iteration_cap is None else self.iteration_cap
        return min(self.train_iterations, cap)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_eos, self.alpha_disc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = typing.get_type_hints(ExperimentConfig)


def _coerce(name: str, value):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    tp = _FIELD_TYPES[name]
    optional = typing.get_origin(tp) is typing.Union
    if optional:
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    if isinstance(value, str):
        v = value.strip()
        if optional and v.lower() in ("", "none", "null"):
            return None
        if tp is bool:
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        try:
            return tp(v)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {value!r} as {tp.__name__}") from None
    return value


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        out[key] = _coerce(key, value)
    return out


def make_config(path=None, **overrides) -> ExperimentConfig:
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for k, v in overrides.items():
        if v is not None:
            values[k] = _coerce(k, v)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


# -- data --------------------------------------------------------------------


_STREAMS = ("split", "head", "garbage", "disc", "episodes", "select", "eval")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators for every random decision of a run."""
    return dict(zip(_STREAMS, spawn_rngs(seed, len(_STREAMS))))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, LabelSplit]:
    split_rng = rng_streams(cfg.seed)["split"]
    if cfg.source == "synthetic":
        seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
        syn = SyntheticConfig(
            cfg.num_classes, cfg.items_per_class, cfg.d_in, cfg.inter_class_scale, cfg.intra_class_sigma, seed
        )
        ds = generate_synthetic(syn, k_way=cfg.k_way)
    else:
        ds = load_embeddings(cfg.source)
    return ds, split_labels(ds, cfg.train_fraction, split_rng, k_way=cfg.k_way)


# -- model -------------------------------------------------------------------


@dataclass
class ModelState:
    head: FeatureHead
    garbage: GarbageState | None = None
    disc: DiscriminatorState | None = None
    optimizer: Adam = field(default_factory=Adam)
    iteration: int = 0

    def params(self) -> dict[str, np.ndarray]:
        p = self.head.net.params("phi.")
        if self.garbage is not None:
            p["garbage"] = self.garbage.prototype
        if self.disc is not None:
            p.update(self.disc.net.params("disc."))
        return p

    def save(self, path) -> None:
        np.savez(path, **{k: v for k, v in self.params().items()})

    def load_params(self, path) -> None:
        with np.load(path) as data:
            params = self.params()
            if set(data.files) != set(params):
                raise ConfigError(f"model file {path} does not match the configured technique")
            for k, arr in params.items():
                if data[k].shape != arr.shape:
                    raise ConfigError(f"model file {path}: {k} has shape {data[k].shape}, expected {arr.shape}")
                arr[...] = data[k]


def init_model(cfg: ExperimentConfig, d_in: int) -> ModelState:
    rngs = rng_streams(cfg.seed)
    model = ModelState(FeatureHead.init(d_in, cfg.d_feat, rngs["head"]), optimizer=Adam(lr=cfg.learning_rate))
    if cfg.technique == "gc":
        model.garbage = GarbageState.init(cfg.d_feat, rngs["garbage"], cfg.garbage_init_scale)
    if cfg.technique == "fr-disc":
        model.disc = DiscriminatorState.init(cfg.d_feat, rngs["disc"])
    return model


@dataclass
class BatchOutput:
    loss: float
    grads: dict[str, np.ndarray]
    n_pos: int = 0
    n_neg: int = 0


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def batch_loss(model: ModelState, batch: TaskBatch, cfg: ExperimentConfig, select_rng=None) -> BatchOutput:
    """Mean per-task loss over a batch plus the discriminator term, with gradients.

    Known tasks contribute cross-entropy. Unknown tasks contribute the EOS
    term (eos), garbage-labelled cross-entropy (gc) or nothing. For fr-disc
    the balanced discriminator BCE is added on top.
    """
    B, K, N, d_in = batch.support.shape
    tech = cfg.technique
    scale = logit_scale(cfg.head_kind, cfg.temperature)

    X = np.concatenate([batch.support.reshape(-1, d_in), batch.query])
    F, tape = net_forward(model.head.net, X)
    d_feat = F.shape[-1]
    Fs = F[: B * K * N].reshape(B, K, N, d_feat)
    Fq = F[B * K * N :]
    P = mean_prototypes(Fs)
    if tech == "gc":
        P_used = np.concatenate([P, np.broadcast_to(model.garbage.prototype, (B, 1, d_feat))], axis=1)
    else:
        P_used = P
    s = raw_logits(P_used, Fq, cfg.head_kind)
    z = scale * s
    logp = np.maximum(_log_softmax(z), np.log(PROB_FLOOR))
    p = np.exp(_log_softmax(z))

    dz = np.zeros_like(z)
    per_task = np.zeros(B)
    rows = np.arange(B)
    known = batch.known
    kr = rows[known]
    per_task[kr] = -logp[kr, batch.target[kr]]
    dz[kr] = p[kr]
    dz[kr, batch.target[kr]] -= 1.0
    ur = rows[~known]
    if tech == "gc":
        per_task[ur] = -logp[ur, K]
        dz[ur] = p[ur]
        dz[ur, K] -= 1.0
    elif tech == "eos" and cfg.alpha_eos > 0:
        a = cfg.alpha_eos
        per_task[ur] = -a * logp[ur].mean(axis=-1)
        dz[ur] = a * (p[ur] - 1.0 / K)
    loss = float(per_task.sum() / B)
    dz /= B

    out = BatchOutput(loss, {})
    d_P_extra = np.zeros_like(P)
    d_Fq_extra = np.zeros_like(Fq)
    if tech == "fr-disc":
        pred = np.argmax(p, axis=-1)
        correct = known & (pred == batch.target)
        resid = frdisc_residual(Fq, P, p)
        rng = select_rng if select_rng is not None else np.random.default_rng(0)
        dl = frdisc_batch_loss(resid, known, correct, model.disc, cfg.weights, rng)
        out.loss += dl.loss
        out.grads.update(dl.disc_grads)
        out.n_pos, out.n_neg = dl.n_pos, dl.n_neg
        if not cfg.detach_disc:
            d_Fq_extra = dl.d_residual
            np.add.at(d_P_extra, (rows, pred), -dl.d_residual)

    dP_used, dFq = raw_logits_backward(P_used, Fq, s, scale * dz, cfg.head_kind)
    if tech == "gc":
        out.grads["garbage"] = dP_used[:, K].sum(axis=0)
        dP = dP_used[:, :K]
    else:
        dP = dP_used
    dP = dP + d_P_extra
    dFq = dFq + d_Fq_extra
    dFs = np.broadcast_to((dP / N)[:, :, None, :], (B, K, N, d_feat)).reshape(-1, d_feat)
    phi_grads, _ = net_backward(model.head.net, tape, np.concatenate([dFs, dFq]), "phi.")
    out.grads.update(phi_grads)
    return out


def train(cfg: ExperimentConfig, ds: Dataset | None = None, split: LabelSplit | None = None):
    """Episodic training; one optimizer step per ``batch_size`` tasks, known and unknown alternating.

    Returns ``(model, losses)`` where ``losses`` is a list of
    ``(iterations_done, batch_loss)``.
    """
    cfg.validate()
    if ds is None or split is None:
        ds, split = load_data(cfg)
    model = init_model(cfg, ds.d_in)
    spec = EpisodeSpec(cfg.k_way, cfg.n_shot, "train")
    rngs = rng_streams(cfg.seed)
    episode_rng, select_rng = rngs["episodes"], rngs["select"]
    total = cfg.n_iterations
    losses = []
    params = model.params()
    done = 0
    while done < total:
        size = min(cfg.batch_size, total - done)
        tasks = [
            (sample_known_task if (done + i) % 2 == 0 else sample_unknown_task)(ds, split, spec, episode_rng)
            for i in range(size)
        ]
        out = batch_loss(model, stack_tasks(tasks), cfg, select_rng)
        done += size
        if not math.isfinite(out.loss):
            raise TrainingDiverged(f"non-finite loss at iteration {done}")
        model.optimizer.step(params, out.grads)
        model.iteration = done
        losses.append((done, out.loss))
    return model, losses


# -- evaluation --------------------------------------------------------------


def infer(model: ModelState, batch: TaskBatch, cfg: ExperimentConfig):
    """Predictions and open-set scores for a batch of tasks.

    Returns ``(pred, raw, normalized, accept, q_feats)``; ``accept`` is None
    unless the technique decides by rule rather than threshold.
    """
    B, K, N, d_in = batch.support.shape
    Fs, _ = net_forward(model.head.net, batch.support.reshape(-1, d_in))
    Fq, _ = net_forward(model.head.net, batch.query)
    protos = PrototypeSet(mean_prototypes(Fs.reshape(B, K, N, -1)), cfg.head_kind, cfg.temperature)
    tech = cfg.technique
    scale = logit_scale(cfg.head_kind, cfg.temperature)
    accept = None
    if tech == "gc":
        P = np.concatenate([protos.prototypes, np.broadcast_to(model.garbage.prototype, (B, 1, Fq.shape[-1]))], axis=1)
        p = np.exp(_log_softmax(scale * raw_logits(P, Fq, cfg.head_kind)))
        accept, u, pred = gc_decision(p)
        return pred, u, u, accept, Fq
    logits = LogitVector(raw_logits(protos.prototypes, Fq, cfg.head_kind), cfg.head_kind, cfg.temperature)
    p = np.exp(_log_softmax(scale * logits.values))
    pred = np.argmax(p, axis=-1)
    if tech == "fr-disc":
        sc = frdisc_score(model.disc, frdisc_residual(Fq, protos, p))
    elif tech == "softmax-mss" or (tech == "eos" and cfg.head_kind != "cosine"):
        sc = score_mss(p)
    else:
        sc = score_mls(logits)
    return pred, np.asarray(sc.raw), np.asarray(sc.normalized), accept, Fq


@dataclass
class Evaluation:
    report: MetricsReport
    results: list[EpisodeResult]
    query_features: np.ndarray


def evaluate(cfg: ExperimentConfig, model: ModelState, ds: Dataset | None = None, split: LabelSplit | None = None) -> Evaluation:
    if ds is None or split is None:
        ds, split = load_data(cfg)
    if set(split.train_labels) & set(split.test_labels):
        raise RuntimeError("train and test label sets overlap")
    eval_rng = rng_streams(cfg.seed)["eval"]
    tasks = sample_balanced_eval(ds, split, EpisodeSpec(cfg.k_way, cfg.n_shot, "test"), cfg.eval_pairs, eval_rng)
    batch = stack_tasks(tasks)
    pred, raw, norm, accept, feats = infer(model, batch, cfg)
    results = []
    for i, t in enumerate(tasks):
        results.append(
            EpisodeResult(
                known=t.known,
                true_class=t.query_target if t.known else UNKNOWN,
                predicted_class=int(pred[i]),
                score=float(norm[i]),
                raw=float(raw[i]),
                accept=None if accept is None else bool(accept[i]),
            )
        )
    report = evaluate_results(results, cfg.tau)
    problems = check_report(report)
    if problems:
        raise RuntimeError("metric invariants violated: " + "; ".join(problems))
    return Evaluation(report, results, feats)


@dataclass
class RunRecord:
    config: dict
    losses: list[tuple[int, float]]
    report: MetricsReport
    wall_clock: float
    seed: int


def run_experiment(cfg: ExperimentConfig, out_dir=None, model_path=None, do_train: bool = True) -> RunRecord:
    t0 = time.perf_counter()
    ds, split = load_data(cfg)
    if do_train:
        model, losses = train(cfg, ds, split)
    else:
        model, losses = init_model(cfg, ds.d_in), []
        if model_path is not None:
            model.load_params(model_path)
    ev = evaluate(cfg, model, ds, split)
    record = RunRecord(cfg.to_dict(), losses, ev.report, time.perf_counter() - t0, cfg.seed)
    if out_dir is not None:
        write_run(record, ev, Path(out_dir), model if do_train else None, cfg.export_features)
    return record


def write_run(record: RunRecord, ev: Evaluation, out: Path, model: ModelState | None = None, features: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(record.report.to_dict(), indent=2) + "\n", encoding="utf-8")
    write_scores(ev.results, out / "scores.csv")
    with open(out / "losses.csv", "w", encoding="utf-8") as f:
        f.write("iteration,loss\n")
        for it, loss in record.losses:
            f.write(f"{it},{loss:.17g}\n")
    meta = {"config": record.config, "seed": record.seed, "wall_clock_s": record.wall_clock}
    (out / "run.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if model is not None:
        model.save(out / "model.npz")
    if features:
        with open(out / "features.csv", "w", encoding="utf-8") as f:
            d = ev.query_features.shape[1]
            f.write("episode_id,known_flag,true_class," + ",".join(f"f{j}" for j in range(d)) + "\n")
            for i, (r, v) in enumerate(zip(ev.results, ev.query_features)):
                f.write(f"{i},{int(r.known)},{r.true_class}," + ",".join(f"{x:.9g}" for x in v) + "\n")


# -- comparison and correlation ------------------------------------------------

# fields allowed to differ between rows of a comparison
_TECHNIQUE_FIELDS = {"technique", "alpha_eos", "alpha_disc", "detach_disc", "garbage_init_scale", "out_dir", "export_features"}


@dataclass
class Comparison:
    techniques: list[str]
    rows: list[dict]  # metric name -> value
    deltas: list[dict]

    def to_csv(self) -> str:
        cols = ["technique", *METRIC_COLUMNS, *(f"delta_{c}" for c in METRIC_COLUMNS)]
        lines = [",".join(cols)]
        for tech, row, delta in zip(self.techniques, self.rows, self.deltas):
            vals = [f"{row[c]:.6f}" for c in METRIC_COLUMNS] + [f"{delta[c]:+.6f}" for c in METRIC_COLUMNS]
            lines.append(",".join([tech, *vals]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        w = max(12, *(len(t) for t in self.techniques))
        head = "OS-Method".ljust(w) + "".join(t.rjust(16) for t in METRIC_TITLES)
        lines = [head, "-" * len(head)]
        for tech, row, delta in zip(self.techniques, self.rows, self.deltas):
            cells = "".join(f"{100 * row[c]:7.2f} ({100 * delta[c]:+5.2f})".rjust(16) for c in METRIC_COLUMNS)
            lines.append(tech.ljust(w) + cells)
        return "\n".join(lines) + "\n"


def compare(configs: list[ExperimentConfig], out_dir=None) -> Comparison:
    """Run each config and tabulate the five metrics, with deltas against the first row."""
    if not configs:
        raise ConfigError("compare needs at least one config")
    base = configs[0].to_dict()
    for cfg in configs[1:]:
        other = cfg.to_dict()
        diff = sorted(k for k in base if k not in _TECHNIQUE_FIELDS and base[k] != other[k])
        if diff:
            raise ConfigError(f"compared configs must share dataset, split and seed; differing keys: {diff}")
    rows = []
    for cfg in configs:
        sub = None if out_dir is None else Path(out_dir) / cfg.technique
        rec = run_experiment(cfg, sub)
        rows.append({c: getattr(rec.report, c) for c in METRIC_COLUMNS})
    deltas = [{c: r[c] - rows[0][c] for c in METRIC_COLUMNS} for r in rows]
    table = Comparison([c.technique for c in configs], rows, deltas)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "comparison.csv").write_text(table.to_csv(), encoding="utf-8")
        (Path(out_dir) / "comparison.txt").write_text(table.to_text(), encoding="utf-8")
    return table


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return math.nan
    return float(dx @ dy) / denom


def correlation_report(points: list[tuple[str, float, float]]) -> dict:
    """``points`` are ``(name, fs_acc, auroc)`` triples, one per run."""
    if len(points) < 3:
        raise ValueError(f"correlation needs at least 3 runs, got {len(points)}")
    r = pearson([p[1] for p in points], [p[2] for p in points])
    rep = {"points": [{"run": n, "fs_acc": a, "auroc": b} for n, a, b in points], "pearson": r}
    if math.isnan(r):
        rep["note"] = "zero variance in one metric; Pearson coefficient undefined"
    return rep
