"""Experiment configuration, single runs, resumable sweeps and aggregation."""
from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, dataset, models
from .dpsgd import DEFAULT_DELTA
from .ldp import LdpSpec, perturb_training_set
from .metrics import MetricsReport, evaluate
from .training import DPConfig, TrainConfig, TrainingDiverged, train

log = logging.getLogger(__name__)

REGIMES = ("none", "dpsgd", "ldp")
INF_MARKER = "inf"
RECORD_VERSION = 1

# DP unit per model: what one clipped example is.
EXAMPLE_UNIT = {"SVD": "interaction", "NCF": "interaction", "BPR": "triple", "VAE": "user"}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    name: str = "movielens"  # "movielens" or "yelp"
    ratings_path: str = "data/ml-1m/ratings.dat"
    movies_path: str = "data/ml-1m/movies.dat"
    review_path: str = "data/yelp/yelp_academic_dataset_review.json"
    business_path: str = "data/yelp/yelp_academic_dataset_business.json"
    state: str = "AZ"
    max_users: int = 0  # 0 keeps every user
    subsample_seed: int = 0
    split_seed: int = 0
    cache_dir: str = ""  # empty: <output_dir>/cache


@dataclass
class ModelConfig:
    kind: str = "NCF"
    dim: int = 5
    gmf_dim: int = 8
    mlp_layers: list = field(default_factory=lambda: [16, 8, 4])
    dropout: float = 0.5
    hidden: int = 100
    latent: int = 50
    beta: float = 1.0

    def dims(self) -> dict:
        if self.kind in ("SVD", "BPR"):
            return {"dim": self.dim}
        if self.kind == "NCF":
            return {"gmf_dim": self.gmf_dim, "mlp_layers": tuple(self.mlp_layers), "dropout": self.dropout}
        return {"hidden": self.hidden, "latent": self.latent, "beta": self.beta}


@dataclass
class PrivacyConfig:
    regime: str = "dpsgd"
    budgets: list = field(default_factory=lambda: [0.2, 0.4, 0.8, 2.0, 4.0])
    delta: float = DEFAULT_DELTA
    clip_norm: float = 1.0
    include_baseline: bool = True


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    k: int = 10
    kld_alpha: float = 0.01  # smoothing of the recommended category distribution
    kld_rank_weighted: bool = False  # weight recommended items by 1/log2(rank + 1) instead of uniformly
    output_dir: str = "runs/default"
    workers: int = 1
    save_checkpoints: bool = False

    # ---- construction
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        for key, value in _flatten(data).items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "ExperimentConfig":
        """Config file (or defaults when ``path`` is None), then overrides, then environment."""
        try:
            data = json.loads(Path(path).read_text()) if path is not None else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = cls.from_dict(data)
        for item in overrides or []:
            cfg.apply_override(item)
        env_out = os.environ.get("PRIVREC_OUTPUT_DIR")
        if env_out:
            cfg.output_dir = env_out
        env_workers = os.environ.get("PRIVREC_WORKERS")
        if env_workers:
            cfg.workers = int(env_workers)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def set(self, dotted: str, value: Any) -> None:
        *path, last = dotted.split(".")
        target = self
        for part in path:
            if not dataclasses.is_dataclass(target) or part not in {f.name for f in fields(target)}:
                raise ConfigError(f"unknown config key {dotted!r}")
            target = getattr(target, part)
        if not dataclasses.is_dataclass(target) or last not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(target, last)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{dotted!r} is a section, not a value")
        setattr(target, last, _coerce(dotted, value, current))

    def apply_override(self, item: str) -> None:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        self.set(key.strip(), value)

    def validate(self) -> None:
        if self.model.kind not in models.MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {models.MODEL_KINDS}")
        if self.privacy.regime not in REGIMES:
            raise ConfigError(f"privacy.regime must be one of {REGIMES}")
        if self.privacy.regime != "none" and not self.privacy.budgets:
            raise ConfigError("privacy.budgets must be nonempty")
        if any(not (isinstance(b, (int, float)) and b > 0) for b in self.privacy.budgets):
            raise ConfigError("privacy budgets must be positive numbers")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not 0 < self.privacy.delta < 1:
            raise ConfigError("privacy.delta must be in (0, 1)")
        if not self.privacy.clip_norm > 0:
            raise ConfigError("privacy.clip_norm must be > 0")
        if self.k < 1 or self.train.batch_size < 1 or self.train.max_epochs < 1 or self.train.patience < 1:
            raise ConfigError("k, batch_size, max_epochs and patience must be >= 1")
        if self.train.lr <= 0 or self.train.weight_decay < 0:
            raise ConfigError("train.lr must be > 0 and weight_decay >= 0")
        if not 0 < self.kld_alpha <= 1:
            raise ConfigError("kld_alpha must be in (0, 1]")
        if self.dataset.name not in ("movielens", "yelp"):
            raise ConfigError("dataset.name must be 'movielens' or 'yelp'")

    # ---- sweep axes
    def budget_points(self) -> list[tuple[str, float | None]]:
        points: list[tuple[str, float | None]] = []
        if self.privacy.regime == "none" or self.privacy.include_baseline:
            points.append(("none", None))
        if self.privacy.regime != "none":
            points += [(self.privacy.regime, float(b)) for b in self.privacy.budgets]
        return points

    def fingerprint(self) -> str:
        """Hash of everything that changes results, except the sweep axes."""
        d = self.to_dict()
        d["privacy"].pop("budgets")
        d["privacy"].pop("include_baseline")
        for key in ("seeds", "output_dir", "workers", "save_checkpoints"):
            d.pop(key)
        d["dataset"].pop("cache_dir")
        d["code"] = code_fingerprint()
        return _hash(d)

    def cache_dir(self) -> Path:
        return Path(self.dataset.cache_dir) if self.dataset.cache_dir else Path(self.output_dir) / "cache"


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, dotted + "."))
        else:
            out[dotted] = value
    return out


def _coerce(key: str, value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
    elif isinstance(current, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(current, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(current, str):
        if isinstance(value, str):
            return value
    elif isinstance(current, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")


def config_keys() -> list[tuple[str, Any]]:
    """Every config key with its default, in declaration order."""
    return list(_flatten(ExperimentConfig().to_dict()).items())


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@functools.lru_cache(maxsize=1)
def code_fingerprint() -> str:
    h = hashlib.sha256(__version__.encode())
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class Prepared:
    store: dataset.InteractionStore
    split: dataset.SplitDataset
    segments: dataset.SegmentMap


def load_store(cfg: DatasetConfig, cache_dir: Path) -> dataset.InteractionStore:
    key = _hash({k: v for k, v in asdict(cfg).items() if k not in ("split_seed", "cache_dir")})
    cache = cache_dir / f"{cfg.name}-{key}.jsonl"
    store = dataset.load_store(cache)
    if store is not None:
        return store
    if cfg.name == "movielens":
        parsed = dataset.parse_movielens(cfg.ratings_path, cfg.movies_path)
    else:
        parsed = dataset.parse_yelp(cfg.review_path, cfg.business_path, cfg.state)
    if cfg.max_users:
        store = dataset.subsample_users(parsed.ratings, parsed.categories, cfg.max_users, cfg.subsample_seed)
    else:
        store = dataset.preprocess(parsed.ratings, parsed.categories)
    dataset.save_store(store, cache)
    return store


@functools.lru_cache(maxsize=4)
def _prepare_cached(dataset_json: str, cache_dir: str) -> Prepared:
    cfg = DatasetConfig(**json.loads(dataset_json))
    store = load_store(cfg, Path(cache_dir))
    split = dataset.split_per_user(store, seed=cfg.split_seed)
    return Prepared(store, split, dataset.segment(store, split))


def prepare(cfg: ExperimentConfig) -> Prepared:
    return _prepare_cached(json.dumps(asdict(cfg.dataset), sort_keys=True), str(cfg.cache_dir()))


# ---------------------------------------------------------------- runs


@dataclass
class RunRecord:
    fingerprint: str
    config_fingerprint: str
    dataset: str
    model: str
    regime: str
    budget: float | None
    seed: int
    realized_epsilon: float | str | None
    status: str = "ok"
    epochs: int = 0
    best_epoch: int = 0
    wall_time: float = 0.0
    example_unit: str = ""
    n_examples: int = 0
    ledger: dict | None = None
    metrics: dict | None = None
    epoch_log: list = field(default_factory=list)
    error: str = ""
    config: dict = field(default_factory=dict)
    version: int = RECORD_VERSION

    def report(self) -> MetricsReport | None:
        return MetricsReport.from_dict(self.metrics) if self.metrics else None

    def epsilon_value(self) -> float:
        if self.realized_epsilon in (None, INF_MARKER):
            return math.inf
        return float(self.realized_epsilon)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def run_fingerprint(cfg: ExperimentConfig, regime: str, budget: float | None, seed: int) -> str:
    return _hash({"config": cfg.fingerprint(), "regime": regime, "budget": budget, "seed": seed})


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else INF_MARKER
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def write_json_atomic(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_text(json.dumps(_json_safe(payload), indent=1, sort_keys=True))
    tmp.replace(path)


def records_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "records"


def run_one(cfg: ExperimentConfig, regime: str, budget: float | None, seed: int, persist: bool = True) -> RunRecord:
    """Prepare data, perturb or privatize as configured, train, evaluate on test."""
    fp = run_fingerprint(cfg, regime, budget, seed)
    record = RunRecord(
        fingerprint=fp,
        config_fingerprint=cfg.fingerprint(),
        dataset=cfg.dataset.name,
        model=cfg.model.kind,
        regime=regime,
        budget=budget,
        seed=seed,
        realized_epsilon=INF_MARKER,
        example_unit=EXAMPLE_UNIT[cfg.model.kind],
        config=cfg.to_dict(),
    )
    t0 = time.perf_counter()
    try:
        prep = prepare(cfg)
        split = prep.split
        train_sets = split.train
        dp = None
        if regime == "ldp":
            train_sets = perturb_training_set(split.train, LdpSpec(budget, seed))
            record.realized_epsilon = budget
        elif regime == "dpsgd":
            dp = DPConfig(budget, cfg.privacy.clip_norm, cfg.privacy.delta)
        model = models.init(cfg.model.kind, prep.store.num_users, prep.store.num_items, seed=seed, **cfg.model.dims())
        result = train(model, train_sets, split.valid, cfg.train, seed=seed, dp=dp, exclude=split.train, k=cfg.k)
        if result.ledger is not None:
            record.ledger = result.ledger.to_dict(cfg.privacy.delta)
            record.realized_epsilon = result.ledger.epsilon(cfg.privacy.delta)
        report = evaluate(model, split, prep.segments, prep.store.categories, cfg.k, history=train_sets,
                          alpha=cfg.kld_alpha, rank_weighted=cfg.kld_rank_weighted)
        record.metrics = report.to_dict()
        record.epochs, record.best_epoch = result.epochs, result.best_epoch
        record.epoch_log = result.log
        record.n_examples = result.n_examples
        if cfg.save_checkpoints:
            from .checkpoint import save_checkpoint

            save_checkpoint(model, Path(cfg.output_dir) / "checkpoints" / f"{fp}.npz", record.ledger)
    except (TrainingDiverged, FloatingPointError) as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        log.warning("run %s failed: %s", fp, record.error)
    except Exception as exc:  # keep the sweep going, keep the traceback
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
        log.warning("run %s failed: %s", fp, exc)
    record.wall_time = time.perf_counter() - t0
    if persist:
        write_json_atomic(records_dir(cfg) / f"{fp}.json", asdict(record))
    return record


def load_records(directory: str | Path) -> list[RunRecord]:
    out = []
    for path in sorted(Path(directory).glob("*.json")):
        out.append(RunRecord.from_dict(json.loads(path.read_text())))
    return out


def _run_job(args):
    cfg_dict, regime, budget, seed = args
    return run_one(ExperimentConfig.from_dict(cfg_dict), regime, budget, seed)


@dataclass
class SweepResult:
    records: list[RunRecord]
    aggregates: list[dict]
    skipped: int = 0


def sweep(cfg: ExperimentConfig) -> SweepResult:
    """Run every (budget point, seed) pair not already on disk, then aggregate."""
    rdir = records_dir(cfg)
    jobs, skipped = [], 0
    for regime, budget in cfg.budget_points():
        for seed in cfg.seeds:
            if (rdir / f"{run_fingerprint(cfg, regime, budget, seed)}.json").exists():
                skipped += 1
                continue
            jobs.append((regime, budget, seed))
    log.info("sweep: %d runs to do, %d already recorded", len(jobs), skipped)
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(_run_job, [(cfg.to_dict(), *j) for j in jobs]))
    else:
        for regime, budget, seed in jobs:
            rec = run_one(cfg, regime, budget, seed)
            log.info("%s %s budget=%s seed=%d -> %s eps=%s epochs=%d (%.1fs)", rec.model, regime, budget, seed,
                     rec.status, rec.realized_epsilon, rec.epochs, rec.wall_time)

    wanted = {run_fingerprint(cfg, r, b, s) for r, b in cfg.budget_points() for s in cfg.seeds}
    records = [r for r in load_records(rdir) if r.fingerprint in wanted]
    aggregates = aggregate(records)
    write_aggregates(aggregates, Path(cfg.output_dir) / "reports" / "aggregate.csv")
    return SweepResult(records, aggregates, skipped)


# ---------------------------------------------------------------- aggregation


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return mean, std


def group_key(r: RunRecord) -> tuple:
    return (r.dataset, r.model, r.regime, r.budget)


def aggregate(records: list[RunRecord]) -> list[dict]:
    """Mean and sample std per (dataset, model, regime, budget) over successful runs."""
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(group_key(r), []).append(r)
    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2], -1 if k[3] is None else k[3])):
        runs = groups[key]
        ok = sorted((r for r in runs if r.status == "ok"), key=lambda r: r.seed)
        row: dict[str, Any] = dict(zip(("dataset", "model", "regime", "budget"), key))
        row["n"] = len(ok)
        row["failed"] = len(runs) - len(ok)
        eps = [r.epsilon_value() for r in ok]
        if eps and all(math.isfinite(e) for e in eps):
            row["realized_epsilon"], row["realized_epsilon_std"] = _mean_std(eps)
        else:
            row["realized_epsilon"], row["realized_epsilon_std"] = INF_MARKER, None
        row["epochs"], _ = _mean_std([r.epochs for r in ok])
        flats = [r.report().flat() for r in ok]
        for metric in (flats[0] if flats else {}):
            vals = [f[metric] for f in flats if f.get(metric) is not None]
            row[f"{metric}.mean"], row[f"{metric}.std"] = _mean_std(vals)
            row[f"{metric}.n"] = len(vals)
        rows.append(row)
    return rows


def write_aggregates(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns += [c for c in row if c not in columns]
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: "" if row.get(c) is None else row.get(c) for c in columns})
    tmp.replace(path)


def read_aggregates(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
