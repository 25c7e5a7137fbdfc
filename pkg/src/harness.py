"""
Config-driven bound-verification campaigns.

Every (cell, trial) row is regenerated from derive_seed(master_seed, campaign,
cell_index, trial) alone, so adding trials or workers never changes earlier rows.
"""

import itertools
import json
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from .bound_report import BoundReport, round_sig, utc_now_iso_z
from .env_files import Registry, load_registry
from .errors import ConfigInvalid, OutputUnwritable
from .info_core import lemma_suite
from .meta_rl import (
    MDPEnvironment,
    NoiseSchedule,
    gen_sub_rl_estimate,
    quantized_mi_sandwich,
    random_candidates,
    random_instance,
    regret1_check,
    thm3_bound,
    thm5_report,
)
from .meta_supervised import (
    SIGMA,
    GibbsLearnerSpec,
    exact_joint_enumeration,
    gen_sub_estimate,
    kl_datasets,
    ood_gap_exact,
    random_subtask_instance,
    random_tiny_instance,
    supersample_stream,
    thm1_bound,
)
from .offline_rl import OfflineLearner, offline_gap, random_offline_instance, regret2_check
from .seeding import as_rng, child_seed, derive_seed

logger = logging.getLogger(__name__)

CAMPAIGNS = ("lemmas", "supervised", "subtask", "metarl", "subtask-rl", "offline", "regret")
AXES = ("n", "m", "gamma", "noise_scale")
CSV_COLUMNS = ["campaign", "cell", "n", "m", "gamma", "noise_scale", "trial", "seed",
               "gap", "se", "kl", "mi_or_e1", "e2", "bound", "holds"]
SANDWICH_SLACK = 0.1
REGISTRY_KINDS = {"supervised": "tasks", "subtask": "tasks", "metarl": "mdp", "subtask-rl": "mdp",
                  "regret": "mdp", "offline": "episodic"}


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    return int(raw) if raw else default


@dataclass
class Estimation:
    draws: int = 32
    replicates: int = 8
    resamples: int = 256
    sign_resamples: int = 32
    bins: int = 16
    cases: int = 200
    mi_trials: int = 1000


@dataclass
class ScheduleConfig:
    outer_steps: int = 3
    inner_steps: int = 2
    batch_size: int = 2
    outer_rate: Any = 0.5
    outer_noise_sd: Any = 0.05
    inner_rate: Any = 0.5
    inner_noise_sd: Any = 0.05

    def build(self, noise_scale: float = 1.0) -> NoiseSchedule:
        def per_step(value: Any, steps: int) -> Tuple[float, ...]:
            return tuple(value) if isinstance(value, (list, tuple)) else (float(value),) * steps

        sched = NoiseSchedule(
            self.outer_steps, self.inner_steps, self.batch_size,
            per_step(self.outer_rate, self.outer_steps), per_step(self.outer_noise_sd, self.outer_steps),
            per_step(self.inner_rate, self.inner_steps), per_step(self.inner_noise_sd, self.inner_steps),
        )
        return sched.scaled_noise(noise_scale)


@dataclass
class LearnerConfig:
    base_temperature: float = 2.0
    meta_temperature: float = 2.0
    coupling: float = 0.5
    grid: int = 3


@dataclass
class OfflineConfig:
    temperature: float = 0.1
    meta_temperature: float = 0.1
    pull: float = 1.0
    horizon: int = 2

    def learner(self, replicates: int) -> OfflineLearner:
        return OfflineLearner(self.temperature, self.meta_temperature, self.pull, replicates)


@dataclass
class ExperimentConfig:
    campaign: str
    master_seed: int
    trials: int = 3
    out_dir: str = field(default_factory=lambda: os.environ.get("METAGEN_OUT_DIR", "results"))
    registry: Optional[str] = None
    train_env: str = "train"
    test_env: str = "test"
    target: Optional[int] = None
    workers: int = field(default_factory=lambda: _env_int("METAGEN_WORKERS", 1))
    sweep: Dict[str, List[float]] = field(default_factory=lambda: {"n": [2], "m": [2], "gamma": [0.9],
                                                                    "noise_scale": [1.0]})
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    estimation: Estimation = field(default_factory=Estimation)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    offline: OfflineConfig = field(default_factory=OfflineConfig)

    def cells(self) -> List[Dict[str, float]]:
        values = [self.sweep[a] for a in AXES]
        return [dict(zip(AXES, combo)) for combo in itertools.product(*values)]

    def echo(self) -> Dict[str, Any]:
        return asdict(self)


def _section(raw: Dict[str, Any], name: str, cls: type, problems: List[str]) -> Any:
    body = raw.get(name, {}) or {}
    known = cls.__dataclass_fields__
    for key in body:
        if key not in known:
            problems.append(f"{name}.{key}: unknown key")
    try:
        return cls(**{k: v for k, v in body.items() if k in known})
    except (TypeError, ValueError) as e:
        problems.append(f"{name}: {e}")
        return cls()


def parse_config(raw: Dict[str, Any], campaign: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    problems: List[str] = []
    campaign = campaign or raw.get("campaign")
    if campaign not in CAMPAIGNS:
        problems.append(f"campaign: expected one of {CAMPAIGNS}, got {campaign!r}")
    master_seed = seed if seed is not None else raw.get("master_seed")
    if master_seed is None:
        problems.append("master_seed: required")
    elif not isinstance(master_seed, int) or master_seed < 0:
        problems.append(f"master_seed: expected a non-negative integer, got {master_seed!r}")
    trials = raw.get("trials", 3)
    if not isinstance(trials, int) or trials < 1:
        problems.append(f"trials: expected a positive integer, got {trials!r}")

    sweep = {"n": [2], "m": [2], "gamma": [0.9], "noise_scale": [1.0]}
    for axis, values in (raw.get("sweep") or {}).items():
        if axis not in AXES:
            problems.append(f"sweep.{axis}: unknown axis")
            continue
        values = values if isinstance(values, list) else [values]
        if not values:
            problems.append(f"sweep.{axis}: axis must be non-empty")
        sweep[axis] = values
    for axis in ("n", "m"):
        if any(not isinstance(v, int) or v < 1 for v in sweep[axis]):
            problems.append(f"sweep.{axis}: entries must be positive integers")
    if any(not (0.0 <= float(g) < 1.0) for g in sweep["gamma"]):
        problems.append("sweep.gamma: entries must lie in [0, 1)")
    if any(float(c) <= 0 for c in sweep["noise_scale"]):
        problems.append("sweep.noise_scale: entries must be > 0")

    cfg = ExperimentConfig(
        campaign=str(campaign),
        master_seed=int(master_seed) if isinstance(master_seed, int) else 0,
        trials=int(trials) if isinstance(trials, int) else 1,
        registry=raw.get("registry"),
        train_env=str(raw.get("train_env", "train")),
        test_env=str(raw.get("test_env", "test")),
        target=raw.get("target"),
        sweep=sweep,
        schedule=_section(raw, "schedule", ScheduleConfig, problems),
        estimation=_section(raw, "estimation", Estimation, problems),
        learner=_section(raw, "learner", LearnerConfig, problems),
        offline=_section(raw, "offline", OfflineConfig, problems),
    )
    if "out_dir" in raw:
        cfg.out_dir = str(raw["out_dir"])
    if "workers" in raw:
        cfg.workers = int(raw["workers"])
    if cfg.estimation.resamples < 2:
        problems.append("estimation.resamples: must be >= 2")
    if cfg.estimation.replicates < 2:
        problems.append("estimation.replicates: must be >= 2")
    if cfg.estimation.draws < 2:
        problems.append("estimation.draws: must be >= 2")
    if problems:
        raise ConfigInvalid(problems)
    return cfg


def load_config(path: str, campaign: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigInvalid([f"config: file not found: {path}"])
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    cfg = parse_config(raw, campaign, seed)
    if cfg.registry and not os.path.isabs(cfg.registry):
        cfg.registry = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.registry)
    return cfg


# ---------------------------------------------------------------------------
# Row runners
# ---------------------------------------------------------------------------

@dataclass
class RowContext:
    cfg: ExperimentConfig
    cell: Dict[str, float]
    seed: int
    registry: Optional[Registry] = None
    _instance: Optional[np.random.Generator] = field(default=None, init=False, repr=False)

    @property
    def n(self) -> int:
        return int(self.cell["n"])

    @property
    def m(self) -> int:
        return int(self.cell["m"])

    @property
    def gamma(self) -> float:
        return float(self.cell["gamma"])

    @property
    def schedule(self) -> NoiseSchedule:
        return self.cfg.schedule.build(float(self.cell["noise_scale"]))

    def instance_rng(self) -> np.random.Generator:
        if self._instance is None:
            self._instance = as_rng(derive_seed(self.seed, "instance"))
        return self._instance

    def draw_rng(self) -> np.random.Generator:
        """Generator for targets and candidates, split off after the instance is built."""
        return as_rng(child_seed(self.instance_rng()))

    def learner_spec(self) -> GibbsLearnerSpec:
        lc = self.cfg.learner
        return GibbsLearnerSpec.grid(self.registry.members[0].loss_table.shape[0], lc.grid,
                                     lc.base_temperature, lc.meta_temperature, lc.coupling)

    def mdp_pair(self) -> Tuple[MDPEnvironment, MDPEnvironment]:
        if self.registry is None:
            return random_instance(self.instance_rng(), gamma=self.gamma)
        members = tuple(mdp.with_gamma(self.gamma) for mdp in self.registry.members)
        train = self.registry.environment(self.cfg.train_env)
        test = self.registry.environment(self.cfg.test_env)
        return MDPEnvironment(members, train.weights), MDPEnvironment(members, test.weights)


def _lemmas(ctx: RowContext) -> BoundReport:
    suite = lemma_suite(ctx.cfg.estimation.cases, ctx.seed)
    extras = {c.name: c.worst_margin for c in suite.checks}
    return BoundReport(suite.worst_margin(), 0.0, 0.0, 0.0, 0.0, 0.0, suite.holds, extras)


def _supervised(ctx: RowContext) -> BoundReport:
    if ctx.registry is None:
        train, test, spec = random_tiny_instance(ctx.instance_rng())
    else:
        train = ctx.registry.environment(ctx.cfg.train_env)
        test = ctx.registry.environment(ctx.cfg.test_env)
        spec = ctx.learner_spec()
    joint = exact_joint_enumeration(train, ctx.n, ctx.m, spec)
    gap = ood_gap_exact(train, test, ctx.n, ctx.m, spec, joint)
    kl = kl_datasets(train, test, ctx.n, ctx.m)
    mi = joint.information()
    return BoundReport.check(gap, 0.0, thm1_bound(mi, kl, SIGMA, ctx.n, ctx.m), kl, mi)


def _subtask(ctx: RowContext) -> BoundReport:
    if ctx.registry is None:
        env, target, spec = random_subtask_instance(ctx.instance_rng())
    else:
        env = ctx.registry.environment(ctx.cfg.train_env)
        target, spec = int(ctx.cfg.target or 0), ctx.learner_spec()
    est = ctx.cfg.estimation
    stream = supersample_stream(env, ctx.n, ctx.m, derive_seed(ctx.seed, "stream"))
    result = gen_sub_estimate(stream, target, spec, est.draws, est.sign_resamples,
                              derive_seed(ctx.seed, "signs"), est.bins)
    extras = {"target": target, "bound_se": result.bound_se,
              "degenerate_frequency": result.degenerate_frequency}
    return BoundReport.check(result.value, result.se, result.bound, 0.0, result.mean_information, extras=extras)


def _metarl(ctx: RowContext) -> BoundReport:
    train, test = ctx.mdp_pair()
    est = ctx.cfg.estimation
    sched = ctx.schedule
    report = thm5_report(train, test, ctx.n, sched, est.draws, est.replicates, est.resamples, ctx.seed)
    plugin = quantized_mi_sandwich(train, ctx.n, sched, est.mi_trials, derive_seed(ctx.seed, "sandwich"))
    report.extras.update({
        "mi_plugin": plugin,
        "sandwich_holds": plugin <= 0.5 * (report.e1 + report.e2) + SANDWICH_SLACK,
        "thm3_with_plugin_mi": thm3_bound(plugin, report.kl_term, ctx.n, train.gamma),
    })
    return report


def _subtask_rl(ctx: RowContext) -> BoundReport:
    train, _ = ctx.mdp_pair()
    target = ctx.cfg.target
    if target is None:
        target = int(ctx.draw_rng().choice(len(train.mdps), p=train.weights.probs))
    est = ctx.cfg.estimation
    result = gen_sub_rl_estimate(train, int(target), ctx.n, ctx.schedule, est.draws, est.replicates,
                                 est.sign_resamples, derive_seed(ctx.seed, "supersample"), est.bins)
    extras = {"target": int(target), "bound_se": result.bound_se,
              "degenerate_frequency": result.degenerate_frequency}
    return BoundReport.check(result.value, result.se, result.bound, 0.0, result.mean_information, extras=extras)


def _offline(ctx: RowContext) -> BoundReport:
    if ctx.registry is None:
        train, test = random_offline_instance(ctx.instance_rng(), horizon=ctx.cfg.offline.horizon)
    else:
        train = ctx.registry.environment(ctx.cfg.train_env)
        test = ctx.registry.environment(ctx.cfg.test_env)
    learner = ctx.cfg.offline.learner(ctx.cfg.estimation.replicates)
    run = offline_gap(train, test, ctx.n, ctx.m, learner, ctx.cfg.estimation.draws, ctx.seed)
    report = run.report()
    regret = regret2_check(train, test, ctx.n, ctx.m, learner, run=run, trials=len(run.trials))
    report.extras.update({
        "regret2_left": regret.left,
        "regret2_right": regret.right,
        "regret2_combined_se": regret.combined_se,
        "regret2_coverage": regret.coverage,
        "regret2_holds": regret.holds,
    })
    return report


def _regret(ctx: RowContext) -> BoundReport:
    train, test = ctx.mdp_pair()
    candidates = random_candidates(ctx.draw_rng(), 4, train.dim)
    est = ctx.cfg.estimation
    result = regret1_check(candidates, train, test, ctx.n, ctx.schedule, est.draws, est.replicates, ctx.seed)
    extras = {"right_se": result.right_se, "agreement": float(np.mean(np.equal(result.chosen, result.best)))}
    report = BoundReport(result.left, result.left_se, 0.0, 0.0, 0.0, result.right, result.holds, extras)
    return report


RUNNERS: Dict[str, Callable[[RowContext], BoundReport]] = {
    "lemmas": _lemmas,
    "supervised": _supervised,
    "subtask": _subtask,
    "metarl": _metarl,
    "subtask-rl": _subtask_rl,
    "offline": _offline,
    "regret": _regret,
}

SUITE_FLAGS = {"metarl": "sandwich_holds", "offline": "regret2_holds"}


def run_row(cfg: ExperimentConfig, cell_index: int, cell: Dict[str, float], trial: int,
            registry: Optional[Registry]) -> Tuple[Dict[str, Any], Dict[str, Any], Optional[str]]:
    seed = derive_seed(cfg.master_seed, cfg.campaign, cell_index, trial)
    head = {"campaign": cfg.campaign, "cell": cell_index, **cell, "trial": trial, "seed": seed}
    try:
        report = RUNNERS[cfg.campaign](RowContext(cfg, cell, seed, registry))
    except Exception as e:
        logger.warning("cell %d trial %d failed: %s", cell_index, trial, e)
        blank = {"gap": math.nan, "se": math.nan, "kl": math.nan, "mi_or_e1": math.nan,
                 "e2": math.nan, "bound": math.nan, "holds": False}
        return {**head, **blank}, {}, f"{type(e).__name__}: {e}"
    return {**head, **report.as_row()}, report.extras, None


# ---------------------------------------------------------------------------
# Campaign
# ---------------------------------------------------------------------------

@dataclass
class CampaignReport:
    campaign: str
    rows: List[Dict[str, Any]]
    extras: List[Dict[str, Any]]
    config: Dict[str, Any]
    suites: Dict[str, bool]
    failures: List[Dict[str, Any]] = field(default_factory=list)
    created_at: str = field(default_factory=utc_now_iso_z)

    @property
    def holds(self) -> bool:
        return bool(self.rows) and all(r["holds"] for r in self.rows) and all(self.suites.values())

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=CSV_COLUMNS)


def run_campaign(cfg: ExperimentConfig) -> CampaignReport:
    registry = None
    if cfg.registry and cfg.campaign in REGISTRY_KINDS:
        registry = load_registry(cfg.registry)
        if registry.kind != REGISTRY_KINDS[cfg.campaign]:
            raise ConfigInvalid([f"registry: campaign '{cfg.campaign}' needs a '{REGISTRY_KINDS[cfg.campaign]}' "
                                 f"registry, got '{registry.kind}'"])
    jobs = [(i, cell, t) for i, cell in enumerate(cfg.cells()) for t in range(cfg.trials)]
    logger.info("campaign %s: %d cell(s) x %d trial(s) on %d worker(s)",
                cfg.campaign, len(cfg.cells()), cfg.trials, cfg.workers)
    results = Parallel(n_jobs=cfg.workers)(
        delayed(run_row)(cfg, i, cell, t, registry) for i, cell, t in jobs
    )

    rows, extras, failures = [], [], []
    for (i, _, t), (row, extra, failure) in zip(jobs, results):
        rows.append(row)
        extras.append(extra)
        if failure is not None:
            failures.append({"cell": i, "trial": t, "seed": row["seed"], "error": failure})

    suites = {cfg.campaign: bool(rows) and all(r["holds"] for r in rows)}
    flag = SUITE_FLAGS.get(cfg.campaign)
    if flag:
        suites[flag.replace("_holds", "")] = all(bool(e.get(flag, False)) for e in extras)
    return CampaignReport(cfg.campaign, rows, extras, cfg.echo(), suites, failures)


def _json_ready(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return round_sig(value)


def report_to_json(report: CampaignReport) -> str:
    payload = {
        "campaign": report.campaign,
        "created_at": report.created_at,
        "config": report.config,
        "suites": report.suites,
        "rows": [{**row, "extras": extra} for row, extra in zip(report.rows, report.extras)],
        "failures": report.failures,
    }
    return json.dumps(_json_ready(payload), indent=2, sort_keys=False)


def emit_report(report: CampaignReport, out_dir: str, fmt: str = "csv") -> str:
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    path = os.path.join(out_dir, f"{report.campaign}.{fmt}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        if fmt == "csv":
            report.frame().to_csv(path, index=False, float_format="%.12g")
        else:
            with open(path, "w", encoding="utf-8") as f:
                f.write(report_to_json(report))
    except OSError as e:
        raise OutputUnwritable(f"cannot write {path}: {e}") from e
    return path
