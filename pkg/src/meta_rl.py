"""
Noisy iterative meta-gradient RL on tabular MDPs, with the gradient
covariance instrumentation behind the E1/E2 log-det terms.

Inner loop, per task and step t:
    phi^{t+1} = phi^t + beta_t * g_hat(one trajectory at phi^t) + N(0, kappa_t^2 I)
Outer loop, per step m:
    theta^{m+1} = theta^m + alpha_m * mean_{i in batch} g_meta_i + N(0, kappa_tilde_m^2 I)

The meta-gradient is first order: the REINFORCE estimate at the adapted
parameters. Every task draws its own noise.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bound_report import SE_MULTIPLIER, BoundReport, Estimate
from .errors import (
    AbsoluteContinuityViolation,
    AllDrawsDegenerate,
    BatchLargerThanTaskSet,
    DimensionMismatch,
    InsufficientResamples,
    InvalidDistribution,
)
from .info_core import (
    DEFAULT_BINS,
    DiscreteDistribution,
    binned_mi_arrays,
    kl_discrete,
    log_det_ratio_term,
    mean_and_se,
    plugin_mi_labels,
    sample_covariance,
)
from .mdp_core import (
    SoftmaxPolicy,
    TabularMDP,
    exact_return,
    random_mdp,
    reinforce_gradient,
    sample_trajectory,
)
from .meta_supervised import SubtaskEstimate
from .seeding import SeedLike, as_rng, child_seed, derive_seed

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLES = 256
QUANTIZATION_STEP = 0.5


@dataclass(frozen=True, eq=False)
class MDPEnvironment:
    mdps: Tuple[TabularMDP, ...]
    weights: DiscreteDistribution

    def __post_init__(self) -> None:
        mdps = tuple(self.mdps)
        if not mdps:
            raise InvalidDistribution("an environment needs at least one MDP")
        if self.weights.size != len(mdps):
            raise DimensionMismatch(f"{self.weights.size} weights for {len(mdps)} MDPs")
        ref = mdps[0]
        for mdp in mdps[1:]:
            if (mdp.n_states, mdp.n_actions, mdp.gamma, mdp.horizon) != (
                ref.n_states, ref.n_actions, ref.gamma, ref.horizon
            ):
                raise DimensionMismatch("MDPs of one environment must share S, A, gamma and H")
        object.__setattr__(self, "mdps", mdps)

    @property
    def dim(self) -> int:
        return self.mdps[0].dim

    @property
    def gamma(self) -> float:
        return self.mdps[0].gamma

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(self.mdps), size=n, p=self.weights.probs)


@dataclass(frozen=True)
class NoiseSchedule:
    outer_steps: int
    inner_steps: int
    batch_size: int
    outer_rates: Tuple[float, ...]
    outer_noise_sd: Tuple[float, ...]
    inner_rates: Tuple[float, ...]
    inner_noise_sd: Tuple[float, ...]

    def __post_init__(self) -> None:
        for name in ("outer_rates", "outer_noise_sd", "inner_rates", "inner_noise_sd"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        if len(self.outer_rates) != self.outer_steps or len(self.outer_noise_sd) != self.outer_steps:
            raise DimensionMismatch("outer schedule lists must have outer_steps entries")
        if len(self.inner_rates) != self.inner_steps or len(self.inner_noise_sd) != self.inner_steps:
            raise DimensionMismatch("inner schedule lists must have inner_steps entries")
        if any(r < 0 for r in self.outer_rates + self.inner_rates):
            raise InvalidDistribution("learning rates must be >= 0")
        if any(s <= 0 for s in self.outer_noise_sd + self.inner_noise_sd):
            raise InvalidDistribution("noise standard deviations must be > 0")
        if self.batch_size < 1:
            raise InvalidDistribution("batch_size must be >= 1")

    @classmethod
    def constant(cls, outer_steps: int, inner_steps: int, batch_size: int, outer_rate: float,
                 outer_noise_sd: float, inner_rate: float, inner_noise_sd: float) -> "NoiseSchedule":
        return cls(outer_steps, inner_steps, batch_size,
                   (outer_rate,) * outer_steps, (outer_noise_sd,) * outer_steps,
                   (inner_rate,) * inner_steps, (inner_noise_sd,) * inner_steps)

    def scaled_noise(self, c: float) -> "NoiseSchedule":
        return replace(self,
                       outer_noise_sd=tuple(c * s for s in self.outer_noise_sd),
                       inner_noise_sd=tuple(c * s for s in self.inner_noise_sd))


@dataclass
class AdaptationSnapshot:
    outer_step: int
    inner_step: int
    phis: np.ndarray   # (n, d): every task's parameters before inner update `inner_step`


@dataclass
class GradientSamples:
    meta: List[np.ndarray] = field(default_factory=list)                        # per m: (R, d)
    inner: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)     # (m, t, (R, n*d))


@dataclass
class TrainLog:
    theta_trace: np.ndarray
    adaptation_snapshots: List[AdaptationSnapshot]
    batches: List[np.ndarray]
    final_phis: np.ndarray
    mdps: Tuple[TabularMDP, ...]
    seed: int
    gradient_samples: Optional[GradientSamples] = None


def _policy(vector: np.ndarray, mdp: TabularMDP) -> SoftmaxPolicy:
    return SoftmaxPolicy.from_vector(vector, mdp.n_states, mdp.n_actions)


def _int_seed(seed: SeedLike) -> int:
    return child_seed(seed) if isinstance(seed, np.random.Generator) else int(seed)


def inner_adapt(theta: np.ndarray, mdp: TabularMDP, sched: NoiseSchedule,
                seed: SeedLike) -> Tuple[np.ndarray, List[np.ndarray]]:
    theta = np.asarray(theta, dtype=float)
    if theta.size != mdp.dim:
        raise DimensionMismatch(f"theta has {theta.size} entries, MDP needs {mdp.dim}")
    rng = as_rng(seed)
    phi = theta.copy()
    snapshots = []
    for t in range(sched.inner_steps):
        snapshots.append(phi.copy())
        policy = _policy(phi, mdp)
        traj = sample_trajectory(mdp, policy, rng)
        phi = (phi + sched.inner_rates[t] * reinforce_gradient(traj, policy, mdp.gamma)
               + rng.normal(0.0, sched.inner_noise_sd[t], size=phi.size))
    return phi, snapshots


def _grade(phi: np.ndarray, mdp: TabularMDP, rng: np.random.Generator) -> np.ndarray:
    policy = _policy(phi, mdp)
    return reinforce_gradient(sample_trajectory(mdp, policy, rng), policy, mdp.gamma)


def meta_gradient_estimate(theta: np.ndarray, mdp: TabularMDP, sched: NoiseSchedule,
                           seed: SeedLike) -> np.ndarray:
    rng = as_rng(seed)
    phi, _ = inner_adapt(theta, mdp, sched, rng)
    return _grade(phi, mdp, rng)


def meta_train(env_draw: Sequence[TabularMDP], sched: NoiseSchedule,
               seed: SeedLike) -> Tuple[np.ndarray, TrainLog]:
    mdps = tuple(env_draw)
    n = len(mdps)
    if sched.batch_size > n:
        raise BatchLargerThanTaskSet(f"batch of {sched.batch_size} from {n} tasks")
    seed = _int_seed(seed)
    rng = as_rng(derive_seed(seed, "outer"))
    d = mdps[0].dim
    theta = np.zeros(d)
    trace = [theta.copy()]
    snapshots: List[AdaptationSnapshot] = []
    batches: List[np.ndarray] = []
    final_phis = np.tile(theta, (n, 1))

    for m in range(sched.outer_steps):
        batch = np.sort(rng.choice(n, size=sched.batch_size, replace=False))
        phis = np.empty((n, d))
        inner_states = [np.empty((n, d)) for _ in range(sched.inner_steps)]
        grads = []
        for i, mdp in enumerate(mdps):
            task_rng = as_rng(derive_seed(seed, "task", m, i))
            phis[i], states = inner_adapt(theta, mdp, sched, task_rng)
            for t, state in enumerate(states):
                inner_states[t][i] = state
            if i in batch:
                grads.append(_grade(phis[i], mdp, task_rng))
        snapshots.extend(AdaptationSnapshot(m, t, s) for t, s in enumerate(inner_states))
        theta = (theta + sched.outer_rates[m] * np.mean(grads, axis=0)
                 + rng.normal(0.0, sched.outer_noise_sd[m], size=d))
        trace.append(theta.copy())
        batches.append(batch)
        final_phis = phis

    return theta, TrainLog(np.array(trace), snapshots, batches, final_phis, mdps, seed)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------

def _adapted_returns(theta: np.ndarray, mdp: TabularMDP, sched: NoiseSchedule, K: int,
                     seed: int) -> np.ndarray:
    out = np.empty(K)
    for k in range(K):
        phi, _ = inner_adapt(theta, mdp, sched, derive_seed(seed, k))
        out[k] = exact_return(mdp, _policy(phi, mdp))
    return out


def empirical_meta_objective(theta: np.ndarray, mdps: Sequence[TabularMDP], sched: NoiseSchedule,
                             replicates: int, seed: SeedLike = 0) -> Estimate:
    if replicates < 2:
        raise InsufficientResamples("replicates must be >= 2")
    seed = _int_seed(seed)
    means, variances = [], []
    for i, mdp in enumerate(mdps):
        returns = _adapted_returns(theta, mdp, sched, replicates, derive_seed(seed, "task", i))
        means.append(returns.mean())
        variances.append(returns.var(ddof=1))
    n = len(mdps)
    return Estimate(float(np.mean(means)), math.sqrt(sum(variances) / replicates) / n)


def population_meta_objective(theta: np.ndarray, env: MDPEnvironment, sched: NoiseSchedule,
                              replicates: int, seed: SeedLike = 0) -> Estimate:
    if replicates < 2:
        raise InsufficientResamples("replicates must be >= 2")
    seed = _int_seed(seed)
    value, var = 0.0, 0.0
    for j, (w, mdp) in enumerate(zip(env.weights.probs, env.mdps)):
        if w == 0:
            continue
        returns = _adapted_returns(theta, mdp, sched, replicates, derive_seed(seed, "mdp", j))
        value += w * returns.mean()
        var += w ** 2 * returns.var(ddof=1) / replicates
    return Estimate(float(value), math.sqrt(var))


@dataclass
class GapRun:
    value: float
    se: float
    empirical: List[float]
    population: List[float]
    gaps: List[float]
    logs: List[TrainLog]
    draws: List[Tuple[int, ...]]


def rl_gen_gap(trainenv: MDPEnvironment, testenv: MDPEnvironment, n: int, sched: NoiseSchedule,
               trials: int, replicates: int = 16, seed: SeedLike = 0) -> GapRun:
    if trials < 2:
        raise InsufficientResamples("trials must be >= 2")
    seed = _int_seed(seed)
    run = GapRun(0.0, 0.0, [], [], [], [], [])
    for trial in range(trials):
        trial_seed = derive_seed(seed, "trial", trial)
        draw = trainenv.draw(n, as_rng(derive_seed(trial_seed, "draw")))
        mdps = [trainenv.mdps[j] for j in draw]
        theta, log = meta_train(mdps, sched, derive_seed(trial_seed, "train"))
        emp = empirical_meta_objective(theta, mdps, sched, replicates, derive_seed(trial_seed, "emp"))
        pop = population_meta_objective(theta, testenv, sched, replicates, derive_seed(trial_seed, "pop"))
        run.empirical.append(emp.value)
        run.population.append(pop.value)
        run.gaps.append(emp.value - pop.value)
        run.logs.append(log)
        run.draws.append(tuple(int(j) for j in draw))
    run.value, run.se = mean_and_se(run.gaps)
    return run


# ---------------------------------------------------------------------------
# E1 / E2
# ---------------------------------------------------------------------------

def collect_gradient_samples(log: TrainLog, sched: NoiseSchedule, resamples: int = DEFAULT_RESAMPLES,
                             seed: Optional[int] = None) -> GradientSamples:
    """Resample batch meta-gradients at each theta^m and stacked inner gradients at each snapshot."""
    if resamples < 2:
        raise InsufficientResamples(f"need at least 2 resamples, got {resamples}")
    base = derive_seed(log.seed, "resample") if seed is None else int(seed)
    n = len(log.mdps)
    samples = GradientSamples()
    for m in range(len(log.batches)):
        theta = log.theta_trace[m]
        rng = as_rng(derive_seed(base, "batch", m))
        rows = np.empty((resamples, theta.size))
        for r in range(resamples):
            batch = rng.choice(n, size=sched.batch_size, replace=False)
            rows[r] = np.mean([
                meta_gradient_estimate(theta, log.mdps[i], sched, derive_seed(base, "meta", m, r, int(i)))
                for i in batch
            ], axis=0)
        samples.meta.append(rows)
    for snap in log.adaptation_snapshots:
        rows = np.empty((resamples, snap.phis.size))
        for r in range(resamples):
            rng = as_rng(derive_seed(base, "inner", snap.outer_step, snap.inner_step, r))
            rows[r] = np.concatenate([_grade(snap.phis[i], log.mdps[i], rng) for i in range(n)])
        samples.inner.append((snap.outer_step, snap.inner_step, rows))
    log.gradient_samples = samples
    return samples


def log_det_terms(samples: GradientSamples, sched: NoiseSchedule) -> Tuple[float, float]:
    e1 = sum(
        log_det_ratio_term(sched.outer_rates[m] ** 2 / sched.outer_noise_sd[m] ** 2, sample_covariance(rows))
        for m, rows in enumerate(samples.meta)
    )
    e2 = sum(
        log_det_ratio_term(sched.inner_rates[t] ** 2 / sched.inner_noise_sd[t] ** 2, sample_covariance(rows))
        for _, t, rows in samples.inner
    )
    return float(e1), float(e2)


def estimate_E1_E2(log: TrainLog, sched: NoiseSchedule, resamples: int = DEFAULT_RESAMPLES) -> Tuple[float, float]:
    return log_det_terms(collect_gradient_samples(log, sched, resamples), sched)


def thm5_bound(kl_term: float, e1: float, e2: float, n: int, gamma: float) -> float:
    if min(kl_term, e1, e2) < 0:
        raise ValueError("bound terms must be >= 0")
    return math.sqrt((2.0 * kl_term + e1 + e2) / (n * (1.0 - gamma) ** 2))


def thm3_bound(mi: float, kl_term: float, n: int, gamma: float) -> float:
    return math.sqrt((2.0 * mi + 2.0 * kl_term) / (n * (1.0 - gamma) ** 2))


def env_kl(trainenv: MDPEnvironment, testenv: MDPEnvironment, n: int) -> float:
    """n * KL over the shared registry; MDPs are matched by identity."""
    union: List[TabularMDP] = list(trainenv.mdps)
    union.extend(mdp for mdp in testenv.mdps if not any(mdp is u for u in union))
    p = np.zeros(len(union))
    q = np.zeros(len(union))
    for w, mdp in zip(trainenv.weights.probs, trainenv.mdps):
        p[next(k for k, u in enumerate(union) if u is mdp)] += w
    for w, mdp in zip(testenv.weights.probs, testenv.mdps):
        q[next(k for k, u in enumerate(union) if u is mdp)] += w
    try:
        return n * kl_discrete(DiscreteDistribution.from_weights(p), DiscreteDistribution.from_weights(q))
    except AbsoluteContinuityViolation:
        logger.warning("test environment misses a training MDP; the KL term is infinite")
        return math.inf


def thm5_report(trainenv: MDPEnvironment, testenv: MDPEnvironment, n: int, sched: NoiseSchedule,
                trials: int, replicates: int, resamples: int, seed: SeedLike) -> BoundReport:
    run = rl_gen_gap(trainenv, testenv, n, sched, trials, replicates, seed)
    terms = [estimate_E1_E2(log, sched, resamples) for log in run.logs]
    e1 = float(np.mean([t[0] for t in terms]))
    e2 = float(np.mean([t[1] for t in terms]))
    kl = env_kl(trainenv, testenv, n)
    bound = thm5_bound(kl, e1, e2, n, trainenv.gamma)
    extras = {
        "empirical_objective": float(np.mean(run.empirical)),
        "population_objective": float(np.mean(run.population)),
        "e1_first_run": terms[0][0],
        "e2_first_run": terms[0][1],
    }
    return BoundReport.check(run.value, run.se, bound, kl, e1, e2, extras=extras)


def quantized_outputs(log: TrainLog, step: float = QUANTIZATION_STEP) -> bytes:
    stacked = np.concatenate([log.theta_trace[-1], log.final_phis.reshape(-1)])
    return np.round(stacked / step).astype(np.int64).tobytes()


def quantized_mi_sandwich(trainenv: MDPEnvironment, n: int, sched: NoiseSchedule, trials: int,
                          seed: SeedLike, step: float = QUANTIZATION_STEP) -> float:
    """Plug-in MI between quantized (theta^M, phi^T_{1:n}) and the drawn task tuple."""
    seed = _int_seed(seed)
    outputs, tuples = [], []
    for trial in range(trials):
        trial_seed = derive_seed(seed, "mi", trial)
        draw = trainenv.draw(n, as_rng(derive_seed(trial_seed, "draw")))
        _, log = meta_train([trainenv.mdps[j] for j in draw], sched, derive_seed(trial_seed, "train"))
        outputs.append(quantized_outputs(log, step))
        tuples.append(tuple(int(j) for j in draw))
    return plugin_mi_labels(outputs, tuples)


# ---------------------------------------------------------------------------
# Subtask meta-RL
# ---------------------------------------------------------------------------

def _subtask_rl_draws(env: MDPEnvironment, target_mdp: int, n: int, sched: NoiseSchedule,
                      trials: int, replicates: int, resamples: int, bins: int,
                      seed: SeedLike) -> SubtaskEstimate:
    if not (0 <= target_mdp < len(env.mdps)) or env.weights.probs[target_mdp] == 0:
        raise AllDrawsDegenerate(f"target MDP {target_mdp} is outside the environment support")
    seed = _int_seed(seed)
    scale = 2.0 / (1.0 - env.gamma) ** 2
    values, bounds, infos = [], [], []
    skipped = 0
    for trial in range(trials):
        draw_seed = derive_seed(seed, "supersample", trial)
        idx = env.draw(2 * n, as_rng(derive_seed(draw_seed, "pairs"))).reshape(n, 2)
        plus, minus = idx[:, 0], idx[:, 1]
        in_plus = (plus == target_mdp).astype(float)
        in_minus = (minus == target_mdp).astype(float)
        count = int(np.sum((in_plus > 0) | (in_minus > 0)))
        if count == 0:
            skipped += 1
            continue
        sign_rng = as_rng(derive_seed(draw_seed, "signs"))
        signs = sign_rng.choice(np.array([-1, 1]), size=(resamples, n))
        f = np.zeros((resamples, n))
        for r in range(resamples):
            selected = np.where(signs[r] > 0, plus, minus)
            theta, _ = meta_train([env.mdps[j] for j in selected], sched, derive_seed(draw_seed, "train", r))
            for i in range(n):
                if in_minus[i]:
                    f[r, i] += _adapted_returns(theta, env.mdps[minus[i]], sched, replicates,
                                                derive_seed(draw_seed, "eval", r, i, -1)).mean()
                if in_plus[i]:
                    f[r, i] -= _adapted_returns(theta, env.mdps[plus[i]], sched, replicates,
                                                derive_seed(draw_seed, "eval", r, i, 1)).mean()
        values.append(float(np.mean(np.sum(-signs * f, axis=1))) / count)
        info = np.array([binned_mi_arrays(signs[:, i], f[:, i], bins) for i in range(n)])
        bounds.append(float(np.sum(np.sqrt(scale * info))) / count)
        infos.append(float(info.mean()))
    if not values:
        raise AllDrawsDegenerate(f"target MDP {target_mdp} never appeared in {trials} supersamples")
    value, se = mean_and_se(values)
    bound, bound_se = mean_and_se(bounds)
    return SubtaskEstimate(value, se, len(values), skipped, bound, bound_se, float(np.mean(infos)), values)


def gen_sub_rl_estimate(env: MDPEnvironment, target_mdp: int, n: int, sched: NoiseSchedule,
                        trials: int, replicates: int = 8, resamples: int = 32,
                        seed: SeedLike = 0, bins: int = DEFAULT_BINS) -> SubtaskEstimate:
    return _subtask_rl_draws(env, target_mdp, n, sched, trials, replicates, resamples, bins, seed)


def thm4_bound(env: MDPEnvironment, target_mdp: int, n: int, sched: NoiseSchedule, trials: int,
               bins: int = DEFAULT_BINS, replicates: int = 8, resamples: int = 32,
               seed: SeedLike = 0) -> float:
    return _subtask_rl_draws(env, target_mdp, n, sched, trials, replicates, resamples, bins, seed).bound


# ---------------------------------------------------------------------------
# regret_1
# ---------------------------------------------------------------------------

@dataclass
class RegretReport:
    left: float
    left_se: float
    right: float
    right_se: float
    chosen: List[int] = field(default_factory=list)
    best: List[int] = field(default_factory=list)

    @property
    def combined_se(self) -> float:
        return math.hypot(self.left_se, self.right_se)

    @property
    def holds(self) -> bool:
        return self.left <= self.right + SE_MULTIPLIER * self.combined_se + 1e-12


def regret1_check(theta_candidates: Sequence[np.ndarray], trainenv: MDPEnvironment,
                  testenv: MDPEnvironment, n: int, sched: NoiseSchedule, trials: int,
                  replicates: int = 16, seed: SeedLike = 0) -> RegretReport:
    """Suboptimality of the empirical argmax against the population argmax.

    Per trial, J_U(theta*) - J_U(theta_hat) <= gen(theta_hat) - gen(theta*)
    where gen = J_M - J_U, using one set of estimates for both sides.
    """
    seed = _int_seed(seed)
    lefts, rights, chosen, best = [], [], [], []
    for trial in range(trials):
        trial_seed = derive_seed(seed, "trial", trial)
        draw = trainenv.draw(n, as_rng(derive_seed(trial_seed, "draw")))
        mdps = [trainenv.mdps[j] for j in draw]
        emp = np.array([empirical_meta_objective(c, mdps, sched, replicates,
                                                 derive_seed(trial_seed, "emp", k)).value
                        for k, c in enumerate(theta_candidates)])
        pop = np.array([population_meta_objective(c, testenv, sched, replicates,
                                                  derive_seed(trial_seed, "pop", k)).value
                        for k, c in enumerate(theta_candidates)])
        k_hat, k_star = int(np.argmax(emp)), int(np.argmax(pop))
        gen = emp - pop
        lefts.append(pop[k_star] - pop[k_hat])
        rights.append(gen[k_hat] - gen[k_star])
        chosen.append(k_hat)
        best.append(k_star)
    left, left_se = mean_and_se(lefts)
    right, right_se = mean_and_se(rights)
    return RegretReport(left, left_se, right, right_se, chosen, best)


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_instance(rng: np.random.Generator, n_mdps: int = 3, n_states: int = 2, n_actions: int = 2,
                    horizon: int = 2, gamma: float = 0.9) -> Tuple[MDPEnvironment, MDPEnvironment]:
    """Train/test environments over one shared registry of random MDPs."""
    mdps = tuple(random_mdp(rng, n_states, n_actions, horizon, gamma, name=f"mdp-{k}") for k in range(n_mdps))
    train = MDPEnvironment(mdps, DiscreteDistribution(rng.dirichlet(np.ones(n_mdps))))
    test = MDPEnvironment(mdps, DiscreteDistribution(rng.dirichlet(np.ones(n_mdps))))
    return train, test


def random_candidates(rng: np.random.Generator, count: int, dim: int, scale: float = 1.5) -> List[np.ndarray]:
    return [np.zeros(dim)] + [rng.normal(0.0, scale, size=dim) for _ in range(count - 1)]
