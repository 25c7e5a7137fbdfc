"""
Offline meta-RL on episodic tabular MDPs.

Steps run h = 0..H-1 with a terminal V_H = 0. Behavior distributions live on
the flattened (h, s, a) grid, index h*S*A + s*A + a. Losses are minimized, so
the generalization gap is population minus empirical Bellman loss.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bound_report import SE_MULTIPLIER, BoundReport
from .errors import (
    AbsoluteContinuityViolation,
    CoverageViolation,
    DimensionMismatch,
    InsufficientSamples,
    InvalidDistribution,
)
from .info_core import (
    DiscreteDistribution,
    kl_discrete,
    log_det_ratio_term,
    mean_and_se,
    plugin_mi_labels,
    sample_covariance,
)
from .mdp_core import stochastic_rows
from .seeding import SeedLike, as_rng, derive_seed

logger = logging.getLogger(__name__)

QUANTIZATION_STEP = 0.5


@dataclass(eq=False)
class EpisodicMDP:
    n_states: int
    n_actions: int
    transition: np.ndarray   # (H, S, A, S); a stationary (S, A, S) table is broadcast
    reward: np.ndarray       # (S, A) in [0, 1]
    initial: np.ndarray
    horizon: int
    name: str = ""

    def __post_init__(self) -> None:
        S, A, H = int(self.n_states), int(self.n_actions), int(self.horizon)
        if H < 1:
            raise InvalidDistribution("episodic horizon must be >= 1")
        transition = np.asarray(self.transition, dtype=float)
        if transition.shape == (S, A, S):
            transition = np.broadcast_to(transition, (H, S, A, S)).copy()
        if transition.shape != (H, S, A, S):
            raise DimensionMismatch(f"transition shape {transition.shape} != {(H, S, A, S)}")
        self.transition = stochastic_rows("transition", transition)
        self.reward = np.asarray(self.reward, dtype=float)
        if self.reward.shape != (S, A):
            raise DimensionMismatch(f"reward shape {self.reward.shape} != {(S, A)}")
        if np.any(self.reward < 0) or np.any(self.reward > 1):
            raise InvalidDistribution("rewards must lie in [0, 1]")
        self.initial = stochastic_rows("initial", np.asarray(self.initial, dtype=float).reshape(-1))
        if self.initial.shape != (S,):
            raise DimensionMismatch(f"initial shape {self.initial.shape} != {(S,)}")
        self.n_states, self.n_actions, self.horizon = S, A, H

    @property
    def grid_size(self) -> int:
        return self.horizon * self.n_states * self.n_actions

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.horizon, self.n_states, self.n_actions


@dataclass
class QStack:
    q: np.ndarray   # (H, S, A), clipped to [0, H]

    def __post_init__(self) -> None:
        self.q = np.asarray(self.q, dtype=float)
        if self.q.ndim != 3:
            raise DimensionMismatch(f"a Q stack is (H, S, A), got shape {self.q.shape}")
        self.q = np.clip(self.q, 0.0, self.horizon)

    @property
    def horizon(self) -> int:
        return self.q.shape[0]

    @classmethod
    def zeros(cls, horizon: int, n_states: int, n_actions: int) -> "QStack":
        return cls(np.zeros((horizon, n_states, n_actions)))

    def values(self) -> np.ndarray:
        """V_h(s) = max_a Q_h(s, a) for h = 0..H, the last row being the terminal zero."""
        return np.vstack([self.q.max(axis=2), np.zeros((1, self.q.shape[1]))])


@dataclass(frozen=True, eq=False)
class EpisodicEnvironment:
    mdps: Tuple[EpisodicMDP, ...]
    weights: DiscreteDistribution
    behavior: DiscreteDistribution

    def __post_init__(self) -> None:
        mdps = tuple(self.mdps)
        if not mdps:
            raise InvalidDistribution("an environment needs at least one MDP")
        if self.weights.size != len(mdps):
            raise DimensionMismatch(f"{self.weights.size} weights for {len(mdps)} MDPs")
        if any(mdp.shape != mdps[0].shape for mdp in mdps):
            raise DimensionMismatch("MDPs of one environment must share H, S and A")
        if self.behavior.size != mdps[0].grid_size:
            raise DimensionMismatch(f"behavior has {self.behavior.size} cells, grid has {mdps[0].grid_size}")
        object.__setattr__(self, "mdps", mdps)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.mdps[0].shape

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(len(self.mdps), size=n, p=self.weights.probs)


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_a: np.ndarray   # s'
    next_b: np.ndarray   # s''
    steps: np.ndarray
    behavior: DiscreteDistribution

    def __len__(self) -> int:
        return int(self.states.size)

    def swapped(self) -> "OfflineDataset":
        return OfflineDataset(self.states, self.actions, self.rewards, self.next_b, self.next_a,
                              self.steps, self.behavior)


@dataclass(frozen=True)
class OfflineLearner:
    """Gibbs-style fitted-Q learner: meta tables from the task fits, task tables pulled toward them."""

    temperature: float = 0.1
    meta_temperature: float = 0.1
    pull: float = 1.0
    replicates: int = 8

    def __post_init__(self) -> None:
        if self.temperature <= 0 or self.meta_temperature <= 0:
            raise InvalidDistribution("learner temperatures must be > 0")
        if self.pull < 0:
            raise InvalidDistribution("pull must be >= 0")
        if self.replicates < 1:
            raise InvalidDistribution("replicates must be >= 1")


def collect_offline(mdp: EpisodicMDP, behavior: DiscreteDistribution, m: int, seed: SeedLike) -> OfflineDataset:
    if behavior.size != mdp.grid_size:
        raise DimensionMismatch(f"behavior has {behavior.size} cells, grid has {mdp.grid_size}")
    rng = as_rng(seed)
    cells = rng.choice(mdp.grid_size, size=m, p=behavior.probs)
    h, s, a = np.unravel_index(cells, mdp.shape)
    cum = np.cumsum(mdp.transition[h, s, a], axis=1)
    last = mdp.n_states - 1
    next_a = np.minimum((rng.random(m)[:, None] > cum).sum(axis=1), last)
    next_b = np.minimum((rng.random(m)[:, None] > cum).sum(axis=1), last)
    return OfflineDataset(s, a, mdp.reward[s, a], next_a, next_b, h, behavior)


def bellman_apply(mdp: EpisodicMDP, q_next: Optional[np.ndarray], h: int) -> np.ndarray:
    """(T*_h Q)(s, a) = r(s, a) + sum_s' P_h(s'|s, a) max_a' Q(s', a'); q_next=None is terminal."""
    if q_next is None:
        return mdp.reward.copy()
    return mdp.reward + mdp.transition[h] @ np.asarray(q_next).max(axis=1)


def _residuals(q: QStack, mdp: EpisodicMDP) -> np.ndarray:
    out = np.empty(mdp.shape)
    for h in range(mdp.horizon):
        q_next = q.q[h + 1] if h + 1 < mdp.horizon else None
        out[h] = q.q[h] - bellman_apply(mdp, q_next, h)
    return out


def true_bellman_error(q: QStack, mdp: EpisodicMDP, weights: DiscreteDistribution) -> float:
    if q.q.shape != mdp.shape:
        raise DimensionMismatch(f"Q stack {q.q.shape} vs MDP {mdp.shape}")
    w = weights.probs.reshape(mdp.shape)
    return float(np.sum(w * _residuals(q, mdp) ** 2) / mdp.horizon)


def empirical_bellman_loss(q: QStack, data: OfflineDataset) -> float:
    """Double-sampling loss: (Q - r - V(s'))^2 - (V(s') - V(s''))^2 / 2, averaged over m*H."""
    m = len(data)
    if m == 0:
        raise InsufficientSamples("empty offline dataset")
    values = q.values()
    v_a = values[data.steps + 1, data.next_a]
    v_b = values[data.steps + 1, data.next_b]
    td = q.q[data.steps, data.states, data.actions] - data.rewards - v_a
    return float(np.sum(td ** 2 - 0.5 * (v_a - v_b) ** 2) / (m * q.horizon))


def _step_sums(data: OfflineDataset, values: np.ndarray, h: int, n_states: int,
               n_actions: int) -> Tuple[np.ndarray, np.ndarray]:
    at = data.steps == h
    cells = data.states[at] * n_actions + data.actions[at]
    targets = data.rewards[at] + 0.5 * (values[h + 1, data.next_a[at]] + values[h + 1, data.next_b[at]])
    counts = np.bincount(cells, minlength=n_states * n_actions).reshape(n_states, n_actions)
    sums = np.bincount(cells, weights=targets, minlength=n_states * n_actions).reshape(n_states, n_actions)
    return counts.astype(float), sums.astype(float)


def fitted_q_tables(data: OfflineDataset, horizon: int, n_states: int, n_actions: int) -> QStack:
    """Plain backward fitted-Q: per-cell mean of the Bellman targets, 0 where unvisited."""
    q = np.zeros((horizon, n_states, n_actions))
    values = np.zeros((horizon + 1, n_states))
    for h in range(horizon - 1, -1, -1):
        counts, sums = _step_sums(data, values, h, n_states, n_actions)
        q[h] = np.clip(np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0), 0.0, horizon)
        values[h] = q[h].max(axis=1)
    return QStack(q)


def fit_q_gibbs(theta: np.ndarray, data: OfflineDataset, temperature: float, pull: float,
                seed: SeedLike) -> Tuple[QStack, np.ndarray]:
    """Sample task Q tables given meta tables theta and a dataset.

    Each step solves the proximal fit (sum of targets + pull*theta) / (count + pull),
    adds N(0, temperature^2) and clips to [0, H]. With pull=0 a cell the data never
    visits fits to 0, as in fitted_q_tables. Returns the sample and the pre-noise
    fits, which feed the information bound.
    """
    if temperature <= 0:
        raise InvalidDistribution("temperature must be > 0")
    theta = np.asarray(theta, dtype=float)
    horizon, n_states, n_actions = theta.shape
    rng = as_rng(seed)
    q = np.empty_like(theta)
    fits = np.empty_like(theta)
    values = np.zeros((horizon + 1, n_states))
    for h in range(horizon - 1, -1, -1):
        if math.isinf(pull):
            fits[h] = theta[h]
        else:
            counts, sums = _step_sums(data, values, h, n_states, n_actions)
            denom = counts + pull
            fits[h] = np.divide(sums + pull * theta[h], denom, out=np.zeros_like(sums), where=denom > 0)
        q[h] = np.clip(fits[h] + rng.normal(0.0, temperature, size=fits[h].shape), 0.0, horizon)
        values[h] = q[h].max(axis=1)
    return QStack(q), fits


def offline_bound(mi_estimate: float, kl_term: float, H: int, n: int, m: int) -> float:
    if mi_estimate < 0 or kl_term < 0:
        raise ValueError("bound terms must be >= 0")
    return math.sqrt(64.0 * H ** 2 * (mi_estimate + kl_term) / (n * m))


# ---------------------------------------------------------------------------
# Policies and coverage
# ---------------------------------------------------------------------------

def optimal_q_stack(mdp: EpisodicMDP) -> QStack:
    q = np.empty(mdp.shape)
    q_next = None
    for h in range(mdp.horizon - 1, -1, -1):
        q[h] = bellman_apply(mdp, q_next, h)
        q_next = q[h]
    return QStack(q)


def greedy_policy(q: QStack) -> np.ndarray:
    """(H, S) argmax actions; ties go to the lowest index."""
    return np.argmax(q.q, axis=2)


def policy_value(mdp: EpisodicMDP, actions: np.ndarray) -> float:
    value = np.zeros(mdp.n_states)
    rows = np.arange(mdp.n_states)
    for h in range(mdp.horizon - 1, -1, -1):
        q = mdp.reward + mdp.transition[h] @ value
        value = q[rows, actions[h]]
    return float(mdp.initial @ value)


def optimal_value(mdp: EpisodicMDP) -> float:
    return float(mdp.initial @ optimal_q_stack(mdp).q[0].max(axis=1))


def occupancy(mdp: EpisodicMDP, policy: np.ndarray) -> np.ndarray:
    """d[h, s, a] under a deterministic (H, S) table or a stochastic (H, S, A) table."""
    policy = np.asarray(policy)
    if policy.ndim == 2:
        policy = np.eye(mdp.n_actions)[policy]
    d = np.zeros(mdp.shape)
    state_dist = mdp.initial.copy()
    for h in range(mdp.horizon):
        d[h] = state_dist[:, None] * policy[h]
        state_dist = np.einsum("sa,sat->t", d[h], mdp.transition[h])
    return d


def concentrability(mdp: EpisodicMDP, behavior: DiscreteDistribution, policy: np.ndarray) -> float:
    """max over (h, s, a) of (d_h(s, a) / H) / behavior(h, s, a); +inf when coverage fails."""
    target = occupancy(mdp, policy).reshape(-1) / mdp.horizon
    mu = behavior.probs
    if np.any((mu == 0) & (target > 0)):
        return math.inf
    covered = mu > 0
    return float(np.max(target[covered] / mu[covered]))


def offline_kl(trainenv: EpisodicEnvironment, testenv: EpisodicEnvironment, n: int, m: int) -> float:
    """Upper bound on D(P_Z || Q_Z) for n datasets of m tuples: n * (KL(tasks) + m * KL(behavior))."""
    if len(trainenv.mdps) != len(testenv.mdps) or any(a is not b for a, b in zip(trainenv.mdps, testenv.mdps)):
        raise DimensionMismatch("offline environments must share one MDP registry")
    try:
        return n * (kl_discrete(trainenv.weights, testenv.weights)
                    + m * kl_discrete(trainenv.behavior, testenv.behavior))
    except AbsoluteContinuityViolation:
        logger.warning("test distribution misses training support; the KL term is infinite")
        return math.inf


# ---------------------------------------------------------------------------
# Offline meta-learning gap
# ---------------------------------------------------------------------------

def _meta_fit(data: Sequence[OfflineDataset], shape: Tuple[int, int, int], learner: OfflineLearner,
              rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    horizon = shape[0]
    centre = np.mean([fitted_q_tables(d, *shape).q for d in data], axis=0)
    theta = np.clip(centre + rng.normal(0.0, learner.meta_temperature, size=centre.shape), 0.0, horizon)
    return theta, centre


@dataclass
class OfflineTrial:
    empirical: float
    population: float
    regret: float
    coverage: float
    tasks: Tuple[int, ...]

    @property
    def gap(self) -> float:
        return self.population - self.empirical


@dataclass
class OfflineGapRun:
    trials: List[OfflineTrial] = field(default_factory=list)
    gap: float = 0.0
    gap_se: float = 0.0
    information: float = 0.0
    plugin_information: float = 0.0
    kl_term: float = 0.0
    bound: float = 0.0
    horizon: int = 0

    def report(self) -> BoundReport:
        extras = {
            "empirical_loss": float(np.mean([t.empirical for t in self.trials])),
            "population_loss": float(np.mean([t.population for t in self.trials])),
            "plugin_information": self.plugin_information,
        }
        return BoundReport.check(self.gap, self.gap_se, self.bound, self.kl_term, self.information,
                                 extras=extras)


def _population_side(theta: np.ndarray, testenv: EpisodicEnvironment, m: int, learner: OfflineLearner,
                     seed: int) -> Tuple[float, float, float]:
    """Weighted exact Bellman error, regret and worst coverage over fresh test datasets."""
    loss, regret, coverage = 0.0, 0.0, 0.0
    for j, (w, mdp) in enumerate(zip(testenv.weights.probs, testenv.mdps)):
        if w == 0:
            continue
        optimal = greedy_policy(optimal_q_stack(mdp))
        best = optimal_value(mdp)
        coverage = max(coverage, concentrability(mdp, testenv.behavior, optimal))
        errors, gaps = [], []
        for k in range(learner.replicates):
            data = collect_offline(mdp, testenv.behavior, m, derive_seed(seed, "data", j, k))
            phi, _ = fit_q_gibbs(theta, data, learner.temperature, learner.pull, derive_seed(seed, "fit", j, k))
            policy = greedy_policy(phi)
            errors.append(true_bellman_error(phi, mdp, testenv.behavior))
            gaps.append(best - policy_value(mdp, policy))
            coverage = max(coverage, concentrability(mdp, testenv.behavior, policy))
        loss += w * float(np.mean(errors))
        regret += w * float(np.mean(gaps))
    return loss, regret, coverage


def offline_gap(trainenv: EpisodicEnvironment, testenv: EpisodicEnvironment, n: int, m: int,
                learner: OfflineLearner, trials: int, seed: SeedLike = 0) -> OfflineGapRun:
    """gen = E[J_U(theta) - J_Z(theta)] with J_U scored by the exact behavior-weighted Bellman error."""
    if trials < 2:
        raise InsufficientSamples("trials must be >= 2")
    if trainenv.shape != testenv.shape:
        raise DimensionMismatch("train and test environments must share H, S and A")
    seed = int(seed) if not isinstance(seed, np.random.Generator) else int(seed.integers(2 ** 62))
    shape = trainenv.shape
    horizon = shape[0]
    run = OfflineGapRun(horizon=horizon)
    centres, step_fits, outputs, drawn = [], [], [], []

    for trial in range(trials):
        trial_seed = derive_seed(seed, "trial", trial)
        idx = trainenv.draw(n, as_rng(derive_seed(trial_seed, "tasks")))
        data = [collect_offline(trainenv.mdps[j], trainenv.behavior, m, derive_seed(trial_seed, "data", i))
                for i, j in enumerate(idx)]
        theta, centre = _meta_fit(data, shape, learner, as_rng(derive_seed(trial_seed, "meta")))

        empirical, fits, phis = [], [], []
        for i, d in enumerate(data):
            losses = []
            for k in range(learner.replicates):
                phi, pre = fit_q_gibbs(theta, d, learner.temperature, learner.pull,
                                       derive_seed(trial_seed, "task", i, k))
                losses.append(empirical_bellman_loss(phi, d))
                if k == 0:
                    fits.append(pre)
                    phis.append(phi.q)
            empirical.append(float(np.mean(losses)))
        population, regret, coverage = _population_side(theta, testenv, m, learner,
                                                        derive_seed(trial_seed, "test"))
        run.trials.append(OfflineTrial(float(np.mean(empirical)), population, regret, coverage,
                                       tuple(int(j) for j in idx)))
        centres.append(centre.reshape(-1))
        step_fits.append(np.stack(fits, axis=1).reshape(horizon, -1))   # (H, n*S*A)
        outputs.append(np.round(np.concatenate([theta.reshape(-1), np.ravel(phis)]) / QUANTIZATION_STEP)
                       .astype(np.int64).tobytes())
        drawn.append(tuple(int(j) for j in idx))

    run.gap, run.gap_se = mean_and_se([t.gap for t in run.trials])
    run.information = gaussian_channel_information(np.array(centres), np.array(step_fits), learner)
    run.plugin_information = plugin_mi_labels(outputs, drawn)
    run.kl_term = offline_kl(trainenv, testenv, n, m)
    run.bound = offline_bound(run.information, run.kl_term, horizon, n, m)
    return run


def gaussian_channel_information(centres: np.ndarray, step_fits: np.ndarray, learner: OfflineLearner) -> float:
    """Upper bound on I(theta, phi_{1:n}; Z_{1:n}) from the covariance of every pre-noise fit.

    centres: (trials, H*S*A) noiseless meta fits. step_fits: (trials, H, n*S*A)
    pre-noise task fits. Each noisy step contributes (1/2) log det(Cov / t^2 + I).
    """
    info = 0.5 * log_det_ratio_term(1.0 / learner.meta_temperature ** 2, sample_covariance(centres))
    for h in range(step_fits.shape[1]):
        info += 0.5 * log_det_ratio_term(1.0 / learner.temperature ** 2, sample_covariance(step_fits[:, h]))
    return float(info)


# ---------------------------------------------------------------------------
# regret_2
# ---------------------------------------------------------------------------

@dataclass
class Regret2Report:
    left: float
    left_se: float
    right: float
    right_se: float
    coverage: float
    run: Optional[OfflineGapRun] = None

    @property
    def combined_se(self) -> float:
        return math.hypot(self.left_se, self.right_se)

    @property
    def holds(self) -> bool:
        return self.left <= self.right + SE_MULTIPLIER * self.combined_se + 1e-12


def regret2_right_side(coverage: float, horizon: int, gap: float, empirical: float) -> float:
    """2H sqrt(C_step max(gen, 0)) + 2H sqrt(C_step max(J_Z, 0)) with C_step = H * coverage."""
    c_step = horizon * coverage
    return 2.0 * horizon * (math.sqrt(c_step * max(gap, 0.0)) + math.sqrt(c_step * max(empirical, 0.0)))


def regret2_check(trainenv: EpisodicEnvironment, testenv: EpisodicEnvironment, n: int, m: int,
                  learner: OfflineLearner, trials: int, seed: SeedLike = 0,
                  run: Optional[OfflineGapRun] = None) -> Regret2Report:
    run = run or offline_gap(trainenv, testenv, n, m, learner, trials, seed)
    worst = max(t.coverage for t in run.trials)
    if math.isinf(worst):
        raise CoverageViolation("behavior misses a cell visited by an evaluated policy")
    lefts = [t.regret for t in run.trials]
    rights = [regret2_right_side(t.coverage, run.horizon, t.gap, t.empirical) for t in run.trials]
    left, left_se = mean_and_se(lefts)
    right, right_se = mean_and_se(rights)
    return Regret2Report(left, left_se, right, right_se, worst, run)


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_episodic_mdp(rng: np.random.Generator, n_states: int, n_actions: int, horizon: int,
                        name: str = "") -> EpisodicMDP:
    transition = rng.dirichlet(np.ones(n_states), size=(horizon, n_states, n_actions))
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return EpisodicMDP(n_states, n_actions, transition, reward, rng.dirichlet(np.ones(n_states)), horizon, name)


def random_behavior(rng: np.random.Generator, grid_size: int, floor: float = 0.2) -> DiscreteDistribution:
    """Full-support behavior: a mix of uniform mass and a Dirichlet draw."""
    mix = floor / grid_size + (1.0 - floor) * rng.dirichlet(np.ones(grid_size))
    return DiscreteDistribution.from_weights(mix)


def random_offline_instance(rng: np.random.Generator, n_mdps: int = 3, n_states: int = 2, n_actions: int = 2,
                            horizon: int = 2) -> Tuple[EpisodicEnvironment, EpisodicEnvironment]:
    mdps = tuple(random_episodic_mdp(rng, n_states, n_actions, horizon, f"episodic-{k}") for k in range(n_mdps))
    behavior = random_behavior(rng, horizon * n_states * n_actions)
    train = EpisodicEnvironment(mdps, DiscreteDistribution(rng.dirichlet(np.ones(n_mdps))), behavior)
    test = EpisodicEnvironment(mdps, DiscreteDistribution(rng.dirichlet(np.ones(n_mdps))), behavior)
    return train, test
