"""
Exactly enumerable meta-supervised learning with Gibbs learners.

A dataset is a tuple of m symbols from a finite alphabet. All tasks of the
environments being compared share one loss table, so tasks differ only in
how they generate samples. The base learner is a Gibbs posterior over a
hypothesis grid, the meta learner a Gibbs posterior over a theta grid; both
are computed in closed form so every information term is exact.
"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from .errors import AllDrawsDegenerate, DimensionMismatch, EnumerationTooLarge, InvalidDistribution
from .info_core import (
    DEFAULT_BINS,
    DiscreteDistribution,
    JointTable,
    binned_mi_arrays,
    kl_discrete,
    mean_and_se,
    mutual_information,
)
from .seeding import SeedLike, as_rng, derive_seed

SIGMA = 0.5
DATASET_LIMIT = 10 ** 6
JOINT_LIMIT = 10 ** 7
DEFAULT_SIGN_RESAMPLES = 64


@dataclass(frozen=True, eq=False)
class FiniteTask:
    sample_dist: DiscreteDistribution
    loss_table: np.ndarray

    def __post_init__(self) -> None:
        table = np.atleast_2d(np.asarray(self.loss_table, dtype=float))
        if table.shape[1] != self.sample_dist.size:
            raise DimensionMismatch(
                f"loss table has {table.shape[1]} columns for an alphabet of {self.sample_dist.size}"
            )
        if np.any(table < 0) or np.any(table > 1):
            raise InvalidDistribution("losses must lie in [0, 1]")
        object.__setattr__(self, "loss_table", table)

    @property
    def alphabet_size(self) -> int:
        return self.sample_dist.size

    def expected_loss(self) -> np.ndarray:
        """E_{S~task} loss(w, S) for every hypothesis w."""
        return self.loss_table @ self.sample_dist.probs


@dataclass(frozen=True, eq=False)
class TaskEnvironment:
    tasks: Tuple[FiniteTask, ...]
    weights: DiscreteDistribution

    def __post_init__(self) -> None:
        tasks = tuple(self.tasks)
        if not tasks:
            raise InvalidDistribution("an environment needs at least one task")
        if self.weights.size != len(tasks):
            raise DimensionMismatch(f"{self.weights.size} weights for {len(tasks)} tasks")
        reference = tasks[0].loss_table
        for t in tasks[1:]:
            if t.loss_table.shape != reference.shape or not np.array_equal(t.loss_table, reference):
                raise DimensionMismatch("tasks of one environment must share a loss table")
        object.__setattr__(self, "tasks", tasks)

    @property
    def loss_table(self) -> np.ndarray:
        return self.tasks[0].loss_table

    @property
    def alphabet_size(self) -> int:
        return self.tasks[0].alphabet_size

    @property
    def n_hypotheses(self) -> int:
        return int(self.loss_table.shape[0])

    def sample_matrix(self) -> np.ndarray:
        """(tasks, alphabet) matrix of per-task sample distributions."""
        return np.stack([t.sample_dist.probs for t in self.tasks])


@dataclass(frozen=True, eq=False)
class GibbsLearnerSpec:
    hypothesis_grid: Tuple[int, ...]
    theta_grid: Tuple[int, ...]
    base_temperature: float
    meta_temperature: float
    coupling: float = 0.0

    def __post_init__(self) -> None:
        if not self.hypothesis_grid or not self.theta_grid:
            raise InvalidDistribution("hypothesis and theta grids must be non-empty")
        if self.base_temperature <= 0 or self.meta_temperature <= 0:
            raise InvalidDistribution("temperatures must be > 0")
        if self.coupling < 0:
            raise InvalidDistribution("coupling must be >= 0")
        object.__setattr__(self, "hypothesis_grid", tuple(int(w) for w in self.hypothesis_grid))
        object.__setattr__(self, "theta_grid", tuple(int(t) for t in self.theta_grid))

    @classmethod
    def grid(cls, n_hypotheses: int, n_theta: int, base_temperature: float,
             meta_temperature: float, coupling: float = 0.0) -> "GibbsLearnerSpec":
        return cls(tuple(range(n_hypotheses)), tuple(range(n_theta)),
                   base_temperature, meta_temperature, coupling)

    @property
    def penalty(self) -> np.ndarray:
        """(hypotheses, thetas) squared distance between normalized grid positions."""
        w = _positions(len(self.hypothesis_grid))
        t = _positions(len(self.theta_grid))
        return (w[:, None] - t[None, :]) ** 2


def _positions(k: int) -> np.ndarray:
    return np.zeros(1) if k == 1 else np.linspace(0.0, 1.0, k)


@dataclass(frozen=True, eq=False)
class SuperSamplePair:
    task_plus: int
    data_plus: Tuple[int, ...]
    task_minus: int
    data_minus: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class SuperSample:
    pairs: Tuple[SuperSamplePair, ...]
    signs: np.ndarray
    loss_table: np.ndarray

    @property
    def n(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Learners
# ---------------------------------------------------------------------------

def _check_spec(spec: GibbsLearnerSpec, loss_table: np.ndarray) -> None:
    if len(spec.hypothesis_grid) != loss_table.shape[0]:
        raise DimensionMismatch(
            f"hypothesis grid of {len(spec.hypothesis_grid)} for a loss table with {loss_table.shape[0]} rows"
        )


def _posterior_logits(summed_loss: np.ndarray, theta: int, spec: GibbsLearnerSpec) -> np.ndarray:
    return -spec.base_temperature * (summed_loss + spec.coupling * spec.penalty[:, theta])


def base_posterior(theta: int, dataset: Sequence[int], spec: GibbsLearnerSpec,
                   loss_table: np.ndarray) -> DiscreteDistribution:
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    _check_spec(spec, loss_table)
    summed = loss_table[:, np.asarray(dataset, dtype=int)].sum(axis=1)
    probs = softmax(_posterior_logits(summed, theta, spec))
    return DiscreteDistribution(probs / probs.sum())


def empirical_meta_risk(theta: int, datasets: Sequence[Sequence[int]], spec: GibbsLearnerSpec,
                        loss_table: np.ndarray) -> float:
    risks = []
    for data in datasets:
        idx = np.asarray(data, dtype=int)
        per_w = loss_table[:, idx].mean(axis=1)
        risks.append(float(base_posterior(theta, idx, spec, loss_table).probs @ per_w))
    return float(np.mean(risks))


def enumerate_datasets(alphabet_size: int, m: int) -> np.ndarray:
    count = alphabet_size ** m
    if count > DATASET_LIMIT:
        raise EnumerationTooLarge(f"{alphabet_size}^{m} = {count} datasets exceeds {DATASET_LIMIT}")
    return np.array(list(itertools.product(range(alphabet_size), repeat=m)), dtype=int).reshape(count, m)


class DatasetTables(NamedTuple):
    """Per-(theta, dataset) learner quantities over the full dataset space."""

    datasets: np.ndarray      # (D, m)
    task_probs: np.ndarray    # (tasks, D): probability of each dataset under each task
    posterior: np.ndarray     # (theta, D, W)
    risk: np.ndarray          # (theta, D): expected empirical loss of the adapted hypothesis
    task_loss: np.ndarray     # (theta, D, tasks): expected population loss on each task


def dataset_tables(env: TaskEnvironment, m: int, spec: GibbsLearnerSpec) -> DatasetTables:
    _check_spec(spec, env.loss_table)
    datasets = enumerate_datasets(env.alphabet_size, m)
    samples = env.sample_matrix()
    task_probs = np.prod(samples[:, datasets], axis=2)
    summed = env.loss_table[:, datasets].sum(axis=2).T          # (D, W)
    thetas = range(len(spec.theta_grid))
    logits = np.stack([
        -spec.base_temperature * (summed + spec.coupling * spec.penalty[:, t][None, :]) for t in thetas
    ])
    posterior = softmax(logits, axis=2)
    risk = np.einsum("tdw,dw->td", posterior, summed / m)
    expected = np.stack([t.expected_loss() for t in env.tasks], axis=1)   # (W, tasks)
    task_loss = np.einsum("tdw,wk->tdk", posterior, expected)
    return DatasetTables(datasets, task_probs, posterior, risk, task_loss)


def population_meta_risk(theta: int, env: TaskEnvironment, m: int, spec: GibbsLearnerSpec) -> float:
    tables = dataset_tables(env, m, spec)
    return float(_population_risks(tables, env)[theta])


def _population_risks(tables: DatasetTables, env: TaskEnvironment) -> np.ndarray:
    """L_U(theta) for every theta: datasets drawn from each task, scored on that task."""
    per_task = np.einsum("kd,tdk->tk", tables.task_probs, tables.task_loss)
    return per_task @ env.weights.probs


# ---------------------------------------------------------------------------
# Exact joint over (Z_{1:n}, theta, W_{1:n})
# ---------------------------------------------------------------------------

@dataclass
class ExactJoint:
    n: int
    m: int
    tables: DatasetTables
    meta_datasets: np.ndarray     # (N, n) indices into tables.datasets
    meta_probs: np.ndarray        # (N,)
    theta_posterior: np.ndarray   # (N, Theta)
    mass: JointTable              # rows: meta-datasets, cols: (theta, w_1..w_n)

    @property
    def theta_marginal(self) -> np.ndarray:
        return self.meta_probs @ self.theta_posterior

    def information(self) -> float:
        """I(theta, W_{1:n}; Z_{1:n})."""
        return mutual_information(self.mass)

    def theta_information(self) -> float:
        return mutual_information(JointTable(self.meta_probs[:, None] * self.theta_posterior))

    def task_information(self, i: int) -> float:
        """I(W_i; Z_i | theta) from the (theta, Z_i, W_i) marginal."""
        n_theta = self.theta_posterior.shape[1]
        D = self.tables.datasets.shape[0]
        W = self.tables.posterior.shape[2]
        cube = np.zeros((n_theta, D, W))
        weight = self.meta_probs[:, None] * self.theta_posterior          # (N, Theta)
        for t in range(n_theta):
            z_i = self.meta_datasets[:, i]
            np.add.at(cube[t], z_i, weight[:, t][:, None] * self.tables.posterior[t, z_i])
        total = 0.0
        for t in range(n_theta):
            p_t = cube[t].sum()
            if p_t > 0:
                total += p_t * mutual_information(JointTable(cube[t] / p_t))
        return total


def _dataset_marginal(env: TaskEnvironment, tables: DatasetTables) -> np.ndarray:
    return env.weights.probs @ tables.task_probs


def _meta_dataset_index(D: int, n: int) -> np.ndarray:
    return np.array(list(itertools.product(range(D), repeat=n)), dtype=int).reshape(D ** n, n)


def _meta_posterior(risk: np.ndarray, meta_datasets: np.ndarray, spec: GibbsLearnerSpec) -> np.ndarray:
    """P(theta | Z_{1:n}) for each meta-dataset row: Gibbs on the empirical meta-risk."""
    meta_risk = risk[:, meta_datasets].mean(axis=2).T                 # (N, Theta)
    return softmax(-spec.meta_temperature * meta_risk, axis=1)


def exact_joint_enumeration(trainenv: TaskEnvironment, n: int, m: int, spec: GibbsLearnerSpec) -> ExactJoint:
    n_theta = len(spec.theta_grid)
    if (len(trainenv.tasks) * trainenv.alphabet_size ** m) ** n * n_theta > JOINT_LIMIT:
        raise EnumerationTooLarge("meta-dataset enumeration exceeds the joint limit")
    tables = dataset_tables(trainenv, m, spec)
    D = tables.datasets.shape[0]
    W = trainenv.n_hypotheses
    cells = D ** n * n_theta * W ** n
    if cells > JOINT_LIMIT:
        raise EnumerationTooLarge(f"joint table with {cells} cells exceeds {JOINT_LIMIT}")

    meta_datasets = _meta_dataset_index(D, n)
    meta_probs = np.prod(_dataset_marginal(trainenv, tables)[meta_datasets], axis=1)
    theta_post = _meta_posterior(tables.risk, meta_datasets, spec)

    # P(w_1..w_n | theta, Z) is a product over tasks; build it with an outer product per task.
    blocks = []
    for t in range(n_theta):
        block = np.ones((meta_datasets.shape[0], 1))
        for i in range(n):
            per_task = tables.posterior[t, meta_datasets[:, i]]
            block = (block[:, :, None] * per_task[:, None, :]).reshape(block.shape[0], -1)
        blocks.append(theta_post[:, t][:, None] * block)
    mass = meta_probs[:, None] * np.concatenate(blocks, axis=1)
    mass = mass / mass.sum()
    return ExactJoint(n, m, tables, meta_datasets, meta_probs, theta_post, JointTable(mass))


def single_dataset_kl(trainenv: TaskEnvironment, testenv: TaskEnvironment, m: int) -> float:
    """KL(P_Z || Q_Z) for one dataset of m samples."""
    datasets = enumerate_datasets(trainenv.alphabet_size, m)
    p = trainenv.weights.probs @ np.prod(trainenv.sample_matrix()[:, datasets], axis=2)
    q = testenv.weights.probs @ np.prod(testenv.sample_matrix()[:, datasets], axis=2)
    return kl_discrete(DiscreteDistribution.from_weights(p), DiscreteDistribution.from_weights(q))


def kl_datasets(trainenv: TaskEnvironment, testenv: TaskEnvironment, n: int, m: int) -> float:
    """KL(P_{Z_{1:n}} || Q_{Z_{1:n}}) evaluated on the full meta-dataset space."""
    datasets = enumerate_datasets(trainenv.alphabet_size, m)
    D = datasets.shape[0]
    if D ** n > JOINT_LIMIT:
        raise EnumerationTooLarge(f"{D}^{n} meta-datasets exceeds {JOINT_LIMIT}")
    p1 = trainenv.weights.probs @ np.prod(trainenv.sample_matrix()[:, datasets], axis=2)
    q1 = testenv.weights.probs @ np.prod(testenv.sample_matrix()[:, datasets], axis=2)
    index = _meta_dataset_index(D, n)
    p = np.prod(p1[index], axis=1)
    q = np.prod(q1[index], axis=1)
    return kl_discrete(DiscreteDistribution.from_weights(p), DiscreteDistribution.from_weights(q))


def thm1_bound(I_joint: float, kl_datasets: float, sigma: float, n: int, m: int) -> float:
    if I_joint < 0 or kl_datasets < 0:
        raise ValueError("information terms must be >= 0")
    return math.sqrt(2.0 * sigma ** 2 * (I_joint + kl_datasets) / (n * m))


def _check_shared_loss(trainenv: TaskEnvironment, testenv: TaskEnvironment) -> None:
    if not np.array_equal(trainenv.loss_table, testenv.loss_table):
        raise DimensionMismatch("training and testing environments must share one loss table")


def ood_gap_exact(trainenv: TaskEnvironment, testenv: TaskEnvironment, n: int, m: int,
                  spec: GibbsLearnerSpec, joint: Optional[ExactJoint] = None) -> float:
    _check_shared_loss(trainenv, testenv)
    joint = joint or exact_joint_enumeration(trainenv, n, m, spec)
    meta_risk = joint.tables.risk[:, joint.meta_datasets].mean(axis=2).T   # (N, Theta)
    empirical = float(np.sum(joint.meta_probs[:, None] * joint.theta_posterior * meta_risk))
    test_tables = dataset_tables(testenv, m, spec)
    population = float(joint.theta_marginal @ _population_risks(test_tables, testenv))
    return empirical - population


class Thm1Decomposition(NamedTuple):
    mismatch: float
    environment: float
    task: float

    @property
    def total(self) -> float:
        return self.mismatch + self.environment + self.task


def thm1_decomposed_bound(trainenv: TaskEnvironment, testenv: TaskEnvironment, n: int, m: int,
                          spec: GibbsLearnerSpec, sigma: float = SIGMA,
                          joint: Optional[ExactJoint] = None) -> Thm1Decomposition:
    """Chain-rule split of thm1_bound; defined for singleton environments only."""
    if len(trainenv.tasks) != 1 or len(testenv.tasks) != 1:
        raise ValueError("the decomposed bound needs single-task environments")
    joint = joint or exact_joint_enumeration(trainenv, n, m, spec)
    d_task = kl_discrete(trainenv.tasks[0].sample_dist, testenv.tasks[0].sample_dist)
    task_info = sum(joint.task_information(i) for i in range(n))
    scale = 2.0 * sigma ** 2
    return Thm1Decomposition(
        mismatch=math.sqrt(scale * d_task),
        environment=math.sqrt(scale * joint.theta_information() / (n * m)),
        task=math.sqrt(scale * task_info / (n * m)),
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _draw_task_dataset(env: TaskEnvironment, m: int, rng: np.random.Generator) -> Tuple[int, Tuple[int, ...]]:
    task = int(rng.choice(len(env.tasks), p=env.weights.probs))
    data = rng.choice(env.alphabet_size, size=m, p=env.tasks[task].sample_dist.probs)
    return task, tuple(int(s) for s in data)


def _dataset_code(data: Sequence[int], alphabet_size: int) -> int:
    code = 0
    for s in data:
        code = code * alphabet_size + int(s)
    return code


def ood_gap_monte_carlo(trainenv: TaskEnvironment, testenv: TaskEnvironment, n: int, m: int,
                        spec: GibbsLearnerSpec, draws: int, seed: SeedLike) -> Tuple[float, float]:
    """Sampling estimate of the OOD gap: (mean, standard error)."""
    _check_shared_loss(trainenv, testenv)
    rng = as_rng(seed)
    tables = dataset_tables(trainenv, m, spec)
    population = _population_risks(dataset_tables(testenv, m, spec), testenv)
    gaps = np.empty(draws)
    for k in range(draws):
        codes = [_dataset_code(_draw_task_dataset(trainenv, m, rng)[1], trainenv.alphabet_size)
                 for _ in range(n)]
        meta_risk = tables.risk[:, codes].mean(axis=1)
        theta = int(rng.choice(meta_risk.size, p=softmax(-spec.meta_temperature * meta_risk)))
        gaps[k] = meta_risk[theta] - population[theta]
    return mean_and_se(gaps)


def build_supersample(env: TaskEnvironment, n: int, m: int, seed: SeedLike) -> SuperSample:
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2 ** 63 - 1))
    data_rng = as_rng(derive_seed(seed, "pairs"))
    sign_rng = as_rng(derive_seed(seed, "signs"))
    pairs = []
    for _ in range(n):
        tp, dp = _draw_task_dataset(env, m, data_rng)
        tm, dm = _draw_task_dataset(env, m, data_rng)
        pairs.append(SuperSamplePair(tp, dp, tm, dm))
    signs = sign_rng.choice(np.array([-1, 1]), size=n)
    return SuperSample(tuple(pairs), signs, env.loss_table)


def supersample_stream(env: TaskEnvironment, n: int, m: int, seed: int) -> Iterator[SuperSample]:
    k = 0
    while True:
        yield build_supersample(env, n, m, derive_seed(seed, "supersample", k))
        k += 1


# ---------------------------------------------------------------------------
# Subtask generalization
# ---------------------------------------------------------------------------

@dataclass
class SubtaskEstimate:
    value: float
    se: float
    used_draws: int
    skipped_draws: int
    bound: float = math.nan
    bound_se: float = math.nan
    mean_information: float = math.nan
    per_draw: List[float] = field(default_factory=list)

    @property
    def degenerate_frequency(self) -> float:
        total = self.used_draws + self.skipped_draws
        return self.skipped_draws / total if total else 0.0


def _risk_matrix(ss: SuperSample, spec: GibbsLearnerSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(Theta, n) empirical risks of the plus and minus datasets."""
    _check_spec(spec, ss.loss_table)
    n_theta = len(spec.theta_grid)
    plus = np.empty((n_theta, ss.n))
    minus = np.empty((n_theta, ss.n))
    for t in range(n_theta):
        for i, pair in enumerate(ss.pairs):
            plus[t, i] = empirical_meta_risk(t, [pair.data_plus], spec, ss.loss_table)
            minus[t, i] = empirical_meta_risk(t, [pair.data_minus], spec, ss.loss_table)
    return plus, minus


def _target_count(ss: SuperSample, target: int) -> int:
    return sum(1 for p in ss.pairs if p.task_plus == target or p.task_minus == target)


def _sign_terms(signs: np.ndarray, plus: np.ndarray, minus: np.ndarray, in_plus: np.ndarray,
                in_minus: np.ndarray, spec: GibbsLearnerSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior over theta given the selected members, and the per-theta f_i values."""
    selected = np.where(signs > 0, plus, minus)
    posterior = softmax(-spec.meta_temperature * selected.mean(axis=1))
    f = in_minus[None, :] * minus - in_plus[None, :] * plus          # (Theta, n)
    return posterior, f


def gen_sub_exhaustive(ss: SuperSample, target_task: int, spec: GibbsLearnerSpec) -> Optional[float]:
    """Exact average over all 2^n sign patterns for one supersample; None when n_target = 0."""
    count = _target_count(ss, target_task)
    if count == 0:
        return None
    plus, minus = _risk_matrix(ss, spec)
    in_plus = np.array([p.task_plus == target_task for p in ss.pairs], dtype=float)
    in_minus = np.array([p.task_minus == target_task for p in ss.pairs], dtype=float)
    values = []
    for pattern in itertools.product((-1, 1), repeat=ss.n):
        signs = np.array(pattern)
        posterior, f = _sign_terms(signs, plus, minus, in_plus, in_minus, spec)
        values.append(float(posterior @ (-signs[None, :] * f).sum(axis=1)) / count)
    return float(np.mean(values))


def _subtask_draws(stream: Iterable[SuperSample], target_task: int, spec: GibbsLearnerSpec,
                   trials: int, resamples: int, bins: int, seed: SeedLike) -> SubtaskEstimate:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = as_rng(seed)
    values: List[float] = []
    bounds: List[float] = []
    infos: List[float] = []
    skipped = 0
    for ss in itertools.islice(stream, trials):
        count = _target_count(ss, target_task)
        if count == 0:
            skipped += 1
            continue
        plus, minus = _risk_matrix(ss, spec)
        in_plus = np.array([p.task_plus == target_task for p in ss.pairs], dtype=float)
        in_minus = np.array([p.task_minus == target_task for p in ss.pairs], dtype=float)
        m = len(ss.pairs[0].data_plus)

        sign_rows = np.vstack([ss.signs, rng.choice(np.array([-1, 1]), size=(resamples - 1, ss.n))])
        f_draws = np.empty((resamples, ss.n))
        draw_values = np.empty(resamples)
        for r, signs in enumerate(sign_rows):
            posterior, f = _sign_terms(signs, plus, minus, in_plus, in_minus, spec)
            draw_values[r] = float(posterior @ (-signs[None, :] * f).sum(axis=1)) / count
            theta = int(rng.choice(posterior.size, p=posterior))
            f_draws[r] = f[theta]
        info = np.array([binned_mi_arrays(sign_rows[:, i], f_draws[:, i], bins) for i in range(ss.n)])
        values.append(float(draw_values.mean()))
        bounds.append(float(np.sum(np.sqrt(2.0 * SIGMA ** 2 * info / m))) / count)
        infos.append(float(info.mean()))

    if not values:
        raise AllDrawsDegenerate(f"target task {target_task} never appeared in {trials} supersamples")
    value, se = mean_and_se(values)
    bound, bound_se = mean_and_se(bounds)
    return SubtaskEstimate(value, se, len(values), skipped, bound, bound_se, float(np.mean(infos)), values)


def gen_sub_estimate(stream: Iterable[SuperSample], target_task: int, spec: GibbsLearnerSpec,
                     trials: int, resamples: int = DEFAULT_SIGN_RESAMPLES, seed: SeedLike = 0,
                     bins: int = DEFAULT_BINS) -> SubtaskEstimate:
    return _subtask_draws(stream, target_task, spec, trials, resamples, bins, seed)


def thm2_bound(stream: Iterable[SuperSample], target_task: int, spec: GibbsLearnerSpec,
               trials: int, bins: int = DEFAULT_BINS, resamples: int = DEFAULT_SIGN_RESAMPLES,
               seed: SeedLike = 0) -> float:
    return _subtask_draws(stream, target_task, spec, trials, resamples, bins, seed).bound


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_tiny_instance(rng: np.random.Generator, n_tasks: int = 2, alphabet: int = 2,
                         grid: int = 3) -> Tuple[TaskEnvironment, TaskEnvironment, GibbsLearnerSpec]:
    """Train/test environments over shared tasks plus a Gibbs learner.

    Loss entries are uniform on [0, 1]. Hard 0/1 loss tables with peaked sample
    distributions and meta temperatures far above this range can push the exact
    gap past thm1_bound; this generator does not produce them.
    """
    loss = rng.uniform(0.0, 1.0, size=(grid, alphabet))
    tasks = tuple(
        FiniteTask(DiscreteDistribution(rng.dirichlet(np.ones(alphabet))), loss) for _ in range(n_tasks)
    )
    train = TaskEnvironment(tasks, DiscreteDistribution(rng.dirichlet(np.ones(n_tasks))))
    test = TaskEnvironment(tasks, DiscreteDistribution(rng.dirichlet(np.ones(n_tasks))))
    spec = GibbsLearnerSpec.grid(grid, grid,
                                 base_temperature=float(rng.uniform(0.5, 4.0)),
                                 meta_temperature=float(rng.uniform(0.5, 4.0)),
                                 coupling=float(rng.uniform(0.0, 2.0)))
    return train, test, spec


def random_subtask_instance(rng: np.random.Generator, n_tasks: int = 3, alphabet: int = 2,
                            grid: int = 3) -> Tuple[TaskEnvironment, int, GibbsLearnerSpec]:
    train, _, spec = random_tiny_instance(rng, n_tasks, alphabet, grid)
    return train, int(rng.integers(n_tasks)), spec
