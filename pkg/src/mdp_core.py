"""
Tabular MDPs, softmax policies, trajectory sampling, exact DP oracles
and the REINFORCE estimator.

Time steps are indexed h = 0..H, so a trajectory has H+1 transitions and
both the return and the gradient estimator sum over that same range.
"""

import itertools
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import softmax

from .errors import DimensionMismatch, EnumerationTooLarge, InvalidDistribution
from .seeding import SeedLike, as_rng

ROW_TOL = 1e-9
ENUMERATION_LIMIT = 10 ** 6
FD_STEP = 1e-5


def stochastic_rows(name: str, rows: np.ndarray) -> np.ndarray:
    if np.any(rows < 0) or not np.all(np.isfinite(rows)):
        raise InvalidDistribution(f"{name} has negative or non-finite entries")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > ROW_TOL):
        raise InvalidDistribution(f"{name} rows must sum to 1 (worst {sums.flat[np.argmax(np.abs(sums - 1.0))]!r})")
    return rows / sums[..., None]


@dataclass(eq=False)
class TabularMDP:
    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    initial: np.ndarray
    gamma: float
    horizon: int
    name: str = ""

    def __post_init__(self) -> None:
        S, A = int(self.n_states), int(self.n_actions)
        self.transition = stochastic_rows("transition", np.asarray(self.transition, dtype=float))
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial = stochastic_rows("initial", np.asarray(self.initial, dtype=float).reshape(-1))
        if self.transition.shape != (S, A, S):
            raise DimensionMismatch(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.reward.shape != (S, A):
            raise DimensionMismatch(f"reward shape {self.reward.shape} != {(S, A)}")
        if self.initial.shape != (S,):
            raise DimensionMismatch(f"initial shape {self.initial.shape} != {(S,)}")
        if np.any(self.reward < 0) or np.any(self.reward > 1):
            raise InvalidDistribution("rewards must lie in [0, 1]")
        if not (0.0 <= float(self.gamma) < 1.0):
            raise InvalidDistribution(f"gamma must lie in [0, 1), got {self.gamma}")
        if int(self.horizon) < 0:
            raise InvalidDistribution("horizon must be >= 0")
        self.n_states, self.n_actions = S, A
        self.gamma, self.horizon = float(self.gamma), int(self.horizon)
        self._cum_transition = np.cumsum(self.transition, axis=-1)
        self._cum_initial = np.cumsum(self.initial)

    @property
    def dim(self) -> int:
        return self.n_states * self.n_actions

    @property
    def return_cap(self) -> float:
        return (1.0 - self.gamma ** (self.horizon + 1)) / (1.0 - self.gamma)

    def with_gamma(self, gamma: float) -> "TabularMDP":
        return TabularMDP(self.n_states, self.n_actions, self.transition, self.reward,
                          self.initial, gamma, self.horizon, self.name)


@dataclass
class SoftmaxPolicy:
    logits: np.ndarray

    def __post_init__(self) -> None:
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=float))

    @classmethod
    def from_vector(cls, vector: np.ndarray, n_states: int, n_actions: int) -> "SoftmaxPolicy":
        v = np.asarray(vector, dtype=float)
        if v.size != n_states * n_actions:
            raise DimensionMismatch(f"parameter length {v.size} != {n_states * n_actions}")
        return cls(v.reshape(n_states, n_actions))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "SoftmaxPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @property
    def vector(self) -> np.ndarray:
        return self.logits.reshape(-1)

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def score(self, state: int, action: int) -> np.ndarray:
        """Gradient of ln pi(action|state) w.r.t. the logits, as a flat vector."""
        g = np.zeros_like(self.logits)
        g[state] = -self.probs()[state]
        g[state, action] += 1.0
        return g.reshape(-1)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self) -> int:
        return int(self.states.size)

    @property
    def steps(self) -> Iterator[Tuple[int, int, float, int]]:
        return zip(self.states.tolist(), self.actions.tolist(),
                   self.rewards.tolist(), self.next_states.tolist())


def _check_policy(mdp: TabularMDP, policy: SoftmaxPolicy) -> None:
    if policy.logits.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(
            f"policy shape {policy.logits.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}"
        )


def _draw(cum_row: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cum_row, u, side="right")), cum_row.size - 1)


def sample_trajectory(mdp: TabularMDP, policy: SoftmaxPolicy, seed: SeedLike) -> Trajectory:
    _check_policy(mdp, policy)
    rng = as_rng(seed)
    steps = mdp.horizon + 1
    cum_pi = np.cumsum(policy.probs(), axis=1)
    u = rng.random((steps, 2))
    u0 = rng.random()

    states = np.empty(steps, dtype=int)
    actions = np.empty(steps, dtype=int)
    next_states = np.empty(steps, dtype=int)
    s = _draw(mdp._cum_initial, u0)
    for h in range(steps):
        a = _draw(cum_pi[s], u[h, 0])
        s_next = _draw(mdp._cum_transition[s, a], u[h, 1])
        states[h], actions[h], next_states[h] = s, a, s_next
        s = s_next
    return Trajectory(states, actions, mdp.reward[states, actions], next_states)


def discounted_return(traj: Trajectory, gamma: float) -> float:
    discounts = gamma ** np.arange(len(traj))
    return float(np.dot(discounts, traj.rewards))


def _backward_values(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """V_h for h = 0..H under a stationary action-probability table pi (S, A)."""
    values = np.zeros((mdp.horizon + 2, mdp.n_states))
    for h in range(mdp.horizon, -1, -1):
        q = mdp.reward + mdp.gamma * mdp.transition @ values[h + 1]
        values[h] = np.sum(pi * q, axis=1)
    return values[:-1]


def exact_return(mdp: TabularMDP, policy: SoftmaxPolicy) -> float:
    _check_policy(mdp, policy)
    return float(mdp.initial @ _backward_values(mdp, policy.probs())[0])


def reinforce_gradient(traj: Trajectory, policy: SoftmaxPolicy, gamma: float) -> np.ndarray:
    n_states = policy.logits.shape[0]
    if np.any(traj.states >= n_states) or np.any(traj.actions >= policy.logits.shape[1]):
        raise DimensionMismatch("trajectory indices exceed the policy table")
    total = discounted_return(traj, gamma)
    if total == 0.0:
        return np.zeros(policy.logits.size)
    pi = policy.probs()
    score = np.zeros_like(policy.logits)
    np.add.at(score, (traj.states, traj.actions), 1.0)
    visits = np.bincount(traj.states, minlength=n_states).astype(float)
    score -= visits[:, None] * pi
    return total * score.reshape(-1)


def enumerate_trajectories(
    mdp: TabularMDP, policy: SoftmaxPolicy
) -> Iterator[Tuple[float, Trajectory]]:
    """Every (s_0, a_0, ..., s_H, a_H) path with nonzero probability.

    The final next state does not enter rewards or scores, so it is reported as -1.
    """
    _check_policy(mdp, policy)
    steps = mdp.horizon + 1
    if (mdp.n_states * mdp.n_actions) ** steps > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(
            f"(S*A)^(H+1) = {(mdp.n_states * mdp.n_actions) ** steps} exceeds {ENUMERATION_LIMIT}"
        )
    pi = policy.probs()
    pairs = list(itertools.product(range(mdp.n_states), range(mdp.n_actions)))
    for path in itertools.product(pairs, repeat=steps):
        states = np.fromiter((s for s, _ in path), dtype=int, count=steps)
        actions = np.fromiter((a for _, a in path), dtype=int, count=steps)
        prob = mdp.initial[states[0]] * np.prod(pi[states, actions])
        if steps > 1:
            prob *= np.prod(mdp.transition[states[:-1], actions[:-1], states[1:]])
        if prob == 0.0:
            continue
        next_states = np.append(states[1:], -1)
        yield float(prob), Trajectory(states, actions, mdp.reward[states, actions], next_states)


def exact_policy_gradient(mdp: TabularMDP, policy: SoftmaxPolicy) -> np.ndarray:
    grad = np.zeros(mdp.dim)
    for prob, traj in enumerate_trajectories(mdp, policy):
        grad += prob * reinforce_gradient(traj, policy, mdp.gamma)
    return grad


def state_action_occupancy(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """Forward recursion: d[h, s, a] = P(s_h = s, a_h = a) for h = 0..H.

    pi is either a stationary (S, A) table or a per-step (H+1, S, A) table.
    """
    steps = mdp.horizon + 1
    per_step = pi if pi.ndim == 3 else np.broadcast_to(pi, (steps,) + pi.shape)
    occupancy = np.zeros((steps, mdp.n_states, mdp.n_actions))
    state_dist = mdp.initial.copy()
    for h in range(steps):
        occupancy[h] = state_dist[:, None] * per_step[h]
        state_dist = np.einsum("sa,sat->t", occupancy[h], mdp.transition)
    return occupancy


def policy_gradient_dp(mdp: TabularMDP, policy: SoftmaxPolicy) -> np.ndarray:
    """Occupancy-weighted score times discounted action values; no enumeration."""
    _check_policy(mdp, policy)
    pi = policy.probs()
    values = np.vstack([_backward_values(mdp, pi), np.zeros((1, mdp.n_states))])
    occupancy = state_action_occupancy(mdp, pi)
    grad = np.zeros_like(pi)
    for h in range(mdp.horizon + 1):
        q = mdp.reward + mdp.gamma * mdp.transition @ values[h + 1]
        advantage = q - np.sum(pi * q, axis=1, keepdims=True)
        grad += (mdp.gamma ** h) * occupancy[h] * advantage
    return grad.reshape(-1)


def finite_difference_gradient(mdp: TabularMDP, policy: SoftmaxPolicy, step: float = FD_STEP) -> np.ndarray:
    base = policy.vector
    grad = np.zeros(base.size)
    for i in range(base.size):
        bump = np.zeros(base.size)
        bump[i] = step
        up = SoftmaxPolicy.from_vector(base + bump, mdp.n_states, mdp.n_actions)
        down = SoftmaxPolicy.from_vector(base - bump, mdp.n_states, mdp.n_actions)
        grad[i] = (exact_return(mdp, up) - exact_return(mdp, down)) / (2.0 * step)
    return grad


class FiniteHorizonSolution(NamedTuple):
    values: np.ndarray   # (H+1, S): V*_h
    actions: np.ndarray  # (H+1, S): greedy action per step, lowest index on ties


def value_iteration_finite_horizon(mdp: TabularMDP) -> FiniteHorizonSolution:
    steps = mdp.horizon + 1
    values = np.zeros((steps + 1, mdp.n_states))
    actions = np.zeros((steps, mdp.n_states), dtype=int)
    for h in range(steps - 1, -1, -1):
        q = mdp.reward + mdp.gamma * mdp.transition @ values[h + 1]
        actions[h] = np.argmax(q, axis=1)
        values[h] = q[np.arange(mdp.n_states), actions[h]]
    return FiniteHorizonSolution(values[:-1], actions)


def evaluate_deterministic(mdp: TabularMDP, actions: np.ndarray) -> float:
    """Exact return from rho of a per-step deterministic action table (H+1, S)."""
    value = np.zeros(mdp.n_states)
    rows = np.arange(mdp.n_states)
    for h in range(mdp.horizon, -1, -1):
        q = mdp.reward + mdp.gamma * mdp.transition @ value
        value = q[rows, actions[h]]
    return float(mdp.initial @ value)


def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    horizon: int,
    gamma: float,
    deterministic: bool = False,
    name: Optional[str] = None,
) -> TabularMDP:
    if deterministic:
        transition = np.zeros((n_states, n_actions, n_states))
        targets = rng.integers(0, n_states, size=(n_states, n_actions))
        transition[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], targets] = 1.0
        initial = np.zeros(n_states)
        initial[int(rng.integers(n_states))] = 1.0
    else:
        transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        initial = rng.dirichlet(np.ones(n_states))
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(n_states, n_actions, transition, reward, initial, gamma, horizon, name or "")
