"""
JSON environment registries.

A registry file holds one shared pool of tasks or MDPs plus named weightings
over that pool, so train and test environments always match by identity:

    {
      "kind": "mdp" | "episodic" | "tasks",
      "mdps": [{"name": ..., "n_states": 2, "n_actions": 2, "transition": [...],
                "reward": [...], "initial": [...], "gamma": 0.9, "horizon": 2}],
      "behavior": [...],                      # episodic only, over (h, s, a)
      "loss_table": [[...]],                  # tasks only
      "tasks": [{"name": ..., "sample_dist": [...]}],
      "environments": {"train": [0.5, 0.5], "test": [0.25, 0.75]}
    }
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from .errors import ConfigInvalid, EnvironmentFileMissing, MetagenError
from .info_core import DiscreteDistribution
from .mdp_core import TabularMDP
from .meta_rl import MDPEnvironment
from .meta_supervised import FiniteTask, TaskEnvironment
from .offline_rl import EpisodicEnvironment, EpisodicMDP

logger = logging.getLogger(__name__)

KINDS = ("mdp", "episodic", "tasks")

Environment = Union[MDPEnvironment, EpisodicEnvironment, TaskEnvironment]


@dataclass
class Registry:
    kind: str
    members: Tuple[Any, ...]
    weightings: Dict[str, np.ndarray] = field(default_factory=dict)
    behavior: Any = None
    path: str = ""

    def environment(self, name: str) -> Environment:
        if name not in self.weightings:
            raise ConfigInvalid([f"environment '{name}' not in {self.path} (have {sorted(self.weightings)})"])
        weights = DiscreteDistribution.from_weights(self.weightings[name])
        if self.kind == "mdp":
            return MDPEnvironment(self.members, weights)
        if self.kind == "episodic":
            return EpisodicEnvironment(self.members, weights, self.behavior)
        return TaskEnvironment(self.members, weights)


def _mdp(entry: Dict[str, Any], episodic: bool) -> Union[TabularMDP, EpisodicMDP]:
    if episodic:
        return EpisodicMDP(
            n_states=int(entry["n_states"]),
            n_actions=int(entry["n_actions"]),
            transition=np.asarray(entry["transition"], dtype=float),
            reward=np.asarray(entry["reward"], dtype=float),
            initial=np.asarray(entry["initial"], dtype=float),
            horizon=int(entry["horizon"]),
            name=str(entry.get("name", "")),
        )
    return TabularMDP(
        n_states=int(entry["n_states"]),
        n_actions=int(entry["n_actions"]),
        transition=np.asarray(entry["transition"], dtype=float),
        reward=np.asarray(entry["reward"], dtype=float),
        initial=np.asarray(entry["initial"], dtype=float),
        gamma=float(entry["gamma"]),
        horizon=int(entry["horizon"]),
        name=str(entry.get("name", "")),
    )


def parse_registry(raw: Dict[str, Any], path: str = "<memory>") -> Registry:
    kind = str(raw.get("kind", "episodic" if raw.get("episodic") else "mdp"))
    problems: List[str] = []
    if kind not in KINDS:
        problems.append(f"kind: expected one of {KINDS}, got '{kind}'")
    weightings = raw.get("environments") or {}
    if not weightings:
        problems.append("environments: at least one named weighting is required")
    if problems:
        raise ConfigInvalid(problems)

    behavior = None
    try:
        if kind == "tasks":
            loss = np.asarray(raw["loss_table"], dtype=float)
            members = tuple(
                FiniteTask(DiscreteDistribution.from_weights(t["sample_dist"]), loss) for t in raw["tasks"]
            )
        else:
            members = tuple(_mdp(e, kind == "episodic") for e in raw["mdps"])
            if kind == "episodic":
                behavior = (DiscreteDistribution.from_weights(raw["behavior"]) if "behavior" in raw
                            else DiscreteDistribution.uniform(members[0].grid_size))
    except MetagenError:
        raise
    except KeyError as e:
        raise ConfigInvalid([f"{path}: missing key {e}"]) from e
    except (TypeError, ValueError, IndexError) as e:
        raise ConfigInvalid([f"{path}: malformed {kind} entry ({e})"]) from e

    for name, w in weightings.items():
        if len(w) != len(members):
            problems.append(f"environments.{name}: {len(w)} weights for {len(members)} members")
    if problems:
        raise ConfigInvalid(problems)
    logger.info("loaded %d %s member(s) from %s", len(members), kind, path)
    return Registry(kind, members, {k: np.asarray(v, dtype=float) for k, v in weightings.items()},
                    behavior, path)


def load_registry(path: str) -> Registry:
    if not os.path.exists(path):
        raise EnvironmentFileMissing(f"environment file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigInvalid([f"{path}: not valid JSON ({e.msg} at line {e.lineno})"]) from e
    if not isinstance(raw, dict):
        raise ConfigInvalid([f"{path}: top level must be an object"])
    return parse_registry(raw, path)


def registry_to_json(registry: Registry) -> Dict[str, Any]:
    """Inverse of parse_registry, used to write example registries."""
    out: Dict[str, Any] = {"kind": registry.kind}
    if registry.kind == "tasks":
        out["loss_table"] = registry.members[0].loss_table.tolist()
        out["tasks"] = [{"sample_dist": t.sample_dist.probs.tolist()} for t in registry.members]
    else:
        mdps = []
        for mdp in registry.members:
            entry = {
                "name": mdp.name,
                "n_states": mdp.n_states,
                "n_actions": mdp.n_actions,
                "transition": mdp.transition.tolist(),
                "reward": mdp.reward.tolist(),
                "initial": mdp.initial.tolist(),
                "horizon": mdp.horizon,
            }
            if registry.kind == "mdp":
                entry["gamma"] = mdp.gamma
            mdps.append(entry)
        out["mdps"] = mdps
        if registry.behavior is not None:
            out["behavior"] = registry.behavior.probs.tolist()
    out["environments"] = {k: v.tolist() for k, v in registry.weightings.items()}
    return out
