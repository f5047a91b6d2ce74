"""Statistic-ranked progressive masking and baseline mask strategies.

Points are ranked by the combined local statistic, high to low. The retained
set s_t at ratio theta_t is the top round((1-theta_t)*N) ids of that ranking,
so the sets nest (s_T subset of ... subset of s_1 subset of s_0) and masked
points are always the least informative remainder. Training pairs are
(input=s_t, target=s_{t-1}) in fixed-gap mode, or a uniformly drawn earlier
step in random-gap mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DegenerateSceneError

__all__ = [
    "MaskSchedule", "MaskedSequence", "TrainingPair", "round_half_up",
    "rank_by_statistics", "build_sequence", "sample_training_pair",
    "baseline_mask", "export_sequence_json", "load_sequence_json",
]

_GAP_MODES = ("fixed", "random")


def round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass
class MaskSchedule:
    ratios: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    gap: float = 0.1
    gap_mode: str = "fixed"

    def __post_init__(self):
        self.ratios = tuple(float(r) for r in self.ratios)
        self.gap = float(self.gap)
        if not self.ratios:
            raise ConfigError("schedule needs at least one ratio")
        if self.ratios[0] <= 0.0 or self.ratios[-1] >= 1.0:
            raise ConfigError(f"ratios must lie in (0,1), got {self.ratios}")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise ConfigError(f"ratios must be strictly increasing, got {self.ratios}")
        if self.gap <= 0.0:
            raise ConfigError(f"gap must be positive, got {self.gap}")
        if self.gap_mode not in _GAP_MODES:
            raise ConfigError(f"gap_mode must be one of {_GAP_MODES}, got '{self.gap_mode}'")
        if self.gap_mode == "fixed":
            # one schedule step per gap, counting the implicit theta_0 = 0
            steps = (self.ratios[0],) + tuple(
                b - a for a, b in zip(self.ratios, self.ratios[1:]))
            for t, step in enumerate(steps, start=1):
                if abs(step - self.gap) > 1e-9:
                    raise ConfigError(
                        f"fixed gap_mode needs theta_{t} - theta_{t-1} = {self.gap}, "
                        f"got step {step}")

    @property
    def n_steps(self):
        return len(self.ratios)


@dataclass
class MaskedSequence:
    scene: object            # source PointScene (= s_0)
    theta: tuple             # masking ratio per step, t = 1..T
    sets: list               # retained id arrays per step, each ascending

    @property
    def n_steps(self):
        return len(self.theta)

    def retained_ids(self, step):
        """Ids of s_step; step 0 is the full scene."""
        if step == 0:
            return np.sort(self.scene.ids)
        return self.sets[step - 1]


@dataclass
class TrainingPair:
    input_ids: np.ndarray
    target_ids: np.ndarray
    step: int


def rank_by_statistics(field):
    """Ids ordered by combined statistic descending, ties by ascending id."""
    order = np.lexsort((field.ids, -field.d))
    return field.ids[order]


def build_sequence(scene, field, sched, ranking=None):
    """Nested retained sets along the schedule, most informative points kept.

    Pass an explicit `ranking` (a permutation of the scene ids, best first) to
    build the same nested prefix structure under a different keep order; the
    statistic field may then be None.
    """
    if ranking is None:
        if not np.array_equal(field.ids, scene.ids):
            raise ContractError("statistic field was not computed on this scene")
        ranking = rank_by_statistics(field)
    else:
        ranking = np.asarray(ranking, dtype=np.int64)
        if not np.array_equal(np.sort(ranking), np.sort(scene.ids)):
            raise ContractError("ranking must be a permutation of the scene ids")
    n = scene.n_points
    sets = []
    for theta in sched.ratios:
        m = round_half_up((1.0 - theta) * n)
        if m < 1:
            raise DegenerateSceneError(
                f"ratio {theta} leaves no points of {n}; shrink the schedule")
        sets.append(np.sort(ranking[:m]))
    return MaskedSequence(scene=scene, theta=sched.ratios, sets=sets)


def sample_training_pair(seq, rng, sched):
    """Draw step t uniformly and pair s_t with its reconstruction target.

    Fixed gap mode targets s_{t-1}; random gap mode draws the target step
    uniformly from {0..t-1}.
    """
    if len(sched.ratios) != seq.n_steps:
        raise ContractError("sequence was not built with this schedule")
    t = int(rng.integers(1, seq.n_steps + 1))
    if sched.gap_mode == "fixed":
        target_step = t - 1
    else:
        target_step = int(rng.integers(0, t))
    return TrainingPair(input_ids=seq.retained_ids(t),
                        target_ids=seq.retained_ids(target_step),
                        step=t)


def baseline_mask(scene, field, strategy, theta, rng):
    """Retained ids under a non-progressive baseline strategy.

    random: uniform sample without replacement. informative_abandoned: keep
    the bottom-ranked (least informative) points, masking the top instead.
    """
    if not 0.0 <= theta < 1.0:
        raise ConfigError(f"theta must lie in [0,1), got {theta}")
    n = scene.n_points
    m = round_half_up((1.0 - theta) * n)
    if strategy == "random":
        picked = rng.choice(np.sort(scene.ids), size=m, replace=False)
        return np.sort(picked)
    if strategy == "informative_abandoned":
        ranking = rank_by_statistics(field)
        return np.sort(ranking[n - m:])
    raise ConfigError(f"unknown strategy '{strategy}'")


def export_sequence_json(seq, path):
    doc = {"theta": list(seq.theta), "sets": [s.tolist() for s in seq.sets]}
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_sequence_json(path):
    """Read back {theta, sets}; returns (theta tuple, list of id arrays)."""
    with open(path, "r") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "theta" not in doc or "sets" not in doc:
        raise ConfigError(f"{path} is not a masked-sequence document")
    theta = tuple(float(v) for v in doc["theta"])
    sets = [np.asarray(s, dtype=np.int64) for s in doc["sets"]]
    if len(theta) != len(sets):
        raise ConfigError("theta and sets lengths differ")
    return theta, sets
