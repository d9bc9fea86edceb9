"""Difficulty-aware routing: quantile grouping, boundary refinement and
capacity allocation.

Groups are numbered 1..G, easiest first.  A routing table maps every
category to a group (``gamma``) and every group to a capacity tag
(``alpha``, ``"H"`` or ``"L"``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DifficultyTable:
    confidence: dict[int, float]

    def __post_init__(self):
        for c, t in self.confidence.items():
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"confidence of category {c} is {t}, outside [0, 1]")

    @property
    def difficulty(self) -> dict[int, float]:
        return {c: 1.0 - t for c, t in self.confidence.items()}

    @property
    def categories(self) -> list[int]:
        return sorted(self.confidence)


def compute_difficulty(rates: Mapping, categories=None) -> DifficultyTable:
    """d(c) = 1 - T_c from per-category success rates.

    ``categories`` lists the ids the table must cover; a missing one is an
    error.  JSON-style string keys are accepted.
    """
    conf = {int(c): float(t) for c, t in rates.items()}
    if categories is not None:
        missing = sorted(set(int(c) for c in categories) - set(conf))
        if missing:
            raise ValueError(f"difficulty missing for categories {missing}")
    return DifficultyTable(conf)


def _check_difficulties(d: Mapping[int, float]) -> dict[int, float]:
    out = {int(c): float(v) for c, v in d.items()}
    if not out:
        raise ValueError("no categories")
    return out


def sorted_categories(d: Mapping[int, float]) -> list[int]:
    """Ascending difficulty, ties broken by ascending category id."""
    return sorted(d, key=lambda c: (d[c], c))


def boundaries(K: int, G: int) -> list[int]:
    return [(g * K) // G for g in range(G + 1)]


def quantile_partition(d: Mapping[int, float], G: int) -> dict[int, int]:
    d = _check_difficulties(d)
    K = len(d)
    if not 1 <= G <= K:
        raise ValueError(f"need 1 <= G <= K, got G={G}, K={K}")
    order = sorted_categories(d)
    b = boundaries(K, G)
    gamma = {}
    for g in range(1, G + 1):
        for rank in range(b[g - 1], b[g]):
            gamma[order[rank]] = g
    return gamma


@dataclass
class RefineStep:
    boundary: int
    category: int
    score_stay: float
    score_move: float
    moved: bool

    def to_json(self) -> dict:
        return {"boundary": self.boundary, "category": self.category,
                "s_g": self.score_stay, "s_g1": self.score_move, "moved": self.moved}


def boundary_refine(gamma0: Mapping[int, int], d: Mapping[int, float], G: int,
                    pilot: Callable[[dict[int, int], int, int], float]):
    """Move each boundary category into the next harder group iff that scores higher.

    ``pilot(gamma, c, g)`` returns the validation score of the marginal
    category ``c`` under routing ``gamma``, where it sits in group ``g``.
    Boundaries are visited in order g = 1..G-1 and gamma is updated in
    place between them.  Returns (gamma, log).
    """
    d = _check_difficulties(d)
    gamma = dict(gamma0)
    order = sorted_categories(d)
    b = boundaries(len(d), G)
    steps: list[RefineStep] = []
    for g in range(1, G):
        c = order[b[g] - 1]
        if gamma[c] != g:
            # an earlier move already took this category; nothing sits on the cut
            continue
        moved_gamma = {**gamma, c: g + 1}
        try:
            s_stay = float(pilot(dict(gamma), c, g))
            s_move = float(pilot(moved_gamma, c, g + 1))
        except Exception as exc:
            raise RuntimeError(f"pilot evaluation failed at boundary {g}: {exc}") from exc
        moved = s_move > s_stay
        if moved:
            gamma = moved_gamma
        steps.append(RefineStep(g, c, s_stay, s_move, moved))
    return gamma, steps


def allocate_capacity(gamma: Mapping[int, int], d: Mapping[int, float], G: int) -> dict[int, str]:
    """H for groups whose mean difficulty is strictly below the median, else L."""
    d = _check_difficulties(d)
    med = float(np.median([d[c] for c in sorted(d)]))
    alpha = {}
    for g in range(1, G + 1):
        members = [d[c] for c in sorted(d) if gamma[c] == g]
        if not members:
            alpha[g] = "L"
            continue
        alpha[g] = "H" if float(np.mean(members)) < med else "L"
    return alpha


def random_partition(categories, G: int, seed: int) -> dict[int, int]:
    """Random assignment with the same group sizes as the quantile cut."""
    cats = sorted(int(c) for c in categories)
    if not 1 <= G <= len(cats):
        raise ValueError(f"need 1 <= G <= K, got G={G}, K={len(cats)}")
    perm = np.random.default_rng(seed).permutation(cats)
    b = boundaries(len(cats), G)
    return {int(perm[r]): g for g in range(1, G + 1) for r in range(b[g - 1], b[g])}


@dataclass
class RoutingTable:
    gamma: dict[int, int]
    alpha: dict[int, str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gamma = {int(c): int(g) for c, g in self.gamma.items()}
        self.alpha = {int(g): str(a) for g, a in self.alpha.items()}
        G = len(self.alpha)
        if sorted(self.alpha) != list(range(1, G + 1)):
            raise ConfigError(f"alpha must cover groups 1..{G}, got {sorted(self.alpha)}")
        bad = [a for a in self.alpha.values() if a not in ("H", "L")]
        if bad:
            raise ConfigError(f"capacity tags must be H or L, got {bad}")
        outside = sorted(c for c, g in self.gamma.items() if not 1 <= g <= G)
        if outside:
            raise ConfigError(f"categories {outside} routed outside 1..{G}")
        empty = [g for g in range(1, G + 1) if g not in self.gamma.values()]
        if empty:
            warnings = self.provenance.setdefault("warnings", [])
            msg = f"empty groups {empty}"
            if msg not in warnings:
                warnings.append(msg)
            log.warning("routing has %s", msg)

    @property
    def G(self) -> int:
        return len(self.alpha)

    @property
    def capacity(self) -> tuple[str, ...]:
        return tuple(self.alpha[g] for g in range(1, self.G + 1))

    def check_covers(self, categories) -> None:
        missing = sorted(set(int(c) for c in categories) - set(self.gamma))
        if missing:
            raise ConfigError(f"routing has no group for categories {missing}")

    @classmethod
    def shared(cls, categories) -> "RoutingTable":
        """The fully shared baseline: one high-capacity branch for everything."""
        return cls({int(c): 1 for c in categories}, {1: "H"}, {"method": "none"})

    def to_json(self) -> dict:
        return {
            "gamma": {str(c): g for c, g in sorted(self.gamma.items())},
            "alpha": {str(g): a for g, a in sorted(self.alpha.items())},
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "RoutingTable":
        try:
            return cls(dict(d["gamma"]), dict(d["alpha"]), dict(d.get("provenance", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed routing table: {exc}") from exc


def build_routing(d: DifficultyTable, G: int, method: str = "quantile", seed: int = 0,
                  pilot: Callable[[dict[int, int], int, int], float] | None = None,
                  reference: str | None = None) -> RoutingTable:
    """Algorithm end to end.  ``method`` is quantile, quantile+refine or random."""
    diff = d.difficulty
    prov: dict = {"method": method, "G": G, "seed": seed, "reference": reference,
                  "difficulty": {str(c): diff[c] for c in sorted(diff)}}
    if method == "random":
        gamma = random_partition(diff, G, seed)
    elif method in ("quantile", "quantile+refine"):
        gamma = quantile_partition(diff, G)
        prov["initial_gamma"] = {str(c): g for c, g in sorted(gamma.items())}
        if method == "quantile+refine":
            if pilot is None:
                raise ConfigError("refinement needs a pilot evaluator")
            gamma, steps = boundary_refine(gamma, diff, G, pilot)
            prov["refinement"] = [s.to_json() for s in steps]
    else:
        raise ConfigError(f"unknown grouping method {method!r}")
    return RoutingTable(gamma, allocate_capacity(gamma, diff, G), prov)


def read_difficulty(path) -> DifficultyTable:
    raw = json.loads(Path(path).read_text())
    return compute_difficulty(raw)


def write_routing(table: RoutingTable, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(table.to_json(), indent=2, sort_keys=True))
    tmp.replace(path)


def read_routing(path) -> RoutingTable:
    return RoutingTable.from_json(json.loads(Path(path).read_text()))
