"""Cross-category gradient interaction diagnostics.

Replay collects per-category mean gradients at a checkpoint on a fixed
subset without updating anything.  The statistics on top are cosine
interactions between categories, negative transfer, the shared/specific
decomposition and its closed-form predictions.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numgrad as ng
from .checkpoint import Checkpoint
from .grouping import RoutingTable
from .losses import LossWeights
from .numgrad import BLOCK_OMEGA, BLOCK_PSI, ParamStore, Tape
from .posenet import PoseNet
from .synthdata import Dataset
from .trainer import batch_arrays, batch_loss

log = logging.getLogger(__name__)

BLOCK_PHI = "phi"
INF_SENTINEL = float("inf")


class ZeroGradientError(ValueError):
    pass


# --------------------------------------------------------------------------- #
# Replay
# --------------------------------------------------------------------------- #

def diagnostic_plan(data: Dataset, seed: int, batches_per_category: int = 8,
                    batch_size: int = 16) -> list[tuple[int, np.ndarray]]:
    """Fixed list of single-category batches sampled from the training set."""
    plan = []
    for c, idx in sorted(data.by_category().items()):
        if not idx:
            continue
        rng = np.random.default_rng([seed, c])
        n = min(len(idx), batches_per_category * batch_size)
        pick = np.asarray(idx)[rng.choice(len(idx), size=n, replace=False)]
        for b in range(batches_per_category):
            chunk = pick[b * batch_size:(b + 1) * batch_size]
            if len(chunk):
                plan.append((int(c), chunk))
    return plan


def block_names(store: ParamStore) -> dict[str, list[str]]:
    """psi, the union phi, omega, and each phi_g on its own when branched."""
    branches = [b for b in store.blocks() if b.startswith("phi_")]
    out = {BLOCK_PSI: store.names(BLOCK_PSI),
           BLOCK_PHI: [n for n in store.names() if store.block_of(n).startswith("phi_")],
           BLOCK_OMEGA: store.names(BLOCK_OMEGA)}
    if len(branches) > 1:
        for b in sorted(branches, key=lambda s: int(s.split("_")[1])):
            out[b] = store.names(b)
    return out


@dataclass
class CategoryGradientTable:
    epoch: int
    categories: list[int]
    batches: dict[int, int]                          # |M_c|
    grads: dict[str, dict[int, np.ndarray]]          # block -> c -> mean gradient
    complement: dict[str, dict[int, np.ndarray]]     # block -> c -> mean over other batches

    def blocks(self) -> list[str]:
        return list(self.grads)


def replay_collect(ck: Checkpoint, data: Dataset, plan: Sequence[tuple[int, np.ndarray]],
                   weights: LossWeights | None = None) -> CategoryGradientTable:
    """One no-update pass over ``plan`` at the checkpoint's parameters."""
    weights = weights or LossWeights()
    routing = RoutingTable.from_json(ck.routing) if ck.routing else RoutingTable.shared(range(data.K))
    net = PoseNet(ck.config)
    store = ck.params
    blocks = block_names(store)
    cats = sorted(range(data.K))
    have = {c for c, _ in plan}
    missing = [c for c in cats if c not in have]
    if missing:
        raise ValueError(f"diagnostic plan has no batches for categories {missing}")

    per_batch: list[tuple[int, dict[str, np.ndarray]]] = []
    for c, idx in plan:
        pts, gt = batch_arrays(data, idx)
        tape = Tape()
        loss, _ = batch_loss(net, tape, store, pts, gt, routing.gamma[c], weights)
        grads = ng.backward(loss)
        per_batch.append((c, {b: store.flatten(grads, names) for b, names in blocks.items()}))

    counts = {c: sum(1 for k, _ in per_batch if k == c) for c in cats}
    sums = {b: {c: np.zeros(sum(store[n].size for n in names)) for c in cats} for b, names in blocks.items()}
    for c, vecs in per_batch:
        for b, v in vecs.items():
            sums[b][c] += v
    total = {b: sum(sums[b][c] for c in cats) for b in blocks}
    grads = {b: {c: sums[b][c] / counts[c] for c in cats} for b in blocks}
    n_all = len(per_batch)
    comp = {b: {c: (total[b] - sums[b][c]) / (n_all - counts[c]) for c in cats} for b in blocks}
    return CategoryGradientTable(ck.epoch, cats, counts, grads, comp)


# --------------------------------------------------------------------------- #
# Interaction metrics
# --------------------------------------------------------------------------- #

def s_cc(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroGradientError("cosine undefined for a zero gradient")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def aggregate_others(grads: Mapping[int, np.ndarray], c: int, weights: Mapping[int, float] | None = None):
    others = [k for k in sorted(grads) if k != c]
    if not others:
        raise ValueError("need at least two categories")
    w = np.array([1.0 if weights is None else float(weights[k]) for k in others])
    return sum(wi * grads[k] for wi, k in zip(w, others)) / w.sum()


def s_ca(g_c: np.ndarray, others: Sequence[np.ndarray] | Mapping, weights=None) -> float:
    """Cosine of g_c with the (uniform or weighted) mean of the other gradients."""
    if isinstance(others, Mapping):
        keys = sorted(others)
        vecs = [others[k] for k in keys]
        w = None if weights is None else [weights[k] for k in keys]
    else:
        vecs, w = list(others), weights
    if not vecs:
        raise ValueError("need at least one other gradient")
    w = np.ones(len(vecs)) if w is None else np.asarray(w, dtype=np.float64)
    agg = sum(wi * v for wi, v in zip(w, vecs)) / w.sum()
    return s_cc(g_c, agg)


def decompose(grads: Mapping[int, np.ndarray]):
    """u = uniform mean, v_c = g_c - u, and the residuals <u, v_c>."""
    cats = sorted(grads)
    u = sum(grads[c] for c in cats) / len(cats)
    v = {c: grads[c] - u for c in cats}
    ortho = {c: float(np.dot(u, v[c])) for c in cats}
    return u, v, ortho


def heterogeneity_ratio(u: np.ndarray, v: Mapping[int, np.ndarray]) -> float:
    uu = float(np.dot(u, u))
    if uu == 0.0:
        log.warning("shared component is zero; heterogeneity ratio is infinite")
        return INF_SENTINEL
    return float(np.mean([np.dot(v[c], v[c]) for c in sorted(v)])) / uu


def closed_form_scc(u, v_c, v_c2, mode: str = "exact") -> float:
    """Cosine of (u + v_c, u + v_c2) written through the decomposition."""
    uu = np.dot(u, u)
    uv1, uv2 = (np.dot(u, v_c), np.dot(u, v_c2)) if mode == "exact" else (0.0, 0.0)
    if mode not in ("exact", "approx"):
        raise ValueError(f"mode must be exact or approx, got {mode!r}")
    num = uu + uv1 + uv2 + np.dot(v_c, v_c2)
    den = math.sqrt(uu + 2 * uv1 + np.dot(v_c, v_c)) * math.sqrt(uu + 2 * uv2 + np.dot(v_c2, v_c2))
    return float(num / den)


def closed_form_sca(u, v_c, v_not_c, mode: str = "exact") -> float:
    """Same form with the aggregated deviation of the other categories."""
    return closed_form_scc(u, v_c, v_not_c, mode)


def _corr(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class NormalizedForms:
    alpha: dict[int, float]
    beta: dict[int, float]
    rho_cc: dict[tuple[int, int], float]
    rho_c_not: dict[int, float]
    pred_scc: dict[tuple[int, int], float]
    pred_sca: dict[int, float]

    @property
    def mean_rho(self) -> float:
        vals = [r for r in self.rho_cc.values() if np.isfinite(r)]
        return float(np.mean(vals)) if vals else float("nan")


def normalized_forms(u: np.ndarray, v: Mapping[int, np.ndarray]) -> NormalizedForms:
    cats = sorted(v)
    uu = float(np.dot(u, u))
    if uu == 0.0:
        raise ZeroGradientError("normalized forms need a nonzero shared component")
    v_not = {c: aggregate_others(v, c) for c in cats}
    alpha = {c: float(np.dot(v[c], v[c])) / uu for c in cats}
    beta = {c: float(np.dot(v_not[c], v_not[c])) / uu for c in cats}
    rho_cc, pred_scc = {}, {}
    for i, a in enumerate(cats):
        for b in cats[i + 1:]:
            r = _corr(v[a], v[b])
            rho_cc[(a, b)] = r
            rr = 0.0 if not np.isfinite(r) else r
            pred_scc[(a, b)] = (1 + rr * math.sqrt(alpha[a] * alpha[b])) / math.sqrt((1 + alpha[a]) * (1 + alpha[b]))
    rho_not, pred_sca = {}, {}
    for c in cats:
        r = _corr(v[c], v_not[c])
        rho_not[c] = r
        rr = 0.0 if not np.isfinite(r) else r
        pred_sca[c] = (1 + rr * math.sqrt(alpha[c] * beta[c])) / math.sqrt((1 + alpha[c]) * (1 + beta[c]))
    return NormalizedForms(alpha, beta, rho_cc, rho_not, pred_scc, pred_sca)


def orthogonal_construction(r: float, K: int, dim: int | None = None, u_norm: float = 1.0):
    """u along e_0 and K mutually orthogonal deviations with |v_c|^2 = r |u|^2."""
    dim = dim or K + 1
    if dim < K + 1:
        raise ValueError("need dim >= K + 1")
    u = np.zeros(dim)
    u[0] = u_norm
    v = {}
    for c in range(K):
        e = np.zeros(dim)
        e[c + 1] = math.sqrt(r) * u_norm
        v[c] = e
    return u, v


def scaling_law_check(r_grid: Sequence[float], trials: int = 1, K: int = 6, seed: int = 0):
    """Mean direct cosine under the orthogonal construction vs 1/(1+r).

    Each trial applies a random rotation and a random overall scale, which
    leave every cosine unchanged.  Returns rows (r, mean S_cc, prediction).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for r in r_grid:
        vals = []
        for _ in range(trials):
            u, v = orthogonal_construction(r, K)
            Qm, _ = np.linalg.qr(rng.normal(size=(K + 1, K + 1)))
            scale = 10 ** rng.uniform(-3, 3)
            g = {c: scale * (Qm @ (u + v[c])) for c in v}
            vals += [s_cc(g[a], g[b]) for a in range(K) for b in range(a + 1, K)]
        rows.append((float(r), float(np.mean(vals)), 1.0 / (1.0 + r)))
    return rows


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #

@dataclass
class BlockStats:
    block: str
    dim: int
    S_cc: np.ndarray                 # (K, K), NaN where undefined
    S_ca: dict[int, float]
    mu_cc: float
    var_cc: float
    excluded_pairs: int
    N: dict[int, float]
    nbar: float
    r_theta: float
    alpha: dict[int, float] = field(default_factory=dict)
    beta: dict[int, float] = field(default_factory=dict)
    mean_rho: float = float("nan")
    ortho_residual: dict[int, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        f = lambda x: None if x is None or not np.isfinite(x) else float(x)  # noqa: E731
        key = lambda m: {str(c): f(v) for c, v in sorted(m.items())}  # noqa: E731
        return {
            "block": self.block,
            "dim": self.dim,
            "mu_cc": f(self.mu_cc),
            "var_cc": f(self.var_cc),
            "excluded_pairs": self.excluded_pairs,
            "S_ca": key(self.S_ca),
            "N": key(self.N),
            "nbar": f(self.nbar),
            "r_theta": "inf" if self.r_theta == INF_SENTINEL else f(self.r_theta),
            "alpha": key(self.alpha),
            "beta": key(self.beta),
            "mean_rho": f(self.mean_rho),
            "ortho_residual": key(self.ortho_residual),
            "S_cc": [[f(x) for x in row] for row in self.S_cc],
        }


def block_stats(block: str, grads: Mapping[int, np.ndarray], weighting: str = "uniform",
                batch_counts: Mapping[int, int] | None = None) -> BlockStats:
    cats = sorted(grads)
    K = len(cats)
    S = np.full((K, K), np.nan)
    pair_vals, excluded = [], 0
    for i, a in enumerate(cats):
        if np.linalg.norm(grads[a]) > 0:
            S[i, i] = 1.0
        for j in range(i + 1, K):
            try:
                S[i, j] = S[j, i] = s_cc(grads[a], grads[cats[j]])
                pair_vals.append(S[i, j])
            except ZeroGradientError:
                excluded += 1
    if excluded:
        log.info("block %s: %d category pairs with a zero gradient excluded", block, excluded)
    if weighting not in ("uniform", "frequency"):
        raise ValueError(f"weighting must be uniform or frequency, got {weighting!r}")
    w = batch_counts if weighting == "frequency" else None
    S_ca, N = {}, {}
    for c in cats:
        try:
            S_ca[c] = s_cc(grads[c], aggregate_others(grads, c, w))
            N[c] = 1.0 - S_ca[c]
        except ZeroGradientError:
            S_ca[c] = N[c] = float("nan")
    finite_N = [N[c] for c in cats if np.isfinite(N[c])]
    u, v, ortho = decompose(grads)
    r = heterogeneity_ratio(u, v)
    stats = BlockStats(
        block, int(len(grads[cats[0]])), S, S_ca,
        float(np.mean(pair_vals)) if pair_vals else float("nan"),
        float(np.var(pair_vals)) if pair_vals else float("nan"),
        excluded, N, float(np.mean(finite_N)) if finite_N else float("nan"), r,
        ortho_residual=ortho,
    )
    if r != INF_SENTINEL:
        nf = normalized_forms(u, v)
        stats.alpha, stats.beta, stats.mean_rho = nf.alpha, nf.beta, nf.mean_rho
    return stats


@dataclass
class ContentionReport:
    epoch: int
    categories: list[int]
    blocks: dict[str, BlockStats]

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "categories": self.categories,
                "blocks": {b: s.to_json() for b, s in self.blocks.items()}}


def contention_stats(table: CategoryGradientTable, weighting: str = "uniform") -> ContentionReport:
    return ContentionReport(
        table.epoch, list(table.categories),
        {b: block_stats(b, table.grads[b], weighting, table.batches) for b in table.blocks()},
    )


TIMESERIES_COLUMNS = ["epoch", "block", "mu_cc", "var_cc", "nbar", "r_theta"]


def _fmt(x: float) -> str:
    return "inf" if x == INF_SENTINEL else repr(float(x))


def timeseries_csv(reports: Sequence[ContentionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMESERIES_COLUMNS)
    for rep in reports:
        for b, s in rep.blocks.items():
            w.writerow([rep.epoch, b, _fmt(s.mu_cc), _fmt(s.var_cc), _fmt(s.nbar), _fmt(s.r_theta)])
    return buf.getvalue()


def scc_csv(stats: BlockStats, categories: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", *categories])
    for c, row in zip(categories, stats.S_cc):
        w.writerow([c, *("" if not np.isfinite(x) else repr(float(x)) for x in row)])
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_reports(reports: Sequence[ContentionReport], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in reports:
        p = out_dir / f"report_epoch_{rep.epoch:04d}.json"
        _atomic_write(p, json.dumps(rep.to_json(), indent=1, sort_keys=True))
        written.append(p)
        for b, s in rep.blocks.items():
            q = out_dir / f"scc_epoch_{rep.epoch:04d}_{b}.csv"
            _atomic_write(q, scc_csv(s, rep.categories))
            written.append(q)
    p = out_dir / "timeseries.csv"
    _atomic_write(p, timeseries_csv(reports))
    written.append(p)
    return written


def read_timeseries(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in ("mu_cc", "var_cc", "nbar", "r_theta"):
            r[k] = float(r[k])
    return rows


def window_means(rows: Sequence[dict], last: int) -> dict[str, dict[str, float]]:
    """Mean of each statistic per block over the final ``last`` epochs."""
    epochs = sorted({r["epoch"] for r in rows})[-last:]
    out: dict[str, dict[str, float]] = {}
    for b in sorted({r["block"] for r in rows}):
        sel = [r for r in rows if r["block"] == b and r["epoch"] in epochs]
        out[b] = {k: float(np.mean([r[k] for r in sel])) for k in ("mu_cc", "var_cc", "nbar", "r_theta")}
    return out
