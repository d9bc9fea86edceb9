"""Joint training with fixed routing, per-epoch checkpoints and evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import numgrad as ng
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .grouping import RoutingTable
from .losses import LossWeights, branch_loss, main_loss, stack_poses, total_loss
from .numgrad import NumericalError, ParamStore, Tape
from .posenet import ModelConfig, PoseNet
from .synthdata import Dataset

DEFAULT_THRESHOLDS = (10.0, 0.1, 0.15)
ROUTING_SOURCES = ("none", "file", "random", "quantile", "quantile+refine")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    data: str | None = None
    routing: str = "none"
    routing_path: str | None = None
    difficulty_path: str | None = None
    G: int = 3
    epochs: int = 30
    batch_size: int = 16
    lr_min: float = 2e-5
    lr_max: float = 5e-4
    lr_cycle: int = 600
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    data_fraction: float = 1.0
    eval_every: int = 0
    thresholds: tuple[float, float, float] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ConfigError("lr_min must be below lr_max")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_cycle < 2:
            raise ConfigError("need batch_size >= 1, epochs >= 0, lr_cycle >= 2")
        if self.routing not in ROUTING_SOURCES:
            raise ConfigError(f"routing must be one of {ROUTING_SOURCES}, got {self.routing!r}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError("data_fraction must lie in (0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k != "v"}
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys {unknown}")
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_json({**ModelConfig().to_json(), **d["model"]})
            if "weights" in d:
                d["weights"] = LossWeights.from_json(d["weights"])
            if "thresholds" in d:
                d["thresholds"] = tuple(float(x) for x in d["thresholds"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


def cyclic_lr(step: int, lr_min: float, lr_max: float, cycle: int) -> float:
    """Triangular wave starting at lr_min, peaking at lr_max mid-cycle."""
    pos = (step % cycle) / cycle
    return lr_min + (lr_max - lr_min) * (1.0 - abs(2.0 * pos - 1.0))


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], names, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adam on ``names`` only; every other parameter and its moments stay untouched."""
    for n in names:
        g = grads[n]
        store.steps[n] += 1
        k = store.steps[n]
        store.m[n] = beta1 * store.m[n] + (1.0 - beta1) * g
        store.v[n] = beta2 * store.v[n] + (1.0 - beta2) * (g * g)
        m_hat = store.m[n] / (1.0 - beta1 ** k)
        v_hat = store.v[n] / (1.0 - beta2 ** k)
        store[n] = store[n] - lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------- #
# Batching
# --------------------------------------------------------------------------- #

def subset_indices(data: Dataset, fraction: float, seed: int) -> dict[int, list[int]]:
    """Per-category instance indices, optionally a seeded fraction of each."""
    out = {}
    for c, idx in data.by_category().items():
        if fraction < 1.0 and idx:
            n = max(1, math.ceil(fraction * len(idx)))
            pick = np.random.default_rng([seed, 0x5EED, c]).choice(len(idx), size=n, replace=False)
            idx = [idx[i] for i in np.sort(pick)]
        out[c] = list(idx)
    return out


def epoch_batches(by_cat: Mapping[int, list[int]], batch_size: int, seed: int, epoch: int):
    """Single-category batches in a seeded order: list of (category, indices)."""
    rng = np.random.default_rng([seed, epoch])
    batches = []
    for c in sorted(by_cat):
        idx = np.asarray(by_cat[c], dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        for i in range(0, len(idx), batch_size):
            batches.append((c, idx[i:i + batch_size]))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def batch_arrays(data: Dataset, idx):
    insts = [data.instances[i] for i in idx]
    return np.stack([x.observed for x in insts]), stack_poses([x.pose for x in insts])


# --------------------------------------------------------------------------- #
# Loss of one batch
# --------------------------------------------------------------------------- #

def batch_loss(net: PoseNet, tape: Tape, store: ParamStore, points: np.ndarray, gt,
               g: int, w: LossWeights, p=None):
    """Mean routed objective over a batch.  Returns (loss, parts)."""
    out, pred, p = net.forward(tape, store, points, g, p)
    P = tape.constant(points)
    br = branch_loss(out, P, gt, w, lambda f: net.decode(p, g, f))
    mn = main_loss(pred, gt)
    tot = ng.mean(total_loss(mn, br, w), axis=0)
    return tot, {"main": mn, "branch": br, "pred": pred, "out": out}


def routed_group(routing: RoutingTable, category: int) -> int:
    return routing.gamma[int(category)]


def model_for(routing: RoutingTable, base: ModelConfig) -> ModelConfig:
    return replace(base, G=routing.G, capacity=routing.capacity)


@dataclass
class StepInfo:
    step: int
    epoch: int
    category: int
    group: int
    lr: float
    loss: float
    grads: ng.Gradients
    m_before: dict | None
    v_before: dict | None
    store: ParamStore


@dataclass
class TrainResult:
    config: ModelConfig
    params: ParamStore
    metrics: list[dict]
    checkpoints: list[Path]


def train(cfg: TrainConfig, data: Dataset, routing: RoutingTable, out_dir=None,
          on_step: Callable[[StepInfo], None] | None = None,
          progress: Callable[[str], None] | None = None,
          eval_data: Dataset | None = None) -> TrainResult:
    """Train from scratch; checkpoint and log a metrics row every epoch."""
    routing.check_covers(range(data.K))
    mcfg = model_for(routing, cfg.model)
    net = PoseNet(mcfg)
    store = net.init_params(cfg.seed)
    store.round_to_f32()
    by_cat = subset_indices(data, cfg.data_fraction, cfg.seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    metrics, ckpts, step = [], [], 0
    for epoch in range(1, cfg.epochs + 1):
        losses, lr = [], cfg.lr_min
        for c, idx in epoch_batches(by_cat, cfg.batch_size, cfg.seed, epoch):
            g = routed_group(routing, c)
            pts, gt = batch_arrays(data, idx)
            tape = Tape()
            loss, _ = batch_loss(net, tape, store, pts, gt, g, cfg.weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = ng.backward(loss)
            lr = cyclic_lr(step, cfg.lr_min, cfg.lr_max, cfg.lr_cycle)
            m0 = v0 = None
            if on_step is not None:
                m0 = {n: a.copy() for n, a in store.m.items()}
                v0 = {n: a.copy() for n, a in store.v.items()}
            adam_step(store, grads, [n for n in store.names() if n in grads.reachable],
                      lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            if on_step is not None:
                on_step(StepInfo(step, epoch, c, g, lr, value, grads, m0, v0, store))
            losses.append(value)
            step += 1
        # checkpoints hold float32, so keep the live state on the same grid
        store.round_to_f32()
        row = {"epoch": epoch, "mean_loss": float(np.mean(losses)) if losses else 0.0, "lr": lr}
        if cfg.eval_every and epoch % cfg.eval_every == 0 and eval_data is not None:
            rep = evaluate(net, store, eval_data, routing, cfg.thresholds)
            for c in sorted(rep.rate):
                row[f"rate_c{c}"] = rep.rate[c]
        metrics.append(row)
        if out_dir is not None:
            path = out_dir / "checkpoints" / f"epoch_{epoch:04d}.ckpt"
            save_checkpoint(Checkpoint(epoch, mcfg, store, routing.to_json(),
                                       {"seed": cfg.seed, "step": step}), path)
            ckpts.append(path)
            write_metrics(metrics, out_dir / "metrics.csv")
        if progress is not None:
            progress(f"epoch {epoch}/{cfg.epochs} loss {row['mean_loss']:.5f} lr {lr:.3g}")
    return TrainResult(mcfg, store, metrics, ckpts)


def metrics_csv(rows: list[dict]) -> str:
    cols = ["epoch", "mean_loss", "lr"]
    for r in rows:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_metrics(rows: list[dict], path) -> None:
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(metrics_csv(rows))
    tmp.replace(path)


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #

def rotation_error_deg(R: np.ndarray, R_gt: np.ndarray) -> np.ndarray:
    """Geodesic angle between rotations, in degrees."""
    tr = np.einsum("...ij,...ij->...", R, R_gt)
    return np.degrees(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def pose_errors(R, t, s, gt):
    rot = rotation_error_deg(R, gt.R)
    trans = np.linalg.norm(t - gt.t, axis=-1)
    scale = np.max(np.abs(s - gt.s) / gt.s, axis=-1)
    return rot, trans, scale


def pose_success(rot, trans, scale, thresholds) -> np.ndarray:
    th_r, th_t, th_s = thresholds
    return (rot < th_r) & (trans < th_t) & (scale < th_s)


@dataclass
class EvalReport:
    rate: dict[int, float]
    count: dict[int, int]
    rot_err: dict[int, float]
    trans_err: dict[int, float]
    scale_err: dict[int, float]
    main_loss: dict[int, float]
    thresholds: tuple[float, float, float]
    missing: list[int] = field(default_factory=list)

    @property
    def mean_rate(self) -> float:
        vals = [self.rate[c] for c in sorted(self.rate)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self) -> dict:
        key = lambda m: {str(c): v for c, v in sorted(m.items())}  # noqa: E731
        return {
            "thresholds": list(self.thresholds),
            "rate": key(self.rate),
            "count": key(self.count),
            "rot_err_deg": key(self.rot_err),
            "trans_err": key(self.trans_err),
            "scale_err": key(self.scale_err),
            "main_loss": key(self.main_loss),
            "mean_rate": self.mean_rate,
            "missing": self.missing,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "EvalReport":
        ik = lambda m: {int(c): v for c, v in m.items()}  # noqa: E731
        return cls(ik(d["rate"]), ik(d["count"]), ik(d["rot_err_deg"]), ik(d["trans_err"]),
                   ik(d["scale_err"]), ik(d["main_loss"]), tuple(d["thresholds"]), list(d["missing"]))


def predict(net: PoseNet, store: ParamStore, points: np.ndarray, g: int):
    tape = Tape()
    _, pred, _ = net.forward(tape, store, points, g)
    return pred.R.data, pred.t.data, pred.s.data


def evaluate(net: PoseNet, store: ParamStore, data: Dataset, routing: RoutingTable,
             thresholds=DEFAULT_THRESHOLDS, batch_size: int = 50,
             categories=None) -> EvalReport:
    """Per-category success rates: all three errors strictly under threshold."""
    if len(thresholds) != 3:
        raise ValueError("thresholds are (degrees, translation, relative scale)")
    by_cat = data.by_category()
    wanted = sorted(by_cat) if categories is None else sorted(int(c) for c in categories)
    rep = EvalReport({}, {}, {}, {}, {}, {}, tuple(float(x) for x in thresholds))
    for c in wanted:
        idx = by_cat.get(c, [])
        if not idx:
            rep.missing.append(c)
            continue
        g = routed_group(routing, c)
        rot, trans, scale, ml = [], [], [], []
        for i in range(0, len(idx), batch_size):
            pts, gt = batch_arrays(data, idx[i:i + batch_size])
            R, t, s = predict(net, store, pts, g)
            r_e, t_e, s_e = pose_errors(R, t, s, gt)
            rot.append(r_e), trans.append(t_e), scale.append(s_e)
            ml.append(np.linalg.norm(R - gt.R, axis=(-2, -1)) + np.linalg.norm(t - gt.t, axis=-1)
                      + np.linalg.norm(s - gt.s, axis=-1))
        rot, trans, scale, ml = map(np.concatenate, (rot, trans, scale, ml))
        ok = pose_success(rot, trans, scale, rep.thresholds)
        rep.rate[c] = float(ok.mean())
        rep.count[c] = int(len(idx))
        rep.rot_err[c] = float(rot.mean())
        rep.trans_err[c] = float(trans.mean())
        rep.scale_err[c] = float(scale.mean())
        rep.main_loss[c] = float(ml.mean())
    return rep


def evaluate_checkpoint(path, data: Dataset, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    ck = load_checkpoint(path)
    if ck.routing is None:
        raise ConfigError("checkpoint carries no routing table")
    routing = RoutingTable.from_json(ck.routing)
    return evaluate(PoseNet(ck.config), ck.params, data, routing, thresholds)


# --------------------------------------------------------------------------- #
# Pilot runs for boundary refinement
# --------------------------------------------------------------------------- #

PILOT_EPOCHS = 3
PILOT_FRACTION = 0.25


def pilot_scorer(cfg: TrainConfig, train_data: Dataset, val_data: Dataset, alpha_for,
                 seed: int):
    """Score function for boundary refinement.

    Trains a short pilot (3 epochs on a quarter of the training set, fixed
    seed) under the candidate routing and returns the negated mean pose
    loss of the marginal category on the validation split, so higher is
    better.  Results are cached per routing.
    """
    pcfg = replace(cfg, epochs=PILOT_EPOCHS, data_fraction=PILOT_FRACTION, seed=seed, eval_every=0)
    cache: dict = {}

    def score(gamma: dict[int, int], category: int, g: int) -> float:
        key = tuple(sorted(gamma.items()))
        if key not in cache:
            routing = RoutingTable(gamma, alpha_for(gamma), {"method": "pilot"})
            res = train(pcfg, train_data, routing)
            cache[key] = (res, routing)
        res, routing = cache[key]
        rep = evaluate(PoseNet(res.config), res.params, val_data, routing, cfg.thresholds,
                       categories=[category])
        return -rep.main_loss[int(category)]

    return score
