"""Branch supervision, main pose loss and the routed total objective.

Every loss reduces over the trailing point/keypoint axes and keeps any
leading batch axes, so a batch of B instances yields a (B,) tensor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np

from . import numgrad as ng
from .numgrad import Tensor
from .posenet import BranchOutput, PosePrediction
from .synthdata import Pose


@dataclass(frozen=True)
class LossWeights:
    lambda_cd: float = 3.0
    lambda_div: float = 10.0
    lambda_recon: float = 15.0
    lambda_nocs: float = 3.0
    lambda_main: float = 0.6
    lambda_g: float = 1.0
    th: float = 0.01
    beta: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")
        if self.th <= 0 or self.beta <= 0:
            raise ValueError("th and beta must be positive")

    @classmethod
    def from_json(cls, d: Mapping) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


def chamfer_one_sided(P_kpt: Tensor, P) -> Tensor:
    """Mean over keypoints of the squared distance to the nearest point."""
    d = ng.pairwise_sq_distances(P_kpt, P)
    return ng.mean(ng.min_reduce(d, axis=-1), axis=-1)


def chamfer_symmetric(A: Tensor, B) -> Tensor:
    d = ng.pairwise_sq_distances(A, B)
    return ng.add(ng.mean(ng.min_reduce(d, axis=-1), axis=-1),
                  ng.mean(ng.min_reduce(d, axis=-2), axis=-1))


def diversity_margin(P_kpt: Tensor, th: float) -> Tensor:
    """Hinge max(0, th - |p_i - p_j|) averaged over ordered pairs i != j."""
    K = P_kpt.shape[-2]
    if K < 2:
        raise ValueError("diversity margin needs at least 2 keypoints")
    ii, jj = np.nonzero(~np.eye(K, dtype=bool))
    diff = ng.sub(ng.gather_rows(P_kpt, ii), ng.gather_rows(P_kpt, jj))
    dist = ng.norm(diff, axis=-1)
    hinge = ng.max_with_zero(ng.add(ng.scale(dist, -1.0), np.float64(th)))
    return ng.mean(hinge, axis=-1)


def reconstruction_loss(features: Tensor, P, decoder: Callable[[Tensor], Tensor]) -> Tensor:
    """Symmetric Chamfer between the decoded cloud and the observed points."""
    return chamfer_symmetric(decoder(features), P)


def batched_nocs(x: np.ndarray, R: np.ndarray, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """R^T (x - t) / s for x (..., K, 3) with pose arrays (..., 3, 3), (..., 3), (..., 3)."""
    if (np.asarray(s) <= 0).any():
        raise ValueError("pose scale must be positive")
    return ((x - t[..., None, :]) @ R) / s[..., None, :]


def nocs_loss(P_nocs: Tensor, P_kpt: Tensor, pose_gt: Pose, beta: float = 1.0) -> Tensor:
    """Smooth-l1 between predicted NOCS and the keypoints mapped through the
    ground-truth pose.  Gradients flow into both sides."""
    if (np.asarray(pose_gt.s) <= 0).any():
        raise ValueError("pose scale must be positive")
    shape = P_kpt.shape
    t = np.broadcast_to(np.asarray(pose_gt.t)[..., None, :], shape).copy()
    inv_s = np.broadcast_to(1.0 / np.asarray(pose_gt.s)[..., None, :], shape).copy()
    local = ng.matmul(ng.sub(P_kpt, t), np.asarray(pose_gt.R))
    target = ng.mul(local, inv_s)
    e = ng.smooth_l1(P_nocs, target, beta)
    return ng.mean(ng.mean(e, axis=-1), axis=-1)


def branch_loss(out: BranchOutput, P, pose_gt: Pose, w: LossWeights,
                decoder: Callable[[Tensor], Tensor]) -> Tensor:
    terms = [
        (w.lambda_cd, lambda: chamfer_one_sided(out.P_kpt, P)),
        (w.lambda_div, lambda: diversity_margin(out.P_kpt, w.th)),
        (w.lambda_recon, lambda: reconstruction_loss(out.features, P, decoder)),
        (w.lambda_nocs, lambda: nocs_loss(out.P_nocs, out.P_kpt, pose_gt, w.beta)),
    ]
    total = None
    for lam, fn in terms:
        term = ng.scale(fn(), lam)
        total = term if total is None else ng.add(total, term)
    return total


def main_loss(pred: PosePrediction, gt: Pose) -> Tensor:
    """Frobenius rotation error plus Euclidean translation and scale errors."""
    r = ng.norm(ng.sub(pred.R, gt.R), axis=(-2, -1))
    t = ng.norm(ng.sub(pred.t, gt.t), axis=-1)
    s = ng.norm(ng.sub(pred.s, gt.s), axis=-1)
    return ng.add(ng.add(r, t), s)


def total_loss(main: Tensor, branch: Tensor, w: LossWeights) -> Tensor:
    return ng.add(ng.scale(main, w.lambda_main), ng.scale(branch, w.lambda_g))


def stack_poses(poses) -> Pose:
    """Stack per-instance poses into one Pose with leading batch axis."""
    return Pose(np.stack([p.R for p in poses]), np.stack([p.t for p in poses]),
                np.stack([p.s for p in poses]))
