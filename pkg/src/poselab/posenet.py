"""Keypoint-correspondence pose network with routed correspondence branches.

Parameter blocks:
    psi    the shared point encoder
    phi_g  correspondence branch g (keypoint queries, context modelling,
           NOCS regressor and the reconstruction decoder)
    omega  the shared pose head

All forward functions work on batched inputs ``(B, N, 3)``; one batch is
routed through a single branch.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import numgrad as ng
from .numgrad import BLOCK_OMEGA, BLOCK_PSI, ParamStore, Tape, Tensor, branch_block

ENC_IN = 7  # point, point - centroid, |point - centroid|


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    K_kpt: int = 16
    G: int = 1
    capacity: tuple[str, ...] = ("H",)
    K_n: int = 8
    heads: int = 2
    enc_widths: tuple[int, ...] = (32, 32)
    head_width: int = 64
    recon_points: int = 64
    geo_dim: int = 8

    def __post_init__(self):
        if self.D < 8 or self.K_kpt < 4 or self.G < 1:
            raise ValueError("need D >= 8, K_kpt >= 4, G >= 1")
        if len(self.capacity) != self.G or any(c not in ("H", "L") for c in self.capacity):
            raise ValueError(f"capacity must give H or L for each of {self.G} groups")
        if self.D % self.heads:
            raise ValueError("D must be divisible by the number of heads")

    def to_json(self) -> dict:
        d = asdict(self)
        d["capacity"] = list(self.capacity)
        d["enc_widths"] = list(self.enc_widths)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["capacity"] = tuple(d["capacity"])
        d["enc_widths"] = tuple(d["enc_widths"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class BranchOutput:
    P_kpt: Tensor        # (B, K, 3) scene-frame keypoints
    features: Tensor     # (B, K, D) final keypoint features
    P_nocs: Tensor       # (B, K, 3) predicted canonical coordinates
    W: Tensor            # (B, K, N) assignment weights
    extras: dict = field(default_factory=dict)


@dataclass
class PosePrediction:
    R: Tensor            # (B, 3, 3)
    raw_rotation: Tensor  # (B, 6)
    t: Tensor            # (B, 3)
    s: Tensor            # (B, 3)
    degenerate: np.ndarray | None = None


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #

def _init_linear(store: ParamStore, rng, name: str, fan_in: int, fan_out: int, block: str, gain=1.0):
    limit = gain * math.sqrt(6.0 / fan_in)
    store.add(f"{name}.w", rng.uniform(-limit, limit, size=(fan_in, fan_out)), block)
    store.add(f"{name}.b", np.zeros(fan_out), block)


def _init_mlp(store, rng, name, sizes, block, last_gain=1.0):
    n = len(sizes) - 1
    for i in range(n):
        gain = last_gain if i == n - 1 else 1.0
        _init_linear(store, rng, f"{name}.{i}", sizes[i], sizes[i + 1], block, gain)


def linear(p: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ng.add(ng.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def mlp(p: Mapping[str, Tensor], name: str, x: Tensor, layers: int) -> Tensor:
    for i in range(layers):
        x = linear(p, f"{name}.{i}", x)
        if i < layers - 1:
            x = ng.relu(x)
    return x


def _mean_pool_groups(x: Tensor, groups: int, size: int) -> Tensor:
    """(B, groups*size, d) -> (B, groups, d), averaging consecutive rows."""
    B, _, d = x.shape
    return ng.mean(ng.reshape(x, (B, groups, size, d)), axis=-2)


def _repeat_rows(x: Tensor, times: int) -> Tensor:
    """(B, K, d) -> (B, K*times, d) with each row repeated ``times`` times."""
    K = x.shape[-2]
    return ng.gather_rows(x, np.repeat(np.arange(K), times))


def encoder_inputs(P: np.ndarray) -> np.ndarray:
    c = P.mean(axis=-2, keepdims=True)
    rel = P - c
    return np.concatenate([P, rel, np.linalg.norm(rel, axis=-1, keepdims=True)], axis=-1)


def knn_indices(centers: np.ndarray, P: np.ndarray, k: int) -> np.ndarray:
    """Indices (B, K, k) of the k nearest rows of P for each centre; ties by index."""
    d = ((centers[:, :, None, :] - P[:, None, :, :]) ** 2).sum(-1)
    part = np.argpartition(d, k - 1, axis=-1)[..., :k] if k < d.shape[-1] else np.argsort(d, axis=-1)
    # order the selected neighbours by (distance, index) so the result is unique
    key = np.take_along_axis(d, part, axis=-1)
    order = np.lexsort((part, key), axis=-1)
    return np.take_along_axis(part, order, axis=-1)


# --------------------------------------------------------------------------- #
# Model
# --------------------------------------------------------------------------- #

class PoseNet:
    def __init__(self, config: ModelConfig):
        self.config = config

    # -- parameters ---------------------------------------------------------
    def init_params(self, seed: int) -> ParamStore:
        cfg = self.config
        rng = np.random.default_rng(seed)
        store = ParamStore()
        D = cfg.D
        widths = (ENC_IN, *cfg.enc_widths, D)
        _init_mlp(store, rng, "enc", widths, BLOCK_PSI)
        for g in range(1, cfg.G + 1):
            self._init_branch(store, rng, g, cfg.capacity[g - 1])
        f_dim = D + 6
        hw = cfg.head_width
        _init_mlp(store, rng, "head.rot", (f_dim, hw, hw, 6), BLOCK_OMEGA, last_gain=0.5)
        _init_mlp(store, rng, "head.t", (f_dim, hw, hw, 3), BLOCK_OMEGA, last_gain=0.5)
        _init_mlp(store, rng, "head.logs", (f_dim, hw, hw, 3), BLOCK_OMEGA, last_gain=0.1)
        # start the rotation output near the identity's 6D code
        store["head.rot.2.b"] = np.array([1.0, 0, 0, 0, 1.0, 0])
        return store

    def _init_branch(self, store: ParamStore, rng, g: int, cap: str) -> None:
        cfg = self.config
        D, blk, pre = cfg.D, branch_block(g), f"br{g}"
        store.add(f"{pre}.q", rng.normal(size=(cfg.K_kpt, D)), blk)
        for proj in ("wq", "wk", "wv"):
            _init_linear(store, rng, f"{pre}.ca.{proj}", D, D, blk)
        store.add(f"{pre}.ln.gain", np.ones(D), blk)
        store.add(f"{pre}.ln.bias", np.zeros(D), blk)
        if cap == "H":
            _init_mlp(store, rng, f"{pre}.off", (3, D, D), blk)
            _init_mlp(store, rng, f"{pre}.qloc", (2 * D, D, D), blk)
            _init_mlp(store, rng, f"{pre}.loc", (D, D, D), blk)
            _init_mlp(store, rng, f"{pre}.glob", (3, D, D), blk)
            _init_mlp(store, rng, f"{pre}.fuse", (3 * D, D, D), blk)
        else:
            gd, H = cfg.geo_dim, cfg.heads
            _init_linear(store, rng, f"{pre}.att.wq", D, D, blk)
            _init_linear(store, rng, f"{pre}.att.wk", D, D, blk)
            _init_mlp(store, rng, f"{pre}.geo", (3, gd), blk)
            _init_mlp(store, rng, f"{pre}.blocal", (gd, gd, H), blk)
            _init_mlp(store, rng, f"{pre}.bglobal", (gd, gd, H), blk)
        _init_mlp(store, rng, f"{pre}.nocs", (D, D, 3), blk)
        _init_mlp(store, rng, f"{pre}.dec", (D, D, 3 * cfg.recon_points), blk)

    # -- forward pieces -----------------------------------------------------
    def encode_points(self, p: Mapping[str, Tensor], P: Tensor) -> Tensor:
        """Per-point features (B, N, D) from the shared pointwise MLP."""
        X = P.tape.constant(encoder_inputs(P.data))
        return mlp(p, "enc", X, len(self.config.enc_widths) + 1)

    def extract_keypoints(self, p, F: Tensor, P: Tensor, g: int):
        """Query cross-attention, affinity softmax and pooled keypoints."""
        pre = f"br{g}"
        D = F.shape[-1]
        Q = p[f"{pre}.q"]
        q = linear(p, f"{pre}.ca.wq", Q)                      # (K, D)
        k = linear(p, f"{pre}.ca.wk", F)                      # (B, N, D)
        v = linear(p, f"{pre}.ca.wv", F)
        att = ng.softmax(ng.scale(ng.matmul(q, ng.transpose(k)), 1.0 / math.sqrt(D)))
        ca = ng.matmul(att, v)                                # (B, K, D)
        Q_ins = ng.layer_norm(ng.add(ca, Q), p[f"{pre}.ln.gain"], p[f"{pre}.ln.bias"])
        H = ng.matmul(Q_ins, ng.transpose(F))                 # (B, K, N)
        W = ng.softmax(H)
        return Q_ins, W, ng.matmul(W, P), ng.matmul(W, F)

    def _neighbours(self, F: Tensor, P: Tensor, P_kpt: Tensor):
        cfg = self.config
        B, N, _ = P.shape
        if N < cfg.K_n:
            raise ValueError(f"need at least K_n={cfg.K_n} points, got {N}")
        K = P_kpt.shape[-2]
        idx = knn_indices(P_kpt.data, P.data, cfg.K_n).reshape(B, K * cfg.K_n)
        P_nbr = ng.gather_rows(P, idx)
        F_nbr = ng.gather_rows(F, idx)
        dP = ng.sub(P_nbr, _repeat_rows(P_kpt, cfg.K_n))      # (B, K*Kn, 3)
        return idx, F_nbr, dP

    def high_branch(self, p, F: Tensor, P: Tensor, g: int) -> BranchOutput:
        cfg = self.config
        pre, Kn, D = f"br{g}", cfg.K_n, cfg.D
        _, W, P_kpt, F_kpt = self.extract_keypoints(p, F, P, g)
        B, K, _ = P_kpt.shape
        idx, F_nbr, dP = self._neighbours(F, P, P_kpt)

        # local geometry aggregation
        f_loc = _mean_pool_groups(mlp(p, f"{pre}.off", dP, 2), K, Kn)           # (B, K, D)
        q_loc = mlp(p, f"{pre}.qloc", ng.concat([F_kpt, f_loc]), 2)
        F_nbr4 = ng.reshape(F_nbr, (B, K, Kn, D))
        logits = ng.matmul(ng.reshape(q_loc, (B, K, 1, D)), ng.transpose(F_nbr4))  # (B,K,1,Kn)
        agg = ng.reshape(ng.matmul(ng.softmax(logits), F_nbr4), (B, K, D))
        F_local = mlp(p, f"{pre}.loc", ng.add(agg, F_kpt), 2)

        # global context fusion
        rows = np.repeat(np.arange(K), K)
        cols = np.tile(np.arange(K), K)
        pair = ng.sub(ng.gather_rows(P_kpt, cols), ng.gather_rows(P_kpt, rows))  # P_j - P_i
        f_glob = _mean_pool_groups(mlp(p, f"{pre}.glob", pair, 2), K, K)
        F_global = ng.reshape(ng.mean(F_local, axis=-2), (B, 1, D))
        F_global = ng.gather_rows(F_global, np.zeros(K, dtype=np.int64))
        F_hat = mlp(p, f"{pre}.fuse", ng.concat([F_local, F_global, f_glob]), 2)

        P_nocs = mlp(p, f"{pre}.nocs", F_hat, 2)
        return BranchOutput(P_kpt, F_hat, P_nocs, W, {"knn": idx, "F_kpt": F_kpt, "attn_logits": logits})

    def low_branch(self, p, F: Tensor, P: Tensor, g: int, geometry_bias: bool = True) -> BranchOutput:
        cfg = self.config
        pre, Kn, D, H = f"br{g}", cfg.K_n, cfg.D, cfg.heads
        dh = D // H
        _, W, P_kpt, F_kpt = self.extract_keypoints(p, F, P, g)
        B, K, _ = P_kpt.shape
        idx, F_nbr, dP = self._neighbours(F, P, P_kpt)

        geo = ng.relu(linear(p, f"{pre}.geo.0", dP))                          # (B, K*Kn, gd)
        b_local = mlp(p, f"{pre}.blocal", geo, 2)                             # (B, K*Kn, H)
        b_global = mlp(p, f"{pre}.bglobal", _mean_pool_groups(geo, K, Kn), 2)  # (B, K, H)

        q = linear(p, f"{pre}.att.wq", F_kpt)
        k = linear(p, f"{pre}.att.wk", F_nbr)
        q5 = ng.transpose(ng.reshape(q, (B, K, 1, H, dh)), (0, 1, 3, 2, 4))    # (B,K,H,1,dh)
        k5 = ng.transpose(ng.reshape(k, (B, K, Kn, H, dh)), (0, 1, 3, 4, 2))   # (B,K,H,dh,Kn)
        attn = ng.reshape(ng.scale(ng.matmul(q5, k5), 1.0 / math.sqrt(dh)), (B, K, H, Kn))
        logits = attn
        if geometry_bias:
            bl = ng.transpose(ng.reshape(b_local, (B, K, Kn, H)), (0, 1, 3, 2))
            logits = ng.add(attn, bl)
        wts = ng.reshape(ng.softmax(logits), (B, K, H, 1, Kn))
        v5 = ng.transpose(ng.reshape(F_nbr, (B, K, Kn, H, dh)), (0, 1, 3, 2, 4))  # (B,K,H,Kn,dh)
        agg = ng.reshape(ng.matmul(wts, v5), (B, K, D))
        F_local = ng.add(agg, F_kpt)
        F_hat = F_local
        if geometry_bias:
            expand = np.kron(np.eye(H), np.ones((1, dh)))                       # (H, D)
            F_hat = ng.add(F_local, ng.matmul(b_global, expand))

        P_nocs = mlp(p, f"{pre}.nocs", F_hat, 2)
        return BranchOutput(P_kpt, F_hat, P_nocs, W,
                            {"knn": idx, "F_kpt": F_kpt, "attn_logits": attn, "logits": logits})

    def branch(self, p, F: Tensor, P: Tensor, g: int) -> BranchOutput:
        if self.config.capacity[g - 1] == "H":
            return self.high_branch(p, F, P, g)
        return self.low_branch(p, F, P, g)

    def decode(self, p, g: int, features: Tensor) -> Tensor:
        """Reconstruction decoder of branch g: pooled features -> (B, M, 3)."""
        B = features.shape[0]
        pooled = ng.mean(features, axis=-2)
        out = mlp(p, f"br{g}.dec", pooled, 2)
        return ng.reshape(out, (B, self.config.recon_points, 3))

    def pose_head(self, p, out: BranchOutput) -> PosePrediction:
        f_pose = ng.mean(ng.concat([out.features, out.P_kpt, out.P_nocs]), axis=-2)  # (B, D+6)
        raw = mlp(p, "head.rot", f_pose, 3)
        t = mlp(p, "head.t", f_pose, 3)
        s = ng.exp(mlp(p, "head.logs", f_pose, 3))
        R, degenerate = gram_schmidt(raw)
        return PosePrediction(R, raw, t, s, degenerate)

    def forward(self, tape: Tape, params: ParamStore, points: np.ndarray, g: int,
                p: dict[str, Tensor] | None = None):
        """Full forward for a single-branch batch.  Returns (branch out, pose, tape params)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        if p is None:
            p = tape.watch(params)
        P = tape.constant(pts)
        F = self.encode_points(p, P)
        out = self.branch(p, F, P, g)
        return out, self.pose_head(p, out), p


def gram_schmidt(raw: Tensor, tol: float = 1e-9):
    """6-vector -> rotation matrix with columns e1, e2, e1 x e2.

    Rows whose second vector is parallel to the first (within ``tol``) fall
    back to the coordinate axis least aligned with it; the returned mask
    flags them.
    """
    a = ng.slice_last(raw, 0, 3)
    b = ng.slice_last(raw, 3, 6)
    ad, bd = a.data, b.data
    an = np.linalg.norm(ad, axis=-1)
    if (an <= tol).any():
        raise ValueError("rotation head produced a zero first vector")
    e1d = ad / an[..., None]
    resid = bd - (e1d * bd).sum(-1, keepdims=True) * e1d
    degenerate = np.linalg.norm(resid, axis=-1) <= tol * np.maximum(np.linalg.norm(bd, axis=-1), 1.0)
    if degenerate.any():
        axis_pick = np.eye(3)[np.argmin(np.abs(e1d), axis=-1)]
        keep = (~degenerate)[..., None].astype(np.float64) * np.ones_like(bd)
        b = ng.add(ng.mul(b, keep), (1.0 - keep) * axis_pick)
    e1 = ng.row_scale(a, ng.reciprocal(ng.norm(a, axis=-1)))
    dot = ng.sum_(ng.mul(e1, b), axis=-1)
    bp = ng.sub(b, ng.row_scale(e1, dot))
    e2 = ng.row_scale(bp, ng.reciprocal(ng.norm(bp, axis=-1)))
    e3 = ng.cross(e1, e2)
    rows = ng.reshape(ng.concat([e1, e2, e3]), (*raw.shape[:-1], 3, 3))
    return ng.transpose(rows), degenerate


def count_params(store: ParamStore, block: str) -> int:
    return store.size(block)
