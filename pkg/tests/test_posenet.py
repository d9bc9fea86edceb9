import numpy as np
import pytest

from poselab import numgrad as ng
from poselab.losses import LossWeights
from poselab.numgrad import ParamStore, Tape
from poselab.posenet import ModelConfig, PoseNet, count_params, gram_schmidt, knn_indices
from poselab.synthdata import make_category_specs, sample_instance
from poselab.losses import stack_poses
from poselab.trainer import batch_loss

TINY = dict(D=8, K_kpt=4, K_n=4, heads=2, enc_widths=(8, 8), head_width=8, recon_points=4, geo_dim=4)


def tiny(G=2, capacity=("H", "L")):
    return PoseNet(ModelConfig(G=G, capacity=capacity, **TINY))


def cloud(seed, B=2, N=16):
    return np.random.default_rng(seed).normal(size=(B, N, 3))


# --------------------------------------------------------------------------- #
# Config and parameters
# --------------------------------------------------------------------------- #

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(D=4)
    with pytest.raises(ValueError):
        ModelConfig(G=2, capacity=("H",))
    with pytest.raises(ValueError):
        ModelConfig(G=1, capacity=("M",))
    cfg = ModelConfig(G=2, capacity=("H", "L"))
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert cfg.digest() != ModelConfig().digest()


def test_block_partition_is_exhaustive_and_disjoint():
    store = tiny(G=3, capacity=("H", "L", "L")).init_params(0)
    blocks = {store.block_of(n) for n in store.names()}
    assert blocks == {"psi", "phi_1", "phi_2", "phi_3", "omega"}
    assert sum(store.size(b) for b in blocks) == store.size()
    for n in store.names():
        if n.startswith("br"):
            assert store.block_of(n) == f"phi_{n[2]}"


def test_low_branch_has_fewer_parameters():
    for D in (8, 32):
        net = PoseNet(ModelConfig(D=D, G=2, capacity=("H", "L")))
        store = net.init_params(0)
        assert count_params(store, "phi_2") < count_params(store, "phi_1")


def test_init_is_seed_deterministic():
    a, b = tiny().init_params(3), tiny().init_params(3)
    assert all(np.array_equal(a[n], b[n]) for n in a.names())


# --------------------------------------------------------------------------- #
# Encoder and keypoints
# --------------------------------------------------------------------------- #

def test_encoder_permutation_equivariant():
    net = tiny()
    store = net.init_params(1)
    P = cloud(0, B=1)
    perm = np.random.default_rng(1).permutation(16)
    t = Tape()
    p = t.watch(store)
    F = net.encode_points(p, t.constant(P)).data
    Fp = net.encode_points(p, t.constant(P[:, perm])).data
    np.testing.assert_allclose(Fp, F[:, perm], atol=1e-12)
    assert F.shape == (1, 16, 8)


def test_identical_points_identical_features():
    net = tiny()
    P = cloud(2, B=1)
    P[0, 5] = P[0, 9]
    t = Tape()
    F = net.encode_points(t.watch(net.init_params(0)), t.constant(P)).data
    np.testing.assert_array_equal(F[0, 5], F[0, 9])


def test_single_point_gives_that_point():
    net = tiny()
    t = Tape()
    p = t.watch(net.init_params(0))
    P = t.constant(np.array([[[0.3, -0.1, 0.7]]]))
    F = net.encode_points(p, P)
    _, W, P_kpt, _ = net.extract_keypoints(p, F, P, 1)
    np.testing.assert_allclose(P_kpt.data[0], np.tile([0.3, -0.1, 0.7], (4, 1)), atol=1e-15)
    np.testing.assert_array_equal(W.data, 1.0)


def test_keypoints_inside_bounding_box_and_rows_sum_to_one():
    net = tiny()
    for seed in range(5):
        t = Tape()
        out, _, _ = net.forward(t, net.init_params(seed), cloud(seed), 1 + seed % 2)
        P = cloud(seed)
        lo, hi = P.min(axis=1, keepdims=True), P.max(axis=1, keepdims=True)
        assert ((out.P_kpt.data >= lo - 1e-12) & (out.P_kpt.data <= hi + 1e-12)).all()
        np.testing.assert_allclose(out.W.data.sum(-1), 1.0, atol=1e-12)


def test_zero_affinity_puts_keypoints_at_centroid():
    net = tiny()
    store = net.init_params(0)
    last = len(net.config.enc_widths)
    store[f"enc.{last}.w"] = np.zeros_like(store[f"enc.{last}.w"])
    store[f"enc.{last}.b"] = np.zeros_like(store[f"enc.{last}.b"])
    t = Tape()
    p = t.watch(store)
    P = t.constant(cloud(4))
    F = net.encode_points(p, P)
    _, W, P_kpt, _ = net.extract_keypoints(p, F, P, 1)
    np.testing.assert_allclose(W.data, 1.0 / 16)
    np.testing.assert_allclose(P_kpt.data, np.repeat(P.data.mean(1, keepdims=True), 4, axis=1), atol=1e-12)


def test_knn_indices_sorted_and_tie_broken_by_index():
    P = np.array([[[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [2, 0, 0]]])
    idx = knn_indices(np.zeros((1, 1, 3)), P, 3)
    np.testing.assert_array_equal(idx, [[[0, 1, 2]]])


# --------------------------------------------------------------------------- #
# Branches
# --------------------------------------------------------------------------- #

@pytest.mark.parametrize("g", [1, 2])
def test_branch_output_shapes(g):
    net = tiny()
    out, pred, _ = net.forward(Tape(), net.init_params(0), cloud(0), g)
    assert out.P_kpt.shape == (2, 4, 3)
    assert out.features.shape == (2, 4, 8)
    assert out.P_nocs.shape == (2, 4, 3)
    assert out.W.shape == (2, 4, 16)
    assert pred.R.shape == (2, 3, 3) and pred.t.shape == (2, 3) and pred.s.shape == (2, 3)


def test_branch_requires_enough_points():
    net = tiny()
    with pytest.raises(ValueError, match="K_n"):
        net.forward(Tape(), net.init_params(0), cloud(0, N=3), 1)


def test_zero_bias_ablation_is_plain_attention():
    net = tiny(G=1, capacity=("L",))
    t = Tape()
    p = t.watch(net.init_params(0))
    P = t.constant(cloud(1))
    F = net.encode_points(p, P)
    plain = net.low_branch(p, F, P, 1, geometry_bias=False)
    np.testing.assert_array_equal(plain.extras["logits"].data, plain.extras["attn_logits"].data)
    biased = net.low_branch(p, F, P, 1)
    assert not np.array_equal(biased.extras["logits"].data, biased.extras["attn_logits"].data)


def _grads(net, store, g, seed=0):
    spec = make_category_specs(2, "graded", 0)[0]
    insts = [sample_instance(spec, 16, 0.0, seed + i) for i in range(2)]
    pts = np.stack([x.observed for x in insts])
    gt = stack_poses([x.pose for x in insts])
    t = Tape()
    loss, _ = batch_loss(net, t, store, pts, gt, g, LossWeights())
    return ng.backward(loss)


@pytest.mark.parametrize("g", [1, 2, 3])
def test_routing_isolation(g):
    net = tiny(G=3, capacity=("H", "L", "H"))
    store = net.init_params(0)
    grads = _grads(net, store, g)
    for n in store.names():
        blk = store.block_of(n)
        if blk.startswith("phi_") and blk != f"phi_{g}":
            assert not grads[n].any(), n
            assert n not in grads.reachable
    active = [n for n in store.names(f"phi_{g}") if grads[n].any()]
    assert active and any(grads[n].any() for n in store.names("psi"))


# --------------------------------------------------------------------------- #
# Pose head
# --------------------------------------------------------------------------- #

def test_gram_schmidt_identity_code():
    t = Tape()
    R, deg = gram_schmidt(t.constant([[1.0, 0, 0, 0, 1, 0]]))
    np.testing.assert_array_equal(R.data[0], np.eye(3))
    assert not deg.any()


def test_gram_schmidt_orthonormal():
    raw = np.random.default_rng(0).normal(size=(100, 6))
    R, _ = gram_schmidt(Tape().constant(raw))
    for M in R.data:
        np.testing.assert_allclose(M.T @ M, np.eye(3), atol=1e-6)
        assert abs(np.linalg.det(M) - 1) < 1e-6


def test_gram_schmidt_degenerate_fallback():
    R, deg = gram_schmidt(Tape().constant([[1.0, 2, 3, 2, 4, 6]]))
    assert deg.tolist() == [True]
    M = R.data[0]
    np.testing.assert_allclose(M.T @ M, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(M[:, 0], np.array([1, 2, 3]) / np.sqrt(14))


def test_pose_head_outputs_valid_pose():
    net = tiny()
    for seed in range(3):
        _, pred, _ = net.forward(Tape(), net.init_params(seed), cloud(seed) * 3, 1)
        assert (pred.s.data > 0).all()
        for M in pred.R.data:
            np.testing.assert_allclose(M.T @ M, np.eye(3), atol=1e-6)
            assert abs(np.linalg.det(M) - 1) < 1e-6


# --------------------------------------------------------------------------- #
# Gradient checks on the full model
# --------------------------------------------------------------------------- #

def model_gradcheck(seed: int, per_param: int = 2) -> ng.GradCheckReport:
    net = tiny()
    store = net.init_params(seed)
    rng = np.random.default_rng(seed)
    g = 1 + seed % 2
    spec = make_category_specs(3, "graded", seed)[seed % 3]
    insts = [sample_instance(spec, 16, 0.01, seed * 10 + i) for i in range(2)]
    pts = np.stack([x.observed for x in insts])
    gt = stack_poses([x.pose for x in insts])

    def build(tape):
        loss, _ = batch_loss(net, tape, store, pts, gt, g, LossWeights())
        return loss

    names = [n for n in store.names() if not (store.block_of(n).startswith("phi_")
                                              and store.block_of(n) != f"phi_{g}")]
    coords = ng.sample_coords(store, per_param, rng)
    coords = {n: coords[n] for n in names}
    return ng.gradcheck(build, store, eps=1e-5, coords=coords, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradcheck(seed):
    rep = model_gradcheck(seed)
    assert rep.ok, rep.failures[:5]
    assert rep.checked > 50
