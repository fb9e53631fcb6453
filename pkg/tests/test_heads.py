import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coders import heads as H
from coders import numerics as nx
from coders.numerics import Tensor


def brute_force_min(cost):
    """Exhaustive minimum over all injections rows -> columns."""
    n, m = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(m), n):
        total = sum(cost[i, cols[i]] for i in range(n))
        best = min(best, total)
    return best


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


# rotation_from_6d ---------------------------------------------------------

def test_rotation_identity_examples():
    np.testing.assert_array_equal(H.rotation_from_6d([1, 0, 0, 0, 1, 0]), np.eye(3))
    np.testing.assert_array_equal(H.rotation_from_6d([2, 0, 0, 0, 5, 0]), np.eye(3))


def test_rotation_swapped_axes_example():
    R = H.rotation_from_6d([0, 1, 0, 1, 0, 0])
    expect = np.array([[0, 1, 0], [1, 0, 0], [0, 0, -1.0]]).T
    np.testing.assert_array_equal(R, expect)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("r6", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 3, 0, 0]])
def test_rotation_degenerate(r6):
    with pytest.raises(H.DegenerateRotationError):
        H.rotation_from_6d(r6)


def test_safe_rotation_recovers_from_parallel():
    R = H.safe_rotation_from_6d(np.array([1.0, 0, 0, 2.0, 0, 0]))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)


def test_rotation_random_orthonormal():
    rng = np.random.default_rng(0)
    R = H.rotation_from_6d(rng.normal(size=(10_000, 6)))
    err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
    assert err <= 1e-9
    assert np.abs(np.linalg.det(R) - 1.0).max() <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.1, 10), st.floats(-5, 5))
def test_rotation_scale_and_shear_invariance(r6, a, c):
    r6 = np.array(r6)
    r1, r2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(r1)
    if n1 < 1e-3 or np.linalg.norm(np.cross(r1 / n1, r2)) < 1e-3:
        return
    base = H.rotation_from_6d(r6)
    other = H.rotation_from_6d(np.concatenate([a * r1, r2 + c * r1]))
    np.testing.assert_allclose(base, other, atol=1e-9)


def test_differentiable_rotation_matches_numpy():
    rng = np.random.default_rng(1)
    r6 = rng.normal(size=(7, 6))
    np.testing.assert_allclose(H.rotation_from_6d_t(Tensor(r6)).data, H.rotation_from_6d(r6), atol=1e-14)


# heads -------------------------------------------------------------------

def _zero_heads(dim=8, n_classes=3):
    heads = H.PredictionHeads(dim, n_classes, np.random.default_rng(0))
    for p in heads.parameters():
        p.data[...] = 0.0
    return heads


def test_zero_heads_uniform_and_unit_size():
    out = _zero_heads()(Tensor(np.random.default_rng(2).normal(size=(5, 8))))
    np.testing.assert_allclose(out["probs"].data, 0.25)
    np.testing.assert_array_equal(out["s"].data, 1.0)


def test_head_output_dims():
    out = H.PredictionHeads(16, 3, np.random.default_rng(0))(Tensor(np.ones((2, 4, 16))))
    assert out["probs"].shape == (2, 4, 4)
    assert out["t"].shape == (2, 4, 3) and out["s"].shape == (2, 4, 3)
    assert out["r6d"].shape == (2, 4, 6) and out["z"].shape == (2, 4, 64)


# cost and matching --------------------------------------------------------

def test_cost_perfect_prediction_is_zero():
    probs = np.array([[0.0, 1.0, 0.0]])
    c = H.build_cost_matrix(probs, [[1, 2, 3.0]], [[0.1, 0.2, 0.3]], [1], [[1, 2, 3.0]], [[0.1, 0.2, 0.3]])
    assert c[0, 0] == 0.0


def test_cost_wrong_class_costs_lambda_cls():
    probs = np.array([[1.0, 0.0, 0.0]])
    c = H.build_cost_matrix(probs, [[0, 0, 1.0]], [[1, 1, 1.0]], [1], [[0, 0, 1.0]], [[1, 1, 1.0]])
    assert c[0, 0] == pytest.approx(H.LOSS_WEIGHTS[0])


def test_cost_random_matches_formula():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(4), size=6)
    tp, sp = rng.normal(size=(6, 3)), rng.uniform(0.1, 1, (6, 3))
    gc, gt, gs = np.array([0, 2]), rng.normal(size=(2, 3)), rng.uniform(0.1, 1, (2, 3))
    c = H.build_cost_matrix(probs, tp, sp, gc, gt, gs)
    for i in range(2):
        for j in range(6):
            expect = (2.0 * (1 - probs[j, gc[i]]) + 0.06 * np.abs(tp[j] - gt[i]).sum()
                      + 0.06 * np.abs(sp[j] - gs[i]).sum())
            assert c[i, j] == pytest.approx(expect, rel=1e-14)


def test_hungarian_examples():
    a = H.hungarian_match([[0, 1], [1, 0]])
    assert list(a.gt_to_query) == [0, 1] and a.total_cost == 0
    a = H.hungarian_match([[1, 2], [2, 1]])
    assert list(a.gt_to_query) == [0, 1] and a.total_cost == 2


def test_hungarian_capacity_error():
    with pytest.raises(H.CapacityError):
        H.hungarian_match(np.ones((3, 2)))


def test_hungarian_matches_brute_force_5x7():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        cost = rng.uniform(0, 10, (5, 7))
        a = H.hungarian_match(cost)
        assert len(set(a.gt_to_query)) == 5
        assert a.total_cost == brute_force_min(cost)


def test_hungarian_integer_ties():
    rng = np.random.default_rng(8)
    for _ in range(200):
        n = rng.integers(1, 6)
        m = rng.integers(n, 7)
        cost = rng.integers(0, 4, (n, m)).astype(float)
        assert H.hungarian_match(cost).total_cost == brute_force_min(cost)


# losses ------------------------------------------------------------------

def test_focal_examples():
    assert H.focal_loss(Tensor([[0.0, 1.0]]), [1]).item() == 0.0
    assert H.focal_loss(Tensor([[0.5, 0.5]]), [0], alpha=1.0, gamma=0.0).item() == pytest.approx(math.log(2))
    assert H.focal_loss(Tensor([[0.9, 0.1]]), [0], alpha=0.25, gamma=2.0).item() == pytest.approx(2.634e-4, rel=1e-3)


def test_focal_clamps_zero_probability():
    v = H.focal_loss(Tensor([[0.0, 1.0]]), [0], alpha=1.0, gamma=0.0).item()
    assert v == pytest.approx(-math.log(1e-12))


def _pose(t, s, R):
    return Tensor(np.array([t], float)), Tensor(np.array([s], float)), Tensor(np.array([R], float))


def test_pose_loss_exact_is_zero():
    t, s, R = [0.1, 0.2, 1.0], [0.1, 0.1, 0.2], np.eye(3)
    loss, _ = H.pose_loss(*_pose(t, s, R), [t], [s], [R])
    assert loss.item() == 0.0


def test_pose_loss_location_offset():
    loss, (loc, size, rot) = H.pose_loss(*_pose([0.1, 0, 1], [1, 1, 1], np.eye(3)),
                                         [[0.0, 0, 1]], [[1, 1, 1.0]], [np.eye(3)])
    assert loc.item() == pytest.approx(0.1 / 3, rel=1e-12)
    assert loss.item() == pytest.approx(0.1 / 3, rel=1e-12)


def test_pose_loss_half_turn_rotation():
    # Rz(180) - I = diag(-2, -2, 0): mean |.| over nine entries is 4/9
    _, (_, _, rot) = H.pose_loss(*_pose([0, 0, 1], [1, 1, 1], rot_z(180)),
                                 [[0, 0, 1.0]], [[1, 1, 1.0]], [np.eye(3)])
    assert rot.item() == pytest.approx(4.0 / 9.0, abs=1e-15)


def test_total_loss_examples():
    z = Tensor(0.0)
    assert H.total_loss(z, z, z).item() == 0.0
    assert H.total_loss(Tensor(1.0), z, z).item() == 2.0
    assert H.total_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0)).item() == pytest.approx(2.08, abs=1e-15)


def test_total_loss_linear_in_shape_weight():
    a = H.total_loss(Tensor(0.3), Tensor(0.7), Tensor(1.9), (2.0, 0.06, 0.02)).item()
    b = H.total_loss(Tensor(0.3), Tensor(0.7), Tensor(1.9), (2.0, 0.06, 0.04)).item()
    assert b - a == pytest.approx(0.02 * 1.9, rel=1e-12)


def test_shape_loss_examples():
    z = np.random.default_rng(0).normal(size=(2, 64))
    assert H.shape_loss(Tensor(z), z).item() == 0.0
    assert H.shape_loss(Tensor(z + 0.5), z).item() == pytest.approx(0.5)
    zh = z * 1.7 - 0.2
    assert H.shape_loss(Tensor(zh), z).item() == pytest.approx(np.abs(zh - z).mean(), rel=1e-14)


def test_matched_losses_permutation_invariant():
    rng = np.random.default_rng(4)
    heads = H.PredictionHeads(8, 3, rng)
    emb = Tensor(rng.normal(size=(1, 6, 8)))
    out = heads(emb)
    tg = {"classes": np.array([0, 2, 1]), "t": rng.normal(size=(3, 3)), "s": rng.uniform(0.1, 1, (3, 3)),
          "R": np.stack([rot_z(a) for a in (10, 50, 90)]), "z": rng.normal(size=(3, 64))}
    perm = np.array([2, 0, 1])
    tg_p = {k: v[perm] for k, v in tg.items()}
    _, a, _ = H.matched_losses(out, [tg])
    _, b, _ = H.matched_losses(out, [tg_p])
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12)


def test_loss_gradients_pass_central_differences():
    rng = np.random.default_rng(5)
    heads = H.PredictionHeads(6, 2, rng)
    emb = nx.Parameter(rng.normal(size=(1, 4, 6)))
    tg = {"classes": np.array([1, 0]), "t": rng.normal(size=(2, 3)), "s": rng.uniform(0.1, 1, (2, 3)),
          "R": np.stack([rot_z(20), rot_z(-70)]), "z": rng.normal(size=(2, 64))}
    # freeze the matching so the loss is a smooth function of the parameters
    _, _, asg = H.matched_losses(heads(emb), [tg])

    def f():
        out = heads(emb)
        bi, qi, gi = H.gather_matches(asg)
        cls_t = np.full((1, 4), 2)
        cls_t[bi, qi] = tg["classes"][gi]
        sel = (bi, qi)
        Rp = H.rotation_from_6d_t(nx.index(out["r6d"], sel))
        lp, _ = H.pose_loss(nx.index(out["t"], sel), nx.index(out["s"], sel), Rp,
                            tg["t"][gi], tg["s"][gi], tg["R"][gi])
        return H.total_loss(H.focal_loss(out["probs"], cls_t), lp,
                            H.shape_loss(nx.index(out["z"], sel), tg["z"][gi]))

    assert nx.grad_check(f, [emb] + heads.parameters(), probes=20, rng=rng) <= 1e-4
