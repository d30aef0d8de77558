import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvk import linsys
from dvk.linsys import LinearModel, block_diag, build_snapshots, fit_forward, fit_inverse


def random_stable(rng, m, p, radius=0.95):
    A = rng.normal(size=(m, m))
    A *= radius / max(np.abs(np.linalg.eigvals(A)))
    return A, rng.normal(size=(m, p))


def simulate(A, B, g0, u):
    g = [g0]
    for ut in u:
        g.append(A @ g[-1] + B @ ut)
    return np.array(g)


def test_snapshots_minimal():
    s = build_snapshots(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.5]]))
    assert s.Z.shape == (3, 1)
    assert np.array_equal(s.Z[:, 0], [1, 2, 0.5])
    assert np.array_equal(s.Y[:, 0], [3, 4])


def test_snapshots_hand_assembled():
    s = build_snapshots(np.array([[1.0], [2.0], [3.0]]), np.array([[0.5], [0.5]]))
    assert np.array_equal(s.Z, [[1, 2], [0.5, 0.5]])
    assert np.array_equal(s.Y, [[2, 3]])


def test_snapshots_blocks_and_errors():
    rng = np.random.default_rng(0)
    s = build_snapshots(rng.normal(size=(7, 3)), rng.normal(size=(6, 2)))
    assert np.array_equal(s.X, s.Z[:3]) and np.array_equal(s.Gamma, s.Z[3:])
    with pytest.raises(ValueError):
        build_snapshots(rng.normal(size=(7, 3)), rng.normal(size=(7, 2)))
    with pytest.raises(ValueError):
        build_snapshots(rng.normal(size=(1, 3)), rng.normal(size=(0, 2)))


@pytest.mark.parametrize("seed", range(5))
def test_fit_forward_recovers_generator(seed):
    rng = np.random.default_rng(seed)
    m, p = 4, 1
    A, B = random_stable(rng, m, p)
    u = rng.normal(size=(3 * (m + p), p))
    g = simulate(A, B, rng.normal(size=m), u)
    A_hat, B_hat = fit_forward(build_snapshots(g, u), ridge=1e-10)
    assert np.linalg.norm(A_hat - A) < 1e-6 and np.linalg.norm(B_hat - B) < 1e-6


def test_identity_design_returns_targets():
    Y = np.random.default_rng(1).normal(size=(2, 3))
    assert np.allclose(linsys.ridge_solve(np.eye(3), Y, 0.0), Y, atol=1e-14)


def test_constant_observations_are_a_fixed_point():
    g = np.tile([0.6, -0.8], (10, 1))
    A, _ = fit_forward(build_snapshots(g, np.zeros((9, 1))), ridge=1e-8)
    assert np.allclose(A @ g[0], g[0], atol=1e-6)


def test_singular_normal_matrix_without_ridge():
    g = np.tile([1.0, 1.0], (6, 1))
    with pytest.raises(linsys.SingularSystemError):
        fit_forward(build_snapshots(g, np.zeros((5, 1))), ridge=0.0)


def test_under_determined_fit_warns():
    rng = np.random.default_rng(2)
    with pytest.warns(UserWarning):
        fit_forward(build_snapshots(rng.normal(size=(4, 4)), rng.normal(size=(3, 1))))


@pytest.mark.parametrize("method", linsys.INVERSE_FITS)
def test_fit_inverse_exact_data(method):
    rng = np.random.default_rng(3)
    A, B = random_stable(rng, 4, 1)
    u = rng.normal(size=(20, 1))
    s = build_snapshots(simulate(A, B, rng.normal(size=4), u), u)
    A_hat, B_hat = fit_forward(s, 1e-10)
    A_inv = fit_inverse(s, B_hat, 1e-10, method)
    assert np.linalg.norm(A_inv @ A - np.eye(4)) < 1e-5


def test_fit_inverse_static_data_is_identity():
    g = np.random.default_rng(4).normal(size=(2, 5))
    s = linsys.SnapshotMatrices(Z=np.vstack([g, np.zeros((1, 5))]), Y=g, X=g,
                                Gamma=np.zeros((1, 5)))
    assert np.allclose(fit_inverse(s, np.zeros((2, 1)), 0.0), np.eye(2), atol=1e-12)


def test_fit_inverse_scalar():
    g = np.array([[1.0], [2.0], [4.0], [8.0]])
    s = build_snapshots(g, np.zeros((3, 1)))
    assert fit_inverse(s, np.zeros((1, 1)), 0.0)[0, 0] == pytest.approx(0.5, abs=1e-14)


def test_fit_inverse_condition_guard():
    g = np.column_stack([np.linspace(1, 2, 8), np.zeros(8)])
    s = build_snapshots(g, np.zeros((7, 1)))
    with pytest.raises(linsys.SingularSystemError):
        fit_inverse(s, np.zeros((2, 1)), 1e-14, "invert")
    # the direct backward regression stays finite on the same degenerate data
    A_inv = fit_inverse(s, np.zeros((2, 1)), 1e-14)
    assert np.all(np.isfinite(A_inv))
    with pytest.raises(ValueError):
        fit_inverse(s, np.zeros((2, 1)), 1e-3, "pinv")


def test_block_diag_cases():
    m1 = LinearModel(np.array([[2.0]]), np.array([[1.0]]), np.array([[0.5]]), np.zeros(1))
    m2 = LinearModel(np.array([[3.0]]), np.array([[4.0]]), np.array([[1 / 3]]), np.zeros(1))
    A, B = block_diag([m1])
    assert np.array_equal(A, m1.A) and np.array_equal(B, m1.B)
    A, B = block_diag([m1, m2])
    assert np.array_equal(A, [[2, 0], [0, 3]]) and np.array_equal(B, [[1], [4]])
    bad = LinearModel(np.eye(2), np.ones((2, 1)), np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        block_diag([m1, bad])


def test_augmented_rollout_matches_members():
    rng = np.random.default_rng(5)
    models = []
    for _ in range(3):
        A, B = random_stable(rng, 4, 2)
        models.append(LinearModel(A, B, np.linalg.inv(A), rng.normal(size=4)))
    A_aug, B_aug = block_diag(models)
    u = rng.normal(size=(10, 2))
    z_aug = np.concatenate([mdl.g_T for mdl in models])
    path = [z_aug]
    for ut in u:
        path.append(A_aug @ path[-1] + B_aug @ ut)
    expected = np.concatenate([mdl.rollout(mdl.g_T, u) for mdl in models], axis=1)
    assert np.allclose(np.array(path), expected, atol=1e-12)
    eig_aug = np.sort_complex(np.linalg.eigvals(A_aug))
    eig = np.sort_complex(np.concatenate([np.linalg.eigvals(mdl.A) for mdl in models]))
    assert np.allclose(eig_aug, eig, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_non_increasing_as_ridge_shrinks(seed):
    rng = np.random.default_rng(seed)
    s = build_snapshots(rng.normal(size=(12, 3)), rng.normal(size=(11, 1)))
    residuals = []
    for ridge in (10.0, 1.0, 1e-2, 1e-4, 0.0):
        A, B = fit_forward(s, ridge)
        residuals.append(np.linalg.norm(s.Y - A @ s.X - B @ s.Gamma))
    assert all(a >= b - 1e-10 for a, b in zip(residuals, residuals[1:]))


def test_linear_model_round_trip_arrays():
    rng = np.random.default_rng(6)
    mdl = LinearModel(rng.normal(size=(3, 3)), rng.normal(size=(3, 1)), rng.normal(size=(3, 3)),
                      rng.normal(size=3))
    back = LinearModel.from_arrays(mdl.to_arrays("m0."), "m0.")
    for k in ("A", "B", "A_inv", "g_T"):
        assert np.array_equal(getattr(back, k), getattr(mdl, k))
