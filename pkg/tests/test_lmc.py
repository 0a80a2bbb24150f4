import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskforge.lmc import (
    DEFAULT_ALPHAS,
    InterpolationPath,
    barrier,
    barrier_matrix,
    interpolate,
    interpolate_one,
    quadratic_loss,
    read_losses_csv,
    validate_alphas,
)
from taskforge.tensor_store import Checkpoint


def _ck(seed, mid="m"):
    g = np.random.default_rng(seed)
    return Checkpoint({"w": g.standard_normal((6, 3)).astype(np.float32), "b": g.standard_normal(4).astype(np.float32)},
                      {"model_id": mid})


def test_endpoints_bit_exact():
    a, b = _ck(0, "A"), _ck(1, "B")
    b.tensors["b"] = np.array([-0.0, 1.0, 2.0, 3.0], np.float32)
    path = interpolate(a, b)
    assert path.checkpoints[-1].tensors["w"].tobytes() == a.tensors["w"].tobytes()
    assert path.checkpoints[0].tensors["b"].tobytes() == b.tensors["b"].tobytes()
    assert len(path.checkpoints) == 11 == len(DEFAULT_ALPHAS)


def test_midpoint_of_opposites_is_zero():
    x = {"w": np.array([1.5, -2.0, 3.25], np.float32)}
    out = interpolate_one(x, {"w": -x["w"]}, 0.5)
    assert not np.any(out["w"])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(DEFAULT_ALPHAS + [0.25, 0.33, 1 / 3, 0.123456]))
def test_reversal_symmetry_bit_exact(seed, t):
    a, b = _ck(seed).tensors, _ck(seed + 1).tensors
    x = interpolate_one(a, b, t)
    y = interpolate_one(b, a, 1 - t)
    assert all(x[k].tobytes() == y[k].tobytes() for k in x)


def test_manifest_mismatch():
    a = _ck(0)
    b = Checkpoint({"w": a.tensors["w"]})
    with pytest.raises(ValueError):
        interpolate(a, b)


@pytest.mark.parametrize("alphas", [[0.0], [0.0, 0.5], [0.0, 0.6, 0.5, 1.0], [0.0, 1.2], [0.1, 1.0]])
def test_bad_alphas(alphas):
    with pytest.raises(ValueError):
        validate_alphas(alphas)


@pytest.mark.parametrize("losses,expected", [
    ([1.0, 1.2, 1.5], 0.0),
    ([1.0, 2.0, 1.5], 0.5),
    ([2.0, 1.0, 2.0], 0.0),
])
def test_barrier_examples(losses, expected):
    assert barrier(losses) == expected


def test_barrier_errors():
    with pytest.raises(ValueError):
        barrier([1.0, 2.0])
    with pytest.raises(ValueError):
        barrier([1.0, float("nan"), 2.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=20))
def test_barrier_nonnegative_and_reversal_invariant(losses):
    assert barrier(losses) >= 0.0
    assert barrier(losses) == barrier(losses[::-1])


def test_quadratic_bump_analytic():
    # theta(alpha) on a segment; the loss is a parabola in alpha with known peak
    h = 0.8
    alphas = [i / 100 for i in range(101)]
    losses = [1.0 + 4 * h * a * (1 - a) for a in alphas]
    assert barrier(losses) == pytest.approx(h, abs=1e-12)


def test_quadratic_loss_evaluator_bump():
    # endpoints at distance 1 from target on opposite sides of a ridge
    a = Checkpoint({"w": np.array([1.0, 1.0], np.float32)}, {"model_id": "A"})
    b = Checkpoint({"w": np.array([-1.0, 1.0], np.float32)}, {"model_id": "B"})
    target = {"w": np.array([0.0, 3.0])}
    path = interpolate(a, b, DEFAULT_ALPHAS)
    losses = [quadratic_loss(c.tensors, target) for c in path.checkpoints]
    # L(alpha) = (2 alpha - 1)^2 + 4: the minimum is interior, so no barrier
    assert barrier(losses) == 0.0
    assert min(losses) == pytest.approx(4.0)


def test_barrier_matrix_ten_pairs():
    ids = ["G1", "G2", "G3", "G4", "G5"]
    paths = [InterpolationPath(a, b, DEFAULT_ALPHAS, losses=[1.0 + 0.1 * k for k in range(11)])
             for i, a in enumerate(ids) for b in ids[i + 1 :]]
    m = barrier_matrix(paths)
    assert len(m) == 10 and set(m.values()) == {0.0}
    with pytest.raises(ValueError):
        barrier_matrix([InterpolationPath("a", "b", DEFAULT_ALPHAS)])


def test_path_length_check():
    with pytest.raises(ValueError):
        InterpolationPath("a", "b", [0.0, 1.0], losses=[1.0])


def test_read_losses_csv(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("alpha,loss,other\n1.0,1.5,9\n0.0,1.0,9\n0.5,2.0,9\n")
    alphas, losses = read_losses_csv(p)
    assert alphas == [0.0, 0.5, 1.0] and losses == [1.0, 2.0, 1.5]
    assert read_losses_csv(p, "other")[1] == [9.0, 9.0, 9.0]
    with pytest.raises(ValueError):
        read_losses_csv(p, "missing")
