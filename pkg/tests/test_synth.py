import numpy as np
import pytest

from taskforge import geometry
from taskforge.merge import MergeSpec, merge
from taskforge.synth import GROUP_NORMS, SynthSpec, gram_factor, generate, verify_predictions
from taskforge.taskvec import flat64


def test_disjoint_cosines_exactly_zero():
    tvs = generate(SynthSpec(5, 1001, GROUP_NORMS, mode="disjoint", seed=1, n_tensors=3))
    for i in range(5):
        for j in range(i + 1, 5):
            assert geometry.cosine_similarity(tvs[i], tvs[j]) == 0.0
    assert list(tvs[0].delta) == ["layers.0.weight", "layers.1.weight", "layers.2.weight"]


def test_norms_reproduce_reference_column():
    for mode in ("disjoint", "gaussian", "cosine"):
        tvs = generate(SynthSpec(5, 2000, GROUP_NORMS, mode=mode, target_cosine=0.05, seed=2))
        got = [np.linalg.norm(flat64(t.delta)) for t in tvs]
        np.testing.assert_allclose(got, GROUP_NORMS, rtol=1e-12)


@pytest.mark.parametrize("n,cos", [(2, 0.09), (5, 0.09), (3, -0.4), (4, 0.0)])
def test_controlled_cosine(n, cos):
    tvs = generate(SynthSpec(n, 300, GROUP_NORMS[:n], mode="cosine", target_cosine=cos, seed=3))
    for i in range(n):
        for j in range(i + 1, n):
            assert abs(geometry.cosine_similarity(tvs[i], tvs[j]) - cos) <= 1e-9


def test_cosine_boundary_is_feasible():
    # -1/(n-1) makes the Gram singular but still realizable
    tvs = generate(SynthSpec(3, 10, mode="cosine", target_cosine=-0.5, seed=0))
    assert geometry.cosine_similarity(tvs[0], tvs[1]) == pytest.approx(-0.5, abs=1e-9)


@pytest.mark.parametrize("kw", [
    {"mode": "cosine", "target_cosine": -0.6, "n_vectors": 3},
    {"mode": "cosine", "target_cosine": 1.5},
    {"mode": "weird"},
    {"sparsity": 1.0},
    {"target_norms": [1.0]},
    {"target_norms": [1.0, -1.0]},
])
def test_invalid_specs(kw):
    args = {"n_vectors": 2, "dim": 10, **kw}
    with pytest.raises(ValueError):
        generate(SynthSpec(**args))


def test_gram_factor():
    lower = gram_factor(3, 0.2, [1.0, 2.0, 3.0])
    gram = lower @ lower.T
    assert gram[1, 1] == pytest.approx(4.0) and gram[0, 2] == pytest.approx(0.6)


def test_sparsity_level():
    tvs = generate(SynthSpec(2, 1000, mode="gaussian", sparsity=0.6, seed=4))
    assert all(np.mean(flat64(t.delta) == 0) == pytest.approx(0.6) for t in tvs)


def test_deterministic():
    spec = SynthSpec(3, 500, mode="gaussian", seed=9)
    a, b = generate(spec), generate(spec)
    assert all(a[i].delta[k].tobytes() == b[i].delta[k].tobytes() for i in range(3) for k in a[i].delta)
    c = generate(SynthSpec(3, 500, mode="gaussian", seed=10))
    assert flat64(c[0].delta).tobytes() != flat64(a[0].delta).tobytes()


def test_float32_option():
    tvs = generate(SynthSpec(2, 10, seed=0), dtype=np.float32)
    assert tvs[0].delta["layers.0.weight"].dtype == np.float32


def test_displacement_scales_quadratically():
    tvs = generate(SynthSpec(3, 400, [2.0, 1.0, 3.0], mode="gaussian", seed=5))
    scaled = [t.__class__({k: 3.0 * v for k, v in t.delta.items()}, t.specialist_id, t.base_hash) for t in tvs]
    r1, r3 = geometry.displacement_check(tvs, 1), geometry.displacement_check(scaled, 1)
    assert r3["actual"] == pytest.approx(9 * r1["actual"], rel=1e-12)
    assert r3["predicted"] == pytest.approx(9 * r1["predicted"], rel=1e-12)


def test_verify_predictions_on_disjoint():
    tvs = generate(SynthSpec(3, 3000, GROUP_NORMS[:3], mode="disjoint", seed=6))
    rep = verify_predictions(tvs, ks=(0.2, 0.5))
    assert all(d["rel_error"] <= 1e-10 and d["within_bound"] for d in rep["displacement"])
    # off-support coordinates are zero in both vectors, so they count as agreeing
    for s in rep["sign_agreement"]:
        assert s["sign_agreement"] == pytest.approx(1 / 3, abs=1e-3)
    assert set(rep["ties_discarded_fraction"]) == {"0.2", "0.5"}
    for fr in rep["ties_discarded_fraction"].values():
        assert all(0 <= f <= 1 for f in fr.values())
    with pytest.raises(ValueError):
        verify_predictions(tvs[:1])


def test_ties_on_disjoint_supports_is_the_sum():
    tvs = generate(SynthSpec(3, 300, mode="disjoint", seed=7))
    merged, _ = merge(tvs, MergeSpec("ties", trim_fraction=0.0))
    total = sum(flat64(t.delta) for t in tvs)
    # merged tensors are float32; each coordinate carries one nonzero input
    np.testing.assert_array_equal(flat64(merged), total.astype(np.float32))
    avg, _ = merge(tvs, MergeSpec("simple_average"))
    np.testing.assert_allclose(flat64(avg), total / 3, rtol=1e-6)
