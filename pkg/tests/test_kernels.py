import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from acda.kernels import (
    KernelSpec,
    MedianHeuristic,
    median_bandwidth,
    mmd2_biased,
    multi_kernel,
    pooled_kernel,
    rbf_kernel,
)

import oracles


@pytest.fixture(autouse=True)
def float64_default():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def random_spec(rng, o):
    bw = rng.uniform(0.3, 3.0, size=o)
    beta = rng.dirichlet(np.ones(o))
    beta[-1] = 1.0 - beta[:-1].sum()
    return KernelSpec(tuple(bw), tuple(beta))


class TestKernelSpec:
    def test_valid(self):
        spec = KernelSpec((1.0, 2.0), (0.25, 0.75))
        assert spec.o == 2

    @pytest.mark.parametrize(
        "bw, beta",
        [((), ()), ((1.0,), (0.5, 0.5)), ((0.0,), (1.0,)), ((-1.0,), (1.0,)), ((1.0, 2.0), (1.5, -0.5)), ((1.0,), (0.9,))],
    )
    def test_invalid(self, bw, beta):
        with pytest.raises(ValueError):
            KernelSpec(bw, beta)

    def test_around_is_geometric_and_uniform(self):
        spec = KernelSpec.around(2.0)
        assert spec.bandwidths == (0.5, 1.0, 2.0, 4.0, 8.0)
        assert spec.beta == pytest.approx((0.2,) * 5)


class TestRbf:
    def test_identical_points(self):
        a = torch.tensor([0.3, -1.2, 4.0])
        assert rbf_kernel(a, a, 0.7).item() == 1.0

    def test_closed_form(self):
        assert rbf_kernel([0.0], [1.0], 1.0).item() == pytest.approx(0.6065306597126334, abs=1e-15)

    def test_symmetric(self):
        a, b = torch.randn(5), torch.randn(5)
        assert rbf_kernel(a, b, 1.3).item() == rbf_kernel(b, a, 1.3).item()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            rbf_kernel([0.0, 1.0], [1.0], 1.0)

    def test_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            rbf_kernel([float("nan")], [1.0], 1.0)

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            rbf_kernel([0.0], [1.0], 0.0)


class TestMultiKernel:
    def test_single_component_matches_rbf(self):
        a, b = torch.randn(3), torch.randn(3)
        assert multi_kernel(a, b, KernelSpec.single(0.8)).item() == rbf_kernel(a, b, 0.8).item()

    def test_identical_points_give_one(self):
        a = torch.randn(4)
        spec = KernelSpec((0.1, 1.0, 10.0), (0.2, 0.3, 0.5))
        assert multi_kernel(a, a, spec).item() == pytest.approx(1.0, abs=1e-15)

    def test_two_bandwidths(self):
        spec = KernelSpec((1.0, 2.0), (0.5, 0.5))
        expected = 0.5 * math.exp(-0.5) + 0.5 * math.exp(-0.125)
        assert multi_kernel([0.0], [1.0], spec).item() == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.7445137811486144, abs=1e-15)


class TestMedianBandwidth:
    def test_degenerate_falls_back_to_one(self):
        x = torch.tensor([[2.0, 3.0]])
        assert median_bandwidth(x, x) == 1.0

    def test_three_points(self):
        # pairwise distances {1, 3, 2}
        assert median_bandwidth(torch.tensor([[0.0], [1.0]]), torch.tensor([[3.0]])) == pytest.approx(2.0)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        expected = oracles.median_pairwise(a.tolist() + b.tolist())
        assert median_bandwidth(torch.tensor(a), torch.tensor(b)) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("c", [0.5, 3.0, 17.0])
    def test_homogeneous(self, c):
        a, b = torch.randn(6, 2), torch.randn(5, 2)
        assert median_bandwidth(c * a, c * b) == pytest.approx(c * median_bandwidth(a, b), rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            median_bandwidth(torch.empty(0, 2), torch.empty(0, 2))


class TestMmd:
    def test_identical_sets_are_zero(self):
        x = torch.randn(7, 4)
        assert abs(mmd2_biased(x, x.clone(), KernelSpec.around(1.0)).item()) < 1e-10

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.5])
    def test_singleton_closed_form(self, sigma):
        x, y = torch.randn(1, 3), torch.randn(1, 3)
        d2 = float(((x - y) ** 2).sum())
        expected = 2.0 - 2.0 * math.exp(-d2 / (2 * sigma**2))
        assert mmd2_biased(x, y, KernelSpec.single(sigma)).item() == pytest.approx(expected, abs=1e-12)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        spec = random_spec(rng, 3)
        expected = oracles.mmd2_loop(x.tolist(), y.tolist(), spec.bandwidths, spec.beta)
        assert mmd2_biased(torch.tensor(x), torch.tensor(y), spec).item() == pytest.approx(expected, abs=1e-10)

    def test_unequal_batch_sizes(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(6, 2))
        spec = KernelSpec((0.7, 1.9), (0.4, 0.6))
        expected = oracles.mmd2_loop(x.tolist(), y.tolist(), spec.bandwidths, spec.beta)
        assert mmd2_biased(torch.tensor(x), torch.tensor(y), spec).item() == pytest.approx(expected, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            mmd2_biased(torch.randn(3, 2), torch.randn(3, 4), KernelSpec.single(1.0))

    def test_flattens_feature_maps(self):
        x, y = torch.randn(3, 2, 2, 2), torch.randn(4, 2, 2, 2)
        spec = KernelSpec.single(2.0)
        assert mmd2_biased(x, y, spec).item() == mmd2_biased(x.reshape(3, -1), y.reshape(4, -1), spec).item()

    def test_median_heuristic_resolves_per_pair(self):
        x, y = torch.randn(5, 3), torch.randn(6, 3) + 1.0
        spec = KernelSpec.around(median_bandwidth(x, y))
        assert mmd2_biased(x, y, MedianHeuristic()).item() == pytest.approx(mmd2_biased(x, y, spec).item(), rel=1e-9)

    def test_pooled_kernel_is_symmetric_psd(self):
        x, y = torch.randn(5, 3), torch.randn(4, 3)
        k = pooled_kernel(x, y, KernelSpec.around(1.0))
        assert torch.allclose(k, k.T, atol=1e-14)
        assert torch.linalg.eigvalsh(k).min() > -1e-10

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = torch.tensor(rng.normal(size=(4, 3)), requires_grad=True)
        y = torch.tensor(rng.normal(size=(5, 3)), requires_grad=True)
        spec = KernelSpec((0.8, 1.6, 3.2), (0.3, 0.3, 0.4))
        mmd2_biased(x, y, spec).backward()
        for t, g in ((x, x.grad), (y, y.grad)):
            for idx in [(0, 0), (1, 2), (3, 1)]:
                fd = oracles.central_difference(lambda: mmd2_biased(x, y, spec), t, idx)
                assert oracles.rel_err(g[idx].item(), fd) < 1e-4


batches = st.integers(1, 6).flatmap(
    lambda d: st.tuples(
        st.lists(st.lists(st.floats(-5, 5), min_size=d, max_size=d), min_size=1, max_size=7),
        st.lists(st.lists(st.floats(-5, 5), min_size=d, max_size=d), min_size=1, max_size=7),
    )
)
specs = st.integers(1, 4).flatmap(
    lambda o: st.tuples(
        st.lists(st.floats(0.1, 10), min_size=o, max_size=o),
        st.lists(st.floats(0.01, 1), min_size=o, max_size=o),
    )
)


def _spec(raw):
    bw, w = raw
    s = sum(w)
    beta = [v / s for v in w]
    beta[-1] = 1.0 - sum(beta[:-1])
    return KernelSpec(tuple(bw), tuple(max(b, 0.0) for b in beta))


@settings(max_examples=100, deadline=None)
@given(batches, specs)
def test_mmd_properties(pair, raw_spec):
    spec = _spec(raw_spec)
    x, y = torch.tensor(pair[0]), torch.tensor(pair[1])
    xy = mmd2_biased(x, y, spec).item()
    assert abs(xy - mmd2_biased(y, x, spec).item()) < 1e-12
    assert xy >= -1e-10
    assert abs(mmd2_biased(x, x, spec).item()) < 1e-10
