import numpy as np
import pytest

from flatlat.errors import ContractError
from flatlat.nd.rng import RngStream, derive_seed

pytestmark = pytest.mark.unit


class TestRngStream:
    def test_same_seed_same_numbers(self):
        a = RngStream(42).normal((3, 4))
        b = RngStream(42).normal((3, 4))
        np.testing.assert_array_equal(a, b)

    def test_children_are_independent_of_parent_use(self):
        parent = RngStream(42)
        first = parent.child("train").uniform(5)
        parent.uniform(100)
        again = parent.child("train").uniform(5)
        np.testing.assert_array_equal(first, again)

    def test_labels_give_distinct_streams(self):
        assert derive_seed(1, "train") != derive_seed(1, "val")
        assert not np.array_equal(RngStream(1).child("a").uniform(4), RngStream(1).child("b").uniform(4))

    def test_normal_moments(self):
        z = RngStream(7).normal(200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_normal_odd_count_and_dtype(self):
        z = RngStream(7).normal((3, 3), dtype=np.float32)
        assert z.shape == (3, 3)
        assert z.dtype == np.float32

    def test_counter_advances(self):
        r = RngStream(3)
        start = r.counter
        r.uniform(10)
        assert r.counter > start

    def test_restart_from_counter(self):
        r = RngStream(9)
        r.uniform(8)
        resumed = RngStream(9, counter=r.counter)
        np.testing.assert_array_equal(r.uniform(4), resumed.uniform(4))

    def test_negative_seed_rejected(self):
        with pytest.raises(ContractError):
            RngStream(-1)

    def test_bernoulli_bounds(self):
        with pytest.raises(ContractError):
            RngStream(0).bernoulli(1.5, 3)
        assert RngStream(0).bernoulli(0.0, 10).sum() == 0
        assert RngStream(0).bernoulli(1.0, 10).sum() == 10
