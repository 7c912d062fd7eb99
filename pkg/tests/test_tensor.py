import threading

import numpy as np
import pytest

from edunet import ops
from edunet.tensor import GraphError, Tensor, is_grad_enabled, no_grad

from conftest import tensor


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = tensor(rng.standard_normal((3, 4)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_gives_x(self, rng):
        x = tensor(rng.standard_normal((2, 5)))
        ((x * x).sum() * 0.5).backward()
        np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)

    def test_reused_input_accumulates(self):
        x = tensor([1.0, 2.0])
        (x * 3.0 + x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0, 7.0])

    def test_non_scalar_loss_rejected(self):
        x = tensor(np.ones(3))
        with pytest.raises((ValueError, GraphError)):
            (x * 2.0).backward()

    def test_consumed_graph_rejected(self):
        x = tensor(np.ones(3))
        loss = (x * 2.0).sum()
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_every_leaf_gets_grad(self, rng):
        a, b = tensor(rng.standard_normal(4)), tensor(rng.standard_normal(4))
        (a * 0.0 + b).sum().backward()
        assert a.grad is not None and b.grad is not None
        assert a.grad.shape == a.shape

    def test_intermediate_grad_only_when_retained(self, rng):
        x = tensor(rng.standard_normal(3))
        h = x * 2.0
        h.retain_grad()
        k = x + 1.0
        (h * k).sum().backward()
        np.testing.assert_allclose(h.grad, k.data)
        assert k.grad is None


class TestNoGrad:
    def test_disables_recording(self):
        x = tensor(np.ones(2))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.node is None
        assert is_grad_enabled()

    def test_is_thread_local(self):
        seen = {}

        def worker():
            seen["enabled"] = is_grad_enabled()

        with no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["enabled"] is True


class TestTensorBasics:
    def test_integer_data_becomes_float32(self):
        assert Tensor(np.arange(4)).dtype == np.float32

    def test_shape_matches_data(self, rng):
        t = Tensor(rng.standard_normal((2, 3, 4)))
        assert int(np.prod(t.shape)) == t.data.size

    def test_seeded_init_is_bit_identical(self):
        from edunet.model import EDUNetConfig, init_params

        cfg = EDUNetConfig(input_size=(32, 32))
        a = init_params(cfg, np.random.default_rng(5)).state()
        b = init_params(cfg, np.random.default_rng(5)).state()
        assert list(a) == list(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)
