import numpy as np
import pytest
from util import random_coords

from sparsedet3d import autodiff as ad
from sparsedet3d import oracles
from sparsedet3d.sparse import build_kernel_map


def check_grad(build_loss, x0, tol=1e-6):
    """Compare reverse-mode gradient of build_loss(Var) against central FD."""
    x = ad.Var(x0.copy(), requires_grad=True)
    loss = build_loss(x)
    loss.backward()
    fd = oracles.fd_gradient(lambda a: float(build_loss(ad.Var(a)).data), x0.copy())
    assert oracles.rel_err(x.grad, fd) <= tol


class TestOps:
    def test_matmul_chain(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 5))
        check_grad(lambda x: (ad.matmul(x, ad.Var(w))).sum(), a)
        check_grad(lambda x: (ad.matmul(ad.Var(a), x) * 2.0).sum(), w.copy())

    def test_elementwise(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=(6, 2)) + 0.1
        check_grad(lambda x: (ad.relu(x) + ad.sigmoid(x) * x).sum(), x0)
        check_grad(lambda x: ad.exp(x * 0.3).mean(), x0)
        check_grad(lambda x: ad.log(ad.clip(ad.sigmoid(x), 1e-7, 1 - 1e-7)).sum(), x0)

    def test_huber_values_and_grad(self):
        x0 = np.array([-3.0, -1.0, -0.2, 0.0, 0.4, 1.0, 2.5])
        h = ad.huber(ad.Var(x0), 1.0)
        want = np.where(np.abs(x0) < 1.0, 0.5 * x0 ** 2, np.abs(x0) - 0.5)
        np.testing.assert_allclose(h.data, want)
        check_grad(lambda x: ad.huber(x, 1.0).sum(), x0 + 0.01)

    def test_take_rows_accumulates_duplicates(self):
        x0 = np.arange(6, dtype=np.float64).reshape(3, 2)
        idx = [0, 0, 2]
        check_grad(lambda x: ad.take_rows(x, idx).sum(), x0)

    def test_segment_mean(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(7, 3))
        seg = np.array([0, 0, 1, 1, 1, 3, 3])
        out = ad.segment_mean(ad.Var(x0), seg, 4)
        np.testing.assert_allclose(out.data[0], x0[:2].mean(axis=0))
        np.testing.assert_array_equal(out.data[2], np.zeros(3))
        check_grad(lambda x: (ad.segment_mean(x, seg, 4) ** 2).sum(), x0)

    def test_concat_rows(self):
        rng = np.random.default_rng(3)
        a0 = rng.normal(size=(3, 2))
        check_grad(lambda x: ad.concat_rows([x, ad.Var(np.ones((2, 2))), x]).sum(), a0)

    def test_broadcast_bias(self):
        rng = np.random.default_rng(4)
        b0 = rng.normal(size=(1, 5))
        x = ad.Var(rng.normal(size=(7, 5)))
        check_grad(lambda b: (x + b).sum(), b0)

    def test_mean_axis(self):
        rng = np.random.default_rng(5)
        x0 = rng.normal(size=(4, 3))
        check_grad(lambda x: (x.mean(axis=0) ** 2).sum(), x0)

    def test_reused_node_accumulates(self):
        x = ad.Var(np.array([2.0]), requires_grad=True)
        y = x * x + x * 3.0
        y.backward()
        assert x.grad[0] == pytest.approx(2 * 2.0 + 3.0)


class TestSparseConvOp:
    def test_matches_fd(self):
        rng = np.random.default_rng(6)
        coords = random_coords(rng, 15, 0, 4)
        kmap = build_kernel_map(coords, coords, 3)
        f0 = rng.normal(size=(15, 3))
        k0 = rng.normal(size=(27, 3, 2))
        b0 = rng.normal(size=2)

        kern = ad.Var(k0.copy(), requires_grad=True)
        bias = ad.Var(b0.copy(), requires_grad=True)
        check_grad(lambda x: (ad.sparse_conv(x, kern, bias, kmap) ** 2).sum(), f0)

        feats = ad.Var(f0)
        check_grad(lambda k: (ad.sparse_conv(feats, k, ad.Var(b0), kmap) ** 2).sum(), k0)
        check_grad(lambda b: ad.sparse_conv(feats, ad.Var(k0), b, kmap).sum(), b0)

    def test_no_grad_leaf_skipped(self):
        rng = np.random.default_rng(7)
        coords = random_coords(rng, 5, 0, 3)
        kmap = build_kernel_map(coords, coords, 1)
        x = ad.Var(rng.normal(size=(5, 2)))
        k = ad.Var(rng.normal(size=(1, 2, 2)), requires_grad=True)
        out = ad.sparse_conv(x, k, None, kmap).sum()
        out.backward()
        assert x.grad is None
        assert k.grad is not None
