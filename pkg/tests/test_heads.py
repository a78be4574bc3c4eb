import numpy as np
import pytest

from mixtrack import autodiff as ad
from mixtrack import heads, losses
from mixtrack.autodiff import Tensor
from mixtrack.errors import ConfigError, ShapeError


def to_float64(module):
    params = module.named_params()
    for p in params.values():
        p.data = p.data.astype(np.float64)
    return params


class TestSoftArgmax:
    def test_sharp_peak_reads_off_position(self):
        m = np.zeros((8, 8))
        m[2, 5] = 1e4
        x, y = heads.soft_argmax(Tensor(m))
        assert abs(x.item() - 5.0 / 7.0) < 1e-9
        assert abs(y.item() - 2.0 / 7.0) < 1e-9

    def test_uniform_map_centers(self):
        x, y = heads.soft_argmax(Tensor(np.ones((6, 10))))
        assert abs(x.item() - 0.5) < 1e-7
        assert abs(y.item() - 0.5) < 1e-7

    def test_matches_double_sum_oracle(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(4, 4))
        x, y = heads.soft_argmax(Tensor(m))
        p = np.exp(m - m.max())
        p /= p.sum()
        want_x = sum(
            p[i, j] * j / 3.0 for i in range(4) for j in range(4)
        )
        want_y = sum(
            p[i, j] * i / 3.0 for i in range(4) for j in range(4)
        )
        assert abs(x.item() - want_x) < 1e-6
        assert abs(y.item() - want_y) < 1e-6

    def test_translation_consistency(self):
        base = np.zeros((9, 9))
        base[1, 2] = 1e4
        shifted = np.zeros((9, 9))
        shifted[4, 7] = 1e4
        x0, y0 = heads.soft_argmax(Tensor(base))
        x1, y1 = heads.soft_argmax(Tensor(shifted))
        assert abs((x1.item() - x0.item()) - 5.0 / 8.0) < 1e-9
        assert abs((y1.item() - y0.item()) - 3.0 / 8.0) < 1e-9

    def test_empty_map_rejected(self):
        with pytest.raises(ConfigError):
            heads.soft_argmax(Tensor(np.zeros((0, 4))))

    def test_wrong_rank_rejected(self):
        with pytest.raises(ShapeError):
            heads.soft_argmax(Tensor(np.zeros((2, 3, 4))))

    def test_single_cell_map(self):
        x, y = heads.soft_argmax(Tensor(np.array([[3.0]])))
        assert x.item() == 0.0
        assert y.item() == 0.0


class TestCornerHead:
    def test_dim_must_divide_16(self):
        with pytest.raises(ConfigError):
            heads.CornerHead(24, np.random.default_rng(0))

    def test_constant_features_give_center_point_box(self):
        head = heads.CornerHead(16, np.random.default_rng(1))
        feat = Tensor(np.full((1, 16, 5, 5), 0.7, dtype=np.float32))
        box = head(feat).numpy()[0]
        assert np.allclose(box, [0.5, 0.5, 0.5, 0.5], atol=1e-6)

    @pytest.mark.parametrize("seed", range(10))
    def test_box_stays_in_unit_square(self, seed):
        rng = np.random.default_rng(seed)
        head = heads.CornerHead(16, rng)
        feat = Tensor(rng.normal(size=(2, 16, 4, 6)).astype(np.float32))
        b = head(feat).numpy()
        assert (b >= 0.0).all() and (b <= 1.0).all()

    def test_corners_are_ordered(self):
        rng = np.random.default_rng(11)
        head = heads.CornerHead(16, rng)
        feat = Tensor(rng.normal(size=(4, 16, 4, 4)).astype(np.float32))
        b = head(feat).numpy()
        assert (b[:, 2] >= b[:, 0]).all()
        assert (b[:, 3] >= b[:, 1]).all()

    def test_wrong_channel_count(self):
        head = heads.CornerHead(16, np.random.default_rng(2))
        with pytest.raises(ShapeError):
            head(Tensor(np.zeros((1, 8, 4, 4), dtype=np.float32)))

    def test_heatmaps_are_distributions(self):
        rng = np.random.default_rng(3)
        head = heads.CornerHead(16, rng)
        feat = Tensor(rng.normal(size=(1, 16, 4, 4)).astype(np.float32))
        tl, br = head.heatmaps(feat)
        assert np.allclose(tl.sum(axis=(1, 2)), 1.0, atol=1e-6)
        assert np.allclose(br.sum(axis=(1, 2)), 1.0, atol=1e-6)

    def test_box_loss_gradients_match_finite_differences(self):
        # seed chosen so no relu pre-activation sits within the FD step of 0
        rng = np.random.default_rng(16)
        head = heads.CornerHead(16, rng)
        params = to_float64(head)
        feat = Tensor(rng.normal(size=(1, 16, 3, 3)))
        tgt = np.array([[0.2, 0.25, 0.7, 0.8]])

        def f():
            return losses.loc_loss(head(feat), tgt)

        report = ad.grad_check(f, params, h=1e-5, tol=1e-4)
        assert report.ok(1e-4), report


class TestQueryHead:
    def test_center_form_in_unit_square(self):
        rng = np.random.default_rng(5)
        head = heads.QueryHead(8, rng)
        tok = Tensor(rng.normal(size=(16, 8)).astype(np.float32) * 5)
        b = head(tok).numpy()
        centers_x = (b[:, 0] + b[:, 2]) / 2
        centers_y = (b[:, 1] + b[:, 3]) / 2
        assert ((centers_x > 0) & (centers_x < 1)).all()
        assert ((centers_y > 0) & (centers_y < 1)).all()
        assert ((b[:, 2] - b[:, 0] > 0) & (b[:, 2] - b[:, 0] < 1)).all()

    def test_zero_final_layer_gives_centered_half_box(self):
        rng = np.random.default_rng(6)
        head = heads.QueryHead(8, rng)
        head.out.w.data[:] = 0.0
        head.out.b.data[:] = 0.0
        tok = Tensor(rng.normal(size=(3, 8)).astype(np.float32))
        b = head(tok).numpy()
        assert np.allclose(b, [[0.25, 0.25, 0.75, 0.75]] * 3, atol=1e-7)

    def test_corners_ordered(self):
        rng = np.random.default_rng(7)
        head = heads.QueryHead(8, rng)
        b = head(Tensor(rng.normal(size=(32, 8)).astype(np.float32))).numpy()
        assert (b[:, 2] >= b[:, 0]).all()
        assert (b[:, 3] >= b[:, 1]).all()

    def test_token_parameter_is_learnable(self):
        head = heads.QueryHead(8, np.random.default_rng(8))
        assert "token" in head.named_params()
        assert head.token.requires_grad

    def test_box_loss_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        head = heads.QueryHead(8, rng)
        params = to_float64(head)
        tok = Tensor(rng.normal(size=(2, 8)))
        tgt = np.array([[0.2, 0.25, 0.7, 0.8], [0.1, 0.1, 0.4, 0.5]])

        def f():
            return losses.loc_loss(head(tok), tgt)

        report = ad.grad_check(f, params, h=1e-5, tol=1e-4)
        assert report.ok(1e-4), report

    def test_wrong_token_width(self):
        head = heads.QueryHead(8, np.random.default_rng(10))
        with pytest.raises(ShapeError):
            head(Tensor(np.zeros((2, 4), dtype=np.float32)))
