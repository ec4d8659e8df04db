import math

import numpy as np
import numpy.testing as npt
import pytest

from tsekit import autodiff as ad
from tsekit import nn
from tsekit.autodiff import Tensor
from tsekit.errors import DataError, ShapeError


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.tape().clear()
    yield
    ad.tape().clear()


class TestEncoder:
    def test_frame_counts(self):
        enc20 = nn.Encoder(4, 20, np.random.default_rng(0))
        assert enc20.n_frames(20) == 1
        assert enc20.n_frames(100) == 9

    def test_output_shape(self):
        enc = nn.Encoder(6, 8, np.random.default_rng(0))
        out = enc(Tensor(np.random.default_rng(1).normal(size=(1, 40))))
        assert out.shape == (6, enc.n_frames(40))

    def test_zero_waveform_gives_zero_representation(self):
        enc = nn.Encoder(6, 8, np.random.default_rng(0))
        out = enc(Tensor(np.zeros((1, 32))))
        assert np.all(out.data == 0.0)

    def test_too_short_input(self):
        enc = nn.Encoder(6, 20, np.random.default_rng(0))
        with pytest.raises(DataError, match="shorter"):
            enc(Tensor(np.zeros((1, 10))))


class TestDecoder:
    def test_output_length(self):
        dec = nn.Decoder(4, 20, np.random.default_rng(0))
        out = dec(Tensor(np.random.default_rng(1).normal(size=(4, 1))))
        assert out.shape == (1, 20)
        out = dec(Tensor(np.random.default_rng(1).normal(size=(4, 7))))
        assert out.shape == (1, (7 - 1) * 10 + 20)

    def test_zero_representation_gives_zero_waveform(self):
        dec = nn.Decoder(4, 8, np.random.default_rng(0))
        out = dec(Tensor(np.zeros((4, 5))))
        assert np.all(out.data == 0.0)


class TestConvBlock:
    def make(self, b=4, h=6, p=3, d=2, seed=0):
        return nn.ConvBlock(b, h, p, d, np.random.default_rng(seed))

    def test_zeroed_branch_is_identity(self):
        block = self.make()
        block.project.weight.data[:] = 0.0
        block.project.bias.data[:] = 0.0
        x = np.random.default_rng(2).normal(size=(4, 9))
        out = block(Tensor(x))
        npt.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("t", [1, 5, 16])
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    def test_shape_preserved_for_any_length_and_dilation(self, t, dilation):
        block = self.make(d=dilation)
        x = np.random.default_rng(3).normal(size=(2, 4, t))
        assert block(Tensor(x)).shape == (2, 4, t)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            self.make()(Tensor(np.zeros((5, 9))))

    def test_two_block_stack_gradcheck(self):
        rng = np.random.default_rng(4)
        b1 = nn.ConvBlock(3, 4, 3, 1, rng)
        b2 = nn.ConvBlock(3, 4, 3, 2, rng)
        x0 = rng.normal(size=(3, 8))

        def f(t):
            return ad.mean(ad.mul(b2(b1(t)), b2(b1(t))))

        assert ad.check_gradient(f, Tensor(x0), h=1e-5) < 1e-4


class TestPRelu:
    def test_piecewise_definition(self):
        act = nn.PReLU(0.25)
        x = np.array([[-2.0, -0.5, 0.0, 0.5, 2.0]])
        out = act(Tensor(x)).data
        npt.assert_array_equal(out[0], [-0.5, -0.125, 0.0, 0.5, 2.0])


class TestInit:
    def test_seed_deterministic_construction(self):
        a = nn.ConvBlock(4, 6, 3, 2, np.random.default_rng(99))
        b = nn.ConvBlock(4, 6, 3, 2, np.random.default_rng(99))
        for (ka, va), (kb, vb) in zip(sorted(a.params().items()),
                                      sorted(b.params().items())):
            assert ka == kb
            assert np.array_equal(va.data, vb.data)

    def test_uniform_bounds_and_zero_bias(self):
        enc = nn.Encoder(16, 8, np.random.default_rng(0))
        k = 1.0 / math.sqrt(8)
        assert np.all(np.abs(enc.weight.data) <= k)
        assert np.all(enc.bias.data == 0.0)


class TestLinearSoftmaxCe:
    def test_zero_projection_gives_log_s(self):
        e = Tensor(np.random.default_rng(0).normal(size=(5, 1)))
        w = Tensor(np.zeros((7, 5)))
        loss = nn.linear_softmax_ce(e, w, 3)
        npt.assert_allclose(loss.item(), math.log(7), rtol=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        # logits favor the true label by 20 nats: loss <= log(1 + (S-1)e^-20)
        e = Tensor(np.array([[1.0]]))
        w = Tensor(np.array([[0.0], [20.0], [0.0], [0.0]]))
        loss = nn.linear_softmax_ce(e, w, 1)
        assert 0.0 < loss.item() < 1e-8

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        e0 = rng.normal(size=(4, 1))
        w0 = rng.normal(size=(6, 4))

        err_w = ad.check_gradient(
            lambda t: nn.linear_softmax_ce(Tensor(e0), t, 2), Tensor(w0), h=1e-5)
        err_e = ad.check_gradient(
            lambda t: nn.linear_softmax_ce(t, Tensor(w0), 2), Tensor(e0), h=1e-5)
        assert err_w < 1e-4 and err_e < 1e-4

    def test_batched_mean(self):
        rng = np.random.default_rng(6)
        e = Tensor(rng.normal(size=(3, 4, 1)))
        w = Tensor(rng.normal(size=(5, 4)))
        batched = nn.linear_softmax_ce(e, w, [0, 2, 4]).item()
        singles = [nn.linear_softmax_ce(Tensor(e.data[i]), w, lab).item()
                   for i, lab in enumerate([0, 2, 4])]
        npt.assert_allclose(batched, np.mean(singles), rtol=1e-12)

    def test_label_out_of_range(self):
        e = Tensor(np.zeros((4, 1)))
        w = Tensor(np.zeros((5, 4)))
        with pytest.raises(DataError, match="out of range"):
            nn.linear_softmax_ce(e, w, 5)
