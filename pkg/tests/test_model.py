import numpy as np
import numpy.testing as npt
import pytest

from tsekit import autodiff as ad
from tsekit import dsp, model
from tsekit.autodiff import Tensor
from tsekit.errors import DataError
from tsekit.gradsuite import check_parameter_gradients


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.tape().clear()
    yield
    ad.tape().clear()


def make_extractor(ipd_mode="none", ipd_dim=0, seed=0):
    cfg = model.miniature_config(ipd_mode, 1, ipd_dim)
    return model.ExtractorNet(cfg, np.random.default_rng(seed))


def make_ipd(n_samples, frame=16, hop=8, seed=1):
    rng = np.random.default_rng(seed)
    sig = dsp.AudioSignal(rng.normal(size=(2, n_samples)) * 0.2)
    return dsp.ipd_features(dsp.stft(sig, frame, hop))


class TestTopologyConfig:
    def test_embedding_dim_defaults_to_b(self):
        cfg = model.TopologyConfig(B=24)
        assert cfg.embedding_dim == 24

    def test_embedding_dim_must_equal_b(self):
        with pytest.raises(DataError, match="embedding_dim"):
            model.TopologyConfig(B=24, embedding_dim=16)

    def test_baseline_rejects_internal_ipd(self):
        with pytest.raises(DataError, match="baseline"):
            model.TopologyConfig(num_outputs=2, ipd_mode="internal", ipd_dim=18)

    def test_ipd_mode_requires_dim(self):
        with pytest.raises(DataError, match="ipd_dim"):
            model.TopologyConfig(ipd_mode="input")

    def test_presets(self):
        paper = model.TopologyConfig(**model.PRESETS["paper"])
        assert (paper.N, paper.L, paper.B, paper.H, paper.P, paper.X, paper.R) == \
            (256, 20, 256, 512, 3, 8, 4)


class TestAdaptationLayer:
    def test_all_ones_is_identity(self):
        h = Tensor(np.random.default_rng(0).normal(size=(4, 9)))
        out = model.adaptation_layer(h, Tensor(np.ones((4, 1))))
        npt.assert_array_equal(out.data, h.data)

    def test_scaling_is_linear_in_embedding(self):
        rng = np.random.default_rng(1)
        h = Tensor(rng.normal(size=(4, 9)))
        e = Tensor(rng.normal(size=(4, 1)))
        base = model.adaptation_layer(h, e).data
        scaled = model.adaptation_layer(h, Tensor(3.5 * e.data)).data
        npt.assert_allclose(scaled, 3.5 * base, rtol=1e-12)

    def test_zero_embedding_makes_mask_input_independent(self):
        net = make_extractor()
        rng = np.random.default_rng(2)
        e0 = Tensor(np.zeros((net.cfg.B, 1)))
        _, _, mask_a = net.forward(Tensor(rng.normal(size=(1, 60))), e=e0)
        _, _, mask_b = net.forward(Tensor(rng.normal(size=(1, 60))), e=e0)
        npt.assert_array_equal(mask_a.data, mask_b.data)

    def test_dim_mismatch(self):
        with pytest.raises(Exception, match="dim"):
            model.adaptation_layer(Tensor(np.zeros((4, 9))), Tensor(np.zeros((3, 1))))


class TestExtractor:
    @pytest.mark.parametrize("n", [40, 100, 163])
    def test_output_length_matches_input(self, n):
        net = make_extractor()
        rng = np.random.default_rng(3)
        wav, _, _ = net.forward(Tensor(rng.normal(size=(1, n)) * 0.3),
                                a=Tensor(rng.normal(size=(1, 60)) * 0.3))
        assert wav.shape == (1, n)

    def test_mask_in_open_unit_interval(self):
        net = make_extractor()
        rng = np.random.default_rng(4)
        _, _, mask = net.forward(Tensor(rng.normal(size=(1, 80))),
                                 a=Tensor(rng.normal(size=(1, 60))))
        assert np.all(mask.data > 0.0) and np.all(mask.data < 1.0)

    def test_embedding_shape_and_finiteness_on_zero_input(self):
        net = make_extractor()
        e = net.embed(Tensor(np.zeros((1, 60))))
        assert e.shape == (net.cfg.B, 1)
        assert np.all(np.isfinite(e.data))
        e2 = net.embed(Tensor(np.zeros((1, 60))))
        npt.assert_array_equal(e.data, e2.data)

    def test_ipd_argument_policing(self):
        rng = np.random.default_rng(5)
        y = Tensor(rng.normal(size=(1, 60)))
        a = Tensor(rng.normal(size=(1, 60)))
        feats = make_ipd(60)

        with pytest.raises(DataError, match="no IPD"):
            make_extractor().forward(y, a=a, ipd=feats)
        with pytest.raises(DataError, match="requires IPD"):
            make_extractor("input", feats.shape[1]).forward(y, a=a)

    def test_extract_is_deterministic_and_gradient_free(self):
        net = make_extractor()
        rng = np.random.default_rng(6)
        mix = rng.normal(size=120) * 0.3
        adapt = rng.normal(size=80) * 0.3
        out1 = net.extract(mix, adapt)
        out2 = net.extract(mix, adapt)
        assert np.array_equal(out1, out2)
        assert out1.shape == (120,)
        assert len(ad.tape()) == 0

    def test_batched_forward_matches_single(self):
        net = make_extractor()
        rng = np.random.default_rng(7)
        y = rng.normal(size=(3, 1, 80)) * 0.3
        a = rng.normal(size=(3, 1, 60)) * 0.3
        wav_b, _, _ = net.forward(Tensor(y), a=Tensor(a))
        for i in range(3):
            wav_i, _, _ = net.forward(Tensor(y[i]), a=Tensor(a[i]))
            npt.assert_allclose(wav_b.data[i], wav_i.data, atol=1e-12)


class TestStructure:
    def test_input_merge_precedes_block0(self):
        net = make_extractor("input", 18)
        s = net.stage_names
        assert s.index("ipd_input_merge") < s.index("block_0")

    def test_internal_merge_follows_adaptation(self):
        net = make_extractor("internal", 18)
        s = net.stage_names
        assert s.index("adaptation") < s.index("ipd_internal_merge") < s.index("block_1")

    def test_plain_order(self):
        s = make_extractor().stage_names
        assert s.index("block_0") < s.index("adaptation") < s.index("block_1")


class TestSeparator:
    def make(self, ipd_mode="none", ipd_dim=0, seed=0):
        cfg = model.miniature_config(ipd_mode, 2, ipd_dim)
        return model.SeparatorNet(cfg, np.random.default_rng(seed))

    def test_both_outputs_have_input_length(self):
        net = self.make()
        rng = np.random.default_rng(8)
        x1, x2 = net.forward(Tensor(rng.normal(size=(1, 97))))
        assert x1.shape == (1, 97) and x2.shape == (1, 97)

    def test_symmetric_head_gives_identical_outputs(self):
        net = self.make()
        n = net.cfg.N
        net.mask_conv.weight.data[n:] = net.mask_conv.weight.data[:n]
        net.mask_conv.bias.data[n:] = net.mask_conv.bias.data[:n]
        rng = np.random.default_rng(9)
        x1, x2 = net.forward(Tensor(rng.normal(size=(1, 80))))
        npt.assert_array_equal(x1.data, x2.data)

    def test_internal_mode_rejected(self):
        with pytest.raises(DataError, match="baseline"):
            self.make("internal", 18)


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        net = make_extractor(seed=11)
        records = {f"net.{k}": v.data for k, v in net.params().items()}
        meta = {"epoch": 3, "alpha": 10.0, "note": "unit"}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.save_checkpoint(p1, net.cfg, records, meta)
        cfg2, rec2, meta2 = model.load_checkpoint(p1)
        model.save_checkpoint(p2, cfg2, rec2, meta2)
        assert p1.read_bytes() == p2.read_bytes()
        assert meta2 == meta

    def test_net_round_trips_through_records(self, tmp_path):
        net = make_extractor(seed=12)
        path = tmp_path / "m.ckpt"
        records = {f"net.{k}": v.data for k, v in net.params().items()}
        model.save_checkpoint(path, net.cfg, records, {})
        cfg, rec, _ = model.load_checkpoint(path)
        net2 = model.net_from_records(cfg, rec)

        rng = np.random.default_rng(13)
        mix = rng.normal(size=100) * 0.3
        adapt = rng.normal(size=60) * 0.3
        npt.assert_array_equal(net.extract(mix, adapt), net2.extract(mix, adapt))

    def test_missing_parameter_detected(self, tmp_path):
        net = make_extractor(seed=14)
        records = {f"net.{k}": v.data for k, v in net.params().items()}
        records.pop("net.decoder.weight")
        path = tmp_path / "broken.ckpt"
        model.save_checkpoint(path, net.cfg, records, {})
        cfg, rec, _ = model.load_checkpoint(path)
        with pytest.raises(DataError, match="missing parameter"):
            model.net_from_records(cfg, rec)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            model.load_checkpoint(path)


def test_miniature_end_to_end_gradcheck_single_case():
    # full matrix runs in the acceptance suite; one representative here
    cases = model.model_gradient_cases(seed=5)
    name, build_loss, params = cases[5]  # extractor, internal ipd, alpha=10
    assert "internal" in name
    err = check_parameter_gradients(build_loss, params)
    assert err < 1e-4
