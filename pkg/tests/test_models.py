import numpy as np
import pytest

from aaa_defense import autodiff as ad
from aaa_defense import models as mm
from aaa_defense.autodiff import Tensor

ARCHS_28 = ["madry-mnist", "cnn-small", "mlp"]
ARCHS_32 = ["resnet-tiny", "vgg-tiny", "dnn-small"]


class TestBuilders:
    @pytest.mark.parametrize("arch", ARCHS_28)
    def test_classifier_28(self, arch):
        m = mm.build_classifier(arch, 10, (1, 28, 28), seed=0)
        out = mm.forward_numpy(m, np.random.default_rng(0)
                               .random((2, 1, 28, 28), dtype=np.float32))
        assert out.shape == (2, 10)

    @pytest.mark.parametrize("arch", ARCHS_32)
    def test_classifier_32(self, arch):
        m = mm.build_classifier(arch, 10, (3, 32, 32), seed=0)
        out = mm.forward_numpy(m, np.random.default_rng(0)
                               .random((2, 3, 32, 32), dtype=np.float32))
        assert out.shape == (2, 10)

    @pytest.mark.parametrize("kind", ["conv-ae", "unet-ae"])
    def test_autoencoder_shape_preserving(self, kind):
        m = mm.build_autoencoder(kind, (1, 28, 28), seed=0)
        x = np.random.default_rng(0).random((2, 1, 28, 28), dtype=np.float32)
        out = mm.forward_numpy(m, x)
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1  # sigmoid output
        z = m.encode(Tensor(x[:1]))
        assert z.data.ndim == 2

    def test_deterministic_init(self):
        a = mm.build_classifier("mlp", 10, (1, 28, 28), seed=5)
        b = mm.build_classifier("mlp", 10, (1, 28, 28), seed=5)
        assert mm.param_digest(a) == mm.param_digest(b)
        c = mm.build_classifier("mlp", 10, (1, 28, 28), seed=6)
        assert mm.param_digest(a) != mm.param_digest(c)

    def test_unknown_arch(self):
        with pytest.raises(mm.ModelError):
            mm.build_classifier("resnet50", 10, (3, 32, 32))
        with pytest.raises(mm.ModelError):
            mm.build_autoencoder("vae", (1, 28, 28))

    def test_bad_input_shape(self):
        with pytest.raises(mm.ModelError):
            mm.build_classifier("madry-mnist", 10, (1, 27, 27))


class TestFreezeAndPipeline:
    def test_freeze_preserves_forward(self):
        m = mm.build_classifier("cnn-small", 10, (1, 28, 28), seed=0)
        x = np.random.default_rng(1).random((2, 1, 28, 28), dtype=np.float32)
        before = mm.forward_numpy(m, x)
        mm.freeze(m)
        assert mm.is_frozen(m)
        np.testing.assert_array_equal(before, mm.forward_numpy(m, x))

    def test_stack_checks_shapes(self):
        ae = mm.build_autoencoder("conv-ae", (1, 28, 28))
        clf32 = mm.build_classifier("vgg-tiny", 10, (3, 32, 32))
        with pytest.raises(mm.ModelError):
            mm.stack(ae, clf32)

    def test_pipeline_forward_is_composition(self):
        ae = mm.build_autoencoder("conv-ae", (1, 28, 28), seed=0)
        clf = mm.build_classifier("mlp", 10, (1, 28, 28), seed=0)
        pipe = mm.stack(ae, clf)
        x = np.random.default_rng(2).random((2, 1, 28, 28), dtype=np.float32)
        recon = np.clip(mm.forward_numpy(ae, x), 0, 1)
        np.testing.assert_allclose(mm.forward_numpy(pipe, x),
                                   mm.forward_numpy(clf, recon), rtol=1e-5)

    def test_predict_tie_breaks_low_index(self):
        class Const:
            input_shape = (1, 1, 1)

            def __call__(self, x):
                return Tensor(np.zeros((x.shape[0], 3), dtype=np.float32))

        preds = mm.predict(Const(), np.zeros((4, 1, 1, 1), dtype=np.float32))
        np.testing.assert_array_equal(preds, 0)


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        m = mm.build_classifier("cnn-small", 10, (1, 28, 28), seed=3)
        m.meta["note"] = "fixture"
        p = tmp_path / "m.ckpt"
        mm.save_checkpoint(m, p)
        back = mm.load_checkpoint(p)
        assert mm.param_digest(back) == mm.param_digest(m)
        assert back.arch_id == "cnn-small"
        assert back.meta["note"] == "fixture"
        for (na, pa), (nb, pb) in zip(m.named_parameters(),
                                      back.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_magic_and_version(self, tmp_path):
        p = tmp_path / "m.ckpt"
        mm.save_checkpoint(mm.build_classifier("mlp", 10, (1, 28, 28)), p)
        raw = p.read_bytes()
        assert raw[:8] == b"AAACKPT1"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTMAGIC" + raw[8:])
        with pytest.raises(mm.CheckpointError):
            mm.load_checkpoint(bad)
        trunc = tmp_path / "trunc.ckpt"
        trunc.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(mm.CheckpointError):
            mm.load_checkpoint(trunc)

    def test_frozen_flag_round_trips(self, tmp_path):
        m = mm.freeze(mm.build_classifier("mlp", 10, (1, 28, 28)))
        p = tmp_path / "f.ckpt"
        mm.save_checkpoint(m, p)
        assert mm.is_frozen(mm.load_checkpoint(p))

    def test_autoencoder_round_trip(self, tmp_path):
        ae = mm.build_autoencoder("unet-ae", (1, 28, 28), seed=2)
        p = tmp_path / "ae.ckpt"
        mm.save_checkpoint(ae, p)
        back = mm.load_checkpoint(p)
        x = np.random.default_rng(0).random((1, 1, 28, 28), dtype=np.float32)
        np.testing.assert_array_equal(mm.forward_numpy(ae, x),
                                      mm.forward_numpy(back, x))

    def test_param_digest_tracks_values(self):
        m = mm.build_classifier("mlp", 10, (1, 28, 28), seed=1)
        d0 = mm.param_digest(m)
        m.parameters()[0].data[0, 0] += 1.0
        assert mm.param_digest(m) != d0
