import numpy as np
import pytest

from conftest import MICRO, SMALL, random_boxes
from ctf_retrieval.errors import FormatError, InvalidInputError, ShapeError
from ctf_retrieval.model import (
    AudioInput,
    CrossModalBlock,
    CrossModalRetriever,
    ImageInput,
    ModelConfig,
    coarse_score,
    load_checkpoint,
    save_checkpoint,
)
from ctf_retrieval.tensor import Tensor, finite_diff_check


def image(rng, cfg, r=8):
    return rng.normal(size=(r, cfg.roi_feature_dim)), random_boxes(rng, (r,))


def params_under(model, prefix):
    return [p for n, p in model.named_parameters() if n.startswith(prefix)]


class TestAudioEncoder:
    def test_length_arithmetic(self, rng):
        cfg = ModelConfig(model_dim=16, num_heads=2)
        enc = CrossModalRetriever(cfg).encode_audio(rng.normal(size=64))
        assert enc.hi_res.shape == (14, 16)
        assert enc.cls_and_lo_res.shape == (4, 16)
        np.testing.assert_array_equal(enc.cls_a.data, enc.cls_and_lo_res.data[0])

    def test_deterministic(self, small_model, rng):
        x = rng.normal(size=64)
        a = small_model.encode_audio(x)
        b = small_model.encode_audio(AudioInput(x.copy()))
        assert a.cls_and_lo_res.data.tobytes() == b.cls_and_lo_res.data.tobytes()

    def test_batched_equals_single(self, small_model, rng):
        x = rng.normal(size=(3, 40))
        batch = small_model.encode_audio(x)
        for i in range(3):
            np.testing.assert_allclose(batch.cls_a.data[i], small_model.encode_audio(x[i]).cls_a.data,
                                       rtol=0, atol=1e-13)

    def test_too_short_signal(self, small_model):
        need = small_model.cfg.min_signal_length()
        small_model.encode_audio(np.zeros(need))
        with pytest.raises(InvalidInputError):
            small_model.encode_audio(np.zeros(need - 1))

    def test_gradient_of_cls(self, micro_model, rng):
        x = rng.normal(size=40)
        params = [p for n, p in micro_model.named_parameters()
                  if n.startswith(("audio.conv2", "audio.trm"))]
        err = finite_diff_check(lambda: micro_model.encode_audio(x).cls_a.sum(), params)
        assert err <= 1e-4

    def test_cls_bypasses_conv2(self, small_model, rng):
        x = rng.normal(size=64)
        before = small_model.encode_audio(x)
        for p in params_under(small_model, "audio.conv2"):
            p.data = p.data + 0.3
        after = small_model.encode_audio(x)
        np.testing.assert_array_equal(before.hi_res.data, after.hi_res.data)

    def test_trm2_changes_cls_but_not_hi_res(self, small_model, rng):
        x = rng.normal(size=64)
        before = small_model.encode_audio(x)
        for p in params_under(small_model, "audio.trm2"):
            p.data = p.data + 0.3
        after = small_model.encode_audio(x)
        np.testing.assert_array_equal(before.hi_res.data, after.hi_res.data)
        assert not np.allclose(before.cls_a.data, after.cls_a.data)


class TestImageEncoder:
    def test_shape(self, small_model, rng):
        enc = small_model.encode_image(*image(rng, SMALL))
        assert enc.tokens.shape == (9, SMALL.model_dim)
        np.testing.assert_array_equal(enc.cls_i.data, enc.tokens.data[0])

    def test_region_permutation_invariance(self, small_model, rng):
        feats, boxes = image(rng, SMALL)
        perm = rng.permutation(8)
        a = small_model.encode_image(feats, boxes).cls_i.data
        b = small_model.encode_image(ImageInput(feats[perm], boxes[perm])).cls_i.data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("bad", [
        [[0.5, 0.1, 0.4, 0.9]],     # x1 > x2
        [[0.1, 0.6, 0.4, 0.6]],     # y1 == y2
        [[-0.1, 0.1, 0.4, 0.9]],    # outside [0, 1]
    ])
    def test_malformed_boxes(self, small_model, rng, bad):
        with pytest.raises(InvalidInputError):
            small_model.encode_image(rng.normal(size=(1, SMALL.roi_feature_dim)), np.array(bad))

    def test_feature_width_checked(self, small_model, rng):
        with pytest.raises(ShapeError):
            small_model.encode_image(rng.normal(size=(2, 3)), random_boxes(rng, (2,)))

    def test_gradient_of_cls(self, micro_model, rng):
        feats, boxes = image(rng, MICRO, r=4)
        params = params_under(micro_model, "image.")
        err = finite_diff_check(lambda: micro_model.encode_image(feats, boxes).cls_i.sum(), params)
        assert err <= 1e-4


class TestCrossModal:
    def test_block_shapes(self, rng):
        block = CrossModalBlock(SMALL, rng)
        a, v = block(Tensor(rng.normal(size=(4, 16))), Tensor(rng.normal(size=(9, 16))))
        assert a.shape == (4, 16) and v.shape == (9, 16)

    def test_zeroed_output_projections_give_identity(self, rng):
        block = CrossModalBlock(SMALL, rng)
        for name, p in block.named_parameters():
            if name.endswith(("out.weight", "fc2.weight")):
                p.data = np.zeros_like(p.data)
        a, v = rng.normal(size=(4, 16)), rng.normal(size=(9, 16))
        a2, v2 = block(Tensor(a), Tensor(v))
        np.testing.assert_array_equal(a2.data, a)
        np.testing.assert_array_equal(v2.data, v)

    def test_block_gradient(self, rng):
        block = CrossModalBlock(MICRO, rng)
        a, v = Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=(5, 8)))

        def loss():
            x, y = block(a, v)
            return x.sum() + (y * y).sum()

        assert finite_diff_check(loss, block.parameters()) <= 1e-4

    def test_block_width_mismatch(self, rng):
        block = CrossModalBlock(SMALL, rng)
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((2, 16))), Tensor(np.zeros((2, 8))))

    def test_fine_score_deterministic_and_region_invariant(self, small_model, rng):
        x = rng.normal(size=64)
        feats, boxes = image(rng, SMALL)
        perm = rng.permutation(8)
        a = small_model.encode_audio(x)
        s1 = small_model.fine_score(a, small_model.encode_image(feats, boxes)).item()
        s2 = small_model.fine_score(small_model.encode_audio(x), small_model.encode_image(feats, boxes)).item()
        s3 = small_model.fine_score(a, small_model.encode_image(feats[perm], boxes[perm])).item()
        assert s1 == s2
        assert abs(s1 - s3) <= 1e-9

    def test_fine_score_gradient(self, micro_model, rng):
        x = rng.normal(size=40)
        feats, boxes = image(rng, MICRO, r=3)
        params = params_under(micro_model, "xmodal.")

        def loss():
            return micro_model.fine_score(micro_model.encode_audio(x), micro_model.encode_image(feats, boxes))

        assert finite_diff_check(loss, params) <= 1e-4

    def test_forward_pass_counter(self, small_model, rng):
        a = small_model.encode_audio(rng.normal(size=(3, 64)))
        v = small_model.encode_image(rng.normal(size=(3, 8, 6)), random_boxes(rng, (3, 8)))
        before = small_model.forward_passes
        small_model.fine_scores(a.cls_and_lo_res, v.tokens)
        assert small_model.forward_passes - before == 3


class TestCoarseScore:
    def test_basis_vectors(self):
        e1, e2 = np.eye(3)[0], np.eye(3)[1]
        assert coarse_score(e1, e1).item() == 1.0
        assert coarse_score(e1, e2).item() == 0.0

    def test_symmetric_and_matches_scalar_dot(self, rng):
        a, b = rng.normal(size=48), rng.normal(size=48)
        oracle = sum(float(x) * float(y) for x, y in zip(a, b))
        assert coarse_score(a, b).item() == coarse_score(b, a).item()
        assert abs(coarse_score(a, b).item() - oracle) <= 1e-12

    def test_depends_only_on_cls(self, small_model, rng):
        a = small_model.encode_audio(rng.normal(size=64))
        v = small_model.encode_image(*image(rng, SMALL))
        direct = coarse_score(a, v).item()
        stored = coarse_score(a.cls_a.data.copy(), v.cls_i.data.copy()).item()
        assert direct == stored


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_model, path)
        loaded = load_checkpoint(path)
        assert loaded.cfg == small_model.cfg
        for (n1, p1), (n2, p2) in zip(small_model.named_parameters(), loaded.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        save_checkpoint(loaded, tmp_path / "again.ckpt")
        assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_corrupt_checkpoint(self, small_model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_model, path)
        raw = path.read_bytes()
        path.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            load_checkpoint(path)
        path.write_bytes(raw[:-16])
        with pytest.raises(FormatError):
            load_checkpoint(path)
