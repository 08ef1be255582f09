import math

import numpy as np
import pytest

from conftest import MICRO
from ctf_retrieval import tensor as T
from ctf_retrieval.data import CorpusConfig, generate_corpus
from ctf_retrieval.errors import ConfigError, FormatError, TrainingError
from ctf_retrieval.evaluation import evaluate
from ctf_retrieval.layers import param
from ctf_retrieval.model import CrossModalRetriever, load_checkpoint
from ctf_retrieval.objective import A2I, I2A, LossWeights, build_mask, fine_score_matrix, masked_infonce
from ctf_retrieval.training import (
    TrainConfig,
    TrainState,
    batch_loss,
    clip_by_global_norm,
    decays,
    epoch_means,
    lr_at,
    optimizer_step,
    read_history,
    train,
    write_history,
)


class TestSchedule:
    @pytest.mark.parametrize("step, want", [(0, 0.0), (5, 5e-5), (10, 1e-4), (55, 5e-5), (100, 0.0)])
    def test_examples(self, step, want):
        assert lr_at(step, 100, 1e-4, 0.1) == pytest.approx(want, abs=1e-18)

    def test_piecewise_linear_and_peak(self):
        total = 137
        lrs = [lr_at(s, total, 2e-3) for s in range(total + 1)]
        assert max(lrs) == pytest.approx(2e-3, rel=1e-12)
        assert lrs[-1] == 0.0
        diffs = np.diff(lrs)
        warm = math.ceil(0.1 * total)
        np.testing.assert_allclose(diffs[:warm], diffs[0], rtol=1e-9)
        np.testing.assert_allclose(diffs[warm:], diffs[-1], rtol=1e-9)
        # continuity: no step larger than the steeper slope
        assert np.max(np.abs(diffs)) <= max(abs(diffs[0]), abs(diffs[-1])) * (1 + 1e-9)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(11, 10, 1e-4)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.peak_lr, cfg.warmup_fraction) == (8, 30, 1e-4, 0.1)
        assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) == (0.9, 0.999, 1e-8, 0.01)

    @pytest.mark.parametrize("bad", [{"warmup_fraction": 0.0}, {"warmup_fraction": 1.0},
                                     {"batch_size": 1}, {"lambda_c": 0.0, "lambda_f": 0.0}])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=3, seed=9)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochz": 3})


def scalar_state(value, name="w.weight"):
    p = param(np.array([value]))
    return TrainState(0, {name: p}, {name: np.zeros(1)}, {name: np.zeros(1)})


class TestOptimizer:
    def test_scalar_oracle(self):
        cfg = TrainConfig(weight_decay=0.0)
        state = scalar_state(1.0)
        optimizer_step(state, {"w.weight": np.array([1.0])}, 0.1, cfg)
        m = (1 - 0.9) * 1.0
        v = (1 - 0.999) * 1.0
        want = 1.0 - 0.1 * (m / (math.sqrt(v) + 1e-8))
        assert abs(state.params["w.weight"].data[0] - want) <= 1e-12
        # second step keeps accumulating moments without bias correction
        optimizer_step(state, {"w.weight": np.array([1.0])}, 0.1, cfg)
        m = 0.9 * m + 0.1
        v = 0.999 * v + 0.001
        want = want - 0.1 * (m / (math.sqrt(v) + 1e-8))
        assert abs(state.params["w.weight"].data[0] - want) <= 1e-12

    def test_zero_gradient_no_decay_is_noop(self):
        state = scalar_state(0.7)
        optimizer_step(state, {"w.weight": np.zeros(1)}, 0.1, TrainConfig(weight_decay=0.0))
        assert state.params["w.weight"].data[0] == 0.7

    def test_decay_only_on_weights(self):
        names = ["fc.weight", "fc.bias", "ln.gain", "ln.bias", "audio.cls"]
        params = {n: param(np.full(3, 2.0)) for n in names}
        state = TrainState(0, params, {n: np.zeros(3) for n in names}, {n: np.zeros(3) for n in names})
        optimizer_step(state, {n: np.zeros(3) for n in names}, 0.5, TrainConfig(weight_decay=0.01))
        np.testing.assert_allclose(params["fc.weight"].data, 2.0 - 0.5 * 0.01 * 2.0, rtol=0, atol=1e-15)
        for n in names[1:]:
            np.testing.assert_array_equal(params[n].data, 2.0)
        assert [decays(n) for n in names] == [True, False, False, False, False]

    def test_nan_gradient_raises(self):
        state = scalar_state(1.0)
        with pytest.raises(TrainingError):
            optimizer_step(state, {"w.weight": np.array([np.nan])}, 0.1, TrainConfig())

    def test_clipping(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(grads, 1.0) == 5.0
        assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, abs=1e-15)
        small = {"a": np.array([0.1])}
        clip_by_global_norm(small, 1.0)
        assert small["a"][0] == 0.1


def micro_corpus(num_images=6, captions=2, seed=1):
    return generate_corpus(CorpusConfig(num_images=num_images, captions_per_image=captions, roi_count=3,
                                        roi_feature_dim=MICRO.roi_feature_dim, signal_len=30, seed=seed,
                                        split_fractions=(0.5, 0.25, 0.25)))


class TestLoss:
    def test_fine_only_gradients_match(self, micro_model):
        corpus = micro_corpus()
        batch = np.array([0, 1, 2, 3])
        params = micro_model.parameters()
        _, _, total = batch_loss(micro_model, corpus, batch, LossWeights(0.0, 1.0, 1.0))
        g1 = T.grad(total, params)

        ids = [corpus.caption_image_ids[c] for c in batch]
        pos = np.array([corpus.image_index(i) for i in ids])
        a = micro_model.encode_audio(corpus.signals[batch])
        v = micro_model.encode_image(corpus.roi_features[pos], corpus.boxes[pos])
        Sf = fine_score_matrix(micro_model, a, v)
        M = build_mask(ids)
        Lf = masked_infonce(Sf, M, 1.0, A2I) + masked_infonce(Sf, M, 1.0, I2A)
        g2 = T.grad(Lf, params)
        for x, y in zip(g1, g2):
            assert x.tobytes() == y.tobytes()
        assert any(np.any(x) for x in g1)

    def test_full_model_gradient(self):
        model = CrossModalRetriever(MICRO)
        corpus = micro_corpus()
        batch = np.array([0, 2])
        err = T.finite_diff_check(lambda: batch_loss(model, corpus, batch, LossWeights())[2],
                                  model.parameters(), max_per_param=4, seed=2)
        assert err <= 1e-4

    def test_duplicate_captions_are_masked(self, micro_model):
        corpus = micro_corpus(captions=3)
        same = [c for c, i in enumerate(corpus.caption_image_ids) if i == corpus.image_ids[0]]
        batch = np.array(same + [5, 9])
        ids = [corpus.caption_image_ids[c] for c in batch]
        M = build_mask(ids)
        assert M[0, 1] == 0 and M[1, 2] == 0 and M[0, 3] == 1
        Lc, Lf, total = batch_loss(micro_model, corpus, batch, LossWeights())
        assert np.isfinite(total.item()) and total.item() > 0


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    corpus = micro_corpus(num_images=16, captions=2)
    cfg = TrainConfig(epochs=12, batch_size=4, peak_lr=3e-3, seed=1)
    model, state = train(corpus, MICRO, cfg, out / "m.ckpt", out / "h.csv")
    return corpus, model, state, out


class TestTraining:
    def test_loss_decreases(self, run):
        means = epoch_means(run[2].history)
        assert means[-1] < means[0]

    def test_history_file(self, run):
        corpus, _, state, out = run
        rows = read_history(out / "h.csv")
        assert len(rows) == state.step == 12 * (16 // 4)
        assert rows[0]["lr"] == 0.0
        for row, h in zip(rows, state.history):
            assert row["L"] == h["L"] and row["step"] == h["step"]
        assert abs(rows[5]["L"] - (0.1 * rows[5]["Lc"] + rows[5]["Lf"])) <= 1e-12

    def test_bad_history_file(self, tmp_path):
        (tmp_path / "h.csv").write_text("step,lr\n")
        with pytest.raises(FormatError):
            read_history(tmp_path / "h.csv")

    def test_history_round_trip(self, tmp_path):
        hist = [{"step": 0, "epoch": 0, "lr": 0.1 / 3, "Lc": 1 / 7, "Lf": 2 / 7, "L": 3 / 7}]
        write_history(hist, tmp_path / "h.csv")
        back = read_history(tmp_path / "h.csv")[0]
        assert back == {k: hist[0][k] for k in ("step", "lr", "Lc", "Lf", "L")}

    def test_checkpoint_preserves_metrics(self, run):
        corpus, model, _, out = run
        loaded = load_checkpoint(out / "m.ckpt")
        assert evaluate(model, corpus, "test", "ctf", k_c=3).dumps() == \
            evaluate(loaded, corpus, "test", "ctf", k_c=3).dumps()

    def test_same_seed_same_bytes(self, run, tmp_path):
        corpus, _, _, out = run
        cfg = TrainConfig(epochs=12, batch_size=4, peak_lr=3e-3, seed=1)
        train(corpus, MICRO, cfg, tmp_path / "again.ckpt")
        assert (out / "m.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_tiny_split_rejected(self):
        corpus = micro_corpus(num_images=4, captions=1)
        with pytest.raises(ConfigError):
            train(corpus, MICRO, TrainConfig(epochs=1, batch_size=4))
