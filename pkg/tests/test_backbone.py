"""Backbone tests: conv2d, batchnorm, basic blocks, embedder, training."""

import numpy as np
import pytest

import gtfc.tensor as T
from gtfc.backbone import (
    BasicBlock,
    BasicBlockSpec,
    BatchNorm2d,
    BatchTooSmall,
    CheckpointError,
    NonFiniteLoss,
    SgdMomentum,
    SpeakerEmbedder,
    TooShort,
    conv2d,
    cross_entropy,
    desk_spec,
    fit,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
    temporal_pool,
    train_step,
)
from gtfc.blocks import GtfcConfig
from gtfc.tensor import ShapeMismatch, Tensor


@pytest.fixture
def f64():
    prev = T.get_default_dtype()
    T.set_default_dtype("f64")
    yield
    T.set_default_dtype(prev)


def naive_conv2d(x, w, stride, pad):
    """Direct 6-loop cross-correlation reference."""
    n, c_in, f, t = x.shape
    c_out, _, kh, kw = w.shape
    sf, st = stride
    pf, pt = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pf, pf), (pt, pt)))
    fo = (f + 2 * pf - kh) // sf + 1
    to = (t + 2 * pt - kw) // st + 1
    out = np.zeros((n, c_out, fo, to))
    for b in range(n):
        for co in range(c_out):
            for i in range(fo):
                for j in range(to):
                    acc = 0.0
                    for ci in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ci, i * sf + u, j * st + v] * w[co, ci, u, v]
                    out[b, co, i, j] = acc
    return out


class TestConv2d:

    def test_1x1_identity_kernel(self, f64):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 4, 5))
        weight = np.eye(3).reshape(3, 3, 1, 1)
        out = conv2d(Tensor(x), Tensor(weight)).numpy()
        np.testing.assert_array_equal(out, x)

    def test_3x3_ones_kernel_on_ones(self, f64):
        x = np.ones((1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride=1, pad=1).numpy()
        expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
        np.testing.assert_array_equal(out[0], expected)

    def test_matches_naive_reference(self, f64):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 5, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        for stride, pad in [(1, 1), (2, 1), (1, 0), (2, 0)]:
            out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).numpy()
            ref = naive_conv2d(x, w, (stride, stride), (pad, pad))
            np.testing.assert_allclose(out, ref, atol=1e-6)
        w1 = rng.standard_normal((2, 3, 1, 1))
        out = conv2d(Tensor(x), Tensor(w1), stride=2, pad=0).numpy()
        np.testing.assert_allclose(out, naive_conv2d(x, w1, (2, 2), (0, 0)), atol=1e-6)

    def test_output_extent_formula(self, f64):
        rng = np.random.default_rng(2)
        for _ in range(10):
            f, t = int(rng.integers(3, 12)), int(rng.integers(3, 12))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            x = rng.standard_normal((1, 2, f, t))
            w = rng.standard_normal((3, 2, 3, 3))
            fo = (f + 2 * pad - 3) // stride + 1
            to = (t + 2 * pad - 3) // stride + 1
            if fo < 1 or to < 1:
                continue
            out = conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
            assert out.shape == (1, 3, fo, to)

    def test_kernel_and_channel_validation(self, f64):
        x = Tensor(np.zeros((1, 3, 5, 5)))
        with pytest.raises(ShapeMismatch):
            conv2d(x, Tensor(np.zeros((2, 4, 3, 3))))
        with pytest.raises(ShapeMismatch):
            conv2d(x, Tensor(np.zeros((2, 3, 5, 5))))

    def test_gradcheck(self, f64):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 2, 4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)

        def loss(x_in, w_in):
            return T.reduce_sum(conv2d(x_in, w_in, stride=2, pad=1))

        report = T.gradcheck(loss, [x, w], tol=1e-6)
        assert report.max_rel_error < 1e-6, report


class TestBatchNorm:

    def test_train_mode_normalizes_batch(self, f64):
        rng = np.random.default_rng(4)
        bn = BatchNorm2d(3)
        x = Tensor(rng.normal(2.0, 4.0, size=(4, 3, 5, 6)))
        out = bn.forward(x, train=True).numpy()
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_eval_identity_with_fresh_running_stats(self, f64):
        bn = BatchNorm2d(3)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 4, 4))
        out = bn.forward(Tensor(x), train=False).numpy()
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_constant_channel_maps_to_zero(self, f64):
        bn = BatchNorm2d(2)
        x = Tensor(np.full((3, 2, 4, 4), 1.5))
        out = bn.forward(x, train=True).numpy()
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_batch_too_small(self, f64):
        bn = BatchNorm2d(2)
        with pytest.raises(BatchTooSmall):
            bn.forward(Tensor(np.ones((1, 2, 1, 1))), train=True)

    def test_running_stats_momentum(self, f64):
        bn = BatchNorm2d(2)
        rng = np.random.default_rng(6)
        x = rng.normal(3.0, 2.0, size=(4, 2, 3, 3))
        bn.forward(Tensor(x), train=True)
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        np.testing.assert_allclose(bn.running_mean, 0.1 * mu, rtol=1e-10)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var, rtol=1e-10)

    def test_eval_uses_running_stats(self, f64):
        bn = BatchNorm2d(2)
        bn.running_mean = np.array([1.0, -2.0])
        bn.running_var = np.array([4.0, 9.0])
        x = np.ones((1, 2, 2, 2))
        out = bn.forward(Tensor(x), train=False).numpy()
        expected = (x - bn.running_mean.reshape(1, 2, 1, 1)) / \
            np.sqrt(bn.running_var.reshape(1, 2, 1, 1) + 1e-5)
        np.testing.assert_allclose(out, expected, rtol=1e-6)

    def test_gradcheck_train_mode(self, f64):
        rng = np.random.default_rng(7)
        bn = BatchNorm2d(2)
        bn.gamma = Tensor(rng.normal(size=2), requires_grad=True)
        bn.beta = Tensor(rng.normal(size=2), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 2, 3, 2)), requires_grad=True)

        def loss(x_in, gamma, beta):
            bn.gamma, bn.beta = gamma, beta
            out = bn.forward(x_in, train=True, update=False)
            return T.reduce_sum(out * out)

        report = T.gradcheck(loss, [x, bn.gamma, bn.beta], tol=1e-6)
        assert report.max_rel_error < 1e-6, report


class TestBasicBlock:

    def test_zero_second_conv_gives_swish_x(self, f64):
        rng = np.random.default_rng(8)
        block = BasicBlock(BasicBlockSpec(4, 4, 1), GtfcConfig(), rng=rng)
        block.conv2_weight = Tensor(np.zeros_like(block.conv2_weight.data),
                                    requires_grad=True)
        x = rng.standard_normal((1, 4, 6, 8))
        out = block.forward(Tensor(x), train=False).numpy()
        expected = x * (1.0 / (1.0 + np.exp(-x)))
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_c_gtfc_at_init_matches_none(self, f64):
        cfg = GtfcConfig(G=2)
        spec_none = BasicBlockSpec(4, 8, 2, insert_kind="none")
        spec_c = BasicBlockSpec(4, 8, 2, insert_kind="c_gtfc")
        a = BasicBlock(spec_none, cfg, rng=np.random.default_rng(9))
        b = BasicBlock(spec_c, cfg, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.conv1_weight.numpy(), b.conv1_weight.numpy())
        x = np.random.default_rng(10).standard_normal((2, 4, 6, 8))
        out_a = a.forward(Tensor(x), train=False).numpy()
        out_b = b.forward(Tensor(x), train=False).numpy()
        np.testing.assert_array_equal(out_b, out_a)

    def test_tf_gtfc_at_init_is_sigma_one_substitution(self, f64):
        cfg = GtfcConfig(G=2)
        spec_tf = BasicBlockSpec(4, 4, 1, insert_kind="tf_gtfc", insert_pos="after_bn")
        block = BasicBlock(spec_tf, cfg, rng=np.random.default_rng(11))
        x = np.random.default_rng(12).standard_normal((1, 4, 5, 7))
        out = block.forward(Tensor(x), train=False).numpy()

        xt = Tensor(x)
        h = conv2d(xt, block.conv1_weight, stride=1, pad=1)
        h = T.swish(block.bn1.forward(h, train=False))
        h = conv2d(h, block.conv2_weight, stride=1, pad=1)
        h = block.bn2.forward(h, train=False)
        sigma_one = 1.0 / (1.0 + np.exp(-1.0))
        expected = T.swish(h * sigma_one + xt).numpy()
        np.testing.assert_allclose(out, expected, rtol=1e-9)

    def test_stride_two_shape(self, f64):
        block = BasicBlock(BasicBlockSpec(16, 32, 2), GtfcConfig(),
                           rng=np.random.default_rng(13))
        x = np.random.default_rng(14).standard_normal((16, 32, 300))
        out = block.forward(Tensor(x), train=False)
        assert out.shape == (32, 16, 150)

    def test_projection_only_when_needed(self, f64):
        same = BasicBlock(BasicBlockSpec(8, 8, 1), GtfcConfig(),
                          rng=np.random.default_rng(15))
        assert not same.projects
        widened = BasicBlock(BasicBlockSpec(8, 16, 1), GtfcConfig(),
                             rng=np.random.default_rng(16))
        assert widened.projects
        strided = BasicBlock(BasicBlockSpec(8, 8, 2), GtfcConfig(),
                             rng=np.random.default_rng(17))
        assert strided.projects


class TestTemporalPool:

    def test_single_frame_flattens(self, f64):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((3, 4, 1))
        out = temporal_pool(Tensor(x)).numpy()
        np.testing.assert_allclose(out, x[:, :, 0].reshape(-1), rtol=1e-12)

    def test_constant_in_time(self, f64):
        rng = np.random.default_rng(19)
        frame = rng.standard_normal((3, 4, 1))
        x = np.repeat(frame, 7, axis=2)
        out = temporal_pool(Tensor(x)).numpy()
        np.testing.assert_allclose(out, frame.reshape(-1), rtol=1e-9)

    def test_duplication_invariance(self, f64):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((3, 4, 9))
        once = temporal_pool(Tensor(x)).numpy()
        twice = temporal_pool(Tensor(np.concatenate([x, x], axis=2))).numpy()
        np.testing.assert_allclose(twice, once, atol=1e-6)


class TestSpeakerEmbedder:

    def test_eval_embedding_deterministic(self):
        model = SpeakerEmbedder(desk_spec(4, "c_gtfc", gtfc=GtfcConfig(G=4)), seed=21)
        rng = np.random.default_rng(22)
        feats = rng.standard_normal((40, 64))
        e1 = model.embed(feats)
        e2 = model.embed(feats)
        assert e1.shape == (16,)
        np.testing.assert_array_equal(e1, e2)

    def test_embedding_dim_matches_spec(self):
        from gtfc.backbone import ModelSpec
        spec = ModelSpec([4, 8], [1, 1], 12, 5, input_mels=16)
        model = SpeakerEmbedder(spec, seed=23)
        feats = np.random.default_rng(24).standard_normal((20, 16))
        assert model.embed(feats).shape == (12,)

    def test_too_short_raises(self):
        model = SpeakerEmbedder(desk_spec(4), seed=25)
        with pytest.raises(TooShort):
            model.embed(np.zeros((7, 64)))

    def test_eval_invariant_to_batch_composition(self, f64):
        model = SpeakerEmbedder(desk_spec(4, "tf_gtfc", gtfc=GtfcConfig(G=4)), seed=26)
        rng = np.random.default_rng(27)
        maps = rng.standard_normal((3, 1, 64, 24))
        emb_batch, _ = model.forward(Tensor(maps), train=False)
        for i in range(3):
            emb_one, _ = model.forward(Tensor(maps[i:i + 1]), train=False)
            np.testing.assert_allclose(emb_batch.numpy()[i], emb_one.numpy()[0],
                                       rtol=1e-12)

    def test_c_gtfc_insertion_is_identity_at_init(self):
        base = SpeakerEmbedder(desk_spec(4, "none"), seed=28)
        with_block = SpeakerEmbedder(desk_spec(4, "c_gtfc", gtfc=GtfcConfig(G=4)),
                                     seed=28)
        feats = np.random.default_rng(29).standard_normal((30, 64))
        np.testing.assert_allclose(with_block.embed(feats), base.embed(feats),
                                   atol=1e-6)

    def test_tf_gtfc_at_init_equals_sigma_scaled_trunk(self, f64):
        cfg = GtfcConfig(G=4)
        base = SpeakerEmbedder(desk_spec(4, "none", gtfc=cfg), seed=30)
        with_tf = SpeakerEmbedder(desk_spec(4, "tf_gtfc", gtfc=cfg), seed=30)
        sigma_one = 1.0 / (1.0 + np.exp(-1.0))
        for block in base.blocks:
            block.bn2.gamma = Tensor(block.bn2.gamma.numpy() * sigma_one,
                                     requires_grad=True)
        feats = np.random.default_rng(31).standard_normal((30, 64))
        np.testing.assert_allclose(with_tf.embed(feats), base.embed(feats),
                                   rtol=1e-9, atol=1e-12)

    def test_param_ledger_matches_enumeration(self):
        cfg = GtfcConfig(G=4)
        for kind in ["none", "se", "c_gtfc", "tf_gtfc"]:
            model = SpeakerEmbedder(desk_spec(6, kind, gtfc=cfg), seed=32)
            ledger = model.param_ledger()
            assert ledger["inserted"] == ledger["inserted_by_formula"]
            total = sum(t.size for t in model.trainable().values())
            assert ledger["total"] == total

    def test_feature_shape_validated(self):
        model = SpeakerEmbedder(desk_spec(4), seed=33)
        with pytest.raises(ShapeMismatch):
            model.features_to_map(np.zeros((40, 32)))


class TestTraining:

    def _dataset(self, num_speakers=4, per_speaker=2, frames=40, seed=34):
        rng = np.random.default_rng(seed)
        data = []
        for spk in range(num_speakers):
            offset = rng.normal(0.0, 2.0, size=64)
            for _ in range(per_speaker):
                feats = rng.standard_normal((frames, 64)) + offset
                data.append((feats, spk))
        return data

    def test_initial_loss_is_log_num_speakers(self):
        model = SpeakerEmbedder(desk_spec(8), seed=35)
        data = self._dataset(num_speakers=8, per_speaker=1)
        batch = [(feats, label) for feats, label in data]
        opt = SgdMomentum(model.trainable(), lr=1e-3)
        loss = train_step(batch, model, opt)
        assert abs(loss - np.log(8)) <= 0.1 * np.log(8)

    def test_zero_lr_keeps_parameters(self):
        model = SpeakerEmbedder(desk_spec(4, "c_gtfc", gtfc=GtfcConfig(G=4)), seed=36)
        data = self._dataset()
        opt = SgdMomentum(model.trainable(), lr=0.0)
        before = {k: v.numpy().copy() for k, v in model.trainable().items()}
        loss1 = train_step(data[:4], model, opt)
        loss2 = train_step(data[:4], model, opt)
        assert loss1 == loss2
        for k, v in model.trainable().items():
            np.testing.assert_array_equal(v.numpy(), before[k])

    def test_single_sample_overfit(self):
        model = SpeakerEmbedder(desk_spec(4), seed=37)
        feats = np.random.default_rng(38).standard_normal((120, 64))
        opt = SgdMomentum(model.trainable(), lr=1e-3)
        losses = [train_step([(feats, 2)], model, opt) for _ in range(500)]
        assert min(losses) < 0.01, f"min loss {min(losses):.4f}"

    def test_nonfinite_loss_raises(self):
        model = SpeakerEmbedder(desk_spec(4), seed=39)
        model.embed_weight.data[:] = np.nan
        data = self._dataset()
        opt = SgdMomentum(model.trainable(), lr=1e-3)
        with pytest.raises(NonFiniteLoss):
            train_step(data[:2], model, opt)

    def test_cross_entropy_against_scalar_oracle(self, f64):
        rng = np.random.default_rng(40)
        logits = rng.standard_normal((5, 3))
        labels = rng.integers(0, 3, size=5)
        loss = cross_entropy(Tensor(logits), labels).item()
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.log(probs[np.arange(5), labels]).mean()
        np.testing.assert_allclose(loss, expected, rtol=1e-9)

    def test_fit_is_deterministic_under_seed(self):
        def run(seed):
            model = SpeakerEmbedder(desk_spec(4), seed=41)
            data = self._dataset(frames=30)
            result = fit(model, data, epochs=2, batch_size=4, seed=seed)
            probe = model.trainable()["embed/weight"].numpy().copy()
            return result.epoch_losses, probe

        losses_a, probe_a = run(7)
        losses_b, probe_b = run(7)
        assert losses_a == losses_b
        np.testing.assert_array_equal(probe_a, probe_b)
        losses_c, _ = run(8)
        assert losses_a != losses_c


class TestEndToEndGradcheck:

    def _tiny_model(self, kind):
        from gtfc.backbone import ModelSpec
        spec = ModelSpec([4, 8], [1, 1], 8, 3, input_mels=6,
                         insert_kind=kind, gtfc=GtfcConfig(G=2))
        return SpeakerEmbedder(spec, seed=42)

    @pytest.mark.parametrize("kind", ["none", "c_gtfc", "tf_gtfc"])
    def test_two_stage_model_gradients(self, f64, kind):
        model = self._tiny_model(kind)
        rng = np.random.default_rng(43)
        maps = Tensor(rng.standard_normal((2, 1, 6, 12)), requires_grad=True)
        labels = np.array([0, 2])
        params = model.trainable()
        names = list(params)
        leaves = [maps] + [params[n] for n in names]

        def loss(x_in, *weights):
            for n, w in zip(names, weights):
                set_trainable(model, n, w)
            _, logits = model.forward(x_in, train=True, update=False)
            return cross_entropy(logits, labels)

        report = T.gradcheck(loss, leaves, tol=1e-4)
        assert report.max_rel_error < 1e-4, report


class TestCheckpoint:

    def test_roundtrip_preserves_model(self, tmp_path):
        # Checkpoints serialize through the f32 GTF1 container, so the
        # bitwise roundtrip contract holds for a model built at f32.
        T.set_default_dtype("f32")
        cfg = GtfcConfig(G=4)
        model = SpeakerEmbedder(desk_spec(5, "tf_gtfc", gtfc=cfg), seed=44)
        data = TestTraining()._dataset(num_speakers=5, per_speaker=1, seed=45)
        fit(model, data, epochs=1, batch_size=5, seed=46)
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.spec == model.spec
        for name, t in model.trainable().items():
            np.testing.assert_array_equal(loaded.trainable()[name].numpy(), t.numpy())
        for name, b in model.buffers().items():
            np.testing.assert_allclose(loaded.buffers()[name], b, rtol=1e-6)
        # BN running buffers accumulate in f64 but serialize as f32, so a
        # reloaded model matches eval outputs at f32 rounding, not bitwise.
        feats = np.random.default_rng(47).standard_normal((40, 64))
        np.testing.assert_allclose(loaded.embed(feats), model.embed(feats),
                                   rtol=1e-5, atol=1e-7)

    def test_gtfc_block_params_live_under_block_dirs(self, tmp_path):
        model = SpeakerEmbedder(desk_spec(3, "c_gtfc", gtfc=GtfcConfig(G=4)), seed=48)
        save_checkpoint(model, tmp_path / "ckpt")
        assert (tmp_path / "ckpt" / "block_0" / "lam.gtf").is_file()
        assert (tmp_path / "ckpt" / "block_0" / "W_alpha.gtf").is_file()
        assert (tmp_path / "ckpt" / "spec.txt").is_file()

    def test_bad_format_rejected(self, tmp_path):
        model = SpeakerEmbedder(desk_spec(3), seed=49)
        save_checkpoint(model, tmp_path / "ckpt")
        spec_file = tmp_path / "ckpt" / "spec.txt"
        text = spec_file.read_text().replace("gtfc-checkpoint-v1", "v999")
        spec_file.write_text(text)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ckpt")

    def test_manifest_mismatch_rejected(self, tmp_path):
        model = SpeakerEmbedder(desk_spec(3), seed=50)
        save_checkpoint(model, tmp_path / "ckpt")
        spec_file = tmp_path / "ckpt" / "spec.txt"
        lines = [l for l in spec_file.read_text().splitlines()
                 if not l.startswith("tensor\tcls/bias")]
        spec_file.write_text("\n".join(lines) + "\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_checkpoint_dir(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope")
