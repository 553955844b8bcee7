import numpy as np
import pytest

from qmatch.model import (
    CheckpointError,
    ConfigError,
    EmaParams,
    EncoderConfig,
    classifier_forward,
    ema_update,
    encoder_forward,
    init_params,
    load_checkpoint,
    projector_forward,
    save_checkpoint,
)
from qmatch.tensor import ShapeError, Tensor, backward, finite_difference_check


def small_config(**kw):
    defaults = dict(input_dim=5, layer_widths=(8, 8), maxout_k=4, projector_dim=3)
    defaults.update(kw)
    return EncoderConfig(**defaults)


class TestConfig:
    def test_embed_dim(self):
        assert small_config().embed_dim == 2

    def test_maxout_must_divide_last_width(self):
        with pytest.raises(ConfigError):
            EncoderConfig(input_dim=5, layer_widths=(8, 9), maxout_k=4)

    def test_roundtrip(self):
        cfg = small_config()
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestInit:
    def test_deterministic(self):
        a = init_params(small_config(), seed=7)
        b = init_params(small_config(), seed=7)
        for k in a.tensors:
            np.testing.assert_array_equal(a.tensors[k].data, b.tensors[k].data)

    def test_he_scale(self):
        cfg = EncoderConfig(input_dim=1000, layer_widths=(64, 8), maxout_k=4)
        params = init_params(cfg, seed=0)
        std = params.tensors["layer0.weight"].data.std()
        expected = np.sqrt(2.0 / 1000)
        assert abs(std - expected) / expected < 0.10

    def test_bn_and_bias_defaults(self):
        params = init_params(small_config(), seed=0)
        np.testing.assert_array_equal(params.tensors["layer0.bias"].data, 0.0)
        np.testing.assert_array_equal(params.tensors["layer0.bn_scale"].data, 1.0)
        np.testing.assert_array_equal(params.buffers["layer0.running_mean"], 0.0)
        np.testing.assert_array_equal(params.buffers["layer0.running_var"], 1.0)


class TestForward:
    def test_output_dim(self, rng):
        params = init_params(small_config(), seed=1)
        out = encoder_forward(params, Tensor(rng.normal(size=(6, 5))), mode="train")
        assert out.shape == (6, 2)

    def test_wrong_width_rejected(self, rng):
        params = init_params(small_config(), seed=1)
        with pytest.raises(ShapeError):
            encoder_forward(params, Tensor(rng.normal(size=(6, 4))))

    def test_eval_is_pure(self, rng):
        params = init_params(small_config(), seed=2)
        x = Tensor(rng.normal(size=(4, 5)))
        before = {k: v.copy() for k, v in params.buffers.items()}
        out1 = encoder_forward(params, x, mode="eval")
        out2 = encoder_forward(params, x, mode="eval")
        np.testing.assert_array_equal(out1.data, out2.data)
        for k, v in params.buffers.items():
            np.testing.assert_array_equal(v, before[k])

    def test_train_mode_updates_running_stats(self, rng):
        params = init_params(small_config(), seed=2)
        before = params.buffers["layer0.running_mean"].copy()
        encoder_forward(params, Tensor(rng.normal(size=(32, 5))), mode="train")
        assert not np.array_equal(params.buffers["layer0.running_mean"], before)

    def test_train_batchnorm_standardizes(self, rng):
        # pre-activation stats after batch norm: mean 0, var 1 per feature
        from qmatch.tensor import batch_norm_train
        x = Tensor(rng.normal(2.0, 3.0, size=(64, 4)))
        out, _, _ = batch_norm_train(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-6)

    def test_encoder_gradient_matches_finite_differences(self, rng):
        params = init_params(small_config(), seed=3)
        x = Tensor(rng.normal(size=(6, 5)))
        tensors = list(params.tensors.values())

        def f():
            h = encoder_forward(params, x, mode="eval")
            return projector_forward(params, h).sum()

        assert finite_difference_check(f, tensors) <= 1e-4


class TestProjector:
    def test_zero_weight_gives_bias(self, rng):
        params = init_params(small_config(), seed=4)
        params.tensors["projector.weight"].data[...] = 0.0
        params.tensors["projector.bias"].data[...] = [1.0, 2.0, 3.0]
        h = Tensor(rng.normal(size=(4, 2)))
        out = projector_forward(params, h)
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0], (4, 1)))

    def test_identity_projector(self):
        cfg = small_config(projector_dim=2)
        params = init_params(cfg, seed=5)
        params.tensors["projector.weight"].data[...] = np.eye(2)
        params.tensors["projector.bias"].data[...] = 0.0
        h = np.random.default_rng(0).normal(size=(3, 2))
        np.testing.assert_array_equal(projector_forward(params, Tensor(h)).data, h)

    def test_gradient(self, rng):
        params = init_params(small_config(), seed=6)
        h = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        err = finite_difference_check(
            lambda: projector_forward(params, h).sum(),
            [h, params.tensors["projector.weight"], params.tensors["projector.bias"]])
        assert err <= 1e-6

    def test_mlp_projector_flag(self, rng):
        cfg = small_config(mlp_projector=True)
        params = init_params(cfg, seed=7)
        assert "projector.hidden_weight" in params.tensors
        out = projector_forward(params, Tensor(rng.normal(size=(4, 2))))
        assert out.shape == (4, 3)


class TestEma:
    def test_basic_decay(self):
        params = init_params(small_config(), seed=8)
        ema = EmaParams(params.copy(), decay=0.9)
        ema.params.tensors["projector.bias"].data[...] = 1.0
        params.tensors["projector.bias"].data[...] = 0.0
        ema_update(ema, params)
        np.testing.assert_allclose(ema.params.tensors["projector.bias"].data, 0.9)

    def test_zero_decay_copies(self):
        params = init_params(small_config(), seed=9)
        ema = EmaParams(init_params(small_config(), seed=10), decay=0.0)
        ema_update(ema, params)
        for k in params.tensors:
            np.testing.assert_array_equal(ema.params.tensors[k].data,
                                          params.tensors[k].data)

    def test_geometric_convergence(self):
        params = init_params(small_config(), seed=11)
        ema = EmaParams(params.copy(), decay=0.9)
        ema.params.tensors["projector.bias"].data[...] = 1.0
        params.tensors["projector.bias"].data[...] = 0.0
        gaps = []
        for _ in range(5):
            ema_update(ema, params)
            gaps.append(abs(ema.params.tensors["projector.bias"].data[0]))
        for a, b in zip(gaps, gaps[1:]):
            np.testing.assert_allclose(b / a, 0.9, rtol=1e-10)

    def test_never_mutates_student(self):
        params = init_params(small_config(), seed=12)
        snapshot = {k: t.data.copy() for k, t in params.tensors.items()}
        ema = EmaParams(init_params(small_config(), seed=13), decay=0.5)
        ema_update(ema, params)
        for k, t in params.tensors.items():
            np.testing.assert_array_equal(t.data, snapshot[k])

    def test_running_stats_copied_not_averaged(self, rng):
        params = init_params(small_config(), seed=14)
        params.buffers["layer0.running_mean"][...] = 5.0
        ema = EmaParams(params.copy(), decay=0.9)
        ema.params.buffers["layer0.running_mean"][...] = -5.0
        ema_update(ema, params)
        np.testing.assert_array_equal(ema.params.buffers["layer0.running_mean"], 5.0)


class TestCheckpoint:
    def test_roundtrip_bit_exact_and_idempotent(self, tmp_path, rng):
        params = init_params(small_config(), seed=15)
        ema = EmaParams(params.copy(), decay=0.9)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, params, ema=ema, metadata={"seed": 15, "step": 3})
        loaded = load_checkpoint(p1)
        save_checkpoint(p2, loaded["params"], ema=loaded["ema"],
                        metadata=loaded["metadata"])
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_identical_after_roundtrip(self, tmp_path, rng):
        params = init_params(small_config(), seed=16)
        encoder_forward(params, Tensor(rng.normal(size=(16, 5))), mode="train")
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, params)
        loaded = load_checkpoint(path)["params"]
        x = Tensor(rng.normal(size=(4, 5)))
        np.testing.assert_array_equal(
            encoder_forward(params, x, mode="eval").data,
            encoder_forward(loaded, x, mode="eval").data)

    def test_config_mismatch(self, tmp_path):
        params = init_params(small_config(), seed=17)
        path = tmp_path / "d.ckpt"
        save_checkpoint(path, params)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_config=small_config(projector_dim=4))

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_optimizer_state_and_queue(self, tmp_path, rng):
        params = init_params(small_config(), seed=18)
        queue = rng.normal(size=(8, 3))
        path = tmp_path / "e.ckpt"
        save_checkpoint(path, params, optimizer_state={"m/x": np.ones(3)},
                        queue_storage=queue)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(loaded["queue_storage"], queue)
        np.testing.assert_array_equal(loaded["optimizer_state"]["m/x"], np.ones(3))


def test_classifier_forward(rng):
    params = init_params(small_config(num_classes=4), seed=19)
    out = classifier_forward(params, Tensor(rng.normal(size=(3, 2))))
    assert out.shape == (3, 4)


def test_maxout_output_dim_property():
    for widths, k in (((8, 8), 4), ((12,), 3), ((16, 32), 8)):
        cfg = EncoderConfig(input_dim=4, layer_widths=widths, maxout_k=k)
        params = init_params(cfg, seed=20)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
        assert encoder_forward(params, x, mode="eval").shape[1] == widths[-1] // k
