"""
Tests for training: the optimisation loop, prediction tiles, evaluation and
the checkpoint format.
"""
import struct

import numpy as np
import pytest

from Heightfusion_lib.config import TrainConfig
from Heightfusion_lib.errors import CheckpointError, CheckpointVersionError, ModalityError
from Heightfusion_lib.model_zoo import ArchScale, FusionVariant, build_model, forward, split_late
from Heightfusion_lib.raster_io import default_spec
from Heightfusion_lib.synth_data import SceneSample, SceneSpec, generate_dataset
from Heightfusion_lib.training import (CHECKPOINT_MAGIC, encode_checkpoint, evaluate_model, load_checkpoint,
                                       predict, prepare_inputs, save_checkpoint, train, write_loss_csv)


def _config(**changes):
    base = TrainConfig(epochs=2, batch_size=2, arch='tiny', variant='early', skip_connections=False, lr=0.01)
    return base.replace(**changes)


def _snapshot(model):
    return {k: v.data.copy() for k, v in model.params.items()}


# =============================================================================
# Training loop
# =============================================================================

class TestTrain:

    def test_zero_lr_is_a_no_op(self, tiny_scenes):
        model = build_model(FusionVariant.parse('early'), ArchScale.preset('tiny'))
        before = _snapshot(model)
        state = train(_config(lr=0.0, epochs=3), tiny_scenes[:1], model=model)
        for name, value in before.items():
            assert state.model[name].data.tobytes() == value.tobytes()
        losses = [loss for _, loss in state.loss_history]
        assert len(losses) == 3 and len(set(losses)) == 1

    def test_step_count_and_history(self, tiny_scenes):
        state = train(_config(epochs=3, batch_size=1), tiny_scenes)
        assert state.step == 6 and state.epoch == 3
        assert [s for s, _ in state.loss_history] == list(range(1, 7))

    def test_max_steps(self, tiny_scenes):
        state = train(_config(epochs=10, batch_size=1, max_steps=3), tiny_scenes)
        assert state.step == 3
        assert len(state.loss_history) == 3

    def test_deterministic(self, tiny_scenes):
        a = train(_config(optimizer='adam', lr=1e-3), tiny_scenes)
        b = train(_config(optimizer='adam', lr=1e-3), tiny_scenes)
        assert a.loss_history == b.loss_history
        for name in a.model.params:
            assert a.model[name].data.tobytes() == b.model[name].data.tobytes()

    def test_parameters_move(self, tiny_scenes):
        model = build_model(FusionVariant.parse('intermediate', True), ArchScale.preset('tiny'))
        before = _snapshot(model)
        train(_config(variant='intermediate', skip_connections=True, epochs=1), tiny_scenes, model=model)
        assert any(not np.array_equal(model[k].data, v) for k, v in before.items())

    def test_late_trains_both_branches(self, tiny_scenes):
        model = build_model(FusionVariant.parse('late'), ArchScale.preset('tiny'))
        before = _snapshot(model)
        train(_config(variant='late', epochs=1), tiny_scenes, model=model)
        for prefix in ("rgb.", "sar."):
            assert not np.array_equal(model[prefix + "head.bias"].data, before[prefix + "head.bias"])

    def test_missing_sar_for_early(self, tiny_scenes):
        stripped = [SceneSample(rgb=s.rgb, ndsm=s.ndsm) for s in tiny_scenes]
        with pytest.raises(ModalityError):
            train(_config(), stripped)

    def test_missing_target(self, tiny_scenes):
        stripped = [SceneSample(rgb=s.rgb, sar=s.sar) for s in tiny_scenes]
        with pytest.raises(ModalityError):
            train(_config(), stripped)

    def test_model_variant_must_match(self, tiny_scenes):
        model = build_model(FusionVariant.parse('rgb_only'), ArchScale.preset('tiny'))
        with pytest.raises(ModalityError):
            train(_config(), tiny_scenes, model=model)

    def test_loss_csv(self, tmp_path):
        write_loss_csv([(1, 2.5), (2, 0.125)], tmp_path / "loss.csv")
        assert (tmp_path / "loss.csv").read_text() == "step,loss\n1,2.5\n2,0.125\n"

    def test_default_sgd_loss_strictly_decreases_over_ten_full_batch_steps(self):
        dataset = generate_dataset(SceneSpec(size=64), n_scenes=8, seed=42)
        config = TrainConfig(variant='rgb_only', arch='desk', max_steps=10)
        assert config.batch_size >= len(dataset)
        losses = [loss for _, loss in train(config, dataset).loss_history]
        assert len(losses) == 10
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_sar_statistics_come_from_the_dataset(self, tiny_scenes):
        state = train(_config(max_steps=1), tiny_scenes)
        sar = np.concatenate([s.sar.planes.ravel().astype(np.float64) for s in tiny_scenes])
        spec = state.model.normalization['sar']
        assert spec.mean[0] == pytest.approx(sar.mean()) and spec.std[0] == pytest.approx(sar.std())
        assert state.model.normalization['rgb'] == default_spec('rgb')

    def test_rgb_only_keeps_no_sar_statistics(self, tiny_scenes):
        state = train(_config(variant='rgb_only', max_steps=1), tiny_scenes)
        assert set(state.model.normalization) == {'rgb'}


# =============================================================================
# Prediction and evaluation
# =============================================================================

class TestPredict:

    def test_tile_keeps_name_and_shape(self, tiny_scenes):
        model = build_model(FusionVariant.parse('early'), ArchScale.preset('tiny'))
        tile = predict(model, tiny_scenes[1])
        assert tile.name == tiny_scenes[1].name
        assert tile.planes.shape == (1, 32, 32) and tile.planes.dtype == np.float32

    def test_ignores_unused_modality(self, tiny_scenes):
        model = build_model(FusionVariant.parse('rgb_only'), ArchScale.preset('tiny'))
        rgb, sar = prepare_inputs(tiny_scenes[0], model.variant)
        assert sar is None
        np.testing.assert_array_equal(predict(model, tiny_scenes[0]).planes[0],
                                      forward(model, rgb).data[0, 0].astype(np.float32))

    def test_missing_sar(self, tiny_scenes):
        model = build_model(FusionVariant.parse('early'), ArchScale.preset('tiny'))
        with pytest.raises(ModalityError):
            predict(model, SceneSample(rgb=tiny_scenes[0].rgb))

    def test_late_pair_matches_joined_model(self, tiny_scenes):
        late = build_model(FusionVariant.parse('late'), ArchScale.preset('tiny'))
        pair = split_late(late)
        np.testing.assert_array_equal(predict(pair, tiny_scenes[0]).planes, predict(late, tiny_scenes[0]).planes)

    def test_evaluate_model(self, tiny_scenes):
        model = build_model(FusionVariant.parse('early'), ArchScale.preset('tiny'))
        report = evaluate_model(model, tiny_scenes)
        assert report.n_total == 2 * 32 * 32
        assert 0.0 <= report.delta1 <= 1.0


# =============================================================================
# Checkpoints
# =============================================================================

class TestCheckpoint:

    @pytest.mark.parametrize("mode,skip", [("early", True), ("intermediate", False), ("late", True)])
    def test_round_trip_is_bit_exact(self, tmp_path, mode, skip):
        model = build_model(FusionVariant.parse(mode, skip), ArchScale.preset('tiny'), seed=9)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.variant == model.variant and back.arch == model.arch
        assert list(back.params) == list(model.params)
        for name in model.params:
            assert back[name].data.tobytes() == model[name].data.tobytes()
        assert encode_checkpoint(back) == encode_checkpoint(model)

    def test_input_statistics_survive_the_round_trip(self, tmp_path, tiny_scenes):
        state = train(_config(max_steps=1), tiny_scenes)
        save_checkpoint(state, tmp_path / "n.ckpt")
        back = load_checkpoint(tmp_path / "n.ckpt")
        assert back.normalization == state.model.normalization
        np.testing.assert_array_equal(predict(back, tiny_scenes[0]).planes, predict(state.model, tiny_scenes[0]).planes)

    def test_train_state_is_accepted(self, tmp_path, tiny_scenes):
        state = train(_config(max_steps=1), tiny_scenes)
        save_checkpoint(state, tmp_path / "s.ckpt")
        assert load_checkpoint(tmp_path / "s.ckpt").parameter_count() == state.model.parameter_count()

    def test_truncated(self, tmp_path):
        data = encode_checkpoint(build_model(FusionVariant.parse('sar_only'), ArchScale.preset('tiny')))
        (tmp_path / "t.ckpt").write_bytes(data[:-5])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_trailing_bytes(self, tmp_path):
        data = encode_checkpoint(build_model(FusionVariant.parse('sar_only'), ArchScale.preset('tiny')))
        (tmp_path / "t.ckpt").write_bytes(data + b"\0")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "t.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_version_mismatch(self, tmp_path):
        data = bytearray(encode_checkpoint(build_model(FusionVariant.parse('sar_only'), ArchScale.preset('tiny'))))
        data[len(CHECKPOINT_MAGIC):len(CHECKPOINT_MAGIC) + 4] = struct.pack('<I', 99)
        (tmp_path / "t.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "t.ckpt")


# =============================================================================
# Long-running checks
# =============================================================================

@pytest.mark.slow
class TestLongTraining:

    def test_desk_rgb_only_converges(self):
        dataset = generate_dataset(SceneSpec(size=64), n_scenes=8, seed=42)
        config = TrainConfig(variant='rgb_only', arch='desk', batch_size=8, epochs=200, max_steps=200)
        assert (config.optimizer, config.lr, config.momentum) == ('sgd', 0.01, 0.9)
        state = train(config, dataset)
        initial, final = state.loss_history[0][1], state.loss_history[-1][1]
        assert final <= 0.2 * initial
        assert evaluate_model(state.model, dataset).delta1 >= 0.6

    def test_early_fusion_beats_rgb_only(self):
        gains = []
        for seed in range(3):
            dataset = generate_dataset(SceneSpec(size=64), n_scenes=8, seed=100 + seed)
            scores = {}
            for variant in ('rgb_only', 'early'):
                config = TrainConfig(variant=variant, arch='desk', batch_size=8, epochs=200, max_steps=200, seed=seed)
                scores[variant] = evaluate_model(train(config, dataset).model, dataset).delta1
            gains.append(scores['early'] - scores['rgb_only'])
        assert np.mean(gains) >= 0.02
