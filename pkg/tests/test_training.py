from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from avm_lab.autodiff import DiffTensor, backward, tape_scope
from avm_lab.checkpoint import load_checkpoint, save_checkpoint
from avm_lab.config import ModulationConfig, ReadoutConfig, TrainConfig
from avm_lab.errors import ConfigError, ContractError, DivergenceError
from avm_lab.model import AvmModel, FreezePlan, ModelSpec
from avm_lab.synthdata import ConditionShift, StimulusRecipe, apply_shift, build_bundle, make_world
from avm_lab.training import (
    OptimizerState,
    PlateauScheduler,
    ScheduleAction,
    Trainer,
    adamw_step,
    lr_schedule_step,
    poisson_loss,
    poisson_loss_value,
    train_phase1,
    train_phase2,
)


def fresh_model(spec: ModelSpec) -> AvmModel:
    return AvmModel.build(ModelSpec.from_dict(spec.to_dict()))


def make_trainer(spec, bundle, config, plan=None) -> Trainer:
    plan = plan or FreezePlan.phase1()
    return Trainer(fresh_model(spec), bundle.trials("train"), bundle.trials("val"), config, plan)


@pytest.fixture
def source(tiny_world):
    return tiny_world[1]


@pytest.fixture
def phase1_checkpoint(tiny_spec, source):
    return train_phase1(fresh_model(tiny_spec), source, TrainConfig(batch_size=8, lr=0.003, max_epochs=1))


class TestPoissonLoss:
    def test_closed_forms(self):
        eps = 1e-8
        assert poisson_loss(np.ones((1, 1)), DiffTensor(np.ones((1, 1)))).item() == pytest.approx(1.0 - np.log(1.0 + eps))
        assert poisson_loss(np.zeros((2, 3)), DiffTensor(np.full((2, 3), 0.5))).item() == pytest.approx(3.0)
        e = np.e
        assert poisson_loss(np.ones((1, 1)), DiffTensor(np.full((1, 1), e))).item() == pytest.approx(e - 1.0, abs=1e-8)

    def test_gradient(self):
        r = np.array([[0.0, 2.0, 5.0]])
        o = DiffTensor(np.array([[0.5, 1.0, 4.0]]), requires_grad=True)
        with tape_scope():
            backward(poisson_loss(r, o))
        np.testing.assert_allclose(o.grad, 1.0 - r / (o.values + 1e-8), rtol=1e-12)

    def test_value_is_per_trial_mean(self):
        r = np.array([[1.0, 0.0], [3.0, 2.0]])
        o = np.array([[1.0, 2.0], [0.5, 1.5]])
        expected = poisson_loss(r, DiffTensor(o)).item() / 2
        assert poisson_loss_value(r, o) == pytest.approx(expected, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            poisson_loss(np.zeros((2, 3)), DiffTensor(np.ones((3, 2))))

    def test_non_positive_prediction(self):
        with pytest.raises(ContractError):
            poisson_loss(np.zeros((1, 2)), DiffTensor(np.array([[1.0, 0.0]])))


class TestAdamW:
    def test_zero_gradient_keeps_parameters(self):
        theta = DiffTensor(np.array([1.0, -2.0]), requires_grad=True)
        state = OptimizerState.initialize({"theta": theta}, TrainConfig())
        adamw_step({"theta": theta}, state, lr=0.1)
        np.testing.assert_array_equal(theta.values, [1.0, -2.0])

    def test_first_step_is_normalized(self):
        theta = DiffTensor(np.array([0.0, 0.0]), requires_grad=True)
        theta.grad = np.array([1.0, -3.0])
        state = OptimizerState.initialize({"theta": theta}, TrainConfig())
        adamw_step({"theta": theta}, state, lr=0.01)
        np.testing.assert_allclose(theta.values, [-0.01 / (1 + 1e-8), 0.01 * 3 / (3 + 1e-8)], rtol=1e-12)
        assert state.t == 1

    def test_decoupled_weight_decay(self):
        theta = DiffTensor(np.array([2.0]), requires_grad=True)
        state = OptimizerState.initialize({"theta": theta}, TrainConfig())
        adamw_step({"theta": theta}, state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(theta.values, [2.0 - 0.1 * 0.5 * 2.0])

    def test_missing_state(self):
        theta = DiffTensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ContractError):
            adamw_step({"theta": theta}, OptimizerState(), lr=0.1)


class TestSchedule:
    def test_constant_loss(self):
        scheduler = PlateauScheduler(TrainConfig())
        actions = {epoch: scheduler.step(1.0) for epoch in range(1, 42)}
        assert [e for e, a in actions.items() if a is ScheduleAction.DECAY] == [11, 21, 31]
        assert actions[41] is ScheduleAction.STOP
        assert all(a is not ScheduleAction.STOP for e, a in actions.items() if e < 41)

    def test_steady_improvement_runs_to_max_epochs(self):
        scheduler = PlateauScheduler(TrainConfig())
        actions = [scheduler.step(10.0 - 1e-3 * epoch) for epoch in range(400)]
        assert all(a is ScheduleAction.KEEP for a in actions[:-1])
        assert actions[-1] is ScheduleAction.STOP

    def test_improvements_below_threshold_count_as_plateau(self):
        config = TrainConfig(plateau_patience=2, improvement_threshold=1e-3)
        scheduler = PlateauScheduler(config)
        assert [scheduler.step(v) for v in (1.0, 0.9999, 0.9998)][-1] is ScheduleAction.DECAY

    def test_pure_function_of_history(self):
        config = TrainConfig()
        assert lr_schedule_step([1.0] * 10, config) is ScheduleAction.KEEP
        assert lr_schedule_step([1.0] * 11, config) is ScheduleAction.DECAY
        assert lr_schedule_step([1.0] * 41, config) is ScheduleAction.STOP

    def test_empty_history(self):
        with pytest.raises(ContractError):
            lr_schedule_step([], TrainConfig())


class TestTrainer:
    def test_frozen_backbone_is_bit_identical(self, tiny_spec, source):
        model = fresh_model(tiny_spec)
        model.attach_modulation(ModulationConfig(variant="avm", bottleneck_dim=4))
        before = model.state_arrays("backbone")
        trainer = Trainer(model, source.trials("train"), source.trials("val"), TrainConfig(batch_size=8), FreezePlan.phase2())
        trainer.train_step(source.trials("train").batch(np.arange(8)), step=0)
        after = model.state_arrays("backbone")
        for name in before:
            assert before[name].tobytes() == after[name].tobytes()
        assert not any(name.startswith("backbone.") for name in trainer.state.m)

    def test_resume_is_bit_exact(self, tmp_path, tiny_spec, source, tiny_train_config):
        config = replace(tiny_train_config, prefetch=False)
        straight = make_trainer(tiny_spec, source, config)
        straight.run_epoch()
        path = save_checkpoint(straight.snapshot(), tmp_path / "epoch1.avmd")
        straight.run_epoch()

        resumed = Trainer.resume(
            load_checkpoint(path), source.trials("train"), source.trials("val"), config, FreezePlan.phase1()
        )
        resumed.run_epoch()
        expected, actual = straight.model.state_arrays(), resumed.model.state_arrays()
        for name in expected:
            np.testing.assert_array_equal(actual[name], expected[name])
        assert resumed.history == straight.history
        assert resumed.lr == straight.lr

    def test_prefetch_matches_inline_batches(self, tiny_spec, source, tiny_train_config):
        inline = make_trainer(tiny_spec, source, replace(tiny_train_config, prefetch=False))
        prefetched = make_trainer(tiny_spec, source, replace(tiny_train_config, prefetch=True))
        inline.run_epoch()
        prefetched.run_epoch()
        expected, actual = inline.model.state_arrays(), prefetched.model.state_arrays()
        for name in expected:
            np.testing.assert_array_equal(actual[name], expected[name])

    def test_non_finite_loss_raises(self, tiny_spec, source, tiny_train_config):
        trainer = make_trainer(tiny_spec, source, tiny_train_config)
        trainer.model.readout.weight.values[0, 0] = np.nan
        with pytest.raises(DivergenceError, match="epoch 1"):
            trainer.run_epoch()

    def test_neuron_count_mismatch(self, tiny_spec, source, tiny_train_config):
        spec = replace(ModelSpec.from_dict(tiny_spec.to_dict()), num_neurons=3)
        with pytest.raises(ConfigError):
            make_trainer(spec, source, tiny_train_config)


class TestPhase1:
    def test_best_checkpoint_has_lowest_logged_val(self, tmp_path, tiny_spec, source, tiny_train_config):
        log_path = tmp_path / "train_log.csv"
        best = train_phase1(fresh_model(tiny_spec), source, tiny_train_config, log_path=log_path)
        frame = pd.read_csv(log_path)
        val = frame[frame["split"] == "val"]
        assert list(frame.columns) == ["epoch", "split", "loss", "lr", "seconds"]
        assert val["epoch"].iloc[0] == 0
        assert best.best_val_loss == pytest.approx(val["loss"].min(), rel=1e-12)
        assert best.phase == "phase1"

    def test_deterministic(self, tiny_spec, source, tiny_train_config):
        first = train_phase1(fresh_model(tiny_spec), source, tiny_train_config)
        second = train_phase1(fresh_model(tiny_spec), source, tiny_train_config)
        assert first.val_history == second.val_history
        for name in first.params:
            np.testing.assert_array_equal(first.params[name], second.params[name])

    def test_rejects_modulated_model(self, tiny_model, source, tiny_train_config):
        tiny_model.attach_modulation(ModulationConfig(variant="avm"))
        with pytest.raises(ConfigError):
            train_phase1(tiny_model, source, tiny_train_config)


class TestPhase2:
    @pytest.fixture
    def shifted(self, tiny_world):
        world, bundle = tiny_world
        return apply_shift(bundle, world, ConditionShift(kind="stimulus"))[0]

    @pytest.mark.parametrize("strategy", ["avm", "avm-s", "avm-b"])
    def test_modulation_strategies(self, phase1_checkpoint, shifted, tiny_train_config, strategy):
        result = train_phase2(
            phase1_checkpoint, strategy, shifted, tiny_train_config,
            modulation=ModulationConfig(bottleneck_dim=4), max_epochs=2,
        )
        assert result.step0_val_loss == result.base_val_loss
        assert result.checkpoint.backbone_arrays().keys() == phase1_checkpoint.backbone_arrays().keys()
        for name, value in phase1_checkpoint.backbone_arrays().items():
            assert result.checkpoint.params[name].tobytes() == value.tobytes()
        model = result.checkpoint.build_model()
        counts = model.count_by_group()
        assert result.trainable_params == counts["modulation"] + counts["readout"]
        assert result.checkpoint.spec.modulation.variant == strategy

    def test_frozen_takes_no_step(self, phase1_checkpoint, shifted, tiny_train_config):
        result = train_phase2(phase1_checkpoint, "frozen", shifted, tiny_train_config)
        assert result.trainable_params == 0
        assert result.checkpoint.adam_t == 0
        for name, value in phase1_checkpoint.params.items():
            np.testing.assert_array_equal(result.checkpoint.params[name], value)
        assert result.log.to_frame()["epoch"].max() == 0

    def test_readout_frozen_with_zero_weight_matches_frozen(self, phase1_checkpoint, shifted, tiny_train_config):
        frozen = train_phase2(phase1_checkpoint, "frozen", shifted, tiny_train_config)
        ablated = train_phase2(
            phase1_checkpoint, "avm", shifted, tiny_train_config,
            modulation=ModulationConfig(bottleneck_dim=4, weight=0.0),
            readout=ReadoutConfig(train_in_phase2=False), max_epochs=1,
        )
        model = ablated.checkpoint.build_model()
        reference = frozen.checkpoint.build_model()
        batch = shifted.trials("test").batch(np.arange(4))
        np.testing.assert_array_equal(
            model.forward(batch.images, batch.behavior).values, reference.forward(batch.images, batch.behavior).values
        )

    def test_full_finetune_trains_everything(self, phase1_checkpoint, shifted, tiny_train_config):
        result = train_phase2(phase1_checkpoint, "full-ft", shifted, tiny_train_config, max_epochs=1)
        assert result.trainable_params == result.checkpoint.build_model().count_parameters()
        val = result.log.to_frame().query("split == 'val'")["loss"].tolist()
        assert val[0] != val[1]

    def test_new_subject_replaces_readout(self, phase1_checkpoint, tiny_world_config, tiny_train_config):
        world = make_world(replace(tiny_world_config, num_neurons=7), rf_seed=55)
        bundle = build_bundle(world, StimulusRecipe(), condition="subject")
        result = train_phase2(phase1_checkpoint, "avm-s", bundle, tiny_train_config, max_epochs=1)
        assert result.checkpoint.spec.num_neurons == 7
        assert result.checkpoint.params["readout.mu"].shape == (7, 2)

    def test_unknown_strategy(self, phase1_checkpoint, shifted, tiny_train_config):
        with pytest.raises(ConfigError):
            train_phase2(phase1_checkpoint, "lora", shifted, tiny_train_config)

    def test_requires_plain_checkpoint(self, phase1_checkpoint, shifted, tiny_train_config):
        adapted = train_phase2(phase1_checkpoint, "avm", shifted, tiny_train_config, max_epochs=1).checkpoint
        with pytest.raises(ConfigError):
            train_phase2(adapted, "avm", shifted, tiny_train_config)
