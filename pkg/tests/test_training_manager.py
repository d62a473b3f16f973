import dataclasses
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from defined.config.run_configs import CurriculumConfig, EvalConfig, ModelConfig, TrainConfig
from defined.core.evaluation_manager import EvaluationManager
from defined.core.training_manager import (
    TrainingManager,
    combine_losses,
    df_loss,
    finetune_loss,
    generate_df_prompts,
    icl_loss,
)
from defined.data.models import ChannelTask, Fading, SnrRange, TrainPhase
from defined.data.repositories import CheckpointRepository
from defined.engines.channel_engine import ChannelEngine, frame_rng, generate_frame, stack_frames
from defined.engines.constellation import build_constellation
from defined.engines.tokenizer import tokenize_frames
from defined.engines.transformer import (
    DecisionFeedbackTransformer,
    ForwardPass,
    batch_loss,
    loss_and_grads,
    parameter_checksum,
)
from defined.errors import TrainingDivergedError


class SignDetector(DecisionFeedbackTransformer):
    """Always-correct BPSK detector for a noiseless unit channel"""

    def forward(self, tokens):
        y = tokens[:, 0::2, 0]
        return ForwardPass(logits=torch.stack([y, -y], dim=-1))


def noiseless_bpsk_batch(B, T, k, seed=0):
    task = ChannelTask(H=np.ones((1, 1), dtype=complex), sigma2=0.0, fading=Fading.RAYLEIGH)
    bpsk = build_constellation("bpsk")
    return stack_frames([generate_frame(task, T, k, frame_rng(seed, i), bpsk) for i in range(B)])


def qpsk_batch(B, T, k, seed=0):
    return ChannelEngine("qpsk", SnrRange(10, 20), seed=seed).batch((0, 0), range(B), T, k)


def uniform_model(config):
    model = DecisionFeedbackTransformer(config)
    with torch.no_grad():
        model.W_c.weight.zero_()
    return model


def test_uniform_model_icl_loss():
    config = ModelConfig(scheme="16qam", d_e=8, n_layers=1, n_heads=2, d_ff=8, T_max=8)
    batch = ChannelEngine("16qam", SnrRange(20, 30)).batch((0,), range(4), 6, 1)
    assert float(icl_loss(uniform_model(config), batch)) == pytest.approx(math.log(16), abs=1e-5)


def test_uniform_model_df_loss():
    config = ModelConfig(scheme="64qam", d_e=8, n_layers=1, n_heads=2, d_ff=8, T_max=8)
    model = uniform_model(config)
    batch = ChannelEngine("64qam", SnrRange(20, 30)).batch((0,), range(4), 6, 2)
    prompts = generate_df_prompts(model, batch, 2)
    assert float(df_loss(model, prompts, 2)) == pytest.approx(math.log(64), abs=1e-5)
    assert math.log(64) == pytest.approx(4.1589, abs=1e-4)


def test_icl_loss_two_positions_by_hand(tiny_config):
    model = DecisionFeedbackTransformer(tiny_config)
    batch = qpsk_batch(1, 2, 1)
    tokens = torch.as_tensor(tokenize_frames(batch.y, batch.x_indices, tiny_config.D_s), dtype=torch.float32)
    targets = torch.as_tensor(batch.x_indices)
    with torch.no_grad():
        first = F.cross_entropy(model(tokens[:, :1]).logits[0, 0][None], targets[0, :1])
        second = F.cross_entropy(model(tokens).logits[0, 1][None], targets[0, 1:])
        loss = icl_loss(model, batch)
    assert float(loss) == pytest.approx(float(first + second) / 2, abs=1e-5)


def test_icl_loss_ignores_frame_order(tiny_config):
    model = DecisionFeedbackTransformer(tiny_config)
    batch = qpsk_batch(5, 6, 1)
    order = np.array([3, 0, 4, 1, 2])
    shuffled = dataclasses.replace(
        batch, H=batch.H[order], sigma2=batch.sigma2[order], x_indices=batch.x_indices[order], x=batch.x[order], y=batch.y[order]
    )
    with torch.no_grad():
        assert float(icl_loss(model, batch)) == pytest.approx(float(icl_loss(model, shuffled)), abs=1e-5)


class TestGenerateDfPrompts:
    def test_correct_feedback_reproduces_clean_prompt(self):
        config = ModelConfig(scheme="bpsk", d_e=8, n_layers=1, n_heads=2, d_ff=8, T_max=8)
        batch = noiseless_bpsk_batch(6, 8, 2)
        prompts = generate_df_prompts(SignDetector(config), batch, 2)
        np.testing.assert_array_equal(prompts.labels, batch.x_indices)
        np.testing.assert_array_equal(prompts.tokens, tokenize_frames(batch.y, batch.x_indices, config.D_s))

    def test_pilots_and_targets_stay_true(self, tiny_config):
        batch = qpsk_batch(8, 7, 3)
        prompts = generate_df_prompts(DecisionFeedbackTransformer(tiny_config), batch, 3)
        np.testing.assert_array_equal(prompts.labels[:, :3], batch.x_indices[:, :3])
        np.testing.assert_array_equal(prompts.targets, batch.x_indices)
        assert prompts.mask[:, 3:].all() and not prompts.mask[:, :3].any()

    def test_last_pilot_count_has_no_feedback(self, tiny_config):
        batch = qpsk_batch(4, 6, 5)
        prompts = generate_df_prompts(DecisionFeedbackTransformer(tiny_config), batch, 5)
        np.testing.assert_array_equal(prompts.labels, batch.x_indices)

    def test_batching_does_not_change_prompts(self, tiny_config):
        torch.manual_seed(1)
        model = DecisionFeedbackTransformer(tiny_config).double()
        batch = qpsk_batch(2, 7, 1, seed=3)
        together = generate_df_prompts(model, batch, 1)
        for i in range(2):
            single = dataclasses.replace(
                batch,
                H=batch.H[i : i + 1],
                sigma2=batch.sigma2[i : i + 1],
                x_indices=batch.x_indices[i : i + 1],
                x=batch.x[i : i + 1],
                y=batch.y[i : i + 1],
            )
            alone = generate_df_prompts(model, single, 1)
            np.testing.assert_array_equal(alone.labels[0], together.labels[i])

    def test_frozen_weights_unchanged(self, tiny_config):
        model = DecisionFeedbackTransformer(tiny_config)
        before = parameter_checksum(model)
        generate_df_prompts(model, qpsk_batch(4, 6, 1), 1)
        assert parameter_checksum(model) == before


class TestLossCombination:
    def test_arithmetic(self):
        assert float(combine_losses(torch.tensor(1.0), torch.tensor(2.0), 0.7)) == pytest.approx(1.3)

    def test_endpoints_and_affine_in_alpha(self, tiny_config):
        model = DecisionFeedbackTransformer(tiny_config)
        clean = qpsk_batch(4, 6, 1, seed=1)
        prompts = generate_df_prompts(model, qpsk_batch(4, 6, 2, seed=2), 2)
        with torch.no_grad():
            icl = float(icl_loss(model, clean))
            df = float(df_loss(model, prompts, 2))
            values = {alpha: float(finetune_loss(model, clean, prompts, alpha)) for alpha in (0.0, 0.3, 0.7, 1.0)}
        assert values[0.0] == pytest.approx(icl, abs=1e-5)
        assert values[1.0] == pytest.approx(df, abs=1e-5)
        for alpha in (0.3, 0.7):
            assert values[alpha] == pytest.approx(alpha * df + (1 - alpha) * icl, abs=1e-5)

    def test_df_loss_with_correct_feedback_is_restricted_icl_loss(self):
        config = ModelConfig(scheme="bpsk", d_e=8, n_layers=1, n_heads=2, d_ff=8, T_max=8)
        batch = noiseless_bpsk_batch(4, 8, 3)
        prompts = generate_df_prompts(SignDetector(config), batch, 3)
        model = DecisionFeedbackTransformer(config)
        tokens = torch.as_tensor(tokenize_frames(batch.y, batch.x_indices, config.D_s), dtype=torch.float32)
        mask = torch.zeros(4, 8, dtype=torch.bool)
        mask[:, 3:] = True
        with torch.no_grad():
            expected = batch_loss(model, tokens, torch.as_tensor(batch.x_indices), mask)
            assert float(df_loss(model, prompts, 3)) == pytest.approx(float(expected), abs=1e-5)

    def test_single_position_df_loss(self, tiny_config):
        model = DecisionFeedbackTransformer(tiny_config)
        batch = qpsk_batch(3, 6, 5)
        prompts = generate_df_prompts(model, batch, 5)
        tokens = torch.as_tensor(prompts.tokens, dtype=torch.float32)
        with torch.no_grad():
            expected = F.cross_entropy(model(tokens).logits[:, 5], torch.as_tensor(batch.x_indices[:, 5]))
            assert float(df_loss(model, prompts, 5)) == pytest.approx(float(expected), abs=1e-5)

    def test_mismatched_pilot_count(self, tiny_config):
        model = DecisionFeedbackTransformer(tiny_config)
        prompts = generate_df_prompts(model, qpsk_batch(2, 6, 2), 2)
        with pytest.raises(ValueError):
            df_loss(model, prompts, 3)


def test_small_gradient_step_decreases_loss(tiny_config):
    torch.manual_seed(2)
    model = DecisionFeedbackTransformer(tiny_config).double()
    batch = qpsk_batch(8, 6, 1, seed=4)
    tokens = torch.as_tensor(tokenize_frames(batch.y, batch.x_indices, tiny_config.D_s))
    targets = torch.as_tensor(batch.x_indices)
    mask = torch.ones_like(targets, dtype=torch.bool)

    before, gradients = loss_and_grads(model, tokens, targets, mask)
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            parameter -= 1e-3 * gradients[name]
        after = float(batch_loss(model, tokens, targets, mask))
    assert after < before


def tiny_train_config(phase=TrainPhase.DF_FINETUNE, **overrides):
    values = dict(
        phase=phase,
        model=ModelConfig(scheme="qpsk", d_e=8, n_layers=2, n_heads=2, d_ff=16, T_max=8),
        batch_size=4,
        T=6,
        k_df_choices=(1, 2),
        pretrain_steps=6,
        finetune_steps=4,
        epoch_steps=2,
        warmup_steps=2,
        learning_rate=1e-3,
        curriculum=CurriculumConfig(T_start=4, T_step=1, epochs_per_stage=1),
        snr_lo_db=10.0,
        snr_hi_db=20.0,
        seed=3,
        log_every=1,
    )
    values.update(overrides)
    return TrainConfig(**values)


class TestTrainingManager:
    def test_two_phase_run(self, tmp_path):
        result = TrainingManager(tiny_train_config()).train(checkpoint_path=tmp_path / "model.bin")
        phases = [point.phase for point in result.trace]
        assert result.switch_step == 6
        assert phases == ["pretrain"] * 6 + ["finetune"] * 4
        assert [point.step for point in result.trace] == list(range(10))
        assert all(math.isfinite(point.loss) for point in result.trace)
        assert (tmp_path / "model.bin").is_file()
        assert str(tmp_path / "model.step2.bin") in result.checkpoints
        assert str(tmp_path / "model.step6.bin") in result.checkpoints

    def test_seeded_runs_are_identical(self):
        first = TrainingManager(tiny_train_config()).train()
        second = TrainingManager(tiny_train_config()).train()
        assert [p.loss for p in first.trace] == [p.loss for p in second.trace]
        assert parameter_checksum(first.model) == parameter_checksum(second.model)

    def test_pretrain_only(self):
        result = TrainingManager(tiny_train_config(TrainPhase.ICL_PRETRAIN)).train()
        assert result.switch_step is None
        assert {point.phase for point in result.trace} == {"pretrain"}

    def test_finetune_continues_from_initial_model(self):
        config = tiny_train_config()
        initial = TrainingManager(config).build_model()
        result = TrainingManager(config).train(initial_model=initial)
        assert result.switch_step == 0
        assert [point.phase for point in result.trace] == ["finetune"] * 4

    def test_divergence_aborts_with_trace(self):
        config = tiny_train_config(TrainPhase.ICL_PRETRAIN)
        model = TrainingManager(config).build_model()
        with torch.no_grad():
            model.layers[0].W_1.weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError) as excinfo:
            TrainingManager(config).train(initial_model=model)
        assert excinfo.value.step == 0
        assert excinfo.value.trace == []


@pytest.mark.slow
def test_noiseless_bpsk_detection_after_training():
    config = TrainConfig(
        phase=TrainPhase.ICL_PRETRAIN,
        model=ModelConfig(scheme="bpsk", d_e=32, n_layers=2, n_heads=4, d_ff=128, T_max=8),
        batch_size=128,
        T=8,
        pretrain_steps=3000,
        epoch_steps=250,
        warmup_steps=100,
        curriculum=CurriculumConfig(enabled=False),
        snr_lo_db=30.0,
        snr_hi_db=30.0,
        plateau_tolerance=0.0,
    )
    model = TrainingManager(config).train().model.eval()
    engine = ChannelEngine("bpsk", SnrRange(200, 200), seed=99)
    correct = 0
    for i in range(500):
        frame = engine.frame((1, i), 6, 5)
        pairs = list(zip(frame.y[:5], frame.x_indices[:5]))
        _, decision = model.predict(pairs, frame.y[5])
        correct += decision == frame.x_indices[5]
    assert correct / 500 > 0.99


@pytest.mark.slow
def test_phase_switch_spike():
    config = tiny_train_config(
        model=ModelConfig(scheme="qpsk", d_e=32, n_layers=2, n_heads=4, d_ff=128, T_max=31),
        batch_size=64,
        T=31,
        k_df_choices=(1,),
        pretrain_steps=2000,
        finetune_steps=50,
        epoch_steps=200,
        curriculum=CurriculumConfig(enabled=False),
        snr_lo_db=15.0,
        snr_hi_db=25.0,
        plateau_tolerance=0.0,
        log_every=100,
    )
    result = TrainingManager(config).train()
    pre_switch = np.mean([p.loss for p in result.trace[result.switch_step - 20 : result.switch_step]])
    assert result.trace[result.switch_step].loss > 1.05 * pre_switch


@pytest.mark.slow
def test_feedback_finetuning_at_desk_scale(settings, tmp_path):
    config = TrainConfig(
        phase=TrainPhase.DF_FINETUNE,
        model=ModelConfig(scheme="qpsk", d_e=32, n_layers=4, n_heads=4, d_ff=128),
        batch_size=128,
        pretrain_steps=4000,
        finetune_steps=1500,
        epoch_steps=250,
        warmup_steps=200,
        curriculum=CurriculumConfig(T_start=11, T_step=5, epochs_per_stage=2),
        snr_lo_db=15.0,
        snr_hi_db=25.0,
        plateau_tolerance=0.0,
    )
    repository = CheckpointRepository(tmp_path)
    result = TrainingManager(config, repository).train(checkpoint_path="defined.bin")
    pretrained, finetuned = result.checkpoints[-2], result.checkpoints[-1]
    assert repository.load(pretrained).phase is TrainPhase.ICL_PRETRAIN

    manager = EvaluationManager(settings.model_copy(update={"eval_batch_size": 1000}), repository)
    common = dict(scheme="qpsk", snr_db=20.0, k=1, T=31, n_prompts=4000)
    curves = {
        method: manager.run_eval(EvalConfig(method=method, checkpoint=checkpoint, **common))
        for method, checkpoint in [
            ("icl", pretrained),
            ("icl-df", pretrained),
            ("defined", finetuned),
            ("defined-icl", finetuned),
        ]
    }

    assert curves["defined"].gain_df >= 10.0
    defined_df, icl_df = curves["defined"].points[-1], curves["icl-df"].points[-1]
    assert defined_df.length == icl_df.length == 30
    assert defined_df.ser <= icl_df.ser + 2 * math.hypot(defined_df.stderr, icl_df.stderr)
    icl_icl = curves["icl"].ser_at(30)
    assert abs(curves["defined-icl"].ser_at(30) - icl_icl) <= 0.2 * icl_icl


def first_step_below(trace, level):
    return next((point.step for point in trace if point.loss < level), math.inf)


@pytest.mark.slow
def test_curriculum_shortens_the_lull():
    def run(enabled):
        config = TrainConfig(
            phase=TrainPhase.ICL_PRETRAIN,
            model=ModelConfig(scheme="64qam", d_e=32, n_layers=4, n_heads=4, d_ff=128),
            batch_size=128,
            pretrain_steps=6000,
            epoch_steps=250,
            warmup_steps=200,
            curriculum=CurriculumConfig(enabled=enabled, T_start=11, T_step=5, epochs_per_stage=2),
            snr_lo_db=30.0,
            snr_hi_db=40.0,
            plateau_tolerance=0.0,
            seed=1,
        )
        try:
            return TrainingManager(config).train().trace
        except TrainingDivergedError as e:
            return e.trace

    half_uniform = 0.5 * math.log(64)
    with_curriculum = first_step_below(run(True), half_uniform)
    without_curriculum = first_step_below(run(False), half_uniform)
    assert with_curriculum < without_curriculum
