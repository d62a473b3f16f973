import math

import pytest

from defined.config.run_configs import CurriculumConfig
from defined.core.curriculum_engine import CurriculumEngine, PlateauDetector


@pytest.fixture
def engine():
    return CurriculumEngine(CurriculumConfig(T_start=11, T_step=5, epochs_per_stage=2), T_final=31, epoch_steps=1000)


def test_default_schedule(engine):
    assert engine.schedule(12_000) == [11, 11, 16, 16, 21, 21, 26, 26, 31, 31, 31, 31]


def test_stage_boundaries(engine):
    assert not engine.is_stage_boundary(0)
    assert not engine.is_stage_boundary(1999)
    assert engine.is_stage_boundary(2000)
    assert not engine.is_stage_boundary(2001)
    assert not engine.is_stage_boundary(10_000)


def test_final_length(engine):
    assert not engine.at_final_length(7999)
    assert engine.at_final_length(8000)
    assert engine.context_length(50_000) == 31


def test_disabled_curriculum_runs_at_full_length():
    engine = CurriculumEngine(CurriculumConfig(enabled=False), T_final=31, epoch_steps=10)
    assert engine.schedule(50) == [31] * 5
    assert not any(engine.is_stage_boundary(step) for step in range(50))


class TestPlateauDetector:
    def test_lull_never_counts(self):
        detector = PlateauDetector(tolerance=0.01, n_classes=16)
        level = math.log(16)
        assert not detector.update(level)
        assert not detector.update(level * 0.999)
        assert not detector.update(level * 0.998)

    def test_small_improvement_is_a_plateau(self):
        detector = PlateauDetector(tolerance=0.01, n_classes=16)
        assert not detector.update(1.0)
        assert not detector.update(0.8)
        assert detector.update(0.799)

    def test_shorter_context_never_counts(self):
        detector = PlateauDetector(tolerance=0.01, n_classes=16)
        assert not detector.update(0.5, at_final_length=False)
        assert not detector.update(0.5, at_final_length=False)
        assert not detector.update(0.6)
        assert detector.update(0.6)
        assert detector.history == [0.5, 0.5, 0.6, 0.6]

    def test_zero_tolerance_never_switches(self):
        detector = PlateauDetector(tolerance=0.0, n_classes=16)
        for loss in (1.0, 0.8, 0.9, 0.9, 0.95):
            assert not detector.update(loss)
        assert detector.history == [1.0, 0.8, 0.9, 0.9, 0.95]
