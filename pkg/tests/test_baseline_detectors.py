import itertools

import numpy as np
import pytest

from defined.data.models import ChannelTask, Fading, PilotBlock, SnrRange
from defined.engines.baseline_detectors import (
    lmmse_estimate,
    lmmse_estimate_batch,
    mlsd_detect,
    mlsd_detect_batch,
    mmse_df_detect,
    mmse_df_detect_batch,
    pilot_only_detect_batch,
    project_detect,
)
from defined.engines.channel_engine import EVAL_STREAM, ChannelEngine, frame_rng, generate_frame
from defined.engines.constellation import build_constellation, joint_symbol_table
from defined.errors import ComplexityGuardError, ShapeMismatchError, UnsupportedConstellationError


def random_complex(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


class TestLmmseEstimate:
    def test_matches_dense_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            X = random_complex(rng, (2, 3))
            Y = random_complex(rng, (2, 3))
            sigma2 = rng.uniform(0.01, 1.0)
            expected = Y @ X.conj().T @ np.linalg.inv(X @ X.conj().T + sigma2 * np.eye(2))
            estimate = lmmse_estimate(PilotBlock(X=X, Y=Y, sigma2=sigma2))
            np.testing.assert_allclose(estimate.H_hat, expected, atol=1e-10)
            assert not estimate.used_pseudo_inverse

    def test_scalar_instance(self):
        y = 0.7 - 0.2j
        estimate = lmmse_estimate(PilotBlock(X=np.array([[1.0]]), Y=np.array([[y]]), sigma2=0.25))
        assert estimate.H_hat[0, 0] == pytest.approx(y / 1.25)

    def test_noiseless_unitary_pilots_recover_channel(self):
        rng = np.random.default_rng(1)
        H = random_complex(rng, (2, 2))
        X = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
        estimate = lmmse_estimate(PilotBlock(X=X, Y=H @ X, sigma2=0.0))
        np.testing.assert_allclose(estimate.H_hat, H, atol=1e-12)

    def test_singular_noiseless_block_uses_pseudo_inverse(self):
        X = np.array([[1.0], [1.0]], dtype=complex)
        estimate = lmmse_estimate(PilotBlock(X=X, Y=np.array([[2.0 + 0j]]), sigma2=0.0))
        assert estimate.used_pseudo_inverse
        np.testing.assert_allclose(estimate.H_hat, [[1.0, 1.0]])

    def test_shrinks_with_noise(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            block_x = random_complex(rng, (2, 4))
            block_y = random_complex(rng, (3, 4))
            norms = [
                np.linalg.norm(lmmse_estimate(PilotBlock(X=block_x, Y=block_y, sigma2=s)).H_hat, 2)
                for s in (0.01, 0.1, 1.0, 10.0, 100.0)
            ]
            assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))

    def test_mismatched_block(self):
        with pytest.raises(ShapeMismatchError):
            lmmse_estimate(PilotBlock(X=np.ones((1, 3)), Y=np.ones((1, 2)), sigma2=0.1))

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(3)
        x = random_complex(rng, (5, 4, 2))
        y = random_complex(rng, (5, 4, 3))
        sigma2 = np.array([0.1, 0.2, 0.0, 1.0, 0.05])
        batched = lmmse_estimate_batch(x, y, sigma2)
        for b in range(5):
            single = lmmse_estimate(PilotBlock(X=x[b].T, Y=y[b].T, sigma2=sigma2[b]))
            np.testing.assert_allclose(batched[b], single.H_hat, atol=1e-10)


class TestProjectDetect:
    def test_sign_rule(self):
        bpsk = build_constellation("bpsk")
        assert project_detect(np.array([[1.0]]), np.array([-0.3]), bpsk, 1) == 1
        assert project_detect(np.array([[1.0]]), np.array([0.3]), bpsk, 1) == 0

    def test_noiseless_recovery(self):
        rng = np.random.default_rng(4)
        qam = build_constellation("16qam")
        table = joint_symbol_table(qam, 2)
        for index in rng.integers(0, 256, size=50):
            H = random_complex(rng, (2, 2))
            assert project_detect(H, H @ table[index], qam, 2) == index

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        qpsk = build_constellation("qpsk")
        table = joint_symbol_table(qpsk, 2)
        for _ in range(1000):
            H = random_complex(rng, (2, 2))
            y = random_complex(rng, 2)
            distances = [np.linalg.norm(H @ x - y) ** 2 for x in table]
            assert project_detect(H, y, qpsk, 2) == int(np.argmin(distances))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            project_detect(np.ones((2, 2)), np.ones(3), build_constellation("qpsk"), 2)


def _frame(scheme, H, sigma2, T, k, seed, n_t=1):
    task = ChannelTask(H=np.atleast_2d(H).astype(complex), sigma2=sigma2, fading=Fading.RAYLEIGH)
    return generate_frame(task, T, k, frame_rng(seed, 0), build_constellation(scheme), n_t=n_t)


class TestMmseDfDetect:
    def test_noiseless_detections_are_correct(self):
        qam = build_constellation("16qam")
        frame = _frame("16qam", [[0.4 + 0.9j]], 0.0, 12, 1, seed=6)
        np.testing.assert_array_equal(mmse_df_detect(frame, qam), frame.x_indices[1:])

    def test_last_position_only(self):
        bpsk = build_constellation("bpsk")
        frame = _frame("bpsk", [[0.8 - 0.3j]], 0.3, 6, 5, seed=7)
        estimate = lmmse_estimate(PilotBlock(X=frame.x[:5].T, Y=frame.y[:5].T, sigma2=0.3))
        expected = project_detect(estimate.H_hat, frame.y[5], bpsk, 1)
        np.testing.assert_array_equal(mmse_df_detect(frame, bpsk), [expected])

    def test_hand_unrolled_bpsk(self):
        bpsk = build_constellation("bpsk")
        sigma2 = 0.5
        frame = _frame("bpsk", [[0.6 + 0.2j]], sigma2, 4, 1, seed=8)

        known_x = [frame.x[0, 0]]
        expected = []
        for t in (1, 2, 3):
            ys = frame.y[:t, 0]
            h = np.sum(ys * np.conj(known_x)) / (np.sum(np.abs(known_x) ** 2) + sigma2)
            distances = [abs(h * s - frame.y[t, 0]) ** 2 for s in bpsk.points]
            decision = int(np.argmin(distances))
            expected.append(decision)
            known_x.append(bpsk.points[decision])

        np.testing.assert_array_equal(mmse_df_detect(frame, bpsk), expected)

    def test_oracle_feedback_equals_growing_pilot_set(self):
        qam = build_constellation("16qam")
        frame = _frame("16qam", [[1.1 - 0.4j]], 0.05, 10, 1, seed=9)
        expected = []
        for t in range(1, 10):
            estimate = lmmse_estimate(PilotBlock(X=frame.x[:t].T, Y=frame.y[:t].T, sigma2=0.05))
            expected.append(project_detect(estimate.H_hat, frame.y[t], qam, 1))
        np.testing.assert_array_equal(mmse_df_detect(frame, qam, oracle_feedback=True), expected)

    def test_batch_agrees_with_single(self):
        engine = ChannelEngine("qpsk", SnrRange(5, 15), seed=10, n_t=2, n_r=2)
        batch = engine.batch((EVAL_STREAM,), range(8), 9, 2)
        table = joint_symbol_table(engine.constellation, 2)
        batched = mmse_df_detect_batch(batch, table)
        for i in range(8):
            frame = engine.frame((EVAL_STREAM, i), 9, 2)
            np.testing.assert_array_equal(batched[i], mmse_df_detect(frame, engine.constellation, n_t=2))


def test_pilot_only_ser_decreases_with_pilots():
    engine = ChannelEngine("bpsk", SnrRange(15, 15), seed=11)
    batch = engine.batch((EVAL_STREAM,), range(10_000), 21, 1)
    table = joint_symbol_table(engine.constellation, 1)
    sers = []
    for m in (1, 2, 16):
        detected = pilot_only_detect_batch(batch, m, table, positions=range(16, 21))
        sers.append(np.mean(detected != batch.x_indices[:, 16:21]))
    assert sers[0] >= sers[1] >= sers[2]


def _mlsd_oracle(Y, sigma2, points, first_symbol):
    best, best_score = None, -np.inf
    for tail in itertools.product(range(len(points)), repeat=len(Y) - 1):
        S = points[[first_symbol, *tail]]
        energy = np.sum(np.abs(S) ** 2)
        score = abs(np.sum(S * np.conj(Y))) ** 2 / (sigma2 * energy + sigma2 ** 2) - np.log(energy + sigma2)
        if score > best_score:
            best, best_score = [first_symbol, *tail], score
    return best


class TestMlsdDetect:
    @pytest.mark.parametrize("scheme", ["bpsk", "qpsk"])
    @pytest.mark.parametrize("T", [2, 3])
    def test_matches_exhaustive_oracle(self, scheme, T):
        rng = np.random.default_rng(12)
        constellation = build_constellation(scheme)
        for _ in range(1000):
            truth = rng.integers(0, constellation.size, size=T)
            sigma2 = rng.uniform(0.05, 1.0)
            Y = random_complex(rng, ()) * constellation.points[truth] + np.sqrt(sigma2) * random_complex(rng, T)
            detected = mlsd_detect(Y, sigma2, constellation, int(truth[0]))
            assert list(detected) == _mlsd_oracle(Y, sigma2, constellation.points, int(truth[0]))

    @pytest.mark.parametrize("scheme", ["bpsk", "qpsk"])
    def test_noiseless_sequence_recovered(self, scheme):
        rng = np.random.default_rng(13)
        constellation = build_constellation(scheme)
        truth = rng.integers(0, constellation.size, size=6)
        Y = (0.7 - 0.4j) * constellation.points[truth]
        np.testing.assert_array_equal(mlsd_detect(Y, 0.0, constellation, int(truth[0])), truth)

    def test_bpsk_reduced_objective_agrees(self):
        rng = np.random.default_rng(14)
        bpsk = build_constellation("bpsk")
        for _ in range(50):
            Y = random_complex(rng, 5)
            reduced = max(
                itertools.product(range(2), repeat=4),
                key=lambda tail: abs(np.sum(bpsk.points[[0, *tail]] * np.conj(Y))) ** 2,
            )
            np.testing.assert_array_equal(mlsd_detect(Y, 0.3, bpsk, 0), [0, *reduced])

    def test_common_phase_does_not_change_output(self):
        rng = np.random.default_rng(15)
        qpsk = build_constellation("qpsk")
        Y = random_complex(rng, 5)
        np.testing.assert_array_equal(
            mlsd_detect(Y, 0.2, qpsk, 2), mlsd_detect(Y * np.exp(1j * 1.234), 0.2, qpsk, 2)
        )

    def test_complexity_guard(self):
        with pytest.raises(ComplexityGuardError):
            mlsd_detect(np.ones(13), 0.1, build_constellation("bpsk"), 0, max_T=12)

    def test_qam_unsupported(self):
        with pytest.raises(UnsupportedConstellationError):
            mlsd_detect(np.ones(3), 0.1, build_constellation("16qam"), 0)

    def test_batch_agrees_with_single(self):
        rng = np.random.default_rng(16)
        qpsk = build_constellation("qpsk")
        Y = random_complex(rng, (20, 4))
        sigma2 = rng.uniform(0.05, 0.5, size=20)
        first = rng.integers(0, 4, size=20)
        batched = mlsd_detect_batch(Y, sigma2, qpsk, first, max_T=8)
        for b in range(20):
            np.testing.assert_array_equal(batched[b], mlsd_detect(Y[b], sigma2[b], qpsk, int(first[b]), max_T=8))
