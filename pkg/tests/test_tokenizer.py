import numpy as np
import pytest

from defined.config.run_configs import ModelConfig
from defined.engines.tokenizer import tokenize, tokenize_frames, x_tokens, y_positions, y_tokens
from defined.errors import SequenceLengthError, ShapeMismatchError


def test_y_token_layout():
    config = ModelConfig(scheme="16qam")
    assert config.D_s == 16
    token = y_tokens(np.array([0.5 - 0.2j]), config.D_s)
    np.testing.assert_allclose(token, [0.5, -0.2] + [0.0] * 14)


def test_y_token_stacks_real_then_imaginary():
    token = y_tokens(np.array([1 + 2j, 3 - 4j]), 16)
    np.testing.assert_allclose(token[:4], [1, 3, 2, -4])


def test_x_token_is_one_hot():
    config = ModelConfig(scheme="bpsk")
    assert config.D_s == 2
    np.testing.assert_array_equal(x_tokens(1, config.D_s), [0.0, 1.0])


def test_mimo_token_width():
    assert ModelConfig(scheme="qpsk", n_t=2, n_r=2).D_s == 16
    assert ModelConfig(scheme="bpsk", n_t=1, n_r=4).D_s == 8


def test_tokenize_alternates_pairs_and_query():
    config = ModelConfig(scheme="qpsk")
    pairs = [(np.array([0.1 + 0.2j]), 3), (np.array([-0.3j]), 0)]
    sequence = tokenize(pairs, np.array([0.7]), config)
    assert sequence.length == 5
    assert sequence.y_positions == [0, 2, 4]
    np.testing.assert_array_equal(sequence.tokens[1], x_tokens(3, config.D_s))
    np.testing.assert_allclose(sequence.tokens[4][:2], [0.7, 0.0])


def test_soft_labels_become_hard_one_hot():
    config = ModelConfig(scheme="qpsk")
    sequence = tokenize([(np.array([0.1j]), [0.1, 0.2, 0.6, 0.1])], None, config)
    np.testing.assert_array_equal(sequence.tokens[1], x_tokens(2, config.D_s))


def test_too_many_pairs():
    config = ModelConfig(scheme="bpsk", T_max=3)
    pairs = [(np.array([1.0]), 0)] * 4
    with pytest.raises(SequenceLengthError):
        tokenize(pairs, None, config)


def test_too_many_tokens_with_query():
    config = ModelConfig(scheme="bpsk", T_max=3)
    pairs = [(np.array([1.0]), 0)] * 3
    with pytest.raises(SequenceLengthError):
        tokenize(pairs, np.array([1.0]), config)


def test_label_out_of_range():
    with pytest.raises(ShapeMismatchError):
        tokenize([(np.array([1.0]), 2)], None, ModelConfig(scheme="bpsk"))


def test_frame_tokenizer_matches_pair_tokenizer():
    rng = np.random.default_rng(0)
    config = ModelConfig(scheme="qpsk", n_r=2)
    y = rng.standard_normal((3, 5, 2)) + 1j * rng.standard_normal((3, 5, 2))
    labels = rng.integers(0, 4, size=(3, 5))
    batched = tokenize_frames(y, labels, config.D_s)
    assert batched.shape == (3, 9, config.D_s)
    for b in range(3):
        pairs = list(zip(y[b, :4], labels[b, :4]))
        np.testing.assert_array_equal(batched[b], tokenize(pairs, y[b, 4], config).tokens)


def test_y_positions():
    assert y_positions(3) == [0, 2, 4]
