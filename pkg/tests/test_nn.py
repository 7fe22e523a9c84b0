"""Architecture grammar, shape propagation, and the float forward pass."""

import numpy as np
import pytest

from rflab import nn
from rflab.nn import (
    ArchitectureError,
    ShapeError,
    WeightSet,
    build_model,
    conv,
    dense,
    flatten,
    pool,
    relu,
    softmax,
    validate_architecture,
)


def seq(*specs):
    return list(specs)


class TestGrammar:
    def test_minimal_accepted(self):
        counts = validate_architecture(seq(conv(16, 3), relu(), dense(5)))
        assert counts == (1, 1, 0, 0)

    def test_single_block_with_pool_and_hidden(self):
        counts = validate_architecture(
            seq(conv(16, 3), relu(), pool(3), dense(16), relu(), dense(5)))
        assert counts == (1, 1, 1, 1)

    def test_two_blocks_two_hidden(self):
        # the deeper family: M=2 blocks, K=2 hidden dense layers
        counts = validate_architecture(
            seq(conv(8, 3), relu(), pool(2),
                conv(16, 3), relu(), pool(2),
                dense(16), relu(), dense(8), relu(), dense(5)))
        assert counts == (1, 2, 2, 1)

    def test_stacked_convs_per_block(self):
        counts = validate_architecture(
            seq(conv(8, 3), relu(), conv(8, 3), relu(), pool(2), dense(5)))
        assert counts == (2, 1, 0, 1)

    def test_explicit_flatten_accepted(self):
        counts = validate_architecture(
            seq(conv(4, 3), relu(), flatten(), dense(5)))
        assert counts == (1, 1, 0, 0)

    def test_multiple_pools_per_block(self):
        counts = validate_architecture(
            seq(conv(4, 3), relu(), pool(2), pool(2), dense(5)))
        assert counts == (1, 1, 0, 2)

    @pytest.mark.parametrize("layers,pos", [
        (seq(dense(5)), 0),                                   # no conv
        (seq(pool(2), conv(4, 3), relu(), dense(5)), 0),      # pool first
        (seq(conv(4, 3), dense(5)), 1),                       # missing relu
        (seq(conv(4, 3), relu()), 2),                         # no final dense
        # dense+relu parses as a hidden pair, leaving no head at the end
        (seq(conv(4, 3), relu(), dense(5), relu()), 4),
        # the head dense must end the sequence
        (seq(conv(4, 3), relu(), dense(5), conv(4, 3), relu(), dense(5)), 3),
        (seq(conv(4, 3), relu(), softmax(), dense(5)), 2),    # softmax inside
        (seq(conv(4, 3), relu(), pool(2), flatten(), conv(4, 3), relu(),
             dense(5)), 4),                                   # conv after flatten
    ])
    def test_rejections_cite_position(self, layers, pos):
        with pytest.raises(ArchitectureError, match="position %d:" % pos):
            validate_architecture(layers)

    def test_nonuniform_blocks_rejected(self):
        layers = seq(conv(4, 3), relu(), pool(2),
                     conv(4, 3), relu(), conv(4, 3), relu(), pool(2),
                     dense(5))
        with pytest.raises(ArchitectureError, match="uniform"):
            validate_architecture(layers)


class TestLayerSpec:
    @pytest.mark.parametrize("make", [
        lambda: conv(0, 3), lambda: conv(4, 0), lambda: conv(4, 3, stride=0),
        lambda: conv(4, 3, padding="valid"), lambda: dense(0),
        lambda: pool(0), lambda: pool(2, mode="median"),
    ])
    def test_bad_fields_rejected(self, make):
        with pytest.raises(ValueError):
            make()

    def test_conv_square_default(self):
        l = conv(4, 3)
        assert (l.h, l.w) == (3, 3)
        assert conv(4, 3, 5).w == 5


class TestBuildModel:
    def test_requires_two_channels(self):
        with pytest.raises(ArchitectureError, match="2-channel"):
            build_model((1, 8, 8), seq(conv(4, 3), relu(), dense(3)),
                        ["a", "b", "c"])

    def test_head_must_match_labels(self):
        with pytest.raises(ShapeError, match="labels"):
            build_model((2, 8, 8), seq(conv(4, 3), relu(), dense(4)),
                        ["a", "b", "c"])

    def test_flatten_inserted(self):
        m = build_model((2, 8, 8), seq(conv(4, 3), relu(), dense(3)), "abc")
        assert [l.kind for l in m.layers] == ["conv", "relu", "flatten", "dense"]
        assert m.counts == (1, 1, 0, 0)

    def test_escape_hatch_for_free_form(self):
        m = build_model((4,), seq(dense(2)), ["x", "y"], check_grammar=False)
        assert m.counts is None

    def test_shapes_chain(self):
        m = build_model((2, 32, 32),
                        seq(conv(16, 3), relu(), pool(3), dense(16), relu(),
                            dense(5)), list("abcde"))
        got = {i: s for i, s in enumerate(m.shapes())}
        assert got[0] == (16, 32, 32)      # same padding, stride 1
        assert got[2] == (16, 11, 11)      # ceil(32/3)
        assert got[3] == (16 * 11 * 11,)   # inserted flatten
        assert got[4] == (16,)
        assert got[6] == (5,)

    def test_missing_flatten_shape_error(self):
        with pytest.raises(ShapeError, match="dense"):
            nn.propagate_shapes((2, 8, 8), seq(conv(4, 3), relu(), dense(3)))


class TestWeights:
    def test_shapes_and_check(self):
        m = build_model((2, 8, 8), seq(conv(4, 3), relu(), dense(3)), "abc")
        want = nn.weight_shapes(m)
        assert want[0] == {"W": (4, 2, 3, 3), "b": (4,)}
        assert want[3] == {"W": (3, 4 * 8 * 8), "b": (3,)}
        params = {i: {k: np.zeros(s) for k, s in d.items()}
                  for i, d in want.items()}
        nn.check_weights(m, WeightSet(params))

    def test_mismatch_names_layer(self):
        m = build_model((2, 8, 8), seq(conv(4, 3), relu(), dense(3)), "abc")
        params = {i: {k: np.zeros(s) for k, s in d.items()}
                  for i, d in nn.weight_shapes(m).items()}
        params[0]["W"] = np.zeros((4, 2, 3, 4))
        with pytest.raises(ShapeError, match="layer 0"):
            nn.check_weights(m, WeightSet(params))
        del params[0]
        with pytest.raises(ShapeError, match="missing"):
            nn.check_weights(m, WeightSet(params))


class TestPool:
    def test_max_example(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        np.testing.assert_array_equal(
            nn.pool_forward_batch(x, 2, "max"), [[[[4.0]]]])

    def test_avg_example(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        np.testing.assert_array_equal(
            nn.pool_forward_batch(x, 2, "avg"), [[[[2.5]]]])

    def test_p1_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
        np.testing.assert_array_equal(nn.pool_forward_batch(x, 1, "max"), x)

    def test_ceil_padding_with_zeros(self):
        # 3x3 at p=2: the ragged edge is padded with zeros before reducing,
        # so an all-negative input pools to zero in edge windows
        x = np.full((1, 1, 3, 3), -1.0)
        out = nn.pool_forward_batch(x, 2, "max")
        np.testing.assert_array_equal(out[0, 0], [[-1.0, 0.0], [0.0, 0.0]])

    def test_avg_divides_by_full_window(self):
        x = np.full((1, 1, 3, 3), 4.0)
        out = nn.pool_forward_batch(x, 2, "avg")
        # edge windows hold 2 real cells + 2 pad zeros: (4+4+0+0)/4
        np.testing.assert_array_equal(out[0, 0], [[4.0, 2.0], [2.0, 1.0]])

    def test_max_backtrack_first_tie_wins(self):
        x = np.array([[[[1.0, 1.0], [0.0, 1.0]]]])
        dy = np.ones((1, 1, 1, 1))
        dx = nn._pool_backtrack(x, 2, dy, "max")
        np.testing.assert_array_equal(dx[0, 0], [[1.0, 0.0], [0.0, 0.0]])


class TestForward:
    def test_dense_relu_example(self):
        out = nn.dense_forward(np.array([1.0, 1.0]),
                               np.array([[1.0, 2.0], [3.0, 4.0]]),
                               np.array([0.0, 1.0]), activation="relu")
        np.testing.assert_array_equal(out, [3.0, 8.0])

    def test_dense_relu_clamps(self):
        out = nn.dense_forward(np.array([5.0]), np.array([[-1.0]]),
                               np.array([0.0]), activation="relu")
        np.testing.assert_array_equal(out, [0.0])

    def test_relu(self):
        np.testing.assert_array_equal(
            nn.relu_forward(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_conv_linearity(self):
        rng = np.random.default_rng(8)
        l = conv(3, 3)
        W = rng.standard_normal((3, 2, 3, 3))
        x1 = rng.standard_normal((2, 6, 6))
        x2 = rng.standard_normal((2, 6, 6))
        lhs = nn.conv_forward(2.0 * x1 - 3.0 * x2, l, W)
        rhs = 2.0 * nn.conv_forward(x1, l, W) - 3.0 * nn.conv_forward(x2, l, W)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)

    def test_conv_shift_equivariance(self):
        # full padding, stride 1: shifting the input shifts the output
        rng = np.random.default_rng(9)
        l = conv(1, 3, padding="full")
        W = rng.standard_normal((1, 1, 3, 3))
        x = rng.standard_normal((1, 5, 5))
        xs = np.zeros((1, 6, 5))
        xs[:, 1:, :] = x  # shift down by one row
        y = nn.conv_forward(x, l, W)
        ys = nn.conv_forward(xs, l, W)
        np.testing.assert_allclose(ys[:, 1:1 + y.shape[1], :], y,
                                   rtol=1e-12, atol=1e-12)

    def test_infer_identity_head(self):
        m = build_model((3,), seq(dense(3)), "abc", check_grammar=False)
        # a flatten is inserted ahead of the dense, so parameters key by the
        # final layer index
        di = m.param_layers()[0]
        w = WeightSet({di: {"W": np.eye(3), "b": np.zeros(3)}})
        scores, label = nn.infer(m, w, np.array([0.1, 0.7, 0.2]))
        np.testing.assert_allclose(scores, [0.1, 0.7, 0.2])
        assert label == 1

    def test_zero_weights_tie_breaks_low(self):
        m = build_model((2, 6, 6), seq(conv(2, 3), relu(), dense(4)), "abcd")
        params = {i: {k: np.zeros(s) for k, s in d.items()}
                  for i, d in nn.weight_shapes(m).items()}
        scores, label = nn.infer(m, WeightSet(params),
                                 np.random.default_rng(1).standard_normal((2, 6, 6)))
        np.testing.assert_array_equal(scores, 0.0)
        assert label == 0

    def test_forward_shape_error_names_layer(self):
        m = build_model((2, 8, 8), seq(conv(4, 3), relu(), dense(3)), "abc")
        params = {i: {k: np.zeros(s) for k, s in d.items()}
                  for i, d in nn.weight_shapes(m).items()}
        with pytest.raises(ShapeError, match="layer 0"):
            nn.forward_batch(m, WeightSet(params), np.zeros((1, 3, 8, 8)))

    def test_softmax_layer_normalizes(self):
        m = build_model((2,), seq(dense(2), softmax()), "ab",
                        check_grammar=False)
        di = m.param_layers()[0]
        w = WeightSet({di: {"W": np.eye(2), "b": np.zeros(2)}})
        scores = nn.forward_batch(m, w, np.array([[3.0, 1.0]]))
        assert scores.sum() == pytest.approx(1.0)
        assert scores[0, 0] > scores[0, 1]

    def test_infer_deterministic(self):
        m = build_model((2, 8, 8), seq(conv(4, 3), relu(), pool(2), dense(3)),
                        "abc")
        rng = np.random.default_rng(10)
        params = {i: {k: rng.standard_normal(s) for k, s in d.items()}
                  for i, d in nn.weight_shapes(m).items()}
        w = WeightSet(params)
        x = rng.standard_normal((2, 8, 8))
        s1, l1 = nn.infer(m, w, x)
        s2, l2 = nn.infer(m, w, x)
        assert np.array_equal(s1, s2) and l1 == l2
