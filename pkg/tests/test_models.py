import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minprof.compression import QATContext
from minprof.models import (
    MLP_WIDTHS,
    ModelSpec,
    Shape,
    build_model,
    count_params,
    enumerate_first_phase,
    patchify,
    shape_patterns,
    sinusoidal_table,
    widths_from_pattern,
)
from minprof.tensor import ConfigurationError


def mlp_params(inp, widths):
    sizes = [inp] + widths + [10]
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def cnn_params(c_in, c, side):
    return c * c_in * 9 + c + c * (side - 2) ** 2 * 10 + 10


def vit_params(c_in, d):
    # embed + class token + 2 blocks (2 LN, 4 attention mats, 2 FFN layers) + final LN + head
    return (16 * c_in * d + d) + d + 2 * (2 * d + 4 * d * d + 2 * d + 2 * (d * d + d)) + 2 * d + (10 * d + 10)


class TestEnumeration:
    @pytest.mark.parametrize("depth,count", [(1, 12), (2, 36), (3, 108), (4, 324)])
    def test_counts(self, depth, count):
        specs = enumerate_first_phase(depth)
        assert len(specs) == count
        assert len({(s.capacity, s.pattern) for s in specs}) == count

    def test_patterns_for_four_layers(self):
        assert len(shape_patterns(4)) == 27

    @pytest.mark.parametrize("depth", [0, 5])
    def test_depth_out_of_range(self, depth):
        with pytest.raises(ValueError):
            enumerate_first_phase(depth)

    @pytest.mark.parametrize("base,pattern,expected", [
        (5, ("increase", "decrease", "equal"), [5, 10, 5, 5]),
        (3, ("decrease", "decrease"), [3, 2, 1]),
        (1, ("decrease",), [1, 1]),
        (100, (), [100]),
    ])
    def test_widths_from_pattern(self, base, pattern, expected):
        assert widths_from_pattern(base, pattern) == expected

    @given(st.sampled_from(MLP_WIDTHS), st.lists(st.sampled_from(list(Shape)), max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_widths_positive(self, base, pattern):
        ws = widths_from_pattern(base, pattern)
        assert len(ws) == len(pattern) + 1 and min(ws) >= 1


class TestSpec:
    def test_default_pattern_is_equal(self):
        assert ModelSpec("MLP", "mnist", 5, 3).shape_pattern == (Shape.EQUAL, Shape.EQUAL)

    def test_round_trip(self):
        spec = ModelSpec("MLP", "mnist", 5, 3, ("increase", "equal"), init_seed=9)
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("kwargs", [
        dict(family="RNN", dataset="mnist", capacity=5),
        dict(family="MLP", dataset="svhn", capacity=5),
        dict(family="MLP", dataset="mnist", capacity=0),
        dict(family="MLP", dataset="mnist", capacity=5, hidden_layers=5),
        dict(family="MLP", dataset="mnist", capacity=5, hidden_layers=2, pattern=("equal", "equal")),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelSpec(**kwargs)


class TestParamCounts:
    @pytest.mark.parametrize("spec,expected", [
        (ModelSpec("MLP", "mnist", 100), mlp_params(784, [100])),
        (ModelSpec("MLP", "mnist", 100, 4), mlp_params(784, [100] * 4)),
        (ModelSpec("MLP", "mnist", 5, 3, ("increase", "decrease")), mlp_params(784, [5, 10, 5])),
        (ModelSpec("MLP", "cifar10", 10), mlp_params(3072, [10])),
        (ModelSpec("CNN", "mnist", 8), cnn_params(1, 8, 28)),
        (ModelSpec("CNN", "cifar10", 4), cnn_params(3, 4, 32)),
        (ModelSpec("VIT", "mnist", 16), vit_params(1, 16)),
        (ModelSpec("VIT", "cifar10", 3), vit_params(3, 3)),
    ])
    def test_counts(self, spec, expected):
        model = build_model(spec)
        assert model.param_count == expected == count_params(model)

    def test_known_values(self):
        assert build_model(ModelSpec("MLP", "mnist", 100)).param_count == 79510
        assert build_model(ModelSpec("CNN", "mnist", 8)).param_count == 54170


class TestInit:
    def test_same_seed_same_weights(self):
        a = build_model(ModelSpec("VIT", "mnist", 4, init_seed=3)).state()
        b = build_model(ModelSpec("VIT", "mnist", 4, init_seed=3)).state()
        c = build_model(ModelSpec("VIT", "mnist", 4, init_seed=4)).state()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not all(np.array_equal(x, y) for x, y in zip(a, c))

    def test_biases_zero_and_layernorm_identity(self):
        model = build_model(ModelSpec("VIT", "mnist", 4))
        for p in model.params:
            if p.kind == "bias":
                assert not p.tensor.data.any()
            if p.kind == "gain":
                np.testing.assert_array_equal(p.tensor.data, 1.0)

    def test_cnn_kernel_scale(self):
        model = build_model(ModelSpec("CNN", "mnist", 32, init_seed=1))
        k = model.params[0].tensor.data
        assert k.shape == (32, 1, 3, 3)
        assert k.std() == pytest.approx(np.sqrt(2 / (32 * 9)), rel=0.15)

    def test_mlp_weight_scale(self):
        from minprof.models import MLP_WEIGHT_STD
        w = build_model(ModelSpec("MLP", "mnist", 200, init_seed=2)).params[0].tensor.data
        assert w.std() == pytest.approx(MLP_WEIGHT_STD, rel=0.02)


class TestForward:
    @pytest.mark.parametrize("spec", [
        ModelSpec("MLP", "mnist", 3, 2), ModelSpec("CNN", "mnist", 2), ModelSpec("VIT", "mnist", 4),
        ModelSpec("MLP", "cifar10", 3), ModelSpec("CNN", "cifar10", 2),
    ])
    def test_logit_shapes(self, spec):
        shape = (1, 28, 28) if spec.dataset == "mnist" else (3, 32, 32)
        x = np.random.default_rng(0).normal(size=(5,) + shape).astype(np.float32)
        assert build_model(spec)(x).shape == (5, 10)

    def test_vit_requires_28(self):
        model = build_model(ModelSpec("VIT", "cifar10", 4))
        with pytest.raises(ConfigurationError):
            model(np.zeros((1, 3, 32, 32), dtype=np.float32))
        assert model(np.zeros((1, 3, 28, 28), dtype=np.float32)).shape == (1, 10)

    def test_patchify_layout(self):
        x = np.arange(28 * 28, dtype=np.float32).reshape(1, 1, 28, 28)
        p = patchify(x)
        assert p.shape == (1, 49, 16)
        np.testing.assert_array_equal(p[0, 1], x[0, 0, 0:4, 4:8].reshape(-1))
        np.testing.assert_array_equal(p[0, 7], x[0, 0, 4:8, 0:4].reshape(-1))

    def test_sinusoidal_table(self):
        t = sinusoidal_table(50, 4)
        assert t.shape == (50, 4)
        np.testing.assert_allclose(t[0], [0, 1, 0, 1], atol=1e-7)
        np.testing.assert_allclose(t[3, 0], np.sin(3.0), rtol=1e-6)

    def test_gradients_reach_every_parameter(self):
        from minprof.tensor import softmax_cross_entropy
        for fam in ("MLP", "CNN", "VIT"):
            model = build_model(ModelSpec(fam, "mnist", 4, init_seed=1))
            x = np.random.default_rng(1).normal(size=(3, 1, 28, 28)).astype(np.float32)
            softmax_cross_entropy(model(x), [0, 1, 2]).backward()
            assert all(p.grad is not None for p in model.parameters()), fam

    def test_quant_hooks_called(self):
        ctx = QATContext()
        build_model(ModelSpec("MLP", "mnist", 3, 2))(np.zeros((2, 1, 28, 28), dtype=np.float32), ctx)
        kinds = {k[0] for k in ctx.ranges}
        assert kinds == {"w", "a"}
