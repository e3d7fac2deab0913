"""Builders for the three swept families (MLP, single-conv CNN, small ViT),
the first-phase topology grammar, and parameter counting."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import ConfigurationError, Tensor

FAMILIES = ("MLP", "CNN", "VIT")
MLP_WIDTHS = (1, 2, 3, 5, 10, 20, 30, 50, 100, 200, 500, 1000)
CNN_CHANNELS = tuple(range(1, 33))
VIT_DIMS = tuple(range(1, 17))
DEFAULT_GRIDS = {"MLP": MLP_WIDTHS, "CNN": CNN_CHANNELS, "VIT": VIT_DIMS}
INPUT_SHAPES = {"mnist": (1, 28, 28), "fashion_mnist": (1, 28, 28), "cifar10": (3, 32, 32)}
NUM_CLASSES = 10

MLP_WEIGHT_STD = 0.05
CNN_CLASSIFIER_STD = 0.01
VIT_WEIGHT_STD = 0.1
VIT_GRID = 7
VIT_BLOCKS = 2
VIT_HEADS = 1


class Shape(str, Enum):
    INCREASE = "increase"
    DECREASE = "decrease"
    EQUAL = "equal"


@dataclass(frozen=True)
class ModelSpec:
    family: str
    dataset: str
    capacity: int
    hidden_layers: int = 1
    pattern: tuple = ()
    init_seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.dataset not in INPUT_SHAPES:
            raise ValueError(f"dataset must be one of {tuple(INPUT_SHAPES)}, got {self.dataset!r}")
        if int(self.capacity) < 1:
            raise ValueError(f"capacity must be >= 1, got {self.capacity}")
        pattern = tuple(Shape(p) for p in self.pattern)
        object.__setattr__(self, "pattern", pattern)
        if self.family == "MLP":
            if not 1 <= self.hidden_layers <= 4:
                raise ValueError(f"hidden_layers must be in 1..4, got {self.hidden_layers}")
            if pattern and len(pattern) != self.hidden_layers - 1:
                raise ValueError(f"pattern needs {self.hidden_layers - 1} relations, got {len(pattern)}")

    @property
    def shape_pattern(self) -> tuple:
        if self.family == "MLP" and not self.pattern:
            return (Shape.EQUAL,) * (self.hidden_layers - 1)
        return self.pattern

    def identity(self) -> dict:
        """Fields that identify the architecture (seed excluded)."""
        return {"family": self.family, "dataset": self.dataset, "capacity": int(self.capacity),
                "hidden_layers": int(self.hidden_layers), "pattern": [p.value for p in self.shape_pattern]}

    def to_dict(self) -> dict:
        return {**self.identity(), "init_seed": int(self.init_seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], d["dataset"], int(d["capacity"]), int(d.get("hidden_layers", 1)),
                   tuple(d.get("pattern", ())), int(d.get("init_seed", 0)))

    def with_seed(self, seed: int) -> "ModelSpec":
        return replace(self, init_seed=int(seed))


def shape_patterns(hidden_layers: int) -> list[tuple]:
    return list(itertools.product(tuple(Shape), repeat=hidden_layers - 1))


def enumerate_first_phase(hidden_layers: int, dataset: str = "mnist",
                          widths=MLP_WIDTHS) -> list[ModelSpec]:
    """All 3**(L-1) shape patterns crossed with the width grid."""
    if not 1 <= hidden_layers <= 4:
        raise ValueError(f"hidden_layers must be in 1..4, got {hidden_layers}")
    return [ModelSpec("MLP", dataset, w, hidden_layers, pattern)
            for pattern in shape_patterns(hidden_layers) for w in widths]


def widths_from_pattern(base: int, pattern) -> list[int]:
    widths = [int(base)]
    for rel in pattern:
        rel = Shape(rel)
        if rel is Shape.INCREASE:
            widths.append(widths[-1] * 2)
        elif rel is Shape.DECREASE:
            widths.append(max(1, math.ceil(widths[-1] / 2)))
        else:
            widths.append(widths[-1])
    return widths


# -- models ---------------------------------------------------------------------
@dataclass
class Param:
    name: str
    tensor: Tensor
    kind: str  # weight | bias | gain | shift | token


class _NoQuant:
    def weight(self, name, w):
        return w

    def act(self, name, x):
        return x


NO_QUANT = _NoQuant()


@dataclass
class Model:
    spec: ModelSpec
    params: list = field(default_factory=list)

    def __post_init__(self):
        self._by_name = {p.name: p.tensor for p in self.params}

    def _p(self, name) -> Tensor:
        return self._by_name[name]

    @property
    def param_count(self) -> int:
        return count_params(self)

    def parameters(self) -> list[Tensor]:
        return [p.tensor for p in self.params]

    def state(self) -> list[np.ndarray]:
        return [p.tensor.data.copy() for p in self.params]

    def load_state(self, arrays):
        for p, arr in zip(self.params, arrays, strict=True):
            if arr.shape != p.tensor.shape:
                raise ValueError(f"{p.name}: shape {arr.shape} != {p.tensor.shape}")
            p.tensor.data = np.array(arr, dtype=p.tensor.data.dtype, copy=True)

    def forward(self, x: np.ndarray, quant=NO_QUANT) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, quant=NO_QUANT) -> Tensor:
        return self.forward(x, quant)


def count_params(model) -> int:
    """Element count over learnable tensors (fixed buffers are not parameters)."""
    return int(sum(p.tensor.size for p in getattr(model, "params", [])))


def _dense(quant, x, w, b, name):
    return T.add(T.matmul(x, quant.weight(name + ".weight", w)), b)


class MLP(Model):
    def forward(self, x, quant=NO_QUANT):
        h = Tensor(np.asarray(x, dtype=np.float32).reshape(len(x), -1))
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            name = f"fc{i}"
            h = _dense(quant, h, self._p(name + ".weight"), self._p(name + ".bias"), name)
            if i < n_layers - 1:
                h = T.relu(h)
            h = quant.act(name, h)
        return h


class CNN(Model):
    def forward(self, x, quant=NO_QUANT):
        x = Tensor(np.asarray(x, dtype=np.float32))
        h = T.conv2d_3x3_valid(x, quant.weight("conv.weight", self._p("conv.weight")), self._p("conv.bias"))
        h = quant.act("conv", T.relu(h))
        h = T.flatten(h)
        return quant.act("fc", _dense(quant, h, self._p("fc.weight"), self._p("fc.bias"), "fc"))


def sinusoidal_table(positions: int, dim: int) -> np.ndarray:
    pos = np.arange(positions, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(np.float32)


def patchify(x: np.ndarray, grid: int = VIT_GRID) -> np.ndarray:
    """``[B,C,H,W]`` -> ``[B, grid*grid, C*ph*pw]`` in row-major patch order."""
    b, c, h, w = x.shape
    ph, pw = h // grid, w // grid
    p = x.reshape(b, c, grid, ph, grid, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(p.reshape(b, grid * grid, c * ph * pw), dtype=np.float32)


class ViT(Model):
    def __post_init__(self):
        super().__post_init__()
        self.pos_embedding = sinusoidal_table(VIT_GRID * VIT_GRID + 1, self.spec.capacity)

    def forward(self, x, quant=NO_QUANT):
        x = np.asarray(x, dtype=np.float32)
        if x.shape[-2:] != (28, 28):
            raise ConfigurationError(f"ViT expects 28x28 inputs, got {x.shape[-2:]}")
        return self.encode(Tensor(patchify(x)), quant)

    def encode(self, patches: Tensor, quant=NO_QUANT) -> Tensor:
        p = self._p
        b = patches.shape[0]
        d = self.spec.capacity
        tokens = quant.act("embed", _dense(quant, patches, p("embed.weight"), p("embed.bias"), "embed"))
        cls = T.add(Tensor(np.zeros((b, 1, d), dtype=np.float32)), p("cls_token"))
        h = T.add(T.concat([cls, tokens], axis=1), self.pos_embedding)
        for i in range(VIT_BLOCKS):
            pre = f"block{i}."
            z = T.layer_norm(h, p(pre + "ln1.gain"), p(pre + "ln1.shift"))
            a = T.multi_head_attention(
                z, *(quant.weight(pre + f"attn.{w}", p(pre + f"attn.{w}")) for w in ("wq", "wk", "wv", "wo")),
                heads=VIT_HEADS)
            h = T.add(h, quant.act(pre + "attn", a))
            z = T.layer_norm(h, p(pre + "ln2.gain"), p(pre + "ln2.shift"))
            f = quant.act(pre + "ffn1", T.relu(_dense(quant, z, p(pre + "ffn1.weight"), p(pre + "ffn1.bias"), pre + "ffn1")))
            f = quant.act(pre + "ffn2", _dense(quant, f, p(pre + "ffn2.weight"), p(pre + "ffn2.bias"), pre + "ffn2"))
            h = T.add(h, f)
        c = T.layer_norm(h[:, 0, :], p("ln_out.gain"), p("ln_out.shift"))
        return quant.act("head", _dense(quant, c, p("head.weight"), p("head.bias"), "head"))


# -- builders -------------------------------------------------------------------
def _normal(rng, shape, std, name, kind="weight"):
    return Param(name, T.sample_normal(rng, shape, 0.0, std, requires_grad=True), kind)


def _zeros(shape, name, kind="bias"):
    return Param(name, Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True), kind)


def _ones(shape, name, kind="gain"):
    return Param(name, Tensor(np.ones(shape, dtype=np.float32), requires_grad=True), kind)


def build_mlp(spec: ModelSpec) -> MLP:
    if spec.family != "MLP":
        raise ValueError(f"build_mlp needs an MLP spec, got {spec.family}")
    rng = Rng(spec.init_seed, "init")
    sizes = [int(np.prod(INPUT_SHAPES[spec.dataset]))]
    sizes += widths_from_pattern(spec.capacity, spec.shape_pattern) + [NUM_CLASSES]
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.append(_normal(rng, (fan_in, fan_out), MLP_WEIGHT_STD, f"fc{i}.weight"))
        params.append(_zeros((fan_out,), f"fc{i}.bias"))
    return MLP(spec, params)


def build_cnn(spec: ModelSpec) -> CNN:
    if spec.family != "CNN":
        raise ValueError(f"build_cnn needs a CNN spec, got {spec.family}")
    rng = Rng(spec.init_seed, "init")
    cin, h, w = INPUT_SHAPES[spec.dataset]
    c = spec.capacity
    kaiming_std = math.sqrt(2.0 / (c * 9))  # fan_out mode: output channels x receptive field
    params = [
        _normal(rng, (c, cin, 3, 3), kaiming_std, "conv.weight"),
        _zeros((c,), "conv.bias"),
        _normal(rng, (c * (h - 2) * (w - 2), NUM_CLASSES), CNN_CLASSIFIER_STD, "fc.weight"),
        _zeros((NUM_CLASSES,), "fc.bias"),
    ]
    return CNN(spec, params)


def build_vit(spec: ModelSpec) -> ViT:
    if spec.family != "VIT":
        raise ValueError(f"build_vit needs a VIT spec, got {spec.family}")
    rng = Rng(spec.init_seed, "init")
    cin = INPUT_SHAPES[spec.dataset][0]
    d = spec.capacity
    patch_dim = cin * (28 // VIT_GRID) ** 2
    params = [
        _normal(rng, (patch_dim, d), VIT_WEIGHT_STD, "embed.weight"),
        _zeros((d,), "embed.bias"),
        _normal(rng, (1, 1, d), VIT_WEIGHT_STD, "cls_token", kind="token"),
    ]
    for i in range(VIT_BLOCKS):
        pre = f"block{i}."
        params += [_ones((d,), pre + "ln1.gain"), _zeros((d,), pre + "ln1.shift", "shift")]
        params += [_normal(rng, (d, d), VIT_WEIGHT_STD, pre + f"attn.{w}") for w in ("wq", "wk", "wv", "wo")]
        params += [_ones((d,), pre + "ln2.gain"), _zeros((d,), pre + "ln2.shift", "shift")]
        params += [_normal(rng, (d, d), VIT_WEIGHT_STD, pre + "ffn1.weight"), _zeros((d,), pre + "ffn1.bias"),
                   _normal(rng, (d, d), VIT_WEIGHT_STD, pre + "ffn2.weight"), _zeros((d,), pre + "ffn2.bias")]
    params += [_ones((d,), "ln_out.gain"), _zeros((d,), "ln_out.shift", "shift"),
               _normal(rng, (d, NUM_CLASSES), VIT_WEIGHT_STD, "head.weight"), _zeros((NUM_CLASSES,), "head.bias")]
    return ViT(spec, params)


BUILDERS = {"MLP": build_mlp, "CNN": build_cnn, "VIT": build_vit}


def build_model(spec: ModelSpec) -> Model:
    return BUILDERS[spec.family](spec)
