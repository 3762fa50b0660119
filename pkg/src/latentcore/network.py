"""Residual network whose 3x3 convolutions come from shared Tucker cores.

Layout per task: a 3x3 stem, then one macro-module per entry of
``ArchConfig.channels``. A 1x1 projection sits in front of every module
whose width differs from the previous one, so all convolutions inside a
module are square in channels and can be grouped into one tensor. The
first convolution of each module has stride 2; the matching shortcut is the
stride-2 subsampled input. Global average pooling feeds a per-task linear
head.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, UnknownTaskError
from .tucker import (
    GroupLayout,
    ParamGroup,
    SharedCore,
    TaskFactorSet,
    init_source,
    init_task_factors,
    materialize_graph,
)

MODES = ("source", "adapt", "head")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator used for every random initializer."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class ArchConfig:
    channels: Tuple[int, ...] = (64, 128, 256)
    units_per_module: int = 4
    blocks_per_unit: int = 2
    kernel: Tuple[int, int] = (3, 3)
    in_channels: int = 3
    num_classes: int = 10
    input_resolution: int = 72
    init_std: float = 0.002
    ranks: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.ranks is not None:
            self.ranks = tuple(tuple(int(r) for r in rk) for rk in self.ranks)
        self.validate()

    @classmethod
    def default(cls, **overrides) -> "ArchConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ArchConfig":
        params = dict(channels=(8, 16, 32), input_resolution=32)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ArchConfig":
        if name == "default":
            return cls.default(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ConfigError(f"unknown architecture preset {name!r}")

    @property
    def macro_modules(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError(f"invalid channels {self.channels}")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channel progression must be non-decreasing: {self.channels}")
        if self.units_per_module < 1 or self.blocks_per_unit < 1:
            raise ConfigError("units_per_module and blocks_per_unit must be positive")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"kernel sizes must be odd: {self.kernel}")
        if self.ranks is not None and len(self.ranks) != self.macro_modules:
            raise ConfigError("need one rank tuple per macro-module")
        for b in range(self.macro_modules):
            self.layout(b)

    def layout(self, module: int) -> GroupLayout:
        c = self.channels[module]
        dims = (c, c, self.kernel[0], self.kernel[1], self.blocks_per_unit, self.units_per_module)
        ranks = None if self.ranks is None else self.ranks[module]
        try:
            return GroupLayout(dims, ranks)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def layouts(self) -> List[GroupLayout]:
        return [self.layout(b) for b in range(self.macro_modules)]

    def projection_modules(self) -> List[int]:
        return [b for b in range(1, self.macro_modules) if self.channels[b] != self.channels[b - 1]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["kernel"] = list(self.kernel)
        d["ranks"] = None if self.ranks is None else [list(r) for r in self.ranks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if d.get("ranks") is not None:
            d["ranks"] = tuple(tuple(r) for r in d["ranks"])
        return cls(**d)


@dataclass
class BatchNorm:
    gamma: ad.Node
    beta: ad.Node
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchNorm":
        return cls(ad.parameter(np.ones(channels)), ad.parameter(np.zeros(channels)),
                   np.zeros(channels), np.ones(channels))

    def clone(self) -> "BatchNorm":
        return BatchNorm(ad.parameter(self.gamma.data), ad.parameter(self.beta.data),
                         self.running_mean.copy(), self.running_var.copy())

    def __call__(self, x, training: bool, update_stats: bool = True) -> ad.Node:
        return ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training, update_stats=update_stats)


@dataclass
class TaskState:
    """Everything task-specific: factors, norms, projections, stem and head."""

    task_id: str
    num_classes: int
    factors: List[TaskFactorSet]
    stem: ad.Node
    bn: Dict[str, BatchNorm]
    projections: Dict[int, ad.Node]
    head_weight: ad.Node
    head_bias: ad.Node

    def bn_params(self) -> List[Tuple[str, ad.Node]]:
        out = []
        for name, bn in self.bn.items():
            out.append((f"bn/{name}/gamma", bn.gamma))
            out.append((f"bn/{name}/beta", bn.beta))
        return out

    def named_parameters(self) -> List[Tuple[str, ad.Node]]:
        out = [(f"factor/{b}/{k}", f) for b, fs in enumerate(self.factors)
               for k, f in enumerate(fs.factors)]
        out.append(("stem", self.stem))
        out.extend(self.bn_params())
        out.extend((f"proj/{b}", p) for b, p in sorted(self.projections.items()))
        out.append(("head/weight", self.head_weight))
        out.append(("head/bias", self.head_bias))
        return out

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        out = []
        for name, bn in self.bn.items():
            out.append((f"bn/{name}/running_mean", bn.running_mean))
            out.append((f"bn/{name}/running_var", bn.running_var))
        return out


def _bn_names(config: ArchConfig) -> List[str]:
    names = ["stem"]
    for b in range(config.macro_modules):
        for i in range(config.units_per_module):
            for j in range(config.blocks_per_unit):
                names.append(f"m{b}.u{i}.b{j}")
    return names


def _uniform_head(num_classes: int, fan_in: int, rng) -> Tuple[ad.Node, ad.Node]:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(num_classes, fan_in))
    b = rng.uniform(-bound, bound, size=(num_classes,))
    return ad.parameter(w), ad.parameter(b)


@dataclass
class Model:
    config: ArchConfig
    cores: List[SharedCore]
    tasks: Dict[str, TaskState] = field(default_factory=dict)
    source_task: str = "source"

    def task(self, task_id: str) -> TaskState:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTaskError(task_id) from None

    def freeze_cores(self) -> None:
        for c in self.cores:
            c.freeze()

    @property
    def cores_frozen(self) -> bool:
        return all(c.frozen for c in self.cores)

    def add_task(self, task_id: str, num_classes: Optional[int] = None,
                 from_task: Optional[str] = None, factor_init: str = "copy",
                 head_init: str = "uniform", seed: int = 0) -> TaskState:
        """Register a new task initialised from ``from_task`` (default: source).

        Factors, batch-norm state, projections and stem are copied. The head
        is drawn uniformly by default (``"uniform"``), copied with ``"copy"``,
        and ``"auto"`` copies it only when the class count is unchanged.
        """
        if task_id in self.tasks:
            raise ConfigError(f"task {task_id!r} already exists")
        base = self.task(from_task or self.source_task)
        num_classes = base.num_classes if num_classes is None else int(num_classes)
        rng = make_rng(seed)
        factors = [init_task_factors(fs, task_id, factor_init, rng) for fs in base.factors]
        if head_init == "auto":
            head_init = "copy" if num_classes == base.num_classes else "uniform"
        if head_init == "copy":
            if num_classes != base.num_classes:
                raise ConfigError("cannot copy a head with a different class count")
            head_w = ad.parameter(base.head_weight.data)
            head_b = ad.parameter(base.head_bias.data)
        elif head_init == "uniform":
            head_w, head_b = _uniform_head(num_classes, self.config.channels[-1], rng)
        else:
            raise ConfigError(f"unknown head init {head_init!r}")
        state = TaskState(
            task_id=task_id,
            num_classes=num_classes,
            factors=factors,
            stem=ad.parameter(base.stem.data),
            bn={k: v.clone() for k, v in base.bn.items()},
            projections={b: ad.parameter(p.data) for b, p in base.projections.items()},
            head_weight=head_w,
            head_bias=head_b,
        )
        self.tasks[task_id] = state
        return state

    def remove_task(self, task_id: str) -> None:
        if task_id == self.source_task:
            raise ConfigError("the source task cannot be removed")
        self.task(task_id)
        del self.tasks[task_id]

    def named_parameters(self, task_id: Optional[str] = None) -> List[Tuple[str, ad.Node]]:
        out = [(f"core/{b}", c.core) for b, c in enumerate(self.cores)]
        ids = self.tasks if task_id is None else [task_id]
        for tid in ids:
            out.extend((f"task/{tid}/{n}", p) for n, p in self.task(tid).named_parameters())
        return out

    def parameter_count(self, task_id: Optional[str] = None) -> int:
        """Parameters needed to run ``task_id`` (cores plus that task's state)."""
        task_id = self.source_task if task_id is None else task_id
        return sum(int(p.data.size) for _, p in self.named_parameters(task_id))


def build(config: ArchConfig, source_task: str = "source", seed: int = 0,
          num_classes: Optional[int] = None, hooi_iters: int = 0) -> Model:
    """Instantiate a model whose cores come from Tucker-decomposing a random init."""
    config.validate()
    rng = make_rng(seed)
    std = config.init_std
    cores, factor_sets = [], []
    for b, layout in enumerate(config.layouts()):
        weights = [rng.normal(0.0, std, size=layout.kernel_shape) for _ in range(layout.n_layers)]
        core, factors = init_source(ParamGroup(layout, weights), layout, source_task, hooi_iters)
        cores.append(core)
        factor_sets.append(factors)
    kh, kw = config.kernel
    c0 = config.channels[0]
    stem = ad.parameter(rng.normal(0.0, std, size=(c0, config.in_channels, kh, kw)))
    projections = {
        b: ad.parameter(rng.normal(0.0, std, size=(config.channels[b], config.channels[b - 1], 1, 1)))
        for b in config.projection_modules()
    }
    bn = {}
    for name in _bn_names(config):
        width = c0 if name == "stem" else config.channels[int(name[1:name.index(".")])]
        bn[name] = BatchNorm.fresh(width)
    n_cls = config.num_classes if num_classes is None else int(num_classes)
    head_w, head_b = _uniform_head(n_cls, config.channels[-1], rng)
    state = TaskState(source_task, n_cls, factor_sets, stem, bn, projections, head_w, head_b)
    return Model(config, cores, {source_task: state}, source_task)


def forward(model: Model, task_id: str, batch, train: bool = False,
            update_stats: bool = True) -> ad.Node:
    """Class logits of shape (batch, num_classes) for ``task_id``."""
    state = model.task(task_id)
    cfg = model.config
    x = batch if isinstance(batch, ad.Node) else ad.constant(batch)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ConfigError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
    pad = cfg.kernel[0] // 2
    h = ad.conv2d(x, state.stem, 1, pad)
    h = ad.relu(state.bn["stem"](h, train, update_stats))
    for b in range(cfg.macro_modules):
        if b in state.projections:
            h = ad.conv2d(h, state.projections[b], 1, 0)
        kernels = materialize_graph(model.cores[b], state.factors[b])
        for i in range(cfg.units_per_module):
            stride = 2 if i == 0 else 1
            shortcut = h[:, :, ::2, ::2] if stride == 2 else h
            out = h
            for j in range(cfg.blocks_per_unit):
                out = ad.conv2d(out, kernels[i * cfg.blocks_per_unit + j],
                                stride if j == 0 else 1, pad)
                out = state.bn[f"m{b}.u{i}.b{j}"](out, train, update_stats)
                if j < cfg.blocks_per_unit - 1:
                    out = ad.relu(out)
            h = ad.relu(out + shortcut)
    pooled = ad.adaptive_avg_pool(h)
    return ad.linear(pooled, state.head_weight, state.head_bias)


def predict(model: Model, task_id: str, images, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits as a numpy array."""
    images = np.asarray(images, dtype=np.float64)
    chunks = [forward(model, task_id, images[i:i + batch_size]).data
              for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, model.task(task_id).num_classes))
    return np.concatenate(chunks)


def trainable_params(model: Model, task_id: str, mode: str = "adapt") -> List[Tuple[str, ad.Node]]:
    """Parameters optimised in ``mode``.

    ``source``: cores plus every parameter of the task. ``adapt``: the
    task's factors, batch-norm affine parameters, 1x1 projections and head;
    cores and stem are excluded. ``head``: the linear head only.
    """
    state = model.task(task_id)
    prefix = f"task/{task_id}/"
    if mode == "source":
        return model.named_parameters(task_id)
    if mode == "adapt":
        out = [(f"{prefix}factor/{b}/{k}", f) for b, fs in enumerate(state.factors)
               for k, f in enumerate(fs.factors)]
        out.extend((prefix + n, p) for n, p in state.bn_params())
        out.extend((f"{prefix}proj/{b}", p) for b, p in sorted(state.projections.items()))
        out.append((prefix + "head/weight", state.head_weight))
        out.append((prefix + "head/bias", state.head_bias))
        return out
    if mode == "head":
        return [(prefix + "head/weight", state.head_weight), (prefix + "head/bias", state.head_bias)]
    raise ConfigError(f"unknown parameter mode {mode!r}; expected one of {MODES}")


def set_trainable(model: Model, selected) -> None:
    """Enable gradients exactly for ``selected`` nodes (frozen ones stay off)."""
    chosen = {id(p) for _, p in selected}
    for _, p in model.named_parameters():
        p.requires_grad = id(p) in chosen and not p.frozen
        p.grad = None


def trainable_fraction(model: Model, task_id: str, mode: str = "adapt") -> float:
    selected = sum(int(p.data.size) for _, p in trainable_params(model, task_id, mode))
    return selected / model.parameter_count(task_id)


def parameter_budget(config: ArchConfig, num_classes: Optional[int] = None) -> Dict[str, int]:
    """Parameter counts of a freshly built model, from shapes alone.

    Returns ``{"total", "cores", "adapt", "head"}``, matching
    ``Model.parameter_count`` and ``trainable_params`` without running the
    decomposition.
    """
    config.validate()
    k = config.num_classes if num_classes is None else int(num_classes)
    kh, kw = config.kernel
    cores = sum(int(np.prod(lay.ranks)) for lay in config.layouts())
    factors = sum(d * r for lay in config.layouts() for d, r in lay.factor_shapes())
    bn = 0
    for name in _bn_names(config):
        width = config.channels[0] if name == "stem" else config.channels[int(name[1:name.index(".")])]
        bn += 2 * width
    proj = sum(config.channels[b] * config.channels[b - 1] for b in config.projection_modules())
    head = k * config.channels[-1] + k
    stem = config.channels[0] * config.in_channels * kh * kw
    adapt = factors + bn + proj + head
    return {"total": cores + stem + adapt, "cores": cores, "adapt": adapt, "head": head}
