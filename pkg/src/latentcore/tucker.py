"""Grouped Tucker parametrization of a macro-module's convolution weights.

All ``L = D4 * D5`` 3x3 kernels of a macro-module are stacked into one
6th-order tensor of shape ``(out, in, kh, kw, blocks_per_unit, units)``.
That tensor is expressed as a shared core multiplied along every mode by
a task-specific factor matrix.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatchError, FrozenParameterError, RankError
from .tensor import hooi, tucker_reconstruct


@dataclass(frozen=True)
class GroupLayout:
    dims: tuple
    ranks: tuple = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        ranks = dims if self.ranks is None else tuple(int(r) for r in self.ranks)
        if len(dims) != 6 or len(ranks) != 6:
            raise DimensionMismatchError("a group layout has exactly 6 modes")
        if any(d < 1 for d in dims):
            raise DimensionMismatchError(f"mode sizes must be positive: {dims}")
        for k, (r, d) in enumerate(zip(ranks, dims)):
            if not 1 <= r <= d:
                raise RankError(f"rank {r} of mode {k} must lie in [1, {d}]")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "ranks", ranks)

    @property
    def n_layers(self) -> int:
        return self.dims[4] * self.dims[5]

    @property
    def kernel_shape(self) -> tuple:
        return self.dims[:4]

    @property
    def is_full_rank(self) -> bool:
        return self.ranks == self.dims

    def with_ranks(self, ranks) -> "GroupLayout":
        return GroupLayout(self.dims, tuple(ranks))

    def factor_shapes(self) -> List[tuple]:
        return list(zip(self.dims, self.ranks))


@dataclass
class ParamGroup:
    """The ``L`` kernels of one group, ordered by (unit index, block index)."""

    layout: GroupLayout
    weights: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != self.layout.n_layers:
            raise DimensionMismatchError(
                f"expected {self.layout.n_layers} kernels, got {len(self.weights)}"
            )
        for i, w in enumerate(self.weights):
            if tuple(np.shape(w)) != self.layout.kernel_shape:
                raise DimensionMismatchError(
                    f"kernel {i} has shape {np.shape(w)}, expected {self.layout.kernel_shape}"
                )

    def kernel(self, unit: int, block: int) -> np.ndarray:
        return self.weights[unit * self.layout.dims[4] + block]


@dataclass
class SharedCore:
    """Task-agnostic core tensor; immutable once frozen."""

    layout: GroupLayout
    core: ad.Node
    frozen: bool = False

    def __post_init__(self):
        if not isinstance(self.core, ad.Node):
            self.core = ad.parameter(self.core)
        if self.core.shape != self.layout.ranks:
            raise DimensionMismatchError(
                f"core shape {self.core.shape} differs from ranks {self.layout.ranks}"
            )
        if self.frozen:
            self.freeze()

    def freeze(self) -> None:
        self.frozen = True
        self.core.requires_grad = False
        self.core.frozen = True
        self.core.grad = None
        self.core.data.flags.writeable = False

    def set_core(self, values) -> None:
        if self.frozen:
            raise FrozenParameterError("cannot modify a frozen core")
        values = np.array(values, dtype=np.float64)
        if values.shape != self.layout.ranks:
            raise DimensionMismatchError(f"core values of shape {values.shape}")
        self.core.data = values

    @property
    def values(self) -> np.ndarray:
        return self.core.data


@dataclass
class TaskFactorSet:
    task_id: str
    layout: GroupLayout
    factors: List[ad.Node] = field(default_factory=list)

    def __post_init__(self):
        self.factors = [f if isinstance(f, ad.Node) else ad.parameter(f) for f in self.factors]
        shapes = self.layout.factor_shapes()
        if len(self.factors) != 6:
            raise DimensionMismatchError(f"need 6 factors, got {len(self.factors)}")
        for k, (f, shape) in enumerate(zip(self.factors, shapes)):
            if f.shape != shape:
                raise DimensionMismatchError(f"factor {k} has shape {f.shape}, expected {shape}")

    @property
    def arrays(self) -> List[np.ndarray]:
        return [f.data for f in self.factors]

    @property
    def param_count(self) -> int:
        return sum(int(f.data.size) for f in self.factors)


def collect(group: ParamGroup) -> np.ndarray:
    """Stack a group's kernels into its 6th-order tensor.

    ``theta[..., j, i]`` is block ``j`` of residual unit ``i``.
    """
    d = group.layout.dims
    stacked = np.stack([np.asarray(w, dtype=np.float64) for w in group.weights])
    stacked = stacked.reshape(d[5], d[4], *d[:4])
    return np.ascontiguousarray(stacked.transpose(2, 3, 4, 5, 1, 0))


def scatter(theta, layout: GroupLayout) -> ParamGroup:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != layout.dims:
        raise DimensionMismatchError(f"tensor shape {theta.shape} differs from {layout.dims}")
    weights = [np.ascontiguousarray(theta[:, :, :, :, j, i])
               for i in range(layout.dims[5]) for j in range(layout.dims[4])]
    return ParamGroup(layout, weights)


def _check_pair(core: SharedCore, factors: TaskFactorSet) -> None:
    if core.layout != factors.layout:
        raise DimensionMismatchError(
            f"core layout {core.layout} does not match factor layout {factors.layout}"
        )


def materialize(core: SharedCore, factors: TaskFactorSet) -> ParamGroup:
    _check_pair(core, factors)
    theta = tucker_reconstruct(core.values, factors.arrays)
    return scatter(theta, core.layout)


def materialize_graph(core: SharedCore, factors: TaskFactorSet) -> List[ad.Node]:
    """Differentiable variant of :func:`materialize` returning kernel nodes."""
    _check_pair(core, factors)
    theta = core.core
    for k, f in enumerate(factors.factors):
        theta = ad.mode_product(theta, f, k)
    d = core.layout.dims
    return [theta[:, :, :, :, j, i] for i in range(d[5]) for j in range(d[4])]


def init_source(pretrained: ParamGroup, layout: GroupLayout | None = None,
                task_id: str = "source", hooi_iters: int = 0,
                svd_backend: str = "numpy"):
    """Tucker-decompose pretrained weights into a core and source factors."""
    layout = pretrained.layout if layout is None else layout
    if layout.dims != pretrained.layout.dims:
        raise DimensionMismatchError(
            f"layout dims {layout.dims} differ from pretrained {pretrained.layout.dims}"
        )
    result = hooi(collect(pretrained), layout.ranks, n_iter=hooi_iters, backend=svd_backend)
    core = SharedCore(layout, ad.parameter(result.core))
    factors = TaskFactorSet(task_id, layout, [ad.parameter(f) for f in result.factors])
    return core, factors


def random_orthonormal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def init_task_factors(source: TaskFactorSet, task_id: str, init: str = "copy",
                      rng: np.random.Generator | None = None) -> TaskFactorSet:
    """Factors for a new task.

    ``init="copy"`` warm-starts from the source factors; with
    ``"random-orthonormal"`` each factor is the Q of a seeded Gaussian QR.
    """
    if init == "copy":
        arrays = [copy.deepcopy(a) for a in source.arrays]
    elif init == "random-orthonormal":
        rng = np.random.default_rng() if rng is None else rng
        arrays = [random_orthonormal(d, r, rng) for d, r in source.layout.factor_shapes()]
    else:
        raise ValueError(f"unknown factor init {init!r}")
    return TaskFactorSet(task_id, source.layout, [ad.parameter(a) for a in arrays])
