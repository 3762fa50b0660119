"""Parameter accounting, Decathlon score and EScore.

All parameter counts are exact Python integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_DOWN, Decimal
from math import prod
from typing import Dict, Iterable, List, Mapping, Sequence

from .errors import ConfigError, DimensionMismatchError, RankError
from .network import ArchConfig
from .tucker import GroupLayout

SCHEMES = ("layerwise_tucker", "linear", "grouped_tucker")
MAX_POINTS = 1000.0


def count_layerwise(layout: GroupLayout) -> int:
    """Task-specific parameters of a separate Tucker factorisation per layer."""
    return layout.n_layers * sum(d * r for d, r in zip(layout.dims[:4], layout.ranks[:4]))


def count_linear(layout: GroupLayout) -> int:
    """One square channel-mixing matrix per layer."""
    d0, d1 = layout.dims[:2]
    if d0 != d1:
        raise DimensionMismatchError(f"linear scheme needs equal channel dims, got {d0} and {d1}")
    return layout.n_layers * d0 * d0


def count_grouped(layout: GroupLayout) -> int:
    """Factor parameters of one grouped 6th-order Tucker tensor."""
    return sum(d * r for d, r in zip(layout.dims, layout.ranks))


def count_core(layout: GroupLayout) -> int:
    return prod(layout.ranks)


def default_layouts() -> List[GroupLayout]:
    return ArchConfig.default().layouts()


@dataclass
class ParamReport:
    groups: List[Dict[str, int]]
    totals: Dict[str, int] = field(default_factory=dict)

    @property
    def ratio_layerwise_to_grouped(self) -> float:
        return self.totals["layerwise_tucker"] / self.totals["grouped_tucker"]

    @property
    def ratio_linear_to_grouped(self) -> float:
        return self.totals["linear"] / self.totals["grouped_tucker"]

    def records(self) -> List[str]:
        lines = []
        for b, g in enumerate(self.groups):
            lines.append(f"group={b} " + " ".join(f"{k}={v}" for k, v in g.items()))
        lines.append("total " + " ".join(f"{k}={v}" for k, v in self.totals.items()))
        lines.append(f"ratio_layerwise_grouped={self.ratio_layerwise_to_grouped:.4f} "
                     f"ratio_linear_grouped={self.ratio_linear_to_grouped:.4f} "
                     f"ratio_layerwise_grouped_rounded={round(self.ratio_layerwise_to_grouped)}")
        return lines

    def table(self) -> str:
        head = f"{'group':>6} {'dims':>24} {'layerwise':>12} {'linear':>12} {'grouped':>10}"
        rows = [head, "-" * len(head)]
        for b, g in enumerate(self.groups):
            rows.append(f"{b:>6} {g['dims']:>24} {g['layerwise_tucker']:>12,} "
                        f"{g['linear']:>12,} {g['grouped_tucker']:>10,}")
        t = self.totals
        rows.append(f"{'total':>6} {'':>24} {t['layerwise_tucker']:>12,} "
                    f"{t['linear']:>12,} {t['grouped_tucker']:>10,}")
        return "\n".join(rows)


def param_report(layouts: Sequence[GroupLayout]) -> ParamReport:
    groups = []
    for lay in layouts:
        groups.append({
            "dims": "x".join(map(str, lay.dims)),
            "layerwise_tucker": count_layerwise(lay),
            "linear": count_linear(lay),
            "grouped_tucker": count_grouped(lay),
            "core": count_core(lay),
        })
    totals = {k: sum(g[k] for g in groups) for k in (*SCHEMES, "core")}
    return ParamReport(groups, totals)


# -- rank truncation -------------------------------------------------------

def truncate(layout: GroupLayout, rule: str) -> GroupLayout:
    """Named rank truncations: ``blocks-1`` lowers R4 by one, ``channels-half``
    halves R0 and R1."""
    ranks = list(layout.ranks)
    if rule == "blocks-1":
        ranks[4] -= 1
    elif rule == "channels-half":
        ranks[0] //= 2
        ranks[1] //= 2
    elif rule == "none":
        pass
    else:
        raise ConfigError(f"unknown truncation rule {rule!r}")
    return layout.with_ranks(ranks)


@dataclass
class CompressionRow:
    name: str
    ratios: Dict[str, float]

    def to_line(self) -> str:
        return f"truncation={self.name} " + " ".join(f"{k}={v:.4f}" for k, v in self.ratios.items())


def compression_report(base: Sequence[GroupLayout],
                       truncated: Mapping[str, Sequence[Sequence[int]]]) -> List[CompressionRow]:
    """Full-rank count divided by truncated count, per scheme.

    ``truncated`` maps a name to one rank tuple per layout in ``base``.
    ``total`` adds the core to the grouped factors.
    """
    full = param_report([GroupLayout(lay.dims) for lay in base])
    rows = []
    for name, rank_list in truncated.items():
        if len(rank_list) != len(base):
            raise ConfigError(f"truncation {name!r} needs {len(base)} rank tuples")
        cut = []
        for lay, ranks in zip(base, rank_list):
            ranks = tuple(ranks)
            if any(r > d for r, d in zip(ranks, lay.dims)):
                raise RankError(f"truncation {name!r}: ranks {ranks} exceed dims {lay.dims}")
            cut.append(GroupLayout(lay.dims, ranks))
        rep = param_report(cut)
        ratios = {
            "layerwise_tucker": full.totals["layerwise_tucker"] / rep.totals["layerwise_tucker"],
            "grouped_tucker": full.totals["grouped_tucker"] / rep.totals["grouped_tucker"],
            "core": full.totals["core"] / rep.totals["core"],
            "total": (full.totals["core"] + full.totals["grouped_tucker"])
            / (rep.totals["core"] + rep.totals["grouped_tucker"]),
        }
        rows.append(CompressionRow(name, ratios))
    return rows


# -- Decathlon score -----------------------------------------------------------

@dataclass(frozen=True)
class TaskScoreParams:
    baseline_error: float
    exponent: float = 2.0

    @property
    def reference_error(self) -> float:
        return 2.0 * self.baseline_error

    @property
    def beta(self) -> float:
        # normalisation: a perfect task (error 0) earns exactly MAX_POINTS
        return MAX_POINTS / self.reference_error ** self.exponent


@dataclass
class ScoreConfig:
    tasks: Dict[str, TaskScoreParams]

    def __post_init__(self):
        for name, p in self.tasks.items():
            if not p.baseline_error > 0:
                raise ConfigError(f"task {name!r}: baseline error must be positive")
            if not p.exponent > 0:
                raise ConfigError(f"task {name!r}: exponent must be positive")

    @classmethod
    def from_baselines(cls, baselines: Mapping[str, float], exponent: float = 2.0) -> "ScoreConfig":
        return cls({k: TaskScoreParams(float(v), exponent) for k, v in baselines.items()})


def task_points(errors: Mapping[str, float], config: ScoreConfig) -> Dict[str, float]:
    points = {}
    for name, params in config.tasks.items():
        if name not in errors:
            raise ConfigError(f"missing error for task {name!r}")
        e = float(errors[name])
        if not 0.0 <= e <= 1.0:
            raise ConfigError(f"task {name!r}: error {e} outside [0, 1]")
        gap = max(0.0, params.reference_error - e)
        points[name] = min(params.beta * gap ** params.exponent, MAX_POINTS)
    return points


def decathlon_score(errors: Mapping[str, float], config: ScoreConfig) -> float:
    """Sum over tasks of ``beta * max(0, E_ref - E)^exponent``."""
    return float(sum(task_points(errors, config).values()))


def escore(score: float, relative_params: float) -> float:
    """Decathlon score per unit of model size relative to the base network."""
    if not relative_params > 0:
        raise ConfigError(f"relative parameter count must be positive, got {relative_params}")
    return score / relative_params


def round_score(value: float) -> int:
    """Nearest integer; exact ties round toward zero.

    Published scores are integers, so a tie means the unrounded value is
    unknown to within half a point; rounding down never overstates it.
    """
    return int(Decimal(repr(float(value))).quantize(Decimal(1), rounding=ROUND_HALF_DOWN))


def read_error_records(lines: Iterable[str]):
    """Parse ``task=NAME error=E baseline=B [exponent=X]`` lines.

    Returns ``(errors, ScoreConfig)``. Blank lines and ``#`` comments are skipped.
    """
    errors, params = {}, {}
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            fields = dict(tok.split("=", 1) for tok in line.split())
            name = fields["task"]
            errors[name] = float(fields["error"])
            params[name] = TaskScoreParams(float(fields["baseline"]),
                                           float(fields.get("exponent", 2.0)))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: cannot parse {line!r} ({exc})") from None
    return errors, ScoreConfig(params)
