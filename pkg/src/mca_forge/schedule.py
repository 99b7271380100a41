"""Task-aware MCA schedules.

A schedule is a list of rules, each covering a half-open step-fraction
interval and a layer-fraction interval for one branch (or both). Queries that
no rule covers resolve to ``self``.

Text format, one rule per line after a single ``task=<name>`` header::

    task=object_insertion_removal
    branch=tar steps=0.0:0.3 layers=all variant=swap_kv
    branch=tar steps=0.3:0.7 layers=all variant=concat_kv

``#`` starts a comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

from .attention import BranchRole, McaVariant
from .errors import PolicyError, ScheduleOverlapError, ScheduleSyntaxError

DEFAULT_STAGE_BOUNDS = (0.3, 0.7)
DEFAULT_LAYER_BOUNDS = (1 / 3, 2 / 3)
TASKS = (
    "object_insertion_removal",
    "local_modification",
    "background_replacement",
    "color_material",
    "motion_viewpoint",
)


@dataclass(frozen=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0):
            raise ValueError(f"bad interval [{self.start}, {self.end})")

    def contains(self, x: float) -> bool:
        return self.start <= x < self.end

    def intersects(self, other: "Interval") -> bool:
        return self.start < other.end and other.start < self.end


ALL = Interval(0.0, 1.0)


@dataclass(frozen=True)
class ScheduleRule:
    branch: str  # "src", "tar" or "both"
    steps: Interval
    layers: Interval | None  # None means all layers
    variant: McaVariant

    def applies_to(self, role: BranchRole) -> bool:
        return self.branch == "both" or self.branch == BranchRole(role).value

    @property
    def layer_span(self) -> Interval:
        return ALL if self.layers is None else self.layers

    def render(self) -> str:
        layers = "all" if self.layers is None else f"{_num(self.layers.start)}:{_num(self.layers.end)}"
        return (
            f"branch={self.branch} steps={_num(self.steps.start)}:{_num(self.steps.end)} "
            f"layers={layers} variant={self.variant.value}"
        )

    def __str__(self):
        return self.render()


def _num(x: float) -> str:
    return repr(float(x))


def rules_conflict(a: ScheduleRule, b: ScheduleRule) -> bool:
    shared_branch = a.branch == "both" or b.branch == "both" or a.branch == b.branch
    return shared_branch and a.steps.intersects(b.steps) and a.layer_span.intersects(b.layer_span)


@dataclass(frozen=True)
class SchedulePolicy:
    task: str
    rules: tuple[ScheduleRule, ...] = ()
    default: McaVariant = McaVariant.SELF
    _lines: tuple[int, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        rules = self.rules
        for i in range(len(rules)):
            for j in range(i + 1, len(rules)):
                if rules_conflict(rules[i], rules[j]):
                    a = _label(rules[i], self._lines, i)
                    b = _label(rules[j], self._lines, j)
                    raise ScheduleOverlapError(a, b)

    def rules_for(self, role: BranchRole) -> list[ScheduleRule]:
        return [r for r in self.rules if r.applies_to(role)]

    def lookup(self, role: BranchRole, layer_frac: float, step_frac: float) -> McaVariant:
        for rule in self.rules:
            if rule.applies_to(role) and rule.steps.contains(step_frac) and rule.layer_span.contains(layer_frac):
                return rule.variant
        return self.default

    def resolve(self, role, layer: int, step: int, num_layers: int, num_steps: int) -> McaVariant:
        return resolve(self, role, layer, step, num_layers, num_steps)

    def render(self) -> str:
        return render_schedule(self)


def _label(rule: ScheduleRule, lines: tuple[int, ...], i: int) -> str:
    if i < len(lines):
        return f"line {lines[i]}: {rule.render()}"
    return rule.render()


def resolve(policy: SchedulePolicy, role, layer: int, step: int, num_layers: int, num_steps: int) -> McaVariant:
    if not 0 <= layer < num_layers:
        raise PolicyError(f"layer {layer} outside [0, {num_layers})")
    if not 0 <= step < num_steps:
        raise PolicyError(f"step {step} outside [0, {num_steps})")
    return policy.lookup(BranchRole(role), layer / num_layers, step / num_steps)


# --------------------------------------------------------------------------
# text format

_RULE_RE = re.compile(
    r"^branch=(?P<branch>\S+)\s+steps=(?P<steps>\S+)\s+layers=(?P<layers>\S+)\s+variant=(?P<variant>\S+)$"
)
_TASK_RE = re.compile(r"^task=(?P<task>[A-Za-z0-9_\-]+)$")


def _parse_interval(text: str, lineno: int, what: str) -> Interval:
    parts = text.split(":")
    if len(parts) != 2:
        raise ScheduleSyntaxError(lineno, f"{what} must look like <start>:<end>, got {text!r}")
    try:
        start, end = float(parts[0]), float(parts[1])
    except ValueError:
        raise ScheduleSyntaxError(lineno, f"{what} endpoints must be numbers, got {text!r}") from None
    try:
        return Interval(start, end)
    except ValueError:
        raise ScheduleSyntaxError(lineno, f"{what} interval {text!r} must satisfy 0 <= start < end <= 1") from None


def parse_schedule(text: str) -> SchedulePolicy:
    task = None
    rules: list[ScheduleRule] = []
    lines: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _TASK_RE.match(line)
        if m:
            if task is not None:
                raise ScheduleSyntaxError(lineno, f"duplicate task header (already {task!r})")
            task = m["task"]
            continue
        if line.startswith("task="):
            raise ScheduleSyntaxError(lineno, f"malformed task header {line!r}")
        m = _RULE_RE.match(" ".join(line.split()))
        if not m:
            raise ScheduleSyntaxError(lineno, f"cannot parse rule {line!r}")
        if task is None:
            raise ScheduleSyntaxError(lineno, "rule before task header")
        branch = m["branch"]
        if branch not in ("src", "tar", "both"):
            raise ScheduleSyntaxError(lineno, f"unknown branch {branch!r}")
        try:
            variant = McaVariant(m["variant"])
        except ValueError:
            raise ScheduleSyntaxError(lineno, f"unknown variant {m['variant']!r}") from None
        steps = _parse_interval(m["steps"], lineno, "steps")
        layers = None if m["layers"] == "all" else _parse_interval(m["layers"], lineno, "layers")
        rules.append(ScheduleRule(branch, steps, layers, variant))
        lines.append(lineno)
    if task is None:
        raise ScheduleSyntaxError(0, "missing task header")
    return SchedulePolicy(task, tuple(rules), _lines=tuple(lines))


def render_schedule(policy: SchedulePolicy) -> str:
    out = [f"task={policy.task}"]
    out.extend(rule.render() for rule in policy.rules)
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# presets


def _rule(branch, s0, s1, variant, layers=None) -> ScheduleRule:
    return ScheduleRule(branch, Interval(s0, s1), layers, McaVariant(variant))


def preset(
    task: str,
    stage_bounds: tuple[float, float] = DEFAULT_STAGE_BOUNDS,
    layer_bounds: tuple[float, float] = DEFAULT_LAYER_BOUNDS,
) -> SchedulePolicy:
    f1, f2 = stage_bounds
    l1, l2 = layer_bounds
    if not 0 < f1 < f2 < 1 or not 0 < l1 < l2 < 1:
        raise PolicyError(f"bad stage/layer bounds {stage_bounds}, {layer_bounds}")

    if task == "object_insertion_removal":
        # source branch keeps plain self-attention
        rules = [
            _rule("tar", 0.0, f1, "swap_kv"),
            _rule("tar", f1, f2, "concat_kv"),
            _rule("tar", f2, 1.0, "self"),
        ]
    elif task == "local_modification":
        rules = [
            _rule("both", 0.0, f1, "swap_kv"),
            _rule("both", f1, f2, "concat_kv"),
            _rule("both", f2, 1.0, "self"),
        ]
    elif task == "background_replacement":
        rules = [_rule("both", 0.0, f2, "swap_k", Interval(0.0, l2))]
    elif task == "color_material":
        # early stage: swap_kv then concat_kv, split at the midpoint of the stage
        rules = [
            _rule("both", 0.0, f1 / 2, "swap_kv"),
            _rule("both", f1 / 2, f1, "concat_kv"),
            _rule("both", f1, f2, "concat_k"),
        ]
    elif task == "motion_viewpoint":
        rules = [_rule("both", 0.0, f2, "concat_kv")]
    else:
        raise PolicyError(f"unknown task preset {task!r}; expected one of {', '.join(TASKS)}")
    return SchedulePolicy(task, tuple(rules))


def uniform(variant: McaVariant | str, task: str = "uniform") -> SchedulePolicy:
    """A policy applying one variant to both branches everywhere."""
    variant = McaVariant(variant)
    if variant is McaVariant.SELF:
        return SchedulePolicy(task)
    return SchedulePolicy(task, (_rule("both", 0.0, 1.0, variant),))


def load_schedule(name_or_path: str) -> SchedulePolicy:
    """A preset name, ``all-<variant>``, or a path to a schedule file."""
    from pathlib import Path

    if name_or_path in TASKS:
        return preset(name_or_path)
    if name_or_path.startswith("all-"):
        return uniform(name_or_path[4:], task=name_or_path)
    return parse_schedule(Path(name_or_path).read_text(encoding="utf-8"))


def grid(policy: SchedulePolicy, num_layers: int, num_steps: int) -> Iterable[tuple[BranchRole, int, int, McaVariant]]:
    for role in BranchRole:
        for layer in range(num_layers):
            for step in range(num_steps):
                yield role, layer, step, resolve(policy, role, layer, step, num_layers, num_steps)
