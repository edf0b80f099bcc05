"""Experiment configuration: UTF-8 ``key = value`` lines, ``#`` comments,
comma-separated lists.

Example::

    dataset = colormnist
    mnist_path = tests/data
    r = 0.25, 0.35, 0.45
    objectives = erm
    scorers = msp, energy, mahalanobis
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .colormnist import DEFAULT_PALETTE
from .errors import BadValueError, MissingRequiredError, UnknownKeyError
from .scores import ODIN_EPSILONS, SCORE_FNS
from .train import OBJECTIVES

DATASETS = ("colormnist", "gaussian")
OOD_SETS = {
    "colormnist": ("spurious", "heldout_color", "noise"),
    "gaussian": ("spurious", "nonspurious"),
}
DEFAULT_R = {"colormnist": (0.25, 0.35, 0.45), "gaussian": (0.25, 0.5, 1.0)}


@dataclass
class ExperimentPlan:
    dataset: str
    mnist_path: str | None = None
    r: tuple[float, ...] = ()
    objectives: tuple[str, ...] = ("erm",)
    scorers: tuple[str, ...] = SCORE_FNS
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    ood_sets: tuple[str, ...] = ()
    out: str | None = None
    # training
    epochs: int = 30
    learning_rate: float = 0.01
    l2_penalty: float = 1e-4
    penalty_weight: float = 10.0
    gdro_step: float = 0.01
    batch_size: int = 128
    hidden: tuple[int, ...] = (256, 64)
    # data
    n_ood: int = 1000
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    # gaussian world
    gauss_s: int = 2
    gauss_d_e: int = 4
    gauss_envs: int = 2
    gauss_n_train: int = 2000
    gauss_eta: float = 0.5
    gauss_env_scale: float = 2.0
    # scorers
    odin_temperature: float = 1000.0
    odin_epsilons: tuple[float, ...] = ODIN_EPSILONS
    gram_orders: int = 5
    # harness
    workers: int = 1
    emit_projections: bool = False

    def ood_types(self) -> dict[str, str]:
        return {name: ("spurious" if name == "spurious" else "nonspurious") for name in self.ood_sets}


_LIST_INT = {"seeds", "hidden"}
_LIST_FLOAT = {"r", "odin_epsilons"}
_LIST_STR = {"objectives", "scorers", "ood_sets"}
_BOOL = {"emit_projections"}


def _parse_bool(key, v):
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise BadValueError(f"{key}: expected a boolean, got {v!r}")


def _convert(key: str, raw: str, kind):
    items = [x.strip() for x in raw.split(",") if x.strip()]
    try:
        if key in _LIST_INT:
            return tuple(int(x) for x in items)
        if key in _LIST_FLOAT:
            return tuple(float(x) for x in items)
        if key in _LIST_STR:
            return tuple(x.lower() for x in items)
        if key in _BOOL:
            return _parse_bool(key, raw.strip())
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise BadValueError(f"{key}: cannot parse {raw!r}") from None
    return raw.strip()


def parse_text(text: str) -> ExperimentPlan:
    known = {f.name: f.type for f in fields(ExperimentPlan)}
    values: dict = {}
    palette = dict(DEFAULT_PALETTE)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip().lower()
        if not sep:
            raise BadValueError(f"line {lineno}: expected 'key = value'")
        if key.startswith("palette_"):
            color = key[len("palette_") :]
            if color not in DEFAULT_PALETTE:
                raise UnknownKeyError(f"line {lineno}: unknown palette color {color!r}")
            try:
                rgb = tuple(int(x) for x in raw.split(","))
            except ValueError:
                raise BadValueError(f"line {lineno}: bad RGB triple {raw.strip()!r}") from None
            if len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb):
                raise BadValueError(f"line {lineno}: bad RGB triple {raw.strip()!r}")
            palette[color] = rgb
            continue
        if key not in known or key == "palette":
            raise UnknownKeyError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, known[key])
    if "dataset" not in values:
        raise MissingRequiredError("'dataset' is required")
    values["palette"] = palette
    plan = ExperimentPlan(**values)
    _fill_defaults(plan, set(values))
    validate(plan)
    return plan


def _fill_defaults(plan: ExperimentPlan, given: set[str]) -> None:
    if plan.dataset not in DATASETS:
        raise BadValueError(f"dataset must be one of {DATASETS}, got {plan.dataset!r}")
    if "r" not in given:
        plan.r = DEFAULT_R[plan.dataset]
    if "ood_sets" not in given:
        plan.ood_sets = OOD_SETS[plan.dataset]


def validate(plan: ExperimentPlan) -> None:
    if plan.dataset == "colormnist":
        if not plan.mnist_path:
            raise MissingRequiredError("colormnist needs 'mnist_path'")
        bad = [r for r in plan.r if not 0.0 <= r <= 0.5]
        if bad:
            raise BadValueError(f"r must lie in [0, 0.5] for colormnist, got {bad}")
    elif any(r < 0 for r in plan.r):
        raise BadValueError("r must be nonnegative for the gaussian dataset")
    if not plan.r:
        raise BadValueError("at least one r value is required")
    if not plan.seeds:
        raise BadValueError("at least one seed is required")
    for name, allowed, given in (
        ("objectives", OBJECTIVES, plan.objectives),
        ("scorers", SCORE_FNS, plan.scorers),
        ("ood_sets", OOD_SETS[plan.dataset], plan.ood_sets),
    ):
        unknown = [x for x in given if x not in allowed]
        if unknown or not given:
            raise BadValueError(f"{name}: {unknown or 'empty'} not in {allowed}")
    for name in ("epochs", "batch_size", "n_ood", "gram_orders", "workers", "gauss_s", "gauss_d_e", "gauss_envs", "gauss_n_train"):
        if getattr(plan, name) < 1:
            raise BadValueError(f"{name} must be >= 1")
    for name in ("learning_rate", "gdro_step", "odin_temperature"):
        if not getattr(plan, name) > 0:
            raise BadValueError(f"{name} must be positive")
    if not 0 < plan.gauss_eta < 1:
        raise BadValueError("gauss_eta must lie in (0, 1)")
    if not (0 < plan.test_fraction < 1 and 0 < plan.val_fraction < 1):
        raise BadValueError("split fractions must lie in (0, 1)")
    if any(e < 0 for e in plan.odin_epsilons) or not plan.odin_epsilons:
        raise BadValueError("odin_epsilons must be nonnegative and nonempty")
    if not plan.hidden or any(h < 1 for h in plan.hidden):
        raise BadValueError("hidden sizes must be positive")


def parse_config(path) -> ExperimentPlan:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise BadValueError(f"{path}: not valid UTF-8") from None
    return parse_text(text)
