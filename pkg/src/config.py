"""
Run configuration: a strict JSON schema loaded into RunConfig.

Every problem in a config file is collected before anything is raised, so a single
ConfigError lists all of them.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

from datamodel import Dataset, load_csv_dataset, make_concentric_rings, make_gaussian_blobs
from errors import ConfigError, KernelError
from kernels import CHI2_EPSILON, KERNEL_KINDS, KernelSpec

logger = logging.getLogger(__name__)

METHODS = ("ours", "ours_lambda0", "kpca")
GENERATOR_KINDS = ("blobs", "rings")
SWEEP_AXES = ("lambda", "r", "k", "theta")

TOP_LEVEL_KEYS = {
    "data_path",
    "labels_path",
    "generator",
    "dataset_id",
    "kernel",
    "theta",
    "k",
    "lambda",
    "r",
    "drop_tolerance",
    "ridge",
    "labels_per_class",
    "repeats",
    "base_seed",
    "methods",
    "test_fraction",
    "output_dir",
    "model_path",
    "transform_path",
    "workers",
    "sweep",
}
GENERATOR_KEYS = {"kind", "c", "per_class", "d", "spread", "noise", "seed"}
KERNEL_KEYS = {"kind", "gamma", "epsilon", "path"}
SWEEP_KEYS = {"axis", "values"}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class _FieldReader:
    """Reads typed fields out of one JSON object, recording problems instead of raising."""

    def __init__(self, data: Dict[str, Any], problems: List[str], prefix: str = ""):
        self.data = data
        self.problems = problems
        self.prefix = prefix

    def reject_unknown(self, allowed: set) -> None:
        for key in sorted(set(self.data) - allowed):
            self.problems.append(f"unknown key '{self.prefix}{key}'")

    def real(self, key: str, default: Optional[float], minimum: Optional[float] = None, strict: bool = False):
        value = self.data.get(key, default)
        if value is None:
            return None
        if not _is_real(value):
            self.problems.append(f"'{self.prefix}{key}' must be a number, got {value!r}")
            return default
        if minimum is not None and (value <= minimum if strict else value < minimum):
            bound = ">" if strict else ">="
            self.problems.append(f"'{self.prefix}{key}' must be {bound} {minimum}, got {value}")
            return default
        return float(value)

    def integer(self, key: str, default: Optional[int], minimum: Optional[int] = None):
        value = self.data.get(key, default)
        if value is None:
            return None
        if not _is_int(value):
            self.problems.append(f"'{self.prefix}{key}' must be an integer, got {value!r}")
            return default
        if minimum is not None and value < minimum:
            self.problems.append(f"'{self.prefix}{key}' must be >= {minimum}, got {value}")
            return default
        return value

    def string(self, key: str, default: Optional[str], choices: Optional[Sequence[str]] = None):
        value = self.data.get(key, default)
        if value is None:
            return None
        if not isinstance(value, str):
            self.problems.append(f"'{self.prefix}{key}' must be a string, got {value!r}")
            return default
        if choices is not None and value not in choices:
            self.problems.append(f"'{self.prefix}{key}' must be one of {', '.join(choices)}, got {value!r}")
            return default
        return value

    def section(self, key: str) -> Optional["_FieldReader"]:
        value = self.data.get(key)
        if value is None:
            return None
        if not isinstance(value, dict):
            self.problems.append(f"'{self.prefix}{key}' must be an object")
            return None
        return _FieldReader(value, self.problems, prefix=f"{self.prefix}{key}.")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    c: int = 2
    per_class: int = 50
    d: int = 2
    spread: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def build(self) -> Dataset:
        if self.kind == "rings":
            return make_concentric_rings(self.per_class, self.noise, self.seed)
        return make_gaussian_blobs(self.c, self.per_class, self.d, self.spread, self.seed)

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "rings":
            return {"kind": self.kind, "per_class": self.per_class, "noise": self.noise, "seed": self.seed}
        return {
            "kind": self.kind,
            "c": self.c,
            "per_class": self.per_class,
            "d": self.d,
            "spread": self.spread,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return {"axis": self.axis, "values": list(self.values)}


def validate_sweep_values(axis: str, values: Sequence[Any]) -> List[str]:
    """Problems with a sweep's value list; empty when every value is legal for `axis`."""
    if axis not in SWEEP_AXES:
        return [f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}"]
    if not values:
        return [f"sweep over '{axis}' needs at least one value"]
    problems = []
    for value in values:
        if axis in ("r", "k"):
            if not _is_int(value) or value < 1:
                problems.append(f"sweep value {value!r} is not a positive integer {axis}")
        elif not _is_real(value):
            problems.append(f"sweep value {value!r} for {axis} is not a number")
        elif axis == "lambda" and value < 0:
            problems.append(f"sweep value {value!r} for lambda must be >= 0")
        elif axis == "theta" and value <= 0:
            problems.append(f"sweep value {value!r} for theta must be > 0")
    return problems


@dataclass(frozen=True)
class RunConfig:
    data_path: Optional[str] = None
    labels_path: Optional[str] = None
    generator: Optional[GeneratorSpec] = None
    dataset_id: Optional[str] = None
    kernel: KernelSpec = field(default_factory=KernelSpec.rbf)
    theta: float = 1.0
    k: int = 3
    lambda_reg: float = 1.0
    r: Optional[int] = None
    drop_tolerance: float = 1e-10
    ridge: float = 1.0
    labels_per_class: List[int] = field(default_factory=lambda: [1])
    repeats: int = 5
    base_seed: int = 0
    methods: List[str] = field(default_factory=lambda: ["ours"])
    test_fraction: float = 0.5
    output_dir: str = "out"
    model_path: Optional[str] = None
    transform_path: Optional[str] = None
    workers: int = 1
    sweep: Optional[SweepSpec] = None

    @property
    def source_id(self) -> str:
        """dataset_id, or a name derived from the data source."""
        if self.dataset_id:
            return self.dataset_id
        if self.generator is not None:
            return f"{self.generator.kind}-seed{self.generator.seed}"
        return self.data_path or "unknown"

    def dataset(self) -> Dataset:
        if self.generator is not None:
            return self.generator.build()
        return load_csv_dataset(self.data_path, self.labels_path)

    def with_axis(self, axis: str, value: float) -> "RunConfig":
        """Copy with one sweep axis set to `value`."""
        if axis == "lambda":
            return replace(self, lambda_reg=float(value))
        if axis == "theta":
            return replace(self, theta=float(value))
        if axis == "r":
            return replace(self, r=int(value))
        if axis == "k":
            return replace(self, k=int(value))
        raise ConfigError([f"sweep axis must be one of {', '.join(SWEEP_AXES)}, got {axis!r}"])

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {}
        if self.data_path is not None:
            data["data_path"] = self.data_path
            data["labels_path"] = self.labels_path
        if self.generator is not None:
            data["generator"] = self.generator.to_dict()
        if self.dataset_id is not None:
            data["dataset_id"] = self.dataset_id
        data.update(
            {
                "kernel": self.kernel.to_dict(),
                "theta": self.theta,
                "k": self.k,
                "lambda": self.lambda_reg,
                "r": self.r,
                "drop_tolerance": self.drop_tolerance,
                "ridge": self.ridge,
                "labels_per_class": list(self.labels_per_class),
                "repeats": self.repeats,
                "base_seed": self.base_seed,
                "methods": list(self.methods),
                "test_fraction": self.test_fraction,
                "output_dir": self.output_dir,
                "workers": self.workers,
            }
        )
        if self.model_path is not None:
            data["model_path"] = self.model_path
        if self.transform_path is not None:
            data["transform_path"] = self.transform_path
        if self.sweep is not None:
            data["sweep"] = self.sweep.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(["config must be a JSON object"])
        problems: List[str] = []
        reader = _FieldReader(data, problems)
        reader.reject_unknown(TOP_LEVEL_KEYS)

        data_path = reader.string("data_path", None)
        labels_path = reader.string("labels_path", None)
        generator = _read_generator(reader.section("generator"))
        if generator is None and "generator" not in data:
            if data_path is None or labels_path is None:
                problems.append("either 'generator' or both 'data_path' and 'labels_path' are required")
        elif "data_path" in data:
            problems.append("'generator' and 'data_path' are mutually exclusive")

        kernel = _read_kernel(reader.section("kernel")) if "kernel" in data else KernelSpec.rbf()
        labels_per_class = _read_labels_per_class(data.get("labels_per_class", 1), problems)
        methods = _read_methods(data.get("methods", ["ours"]), problems)

        sweep = None
        sweep_reader = reader.section("sweep")
        if sweep_reader is not None:
            sweep_reader.reject_unknown(SWEEP_KEYS)
            axis = sweep_reader.string("axis", None)
            values = sweep_reader.data.get("values", [])
            if axis is None:
                problems.append("'sweep.axis' is required")
            elif not isinstance(values, list):
                problems.append("'sweep.values' must be a list")
            else:
                problems.extend(validate_sweep_values(axis, values))
                sweep = SweepSpec(axis=axis, values=list(values))

        config = cls(
            data_path=data_path,
            labels_path=labels_path,
            generator=generator,
            dataset_id=reader.string("dataset_id", None),
            kernel=kernel or KernelSpec.rbf(),
            theta=reader.real("theta", 1.0, minimum=0.0, strict=True),
            k=reader.integer("k", 3, minimum=1),
            lambda_reg=reader.real("lambda", 1.0, minimum=0.0),
            r=reader.integer("r", None, minimum=1),
            drop_tolerance=reader.real("drop_tolerance", 1e-10, minimum=0.0),
            ridge=reader.real("ridge", 1.0, minimum=0.0, strict=True),
            labels_per_class=labels_per_class,
            repeats=reader.integer("repeats", 5, minimum=1),
            base_seed=reader.integer("base_seed", 0, minimum=0),
            methods=methods,
            test_fraction=_read_test_fraction(reader),
            output_dir=reader.string("output_dir", "out"),
            model_path=reader.string("model_path", None),
            transform_path=reader.string("transform_path", None),
            workers=reader.integer("workers", 1, minimum=1),
            sweep=sweep,
        )
        if problems:
            raise ConfigError(problems)
        return config


def _read_generator(reader: Optional[_FieldReader]) -> Optional[GeneratorSpec]:
    if reader is None:
        return None
    reader.reject_unknown(GENERATOR_KEYS)
    kind = reader.string("kind", None, choices=GENERATOR_KINDS)
    if kind is None:
        if "kind" not in reader.data:
            reader.problems.append("'generator.kind' is required")
        return None
    return GeneratorSpec(
        kind=kind,
        c=reader.integer("c", 2, minimum=1),
        per_class=reader.integer("per_class", 50, minimum=3 if kind == "rings" else 1),
        d=reader.integer("d", 2, minimum=1),
        spread=reader.real("spread", 1.0, minimum=0.0),
        noise=reader.real("noise", 0.1, minimum=0.0),
        seed=reader.integer("seed", 0, minimum=0),
    )


def _read_kernel(reader: Optional[_FieldReader]) -> Optional[KernelSpec]:
    if reader is None:
        return None
    reader.reject_unknown(KERNEL_KEYS)
    kind = reader.string("kind", None, choices=KERNEL_KINDS)
    gamma = reader.real("gamma", None, minimum=0.0, strict=True)
    epsilon = reader.real("epsilon", CHI2_EPSILON, minimum=0.0, strict=True)
    path = reader.string("path", None)
    if kind is None:
        if "kind" not in reader.data:
            reader.problems.append("'kernel.kind' is required")
        return None
    try:
        return KernelSpec(kind=kind, gamma=gamma, epsilon=epsilon, path=path)
    except KernelError as e:
        reader.problems.append(f"kernel: {e}")
        return None


def _read_labels_per_class(value: Any, problems: List[str]) -> List[int]:
    values = value if isinstance(value, list) else [value]
    if not values or not all(_is_int(v) and v >= 1 for v in values):
        problems.append(f"'labels_per_class' must be a positive integer or a nonempty list of them, got {value!r}")
        return [1]
    return list(values)


def _read_methods(value: Any, problems: List[str]) -> List[str]:
    if not isinstance(value, list) or not value:
        problems.append(f"'methods' must be a nonempty list, got {value!r}")
        return ["ours"]
    bad = [m for m in value if m not in METHODS]
    if bad:
        problems.append(f"unknown method(s) {bad}; expected any of {', '.join(METHODS)}")
        return ["ours"]
    if len(set(value)) != len(value):
        problems.append(f"'methods' lists a method twice: {value}")
    return list(value)


def _read_test_fraction(reader: _FieldReader) -> float:
    value = reader.real("test_fraction", 0.5, minimum=0.0, strict=True)
    if value is not None and value >= 1.0:
        reader.problems.append(f"'test_fraction' must be < 1, got {value}")
        return 0.5
    return value


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError([f"could not read config {path}: {e}"]) from e
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path} is not valid JSON: {e}"]) from e
    config = RunConfig.from_dict(data)
    logger.debug(f"Loaded config {path}: {config.to_dict()}")
    return config
