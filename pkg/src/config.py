"""Config."""

import typing as t
from enum import Enum
from pathlib import Path

from pydantic import (  # pylint: disable = no-name-in-module
    BaseModel,
    Extra,
    ValidationError,
    root_validator,
    validator,
)


class SolverSettings(BaseModel):  # pylint: disable = too-few-public-methods
    """Constant settings for the QP solver."""

    max_iter: int = 50_000
    # tol = relative_tol * (1 + ||c||_inf)
    relative_tol: float = 1e-7
    jitter: float = 1e-10
    feasibility_tol: float = 1e-6
    curvature_tol: float = 1e-8
    max_projection_sweeps: int = 200
    # active-set polish first tried at this iteration, then at doubling intervals
    polish_start: int = 64
    active_set_margin: float = 1e-10


class KernelSettings(BaseModel):  # pylint: disable = too-few-public-methods
    """Constant settings for bandwidth selection."""

    bandwidth_factors: t.Tuple[float, ...] = (0.01, 0.1, 0.5, 1.0, 2.0)
    n_permutations: int = 100
    permutation_std_floor: float = 1e-12
    median_pair_cap: int = 1_000_000
    zero_median_fallback: float = 1.0


class DensityRatioSettings(BaseModel):  # pylint: disable = too-few-public-methods
    """Constant settings for the density-ratio baselines."""

    kde_bandwidths: t.Tuple[float, ...] = (0.01, 0.1, 1.0, 10.0)
    kde_holdout_fraction: float = 0.2
    kde_density_floor: float = 1e-300
    ratio_clip: float = 1e6
    classifier_reg: float = 1.0
    classifier_max_iter: int = 1000
    probability_clip: float = 1e-6


SOLVER_SETTINGS = SolverSettings()
KERNEL_SETTINGS = KernelSettings()
DENSITY_RATIO_SETTINGS = DensityRatioSettings()

DEFAULT_LEVELS: t.Tuple[float, ...] = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9)
EXTENDED_LEVELS: t.Tuple[float, ...] = DEFAULT_LEVELS + (0.95,)

SEED_ENV_VAR = "SHIFTCAL_SEED"


class ConfigError(Exception):
    """Raise if a run configuration is invalid."""


class Method(str, Enum):
    """Calibration weighting methods."""

    UNIFORM = "uniform"
    KDE = "kde"
    CLASSIFIER = "classifier"
    KMM = "kmm"
    SKMM = "skmm"


class Mode(str, Enum):
    """Calibration modes."""

    GLOBAL = "global"
    MONDRIAN = "mondrian"


class SplitMode(str, Enum):
    """How the held-out test set is carved from a single table."""

    RANDOM = "random"
    CENTROID_DISTANCE = "centroid_distance"


class LabelRule(str, Enum):
    """Label rules for synthetic data."""

    LINEAR_LOGIT = "linear_logit"
    RADIAL = "radial"


class DataSource(str, Enum):
    """Where a run gets its samples from."""

    SYNTHETIC = "synthetic"
    CSV = "csv"


class LevelPreset(str, Enum):
    """Named coverage-level grids."""

    DEFAULT = "default"
    EXTENDED = "extended"


LEVEL_PRESETS: t.Dict[LevelPreset, t.Tuple[float, ...]] = {
    LevelPreset.DEFAULT: DEFAULT_LEVELS,
    LevelPreset.EXTENDED: EXTENDED_LEVELS,
}


class StrictModel(BaseModel):  # pylint: disable = too-few-public-methods
    """Base model rejecting unknown keys."""

    class Config:  # pylint: disable = too-few-public-methods
        """Pydantic options."""

        extra = Extra.forbid
        allow_mutation = False
        use_enum_values = False


class KmmConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Kernel mean matching hyperparameters."""

    b_bound: float = 30.0
    epsilon: t.Optional[float] = None
    tau: float = 0.5
    alpha_threshold: float = 0.2

    @validator("b_bound")
    def _b_bound_positive(cls, value: float) -> float:  # noqa: N805
        if value <= 0:
            raise ValueError("b_bound must be positive")
        return value

    @validator("epsilon")
    def _epsilon_range(cls, value: t.Optional[float]) -> t.Optional[float]:  # noqa: N805
        if value is not None and not 0 <= value < 1:
            raise ValueError("epsilon must be in [0, 1)")
        return value

    @validator("tau")
    def _tau_range(cls, value: float) -> float:  # noqa: N805
        if not 0 < value < 1:
            raise ValueError("tau must be in (0, 1)")
        return value

    @validator("alpha_threshold")
    def _threshold_range(cls, value: float) -> float:  # noqa: N805
        if not 0 <= value <= 1:
            raise ValueError("alpha_threshold must be in [0, 1]")
        return value


class SplitSpec(StrictModel):  # pylint: disable = too-few-public-methods
    """Dataset split parameters."""

    calibration_fraction: float = 0.5
    test_fraction: float = 0.15
    mode: SplitMode = SplitMode.CENTROID_DISTANCE
    seed: int = 0

    @validator("calibration_fraction", "test_fraction")
    def _open_unit_interval(cls, value: float) -> float:  # noqa: N805
        if not 0 < value < 1:
            raise ValueError("fractions must be in (0, 1)")
        return value

    @validator("seed")
    def _seed_unsigned(cls, value: int) -> int:  # noqa: N805
        if value < 0:
            raise ValueError("seed must be non-negative")
        return value

    @root_validator(skip_on_failure=True)
    def _fractions_fit(cls, values: t.Dict[str, t.Any]) -> t.Dict[str, t.Any]:  # noqa: N805
        if values["calibration_fraction"] + values["test_fraction"] > 1:
            raise ValueError("calibration_fraction + test_fraction must not exceed 1")
        return values


class SyntheticShiftSpec(StrictModel):  # pylint: disable = too-few-public-methods
    """Parameters of the two-component Gaussian covariate-shift generator."""

    dim: int = 2
    n_source: int = 1000
    n_target: int = 1000
    overlap: float = 1.0
    separation: float = 0.0
    label_rule: LabelRule = LabelRule.LINEAR_LOGIT
    scorer_noise: float = 0.5
    scorer_temperature: float = 0.5
    seed: int = 0

    @validator("dim", "n_source", "n_target")
    def _at_least_one(cls, value: int) -> int:  # noqa: N805
        if value < 1:
            raise ValueError("dimension and sample counts must be at least 1")
        return value

    @validator("overlap")
    def _overlap_range(cls, value: float) -> float:  # noqa: N805
        if not 0 <= value <= 1:
            raise ValueError("overlap must be in [0, 1]")
        return value

    @validator("separation", "scorer_noise")
    def _non_negative(cls, value: float) -> float:  # noqa: N805
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @validator("scorer_temperature")
    def _temperature_positive(cls, value: float) -> float:  # noqa: N805
        if value <= 0:
            raise ValueError("scorer_temperature must be positive")
        return value

    @validator("seed")
    def _seed_unsigned(cls, value: int) -> int:  # noqa: N805
        if value < 0:
            raise ValueError("seed must be non-negative")
        return value


class DataConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Data source section of a run configuration."""

    source: DataSource = DataSource.SYNTHETIC
    name: str = "synthetic"
    table: t.Optional[Path] = None
    calibration: t.Optional[Path] = None
    test: t.Optional[Path] = None
    n_prob_cols: int = 2

    @root_validator(skip_on_failure=True)
    def _csv_paths(cls, values: t.Dict[str, t.Any]) -> t.Dict[str, t.Any]:  # noqa: N805
        if values["source"] != DataSource.CSV:
            return values
        table, cal, test = values["table"], values["calibration"], values["test"]
        if table is None and (cal is None or test is None):
            raise ValueError("csv source needs data.table or both data.calibration and data.test")
        for path in (table, cal, test):
            if path is not None and not Path(path).is_file():
                raise ValueError(f"file not found: {path}")
        if values["n_prob_cols"] < 1:
            raise ValueError("csv source needs n_prob_cols >= 1")
        return values


class KernelConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Kernel section of a run configuration."""

    n_permutations: int = KERNEL_SETTINGS.n_permutations
    sigma: t.Optional[float] = None

    @validator("n_permutations")
    def _permutations_positive(cls, value: int) -> int:  # noqa: N805
        if value < 2:
            raise ValueError("n_permutations must be at least 2")
        return value

    @validator("sigma")
    def _sigma_positive(cls, value: t.Optional[float]) -> t.Optional[float]:  # noqa: N805
        if value is not None and value <= 0:
            raise ValueError("sigma must be positive")
        return value


class KdeConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """KDE baseline section of a run configuration."""

    holdout_fraction: float = DENSITY_RATIO_SETTINGS.kde_holdout_fraction

    @validator("holdout_fraction")
    def _holdout_range(cls, value: float) -> float:  # noqa: N805
        if not 0 < value < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        return value


class ClassifierConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Classifier baseline section of a run configuration."""

    reg: float = DENSITY_RATIO_SETTINGS.classifier_reg

    @validator("reg")
    def _reg_positive(cls, value: float) -> float:  # noqa: N805
        if value <= 0:
            raise ValueError("reg must be positive")
        return value


class LevelsConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Coverage-level grid of a run configuration."""

    preset: LevelPreset = LevelPreset.DEFAULT
    grid: t.Optional[t.Tuple[float, ...]] = None

    @validator("grid")
    def _grid_valid(
        cls, value: t.Optional[t.Tuple[float, ...]]  # noqa: N805
    ) -> t.Optional[t.Tuple[float, ...]]:
        if value is None:
            return value
        if not value:
            raise ValueError("levels.grid must not be empty")
        if any(not 0 < level < 1 for level in value):
            raise ValueError("levels must be in (0, 1)")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("levels must be strictly increasing")
        return value

    @property
    def effective(self) -> t.Tuple[float, ...]:
        """Return the effective level grid."""
        return self.grid if self.grid is not None else LEVEL_PRESETS[self.preset]


class ConformalConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Conformal calibration options."""

    test_point_mass: bool = False


class EvaluationConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Diagnostic options."""

    delta: float = 0.05

    @validator("delta")
    def _delta_range(cls, value: float) -> float:  # noqa: N805
        if not 0 < value < 1:
            raise ValueError("delta must be in (0, 1)")
        return value


class OutputConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """Output section of a run configuration."""

    directory: Path = Path("shiftcal-out")


class RunConfig(StrictModel):  # pylint: disable = too-few-public-methods
    """A complete experiment configuration."""

    data: DataConfig = DataConfig()
    synthetic: SyntheticShiftSpec = SyntheticShiftSpec()
    split: SplitSpec = SplitSpec()
    methods: t.Tuple[Method, ...] = (Method.UNIFORM,)
    modes: t.Tuple[Mode, ...] = (Mode.GLOBAL,)
    seeds: t.Tuple[int, ...] = (0,)
    levels: LevelsConfig = LevelsConfig()
    kmm: KmmConfig = KmmConfig()
    kernel: KernelConfig = KernelConfig()
    kde: KdeConfig = KdeConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    conformal: ConformalConfig = ConformalConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    output: OutputConfig = OutputConfig()

    @validator("methods", "modes", "seeds")
    def _non_empty(cls, value: t.Tuple[t.Any, ...]) -> t.Tuple[t.Any, ...]:  # noqa: N805
        if not value:
            raise ValueError("must not be empty")
        if len(set(value)) != len(value):
            raise ValueError("must not contain duplicates")
        return value

    @validator("seeds")
    def _seeds_unsigned(cls, value: t.Tuple[int, ...]) -> t.Tuple[int, ...]:  # noqa: N805
        if any(seed < 0 for seed in value):
            raise ValueError("seeds must be non-negative")
        return value


LIST_KEYS = frozenset({"methods", "modes", "seeds", "levels.grid"})


def _parse_lines(text: str) -> t.Dict[str, t.Any]:
    """Turn flat ``key = value`` lines into a nested dict."""
    nested: t.Dict[str, t.Any] = {}
    seen: t.Set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        seen.add(key)

        parsed: t.Any = value
        if key in LIST_KEYS:
            parsed = [item.strip() for item in value.split(",") if item.strip()]

        section, _, name = key.partition(".")
        if not name:
            nested[section] = parsed
            continue
        if "." in name:
            raise ConfigError(f"line {lineno}: key '{key}' nests deeper than one level")
        target = nested.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"line {lineno}: '{section}' is not a section")
        target[name] = parsed
    return nested


def _format_error(err: ValidationError) -> str:
    """Name every offending key of a pydantic validation error."""
    problems = []
    for item in err.errors():
        key = ".".join(str(part) for part in item["loc"] if part != "__root__")
        problems.append(f"'{key}': {item['msg']}" if key else item["msg"])
    return "; ".join(problems)


def config_from_text(text: str) -> RunConfig:
    """Build a validated RunConfig from flat config text."""
    nested = _parse_lines(text)
    try:
        return RunConfig(**nested)
    except ValidationError as err:
        raise ConfigError(f"invalid config: {_format_error(err)}") from err
    except TypeError as err:
        raise ConfigError(f"invalid config: {err}") from err


def parse_config(path: Path) -> RunConfig:
    """Read and validate a run configuration file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return config_from_text(text)


def _format_value(value: t.Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(item) for item in value)
    return str(value)


def flatten_config(cfg: RunConfig) -> t.Dict[str, t.Any]:
    """Flatten a RunConfig into dotted keys, dropping unset optional values."""
    flat: t.Dict[str, t.Any] = {}
    for section, value in cfg.dict().items():
        if isinstance(value, dict):
            for name, inner in value.items():
                if inner is not None:
                    flat[f"{section}.{name}"] = inner
        elif value is not None:
            flat[section] = value
    return flat


def serialize_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back into the flat key=value format."""
    flat = flatten_config(cfg)
    return "".join(f"{key} = {_format_value(flat[key])}\n" for key in sorted(flat))
