"""Run configuration: architecture, iteration schedules and loss constants.

Every ablation axis (scale count, lookup levels, channel widths, iteration
splits, loss variants) is expressible as plain data, so experiment grids run
from config files without code edits.  Configs are frozen after validation
and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

VALID_ROBUST_MODES = ("pretrain", "finetune")


class ConfigError(ValueError):
    """Raised when a configuration violates an invariant.

    Carries the offending field name so callers can report which knob to fix.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture parameters of the coarse-to-fine estimator.

    Scales are indexed 1..num_scales with 1 the coarsest.  The finest scale
    sits at ``finest_stride`` (4) relative to the input; every coarser scale
    doubles the stride.  ``image_channels`` is listed coarsest first.
    ``context_channels`` is a single value because the recurrent matching
    block is shared across scales and consumes context features everywhere.
    """

    num_scales: int = 3
    lookup_levels: int = 2
    lookup_radius: int = 4
    image_channels: tuple[int, ...] = (256, 128, 96)
    context_channels: int = 256
    hidden_channels: int = 128
    finest_stride: int = 4
    # Optional per-scale override of lookup_levels (coarsest first), for
    # grids that shrink the pyramid at coarse scales.
    lookup_levels_per_scale: tuple[int, ...] | None = None

    def stride(self, scale: int) -> int:
        """Downsampling factor of 1-based ``scale`` relative to the input."""
        if not 1 <= scale <= self.num_scales:
            raise ConfigError("num_scales", f"scale {scale} out of range 1..{self.num_scales}")
        return self.finest_stride * 2 ** (self.num_scales - scale)

    @property
    def strides(self) -> tuple[int, ...]:
        """All strides, coarsest first."""
        return tuple(self.stride(s) for s in range(1, self.num_scales + 1))

    def levels_at(self, scale: int) -> int:
        """Correlation-pyramid levels used at 1-based ``scale``."""
        if self.lookup_levels_per_scale is not None:
            return self.lookup_levels_per_scale[scale - 1]
        return self.lookup_levels

    @property
    def max_lookup_levels(self) -> int:
        if self.lookup_levels_per_scale is not None:
            return max(self.lookup_levels_per_scale)
        return self.lookup_levels

    @property
    def input_channels(self) -> int:
        """Static context channels fed to the recurrent unit each iteration."""
        return self.context_channels - self.hidden_channels


@dataclass(frozen=True)
class IterationSchedule:
    """Recurrent iteration counts per scale, coarsest first."""

    train_iters: tuple[int, ...] = (4, 6, 8)
    eval_iters: tuple[int, ...] = (4, 6, 8)

    def iters(self, mode: str) -> tuple[int, ...]:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown schedule mode {mode!r}")
        return self.train_iters if mode == "train" else self.eval_iters


@dataclass(frozen=True)
class LossConfig:
    """Constants of the iteration-weighted training loss.

    gamma is the exponential decay base of the per-iteration weights,
    epsilon regularises the error norm, and (q, epsilon_prime) parameterise
    the sample-wise robust variant used during fine-tuning.
    """

    gamma: float = 0.8
    epsilon: float = 1e-5
    q: float = 0.7
    epsilon_prime: float = 0.01
    robust_mode: str = "pretrain"


def validate_config(
    cfg: ModelConfig,
    sched: IterationSchedule | None = None,
    loss: LossConfig | None = None,
):
    """Check every invariant; return the inputs unchanged or raise ConfigError."""
    if not 1 <= cfg.num_scales <= 4:
        raise ConfigError("num_scales", f"must be in [1, 4], got {cfg.num_scales}")
    if cfg.lookup_levels < 1:
        raise ConfigError("lookup_levels", f"must be >= 1, got {cfg.lookup_levels}")
    if cfg.lookup_radius < 0:
        raise ConfigError("lookup_radius", f"must be >= 0, got {cfg.lookup_radius}")
    if len(cfg.image_channels) != cfg.num_scales:
        raise ConfigError(
            "image_channels",
            f"needs one entry per scale ({cfg.num_scales}), got {len(cfg.image_channels)}",
        )
    if any(c < 1 for c in cfg.image_channels):
        raise ConfigError("image_channels", "channel counts must be positive")
    if cfg.context_channels < 2:
        raise ConfigError("context_channels", "must be >= 2 (split into hidden and input)")
    if not 1 <= cfg.hidden_channels < cfg.context_channels:
        raise ConfigError(
            "hidden_channels",
            f"must be in [1, context_channels-1], got {cfg.hidden_channels} "
            f"with context_channels={cfg.context_channels}",
        )
    if cfg.finest_stride < 1 or cfg.finest_stride & (cfg.finest_stride - 1):
        raise ConfigError("finest_stride", f"must be a positive power of two, got {cfg.finest_stride}")
    if cfg.lookup_levels_per_scale is not None:
        if len(cfg.lookup_levels_per_scale) != cfg.num_scales:
            raise ConfigError(
                "lookup_levels_per_scale",
                f"needs one entry per scale ({cfg.num_scales}), "
                f"got {len(cfg.lookup_levels_per_scale)}",
            )
        if any(l < 1 for l in cfg.lookup_levels_per_scale):
            raise ConfigError("lookup_levels_per_scale", "levels must be >= 1")

    if sched is not None:
        for name in ("train_iters", "eval_iters"):
            iters = getattr(sched, name)
            if len(iters) != cfg.num_scales:
                raise ConfigError(
                    name, f"needs one entry per scale ({cfg.num_scales}), got {len(iters)}"
                )
            if any(n < 1 for n in iters):
                raise ConfigError(name, "iteration counts must be >= 1")

    if loss is not None:
        if not 0.0 < loss.gamma <= 1.0:
            raise ConfigError("gamma", f"must be in (0, 1], got {loss.gamma}")
        if loss.epsilon <= 0.0:
            raise ConfigError("epsilon", f"must be > 0, got {loss.epsilon}")
        if not 0.0 < loss.q <= 1.0:
            raise ConfigError("q", f"must be in (0, 1], got {loss.q}")
        if loss.epsilon_prime < 0.0:
            raise ConfigError("epsilon_prime", f"must be >= 0, got {loss.epsilon_prime}")
        if loss.robust_mode not in VALID_ROBUST_MODES:
            raise ConfigError(
                "robust_mode", f"must be one of {VALID_ROBUST_MODES}, got {loss.robust_mode!r}"
            )

    if sched is None and loss is None:
        return cfg
    return tuple(x for x in (cfg, sched, loss) if x is not None)


# --- flat key-value config files --------------------------------------------

_INT_LIST_FIELDS = {
    "image_channels",
    "lookup_levels_per_scale",
    "train_iters",
    "eval_iters",
}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_SCHED_FIELDS = {f.name for f in fields(IterationSchedule)}
_LOSS_FIELDS = {f.name for f in fields(LossConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _INT_LIST_FIELDS:
        try:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(key, f"expected comma-separated integers, got {raw!r}")
    if key == "robust_mode":
        return raw
    if key in _LOSS_FIELDS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {raw!r}")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(key, f"expected an integer, got {raw!r}")


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines into typed values.

    Blank lines and '#' comments are ignored; list values are comma-separated.
    Unknown keys raise so typos never silently fall back to defaults.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("<file>", f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _MODEL_FIELDS | _SCHED_FIELDS | _LOSS_FIELDS:
            raise ConfigError(key, f"line {lineno}: unknown configuration key")
        values[key] = _parse_value(key, raw)
    return values


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def configs_from_values(values: dict):
    """Build the (model, schedule, loss) triple from a parsed mapping.

    Missing keys take their dataclass defaults; eval_iters defaults to
    train_iters when only the latter is given.  The result is validated.
    """
    model_kw = {k: v for k, v in values.items() if k in _MODEL_FIELDS}
    sched_kw = {k: v for k, v in values.items() if k in _SCHED_FIELDS}
    loss_kw = {k: v for k, v in values.items() if k in _LOSS_FIELDS}

    cfg = ModelConfig(**model_kw)
    sched = IterationSchedule(**sched_kw)
    if "train_iters" in sched_kw and "eval_iters" not in sched_kw:
        sched = replace(sched, eval_iters=sched.train_iters)
    loss = LossConfig(**loss_kw)
    validate_config(cfg, sched, loss)
    return cfg, sched, loss


def load_configs(path=None, overrides: dict | None = None):
    """Load configs from an optional file, with overrides taking precedence."""
    values = load_config_file(path) if path is not None else {}
    if overrides:
        values.update(overrides)
    return configs_from_values(values)
