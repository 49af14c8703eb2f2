"""Flat key = value experiment configuration with dotted sections.

Example::

    # five related synthetic tasks
    stream.tasks = 5
    stream.dim = 16
    stream.classes = 4
    stream.samples_per_class = 100
    stream.relatedness = 0.5

    net.widths = 24, 24
    hyper.lambda1 = 0.01
    hyper.tau_init = zeros

    run.variants = APD1, L2T
    run.orders = random:3
    run.seeds = 1, 2, 3
    out.dir = results

    override.L2T.lambda2 = 0.01

Unknown keys and malformed values fail with the offending line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .taskgen import StreamSpec
from .trainer import HyperParams, Variant


class ConfigError(ValueError):
    """Configuration problem, anchored to a file line when possible."""


@dataclass
class ExperimentConfig:
    stream: StreamSpec | None = None
    stream_seed_fixed: bool = False
    csv_paths: list[str] = field(default_factory=list)
    ratios: tuple[float, float, float] = (0.6, 0.15, 0.25)
    widths: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    hyper: HyperParams = field(default_factory=HyperParams)
    variants: list[Variant] = field(default_factory=lambda: [Variant(kind="APD1")])
    orders_mode: str = "random"       # "random" or "fixtures"
    orders_count: int = 1             # for random mode
    order_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "results"
    log_trajectory: bool = True
    overrides: dict[str, dict[str, float | int | str]] = field(default_factory=dict)

    def hyper_for(self, variant: Variant, seed: int) -> HyperParams:
        hp = replace(self.hyper, seed=seed)
        fields_ = self.overrides.get(variant.label)
        if fields_:
            hp = replace(hp, **fields_)
        return hp


_HYPER_FIELDS = {f.name: f.type for f in fields(HyperParams)}

_STREAM_KEYS = {
    "tasks": int,
    "dim": int,
    "classes": int,
    "samples_per_class": int,
    "relatedness": float,
    "noise": float,
    "families": int,
    "family_spread": float,
    "seed": int,
}


def _parse_scalar(text: str, typ, where: str):
    try:
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected {typ.__name__}, got {text!r}") from None
    return text


def _parse_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _hyper_value(name: str, text: str, where: str):
    if name not in _HYPER_FIELDS:
        raise ConfigError(f"{where}: unknown hyperparameter {name!r}")
    if name == "tau_init":
        return text
    typ = int if name in ("epochs", "batch_size", "s", "k", "K0", "seed") else float
    return _parse_scalar(text, typ, where)


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    stream_kv: dict[str, object] = {}
    hyper_kv: dict[str, object] = {}
    seen_variants: list[str] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")

        if key.startswith("stream."):
            name = key[len("stream.") :]
            if name not in _STREAM_KEYS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            stream_kv[name] = _parse_scalar(value, _STREAM_KEYS[name], where)
        elif key == "data.csv":
            cfg.csv_paths = _parse_list(value)
        elif key == "split.ratios":
            parts = _parse_list(value)
            if len(parts) != 3:
                raise ConfigError(f"{where}: split.ratios needs three values")
            cfg.ratios = tuple(_parse_scalar(p, float, where) for p in parts)
        elif key == "net.widths":
            cfg.widths = tuple(_parse_scalar(p, int, where) for p in _parse_list(value))
        elif key == "net.activation":
            cfg.activation = value
        elif key.startswith("hyper."):
            name = key[len("hyper.") :]
            hyper_kv[name] = _hyper_value(name, value, where)
        elif key == "run.variants":
            try:
                cfg.variants = [Variant.parse(v) for v in _parse_list(value)]
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
            seen_variants = [v.label for v in cfg.variants]
        elif key == "run.orders":
            mode, _, arg = value.partition(":")
            mode = mode.strip().lower()
            if mode == "random":
                cfg.orders_mode = "random"
                cfg.orders_count = _parse_scalar(arg.strip() or "1", int, where)
                if cfg.orders_count < 1:
                    raise ConfigError(f"{where}: need at least one order")
            elif mode == "fixtures":
                cfg.orders_mode = "fixtures"
            else:
                raise ConfigError(
                    f"{where}: run.orders must be 'random:<R>' or 'fixtures', got {value!r}"
                )
        elif key == "run.order_seed":
            cfg.order_seed = _parse_scalar(value, int, where)
        elif key == "run.seeds":
            cfg.seeds = [_parse_scalar(p, int, where) for p in _parse_list(value)]
        elif key == "out.dir":
            cfg.out_dir = value
        elif key == "log.trajectory":
            if value.lower() not in ("true", "false"):
                raise ConfigError(f"{where}: log.trajectory must be true or false")
            cfg.log_trajectory = value.lower() == "true"
        elif key.startswith("override."):
            rest = key[len("override.") :]
            variant_name, dot, hp_name = rest.rpartition(".")
            if not dot:
                raise ConfigError(f"{where}: expected override.<variant>.<hyperparameter>")
            try:
                label = Variant.parse(variant_name).label
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
            cfg.overrides.setdefault(label, {})[hp_name] = _hyper_value(
                hp_name, value, where
            )
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")

    if stream_kv and cfg.csv_paths:
        raise ConfigError(f"{path}: stream.* and data.csv are mutually exclusive")
    if not stream_kv and not cfg.csv_paths:
        raise ConfigError(f"{path}: need either stream.* keys or data.csv")
    if stream_kv:
        cfg.stream_seed_fixed = "seed" in stream_kv
        required = ("tasks", "dim", "classes", "samples_per_class")
        missing = [k for k in required if k not in stream_kv]
        if missing:
            raise ConfigError(f"{path}: missing stream keys: {', '.join(missing)}")
        try:
            cfg.stream = StreamSpec(**stream_kv)
            cfg.stream.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: invalid stream spec: {exc}") from None
    if hyper_kv:
        try:
            cfg.hyper = replace(cfg.hyper, **hyper_kv)
            cfg.hyper.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: invalid hyperparameters: {exc}") from None
    if not cfg.seeds:
        raise ConfigError(f"{path}: run.seeds must list at least one seed")
    for label in cfg.overrides:
        if seen_variants and label not in seen_variants:
            raise ConfigError(f"{path}: override for variant {label!r} not in run.variants")
    if abs(sum(cfg.ratios) - 1.0) > 1e-9:
        raise ConfigError(f"{path}: split.ratios must sum to 1, got {cfg.ratios}")
    if any(w < 1 for w in cfg.widths) or not cfg.widths:
        raise ConfigError(f"{path}: net.widths must be positive integers")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(text, path)
