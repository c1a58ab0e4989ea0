"""Engine configuration: a flat ``key = value`` file.

Lines may carry ``#`` comments and values may be quoted. Unknown keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .fingerprint import SketchParams
from .planner import PlannerConfig

ENV_STORE = "TH_STORE"
ENV_CONFIG = "TH_CONFIG"
DEFAULT_STORE = "~/.tensorstash"
_SECTION = "tensorstash"


class ConfigError(ValueError):
    pass


def _default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class EngineConfig:
    store: str = ""
    codec: str = "FMPP"
    sketch_depth: int = 2
    sketch_width: int = 1024
    sketch_seed: int = 0x5EED
    theta_min: float = 0.05
    split_delta: float = 0.1
    split_min_size: int = 8
    split_trigger: float = 0.6
    # 0 refines once at the end of every ingest batch, N > 0 every N models
    refine_every: int = 0
    workers: int = dataclasses.field(default_factory=_default_workers)
    chunk_elements: int = 4 * 1024 * 1024
    # bases are zstd byte-plane compressed when that is smaller than raw
    base_compress: bool = True
    # STANDALONE only: no sketches, no planning, no deltas
    standalone: bool = False
    index_threshold: int = 5000

    # keys fixed at store creation; changing them would make old sketches incomparable
    FROZEN = ("sketch_depth", "sketch_width", "sketch_seed")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.codec.upper() not in ("TENSORX", "FMPP"):
            raise ConfigError(f"codec must be TENSORX or FMPP, got {self.codec!r}")
        self.codec = self.codec.upper()
        for name in ("sketch_depth", "sketch_width", "split_min_size", "workers", "chunk_elements",
                     "index_threshold"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.refine_every < 0:
            raise ConfigError("refine_every must be >= 0")
        for name in ("theta_min", "split_trigger"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.split_delta < 0:
            raise ConfigError("split_delta must be >= 0")
        try:
            self.sketch_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def sketch_params(self) -> SketchParams:
        return SketchParams(self.sketch_depth, self.sketch_width, self.sketch_seed)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(self.theta_min, self.split_delta, self.split_min_size, self.split_trigger)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ("true" if v else "false") if isinstance(v, bool) else str(v)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, str], base: "EngineConfig | None" = None) -> "EngineConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = dataclasses.asdict(base) if base is not None else {}
        for key, raw in values.items():
            key = key.strip().lower().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key].type, raw, key)
        return cls(**kwargs)

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _coerce(kind, raw, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text, 0)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_config(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return dict(parser[_SECTION])


def load_config(path: str | os.PathLike | None = None, base: EngineConfig | None = None) -> EngineConfig:
    """Read ``path`` (or ``$TH_CONFIG``) over ``base``; missing path means defaults."""
    path = path or os.environ.get(ENV_CONFIG)
    if not path:
        return base if base is not None else EngineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return EngineConfig.from_dict(parse_config(text), base)


def resolve_store_path(explicit: str | os.PathLike | None = None, config: EngineConfig | None = None) -> Path:
    if explicit:
        return Path(explicit).expanduser()
    env = os.environ.get(ENV_STORE)
    if env:
        return Path(env).expanduser()
    if config is not None and config.store:
        return Path(config.store).expanduser()
    return Path(DEFAULT_STORE).expanduser()
