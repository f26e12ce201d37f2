"""Plain-text key-value run configuration.

One schema serves every subcommand: `key = value` lines, full-line `#`
comments, dotted keys for grouping (`engagement.n_defenders = 10`). Values
are strings until a typed getter claims them; getters record which keys
were read so a run can reject typos instead of ignoring them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .engagement import EngagementConfig, MotionType


class ConfigError(Exception):
    """Bad configuration; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None,
                 key: str | None = None):
        self.line = line
        self.key = key
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")


@dataclass
class _Entry:
    value: str
    line: int
    used: bool = False


class Config:
    """Parsed key-value file with consumption tracking."""

    def __init__(self, entries: dict[str, _Entry], source: str = "<string>"):
        self._entries = entries
        self.source = source

    # -- raw access ---------------------------------------------------------

    def has(self, key: str) -> bool:
        return key in self._entries

    def keys(self) -> list[str]:
        return list(self._entries)

    def unused_keys(self) -> list[str]:
        return [k for k, e in self._entries.items() if not e.used]

    def require_fully_used(self) -> None:
        """Reject unrecognized keys; catches typos like `problem.dmin`."""
        left = self.unused_keys()
        if left:
            first = self._entries[left[0]]
            raise ConfigError(f"unknown key(s): {', '.join(sorted(left))}",
                              line=first.line, key=left[0])

    def _raw(self, key: str) -> str | None:
        entry = self._entries.get(key)
        if entry is None:
            return None
        entry.used = True
        return entry.value

    def _line(self, key: str) -> int | None:
        entry = self._entries.get(key)
        return entry.line if entry else None

    # -- typed getters ------------------------------------------------------

    _MISSING = object()

    def get_str(self, key: str, default=_MISSING) -> str:
        raw = self._raw(key)
        if raw is None:
            if default is Config._MISSING:
                raise ConfigError(f"missing required key {key!r}", key=key)
            return default
        return raw

    def get_int(self, key: str, default=_MISSING) -> int:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key!r} must be an integer, got {raw!r}",
                              line=self._line(key), key=key) from None

    def get_float(self, key: str, default=_MISSING) -> float:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key!r} must be a number, got {raw!r}",
                              line=self._line(key), key=key) from None

    def get_bool(self, key: str, default=_MISSING) -> bool:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key!r} must be a boolean, got {raw!r}",
                          line=self._line(key), key=key)

    def get_int_list(self, key: str, default=_MISSING) -> list[int]:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        try:
            return [int(tok) for tok in _split_list(raw)]
        except ValueError:
            raise ConfigError(f"{key!r} must be a list of integers, got "
                              f"{raw!r}", line=self._line(key), key=key) from None

    def get_float_list(self, key: str, default=_MISSING) -> list[float]:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        try:
            return [float(tok) for tok in _split_list(raw)]
        except ValueError:
            raise ConfigError(f"{key!r} must be a list of numbers, got "
                              f"{raw!r}", line=self._line(key), key=key) from None

    def get_str_list(self, key: str, default=_MISSING) -> list[str]:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        return _split_list(raw)

    def get_motion(self, key: str, default=_MISSING) -> MotionType:
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        return self._parse_motion(raw, key)

    def get_motion_list(self, key: str, default=_MISSING) -> list[MotionType]:
        """Motion names; the single word `all` expands to every family."""
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        if raw.strip().lower() == "all":
            return list(MotionType)
        return [self._parse_motion(tok, key) for tok in _split_list(raw)]

    def get_polygon(self, key: str, default=_MISSING) -> np.ndarray:
        """Vertex list `x,y; x,y; ...` as an [n, 2] float array."""
        raw = self._raw(key)
        if raw is None:
            return self._default(key, default)
        try:
            rows = [tok for tok in raw.split(";") if tok.strip()]
            pts = [[float(c) for c in row.split(",")] for row in rows]
            arr = np.asarray(pts, dtype=np.float64)
        except ValueError:
            raise ConfigError(f"{key!r} must look like 'x,y; x,y; ...', got "
                              f"{raw!r}", line=self._line(key), key=key) from None
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
            raise ConfigError(f"{key!r} needs at least three x,y vertices",
                              line=self._line(key), key=key)
        return arr

    # -- helpers ------------------------------------------------------------

    def _default(self, key, default):
        if default is Config._MISSING:
            raise ConfigError(f"missing required key {key!r}", key=key)
        return default

    def _parse_motion(self, raw: str, key: str) -> MotionType:
        name = raw.strip().upper()
        try:
            return MotionType[name]
        except KeyError:
            options = ", ".join(m.name.lower() for m in MotionType)
            raise ConfigError(f"{key!r}: unknown motion {raw!r} (options: "
                              f"{options})", line=self._line(key),
                              key=key) from None


def _split_list(raw: str) -> list[str]:
    toks = raw.replace(",", " ").split()
    return [t for t in toks if t]


def parse_config(text: str, source: str = "<string>") -> Config:
    entries: dict[str, _Entry] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}",
                              line=lineno)
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError("empty key", line=lineno)
        if not value:
            raise ConfigError(f"empty value for key {key!r}", line=lineno,
                              key=key)
        if key in entries:
            raise ConfigError(f"duplicate key {key!r} (first on line "
                              f"{entries[key].line})", line=lineno, key=key)
        entries[key] = _Entry(value=value, line=lineno)
    return Config(entries, source=source)


def load_config(path) -> Config:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, source=str(p))


# ---------------------------------------------------------------------------
# Section builders
# ---------------------------------------------------------------------------

ENGAGEMENT_FIELDS = {
    "n_defenders": "get_int",
    "n_adversaries": "get_int",
    "seed": "get_int",
    "dt": "get_float",
    "max_steps": "get_int",
    "defender_v_min": "get_float",
    "defender_v_max": "get_float",
    "defender_a_max": "get_float",
    "adversary_v_max": "get_float",
    "adversary_a_max": "get_float",
    "separation": "get_float",
    "threat_bearing_deg": "get_float",
    "defender_radius": "get_float",
    "adversary_radius": "get_float",
    "capture_radius": "get_float",
}


def engagement_from_config(cfg: Config,
                           prefix: str = "engagement.") -> EngagementConfig:
    """EngagementConfig from `engagement.*` keys over the baseline defaults."""
    out = EngagementConfig()
    overrides = {}
    for name, getter in ENGAGEMENT_FIELDS.items():
        key = prefix + name
        if cfg.has(key):
            overrides[name] = getattr(cfg, getter)(key)
    try:
        out = replace(out, **overrides)
    except ValueError as exc:
        raise ConfigError(f"invalid engagement settings: {exc}") from None
    return out
