"""Kconfig fragment parsing, ordered merging and ``.config`` rendering."""

from __future__ import annotations

import enum
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError
from .layers import Layer

log = logging.getLogger(__name__)

CONFIG_CLASSES = ("buildroot", "kernel", "uboot")

_KEY = r"[A-Z][A-Z0-9]*_[A-Z0-9_]+"
_KEY_RE = re.compile(rf"^{_KEY}$")
_ASSIGN_RE = re.compile(rf"^({_KEY})=(.*)$")
_UNSET_RE = re.compile(rf"^#\s*({_KEY}) is not set$")
_INT_RE = re.compile(r"^(-?[0-9]+|0[xX][0-9a-fA-F]+)$")
_STRING_RE = re.compile(r'^"(?:[^"\\]|\\.)*"$')


class ValueKind(enum.Enum):
    YES = "y"
    MODULE = "m"
    UNSET = "n"
    STRING = "string"
    NUMBER = "number"
    RAW = "raw"


@dataclass(frozen=True)
class KconfigValue:
    kind: ValueKind
    text: str  # right-hand side exactly as written; strings keep their quotes

    @classmethod
    def classify(cls, text: str) -> KconfigValue:
        if text == "y":
            return cls(ValueKind.YES, text)
        if text == "m":
            return cls(ValueKind.MODULE, text)
        if text == "n":
            return cls(ValueKind.UNSET, text)
        if _STRING_RE.match(text):
            return cls(ValueKind.STRING, text)
        if _INT_RE.match(text):
            return cls(ValueKind.NUMBER, text)
        return cls(ValueKind.RAW, text)

    @classmethod
    def unset(cls) -> KconfigValue:
        return cls(ValueKind.UNSET, "n")

    @property
    def string(self) -> str:
        """Unquoted, unescaped content of a string value."""
        if self.kind is not ValueKind.STRING:
            raise TypeError(f"{self.kind.name} value has no string content")
        return re.sub(r"\\(.)", r"\1", self.text[1:-1])

    def render(self, key: str) -> str:
        if self.kind is ValueKind.UNSET:
            return f"# {key} is not set"
        return f"{key}={self.text}"


@dataclass(frozen=True)
class KconfigAssignment:
    key: str
    value: KconfigValue
    source: str
    line: int

    def __post_init__(self):
        if not _KEY_RE.match(self.key):
            raise ParseError(f"invalid config key {self.key!r}", self.source, self.line)


@dataclass(frozen=True)
class KconfigFragment:
    source: str
    assignments: tuple[KconfigAssignment, ...] = ()

    def keys(self) -> list[str]:
        return [a.key for a in self.assignments]


@dataclass(frozen=True)
class MergedEntry:
    value: KconfigValue
    source: str
    line: int


class MergedConfig(dict):
    """Ordered ``key -> MergedEntry`` map; iteration follows first-seen key order."""

    def values_by_key(self) -> dict[str, KconfigValue]:
        return {k: e.value for k, e in self.items()}


def parse_fragment(data: bytes | str, source: str | os.PathLike = "<fragment>",
                   diagnostics: list[str] | None = None) -> KconfigFragment:
    source = str(source)
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as err:
            raise ParseError(f"not valid UTF-8 text ({err.reason})", source) from None
    out: list[KconfigAssignment] = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(data.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        m = _UNSET_RE.match(line)
        if m:
            key, value = m.group(1), KconfigValue.unset()
        elif line.startswith("#"):
            continue
        else:
            m = _ASSIGN_RE.match(line)
            if not m:
                raise ParseError(f"not a config assignment: {raw!r}", source, lineno)
            key, value = m.group(1), KconfigValue.classify(m.group(2))
        if key in seen:
            msg = f"{source}:{lineno}: {key} already set on line {seen[key]}; last line wins"
            log.warning(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
        seen[key] = lineno
        out.append(KconfigAssignment(key, value, source, lineno))
    return KconfigFragment(source, tuple(out))


def load_fragment(path: str | os.PathLike, diagnostics: list[str] | None = None) -> KconfigFragment:
    return parse_fragment(Path(path).read_bytes(), path, diagnostics)


def render_fragment(fragment: KconfigFragment) -> str:
    return "".join(a.value.render(a.key) + "\n" for a in fragment.assignments)


def _fragment_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(
        (p for p in directory.iterdir() if p.is_file() and not p.name.startswith(".")),
        key=lambda p: p.name,
    )


def collect_fragment_paths(layers: Sequence[Layer], config_class: str,
                           overrides_root: str | os.PathLike | None = None,
                           workspace: str = "default") -> list[Path]:
    """Fragment files for one config class, in merge order.

    Layer order first, filename order within a layer, then the global and
    finally the workspace-specific override directories.
    """
    if config_class not in CONFIG_CLASSES:
        raise ValueError(f"unknown config class {config_class!r}")
    paths: list[Path] = []
    for layer in layers:
        paths.extend(_fragment_files(layer.root / config_class))
    if overrides_root is not None:
        overrides_root = Path(overrides_root)
        paths.extend(_fragment_files(overrides_root / config_class))
        paths.extend(_fragment_files(overrides_root / "workspaces" / workspace / config_class))
    return paths


def merge_fragments(fragments: Iterable[KconfigFragment]) -> MergedConfig:
    merged = MergedConfig()
    for frag in fragments:
        for a in frag.assignments:
            merged[a.key] = MergedEntry(a.value, a.source, a.line)
    return merged


def render_config(merged: MergedConfig) -> str:
    return "".join(entry.value.render(key) + "\n" for key, entry in merged.items())
