"""Configuration layer discovery, metadata parsing and order resolution."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import CycleError, ParseError, ResolutionError

log = logging.getLogger(__name__)

# cflags is a file; every other marker is a directory.
LAYER_MARKERS = (
    "cflags",
    "buildroot",
    "buildroot_ext",
    "buildroot_patches",
    "extensions",
    "hooks",
    "kernel",
    "kernel_patches",
    "root_overlay",
    "metadata",
    "resources",
    "scripts",
    "uboot",
    "uboot_patches",
)
FILE_MARKERS = frozenset({"cflags"})


@dataclass(frozen=True, order=True)
class LayerId:
    segments: tuple[str, ...]

    def __post_init__(self):
        if not self.segments:
            raise ParseError("layer id has no segments")
        for seg in self.segments:
            if not seg or "/" in seg or any(c.isspace() for c in seg) or seg in (".", ".."):
                raise ParseError(f"invalid layer id segment {seg!r} in {'/'.join(self.segments)!r}")

    @classmethod
    def parse(cls, text: str) -> LayerId:
        try:
            return cls(tuple(text.split("/")))
        except ParseError:
            raise ParseError(f"malformed layer id {text!r}") from None

    def __str__(self) -> str:
        return "/".join(self.segments)


@dataclass(frozen=True)
class LayerMetadata:
    commands: tuple[tuple[str, str], ...] = ()
    dependencies: tuple[LayerId, ...] = ()
    description: str = ""
    unlisted: bool = False


@dataclass(frozen=True)
class Layer:
    id: LayerId
    root: Path
    present: frozenset[str] = frozenset()
    metadata: LayerMetadata = field(default_factory=LayerMetadata)

    def path(self, marker: str) -> Path:
        return self.root / marker

    def has(self, marker: str) -> bool:
        return marker in self.present


@dataclass(frozen=True)
class LayerCatalog:
    roots: tuple[Path, ...]
    layers: Mapping[LayerId, Layer]

    def __contains__(self, layer_id: LayerId) -> bool:
        return layer_id in self.layers

    def __getitem__(self, layer_id: LayerId) -> Layer:
        return self.layers[layer_id]

    def __len__(self) -> int:
        return len(self.layers)

    def ids(self) -> list[LayerId]:
        return sorted(self.layers)


def parse_selection(text: str) -> list[LayerId]:
    """Parse an ordered comma-separated layer list such as ``pi/4,core/gentoo``.

    Items are trimmed, empty items dropped and duplicates removed keeping
    the first occurrence.
    """
    seen: set[LayerId] = set()
    out: list[LayerId] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        lid = LayerId.parse(item)
        if lid not in seen:
            seen.add(lid)
            out.append(lid)
    return out


def render_selection(selection: Iterable[LayerId]) -> str:
    return ",".join(str(lid) for lid in selection)


def _read_text(path: Path) -> str:
    return path.read_text(encoding="utf-8")


def load_metadata(layer_dir: str | os.PathLike) -> LayerMetadata:
    meta = Path(layer_dir) / "metadata"

    commands: list[tuple[str, str]] = []
    cmd_file = meta / "commands"
    if cmd_file.is_file():
        names: set[str] = set()
        for lineno, line in enumerate(_read_text(cmd_file).splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            name = parts[0]
            if name in names:
                raise ParseError(f"duplicate command {name!r}", cmd_file, lineno)
            names.add(name)
            commands.append((name, parts[1].strip() if len(parts) > 1 else ""))

    deps: tuple[LayerId, ...] = ()
    dep_file = meta / "dependencies"
    if dep_file.is_file():
        text = " ".join(_read_text(dep_file).split())
        try:
            deps = tuple(parse_selection(text))
        except ParseError as err:
            raise ParseError(str(err), dep_file) from None

    description = ""
    desc_file = meta / "description"
    if desc_file.is_file():
        lines = _read_text(desc_file).splitlines()
        description = lines[0].strip() if lines else ""

    return LayerMetadata(
        commands=tuple(commands),
        dependencies=deps,
        description=description,
        unlisted=(meta / "unlisted").exists(),
    )


def _markers_in(path: Path) -> frozenset[str]:
    found = set()
    for marker in LAYER_MARKERS:
        p = path / marker
        if (p.is_file() if marker in FILE_MARKERS else p.is_dir()):
            found.add(marker)
    return frozenset(found)


def load_layer(layer_id: LayerId, root: str | os.PathLike) -> Layer:
    root = Path(root)
    return Layer(id=layer_id, root=root, present=_markers_in(root), metadata=load_metadata(root))


def discover_layers(search_roots: Sequence[str | os.PathLike]) -> LayerCatalog:
    """Walk each search root and collect every directory that looks like a layer.

    A later root shadows an earlier one when both define the same id.
    """
    if not search_roots:
        raise ResolutionError("no layer search roots given")
    roots = tuple(Path(r) for r in search_roots)
    layers: dict[LayerId, Layer] = {}
    for root in roots:
        if not root.is_dir():
            raise ResolutionError(f"layer search root {root} is not a directory")
        for dirpath, dirnames, _ in os.walk(root):
            dirnames[:] = sorted(d for d in dirnames if not d.startswith(".") and d not in LAYER_MARKERS)
            here = Path(dirpath)
            if here == root:
                continue
            if not _markers_in(here):
                continue
            lid = LayerId(here.relative_to(root).parts)
            if lid in layers:
                log.debug("layer %s from %s shadows %s", lid, here, layers[lid].root)
            layers[lid] = load_layer(lid, here)
    return LayerCatalog(roots=roots, layers=dict(sorted(layers.items())))


def resolve_order(selection: Sequence[LayerId], catalog: LayerCatalog) -> list[Layer]:
    """Expand dependencies and order layers so each follows its dependencies.

    Selected layers are processed in user order; each one's unplaced
    dependencies are emitted (depth first, in declared order) immediately
    before it, so the user's relative order is disturbed no more than the
    dependency constraints demand.
    """
    done: set[LayerId] = set()
    stack: list[LayerId] = []
    on_stack: set[LayerId] = set()
    out: list[Layer] = []

    def visit(lid: LayerId, required_by: LayerId | None) -> None:
        if lid in done:
            return
        if lid in on_stack:
            raise CycleError(stack[stack.index(lid):])
        if lid not in catalog:
            if required_by is None:
                raise ResolutionError(f"unknown layer {lid}")
            raise ResolutionError(f"unknown layer {lid} (dependency of {required_by})")
        layer = catalog[lid]
        stack.append(lid)
        on_stack.add(lid)
        for dep in layer.metadata.dependencies:
            visit(dep, lid)
        stack.pop()
        on_stack.discard(lid)
        done.add(lid)
        out.append(layer)

    for lid in selection:
        visit(lid, None)
    return out


def order_notes(selection: Sequence[LayerId], order: Sequence[Layer]) -> list[str]:
    """Describe selected layers that dependency constraints moved ahead of user order."""
    pos = {layer.id: i for i, layer in enumerate(order)}
    notes = []
    for i, a in enumerate(selection):
        for b in selection[i + 1:]:
            if pos[b] < pos[a]:
                notes.append(f"layer {b} placed before {a} to satisfy dependencies")
    return notes
