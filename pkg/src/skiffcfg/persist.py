"""Persist partition planning, first-boot growth and ``skiff`` tree scaffolding."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ParseError, StorageError, ValidationError

MiB = 1 << 20
GiB = 1 << 30

INITIAL_PERSIST_SIZE = 256 * MiB
PARTITION_ROLES = ("boot", "rootfs", "persist", "vendor")

# name -> kind; everything but hostname is a directory.
SKIFF_ENTRIES = {
    "connections": "directory",
    "core": "directory",
    "docker": "directory",
    "etc": "directory",
    "hostname": "file",
    "journal": "directory",
    "keys": "directory",
    "ssh": "directory",
}
SKIFF_DIR = "skiff"
SWAPFILE = "swapfile"


class LayoutError(ValidationError):
    pass


@dataclass(frozen=True)
class Partition:
    name: str
    start: int
    size: int
    role: str

    @property
    def end(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class MediaLayout:
    media_size: int
    partitions: tuple[Partition, ...]
    reserved_prefix: int = 0

    def __post_init__(self):
        problems = []
        if self.reserved_prefix < 0:
            problems.append("reserved prefix is negative")
        pos = self.reserved_prefix
        for p in self.partitions:
            if p.role not in PARTITION_ROLES:
                problems.append(f"{p.name}: unknown role {p.role!r}")
            if p.size <= 0:
                problems.append(f"{p.name}: size must be positive")
            if p.start < pos:
                problems.append(f"{p.name}: starts at {p.start}, overlapping or before offset {pos}")
            pos = max(pos, p.end)
        if pos > self.media_size:
            problems.append(f"partitions end at {pos}, beyond media size {self.media_size}")
        persist = [p for p in self.partitions if p.role == "persist"]
        if len(persist) != 1:
            problems.append(f"expected exactly one persist partition, found {len(persist)}")
        elif self.partitions[-1].role != "persist":
            problems.append("persist partition must be last")
        if problems:
            raise LayoutError(problems)

    @property
    def persist(self) -> Partition:
        return self.partitions[-1]

    @property
    def extent(self) -> int:
        return self.partitions[-1].end if self.partitions else self.reserved_prefix

    def render(self) -> str:
        lines = [f"# media {self.media_size} reserved {self.reserved_prefix}"]
        lines += [f"{p.name} {p.start} {p.size} {p.role}" for p in self.partitions]
        return "\n".join(lines) + "\n"


def parse_layout(text: str, media_size: int | None = None) -> MediaLayout:
    """Read a ``name start size role`` descriptor.

    A leading ``# media <bytes> reserved <bytes>`` line, as written by
    :meth:`MediaLayout.render`, supplies defaults for the media size and
    reserved prefix; ``media_size`` overrides the former.
    """
    parts: list[Partition] = []
    header_media = None
    reserved = None
    for lineno, line in enumerate(text.splitlines(), 1):
        words = line.split()
        if not words:
            continue
        if words[0] == "#":
            if len(words) == 5 and words[1] == "media" and words[3] == "reserved":
                header_media, reserved = int(words[2]), int(words[4])
            continue
        if len(words) != 4 or not words[1].isdigit() or not words[2].isdigit():
            raise ParseError(f"expected 'name start size role', got {line!r}", "layout", lineno)
        parts.append(Partition(words[0], int(words[1]), int(words[2]), words[3]))
    size = media_size if media_size is not None else header_media
    if size is None:
        raise ParseError("layout descriptor has no media size", "layout")
    if reserved is None:
        reserved = min((p.start for p in parts), default=0)
    return MediaLayout(size, tuple(sorted(parts, key=lambda p: p.start)), reserved)


def plan_layout(media_size: int, boot_size: int, rootfs_size: int, reserved_prefix: int = 0) -> MediaLayout:
    required = reserved_prefix + boot_size + rootfs_size + INITIAL_PERSIST_SIZE
    if media_size < required:
        raise LayoutError(f"media of {media_size} bytes is too small; at least {required} bytes required")
    boot = Partition("boot", reserved_prefix, boot_size, "boot")
    rootfs = Partition("rootfs", boot.end, rootfs_size, "rootfs")
    persist = Partition("persist", rootfs.end, INITIAL_PERSIST_SIZE, "persist")
    return MediaLayout(media_size, (boot, rootfs, persist), reserved_prefix)


def grow_persist(layout: MediaLayout, media_size: int) -> MediaLayout:
    """Extend the persist partition to the end of the medium."""
    persist = layout.partitions[-1]
    if persist.role != "persist":
        raise LayoutError("persist partition is not last; cannot grow")
    if media_size < layout.extent:
        raise LayoutError(f"media size {media_size} is smaller than the current layout extent {layout.extent}")
    grown = replace(persist, size=media_size - persist.start)
    return MediaLayout(media_size, layout.partitions[:-1] + (grown,), layout.reserved_prefix)


@dataclass
class PersistTree:
    root: Path
    entries: dict[str, str] = field(default_factory=dict)
    created: list[str] = field(default_factory=list)
    existing: list[str] = field(default_factory=list)
    swapfile_size: int | None = None
    notes: list[str] = field(default_factory=list)


def scaffold_tree(target: str | os.PathLike, swap_size: int | None = None) -> PersistTree:
    """Create ``<target>/skiff/`` and its canonical entries without touching existing ones.

    ``swap_size`` leaves a sparse ``<target>/swapfile`` of that logical
    size as a placeholder; an existing swapfile is left alone.
    """
    target = Path(target)
    skiff = target / SKIFF_DIR
    report = PersistTree(skiff, dict(SKIFF_ENTRIES))
    try:
        skiff.mkdir(parents=True, exist_ok=True)
        for name, kind in SKIFF_ENTRIES.items():
            path = skiff / name
            if os.path.lexists(path):
                actual = "directory" if path.is_dir() else "file"
                if actual != kind:
                    report.notes.append(f"{name} exists as a {actual}, expected {kind}")
                report.existing.append(name)
                continue
            if kind == "directory":
                path.mkdir()
            else:
                path.touch()
            report.created.append(name)
        if swap_size is not None:
            swap = target / SWAPFILE
            if swap.exists():
                have = swap.stat().st_size
                if have != swap_size:
                    report.notes.append(f"swapfile exists with size {have}, requested {swap_size}; left as is")
                report.swapfile_size = have
            else:
                with open(swap, "wb") as fh:
                    fh.truncate(swap_size)
                os.chmod(swap, 0o600)
                report.swapfile_size = swap_size
    except OSError as err:
        raise StorageError(f"cannot scaffold persist tree in {target}: {err}") from err
    return report


_SIZE_RE = re.compile(r"^(\d+)\s*([KMGT]?)(I?B)?$")
_UNITS = {"": 1, "K": 1 << 10, "M": MiB, "G": GiB, "T": 1 << 40}


def parse_size(text: str) -> int:
    """``512M``, ``8GiB``, ``4096``: bytes, binary multiples."""
    m = _SIZE_RE.match(text.strip().upper())
    if not m:
        raise ParseError(f"invalid size {text!r}")
    return int(m.group(1)) * _UNITS[m.group(2)]
