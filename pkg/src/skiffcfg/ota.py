"""Over-the-air replacement of the immutable image file set.

Target layout (paths relative to the transport root)::

    <filename>              live image files named by the active manifest
    .ota/state              committed record: active manifest + previous manifest
    .ota/pending            journal: the record being committed
    .ota/staging/<name>     uploaded content awaiting commit
    .ota/previous/<name>    content displaced by the last commit
    .ota/lock               advisory session lock

A push stages and verifies new content, writes the journal, moves files
into place, then renames the journal over the state record. Any session
first rolls an existing journal forward, or purges a staging area that
never reached the journal, so an interrupted push leaves the target
serving either the old set or the new set in full.
"""

from __future__ import annotations

import contextlib
import fnmatch
import hashlib
import logging
import os
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from .errors import ParseError, SkiffError, TransportError, ValidationError

log = logging.getLogger(__name__)

DIGEST_ALGO = "sha256"
MAX_ENTRIES = 5
ROLES = ("rootfs", "kernel", "modules", "boot-extra")
REQUIRED_ROLES = ("rootfs", "kernel")

DEFAULT_ROLE_PATTERNS: Mapping[str, tuple[str, ...]] = {
    "rootfs": ("rootfs.squashfs", "rootfs.cpio*", "rootfs.ext[234]", "initramfs*", "rootfs*"),
    "kernel": ("Image", "zImage", "bzImage", "uImage", "vmlinuz*", "kernel*"),
    "modules": ("modules.squashfs", "modules*"),
    "boot-extra": ("*.dtb", "boot.scr", "boot.txt", "u-boot*", "firmware*", "bootcode*"),
}

STATE = ".ota/state"
PENDING = ".ota/pending"
PENDING_TMP = ".ota/pending.tmp"
STAGING = ".ota/staging/"
PREVIOUS = ".ota/previous/"
LOCK = ".ota/lock"
_RECORD_SEP = "--- previous ---"


class ManifestError(ValidationError):
    pass


class DigestMismatchError(TransportError):
    pass


class LockError(TransportError):
    pass


class RollbackError(SkiffError):
    exit_code = 3


def file_digest(data: bytes, algo: str = DIGEST_ALGO) -> str:
    return hashlib.new(algo, data).hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    role: str
    filename: str
    size: int
    digest: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ManifestError(f"unknown role {self.role!r}")
        name = self.filename
        if not name or "/" in name or name.startswith(".") or any(c.isspace() for c in name):
            raise ManifestError(f"unsupported image filename {name!r}")


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ts))


@dataclass(frozen=True)
class OtaManifest:
    version: str
    entries: tuple[ManifestEntry, ...]
    digest_algo: str = DIGEST_ALGO
    created_at: str | None = None

    def __post_init__(self):
        if not self.version or any(c.isspace() for c in self.version):
            raise ManifestError(f"invalid version token {self.version!r}")
        if self.digest_algo not in hashlib.algorithms_available:
            raise ManifestError(f"unknown digest algorithm {self.digest_algo!r}")
        names = [e.filename for e in self.entries]
        if len(set(names)) != len(names):
            raise ManifestError("duplicate filenames in manifest")
        for role in REQUIRED_ROLES:
            n = sum(e.role == role for e in self.entries)
            if n != 1:
                raise ManifestError(f"manifest needs exactly one {role} entry, found {n}")

    def render(self, with_timestamp: bool = True) -> str:
        lines = [f"version {self.version}", f"digest-algo {self.digest_algo}"]
        if with_timestamp and self.created_at:
            lines.append(f"created-at {self.created_at}")
        lines += [f"{e.role} {e.filename} {e.size} {e.digest}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> OtaManifest:
        header: dict[str, str] = {}
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] in ("version", "digest-algo", "created-at") and len(parts) == 2:
                header[parts[0]] = parts[1]
            elif parts[0] in ROLES and len(parts) == 4 and parts[2].isdigit():
                entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), parts[3].lower()))
            else:
                raise ParseError(f"bad manifest line {line!r}", "manifest", lineno)
        if "version" not in header or "digest-algo" not in header:
            raise ParseError("manifest lacks version or digest-algo header", "manifest")
        return cls(header["version"], tuple(entries), header["digest-algo"], header.get("created-at"))

    def identity(self) -> str:
        """Digest of the manifest text without its timestamp."""
        return file_digest(self.render(with_timestamp=False).encode(), self.digest_algo)

    def by_name(self) -> dict[str, ManifestEntry]:
        return {e.filename: e for e in self.entries}


def classify(filename: str, patterns: Mapping[str, Sequence[str]] = DEFAULT_ROLE_PATTERNS) -> str | None:
    for role in ROLES:
        if any(fnmatch.fnmatchcase(filename, p) for p in patterns.get(role, ())):
            return role
    return None


def build_manifest(image_dir: str | os.PathLike, version: str,
                   patterns: Mapping[str, Sequence[str]] = DEFAULT_ROLE_PATTERNS,
                   created_at: str | None = None, allow_boot_extra_overflow: bool = False) -> OtaManifest:
    """Describe the image files in ``image_dir``.

    Files matching no role pattern are ignored. More than five entries is an
    error unless ``allow_boot_extra_overflow`` is set and the surplus is
    made up of boot-extra files.
    """
    image_dir = Path(image_dir)
    entries = []
    for path in sorted(image_dir.iterdir()):
        if not path.is_file() or path.name.startswith("."):
            continue
        role = classify(path.name, patterns)
        if role is None:
            log.info("ignoring %s: no image role matches", path.name)
            continue
        data = path.read_bytes()
        entries.append(ManifestEntry(role, path.name, len(data), file_digest(data)))
    for role in REQUIRED_ROLES:
        if not any(e.role == role for e in entries):
            raise ManifestError(f"no {role} file in {image_dir}")
    if len(entries) > MAX_ENTRIES:
        core = [e for e in entries if e.role != "boot-extra"]
        if not allow_boot_extra_overflow or len(core) > MAX_ENTRIES:
            raise ManifestError(f"{len(entries)} image files exceed the limit of {MAX_ENTRIES}")
        log.warning("%d image files: boot-extra entries exceed the %d-file set", len(entries), MAX_ENTRIES)
    entries.sort(key=lambda e: (ROLES.index(e.role), e.filename))
    return OtaManifest(version, tuple(entries), DIGEST_ALGO, created_at or _now())


# Transports -----------------------------------------------------------------


class Transport:
    """Minimal file operations on a target. ``rename`` must be atomic."""

    def list(self, prefix: str = "") -> list[str]:
        raise NotImplementedError

    def read(self, path: str) -> bytes:
        raise NotImplementedError

    def write(self, path: str, data: bytes) -> None:
        raise NotImplementedError

    def rename(self, src: str, dst: str) -> None:
        raise NotImplementedError

    def delete(self, path: str) -> None:
        raise NotImplementedError

    def create_exclusive(self, path: str, data: bytes) -> bool:
        raise NotImplementedError

    def exists(self, path: str) -> bool:
        return path in self.list(path)

    def digest(self, path: str, algo: str = DIGEST_ALGO) -> str | None:
        if not self.exists(path):
            return None
        return file_digest(self.read(path), algo)


class InMemoryTransport(Transport):
    def __init__(self, files: dict[str, bytes] | None = None):
        self.files = files if files is not None else {}
        self._mu = threading.Lock()

    def list(self, prefix=""):
        with self._mu:
            return sorted(p for p in self.files if p.startswith(prefix))

    def exists(self, path):
        return path in self.files

    def read(self, path):
        try:
            return self.files[path]
        except KeyError:
            raise TransportError(f"no such file on target: {path}") from None

    def write(self, path, data):
        self.files[path] = bytes(data)

    def rename(self, src, dst):
        with self._mu:
            if src not in self.files:
                raise TransportError(f"rename source missing: {src}")
            self.files[dst] = self.files.pop(src)

    def delete(self, path):
        self.files.pop(path, None)

    def create_exclusive(self, path, data):
        with self._mu:
            if path in self.files:
                return False
            self.files[path] = bytes(data)
            return True


class LocalDirTransport(Transport):
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _p(self, path: str) -> Path:
        return self.root / path

    def list(self, prefix=""):
        if not self.root.is_dir():
            return []
        out = []
        for dirpath, _, files in os.walk(self.root):
            for f in files:
                rel = (Path(dirpath) / f).relative_to(self.root).as_posix()
                if rel.startswith(prefix):
                    out.append(rel)
        return sorted(out)

    def exists(self, path):
        return self._p(path).is_file()

    def read(self, path):
        try:
            return self._p(path).read_bytes()
        except OSError as err:
            raise TransportError(f"read {path}: {err}") from err

    def write(self, path, data):
        p = self._p(path)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            with open(p, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as err:
            raise TransportError(f"write {path}: {err}") from err

    def rename(self, src, dst):
        d = self._p(dst)
        try:
            d.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self._p(src), d)
        except OSError as err:
            raise TransportError(f"rename {src} -> {dst}: {err}") from err

    def delete(self, path):
        try:
            self._p(path).unlink(missing_ok=True)
        except OSError as err:
            raise TransportError(f"delete {path}: {err}") from err

    def create_exclusive(self, path, data):
        p = self._p(path)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            fd = os.open(p, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
        except FileExistsError:
            return False
        except OSError as err:
            raise TransportError(f"lock {path}: {err}") from err
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        return True


class CrashingTransport(Transport):
    """Wraps a transport and dies at the ``fail_at``-th mutating call.

    After the injected failure every call raises, like a connection to a
    device that lost power.
    """

    def __init__(self, inner: Transport, fail_at: int):
        self.inner = inner
        self.fail_at = fail_at
        self.mutations = 0
        self.crashed = False

    def _check(self):
        if self.crashed:
            raise TransportError("target unreachable after injected crash")

    def _mutate(self):
        self._check()
        self.mutations += 1
        if self.mutations == self.fail_at:
            self.crashed = True
            raise TransportError(f"injected crash at mutation {self.mutations}")

    def list(self, prefix=""):
        self._check()
        return self.inner.list(prefix)

    def exists(self, path):
        self._check()
        return self.inner.exists(path)

    def read(self, path):
        self._check()
        return self.inner.read(path)

    def digest(self, path, algo=DIGEST_ALGO):
        self._check()
        return self.inner.digest(path, algo)

    def write(self, path, data):
        self._mutate()
        self.inner.write(path, data)

    def rename(self, src, dst):
        self._mutate()
        self.inner.rename(src, dst)

    def delete(self, path):
        self._mutate()
        self.inner.delete(path)

    def create_exclusive(self, path, data):
        self._mutate()
        return self.inner.create_exclusive(path, data)


_MEMORY_TARGETS: dict[str, dict[str, bytes]] = {}


def open_target(uri: str) -> Transport:
    """``mem://name`` (process-local), ``file:///path`` or a plain directory path."""
    if uri.startswith("mem://"):
        return InMemoryTransport(_MEMORY_TARGETS.setdefault(uri[len("mem://"):], {}))
    if uri.startswith("file://"):
        return LocalDirTransport(uri[len("file://"):])
    if "://" in uri or ("@" in uri and ":" not in uri.split("@", 1)[0]):
        raise TransportError(f"no transport available for {uri!r}; remote shells are not supported")
    return LocalDirTransport(uri)


# Protocol -------------------------------------------------------------------


@dataclass(frozen=True)
class TargetRecord:
    active: OtaManifest | None = None
    previous: OtaManifest | None = None

    def render(self) -> str:
        text = self.active.render() if self.active else ""
        if self.previous is not None:
            text += f"{_RECORD_SEP}\n" + self.previous.render()
        return text

    @classmethod
    def parse(cls, text: str) -> TargetRecord:
        active_text, _, prev_text = text.partition(f"{_RECORD_SEP}\n")
        return cls(
            OtaManifest.parse(active_text) if active_text.strip() else None,
            OtaManifest.parse(prev_text) if prev_text.strip() else None,
        )


def read_record(t: Transport) -> TargetRecord:
    if not t.exists(STATE):
        return TargetRecord()
    return TargetRecord.parse(t.read(STATE).decode())


def _settle(t: Transport, active: OtaManifest, displaced: OtaManifest | None) -> None:
    """Move content so live files match ``active``; displaced content goes to previous/.

    Each step is decided from digests alone, so re-running after an
    interruption continues where the last run stopped.
    """
    want_by = {e.filename: e.digest for e in active.entries}
    names = set(want_by) | (set(displaced.by_name()) if displaced else set())
    algo = active.digest_algo
    for name in sorted(names):
        live, stg, prev = name, STAGING + name, PREVIOUS + name
        want = want_by.get(name)
        if want is None:
            if t.exists(live):
                t.rename(live, prev)
            continue
        have = t.digest(live, algo)
        if have == want:
            if t.exists(stg):
                if t.digest(stg, algo) != want:
                    t.rename(stg, prev)
                else:
                    t.delete(stg)
            continue
        if t.digest(stg, algo) == want:
            if have is not None:
                t.rename(live, prev)
            t.rename(stg, live)
        elif t.digest(prev, algo) == want:
            if have is not None:
                t.rename(live, stg)
            t.rename(prev, live)
            if t.exists(stg):
                t.rename(stg, prev)
        else:
            raise TransportError(f"no copy of {name} with digest {want[:12]} on target")


def _cleanup(t: Transport, record: TargetRecord) -> None:
    for path in t.list(STAGING):
        t.delete(path)
    if t.exists(PENDING_TMP):
        t.delete(PENDING_TMP)
    keep = record.previous.by_name() if record.previous else {}
    algo = record.active.digest_algo if record.active else DIGEST_ALGO
    for path in t.list(PREVIOUS):
        name = path[len(PREVIOUS):]
        entry = keep.get(name)
        if entry is not None and t.digest(path, algo) == entry.digest and t.digest(name, algo) != entry.digest:
            continue
        t.delete(path)


def _commit(t: Transport, record: TargetRecord) -> None:
    _settle(t, record.active, record.previous)
    t.rename(PENDING, STATE)
    _cleanup(t, record)


def _recover(t: Transport) -> str:
    if t.exists(PENDING):
        record = TargetRecord.parse(t.read(PENDING).decode())
        _commit(t, record)
        return "rolled-forward"
    _cleanup(t, read_record(t))
    return "clean"


@contextlib.contextmanager
def _session(t: Transport, break_lock: bool = False) -> Iterator[None]:
    if break_lock:
        t.delete(LOCK)
    token = secrets.token_hex(8).encode()
    if not t.create_exclusive(LOCK, token):
        raise LockError("target is locked by another session")
    try:
        _recover(t)
        yield
    finally:
        try:
            t.delete(LOCK)
        except TransportError as err:
            log.warning("could not release target lock: %s", err)


def _journal(t: Transport, record: TargetRecord) -> None:
    t.write(PENDING_TMP, record.render().encode())
    t.rename(PENDING_TMP, PENDING)


@dataclass
class PushReport:
    status: str  # "committed" | "up-to-date"
    version: str
    transferred_files: list[str] = field(default_factory=list)
    transferred_bytes: int = 0
    skipped_files: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def push_update(manifest: OtaManifest, source_dir: str | os.PathLike, target: Transport) -> PushReport:
    source_dir = Path(source_dir)
    payload: dict[str, bytes] = {}
    for e in manifest.entries:
        try:
            data = (source_dir / e.filename).read_bytes()
        except OSError as err:
            raise ManifestError(f"cannot read {e.filename}: {err}") from err
        if len(data) != e.size or file_digest(data, manifest.digest_algo) != e.digest:
            raise ManifestError(f"{e.filename} does not match the manifest")
        payload[e.filename] = data

    report = PushReport("committed", manifest.version)
    if len(manifest.entries) > MAX_ENTRIES:
        report.notes.append(f"{len(manifest.entries)} files: boot-extra entries exceed the {MAX_ENTRIES}-file set")
    with _session(target):
        record = read_record(target)
        if record.active is not None and record.active.identity() == manifest.identity():
            report.status = "up-to-date"
            report.skipped_files = [e.filename for e in manifest.entries]
            return report

        algo = manifest.digest_algo
        staged = []
        for e in manifest.entries:
            if target.digest(e.filename, algo) == e.digest or target.digest(PREVIOUS + e.filename, algo) == e.digest:
                report.skipped_files.append(e.filename)
                continue
            target.write(STAGING + e.filename, payload[e.filename])
            staged.append(e)
            report.transferred_files.append(e.filename)
            report.transferred_bytes += e.size

        bad = [e.filename for e in staged if target.digest(STAGING + e.filename, algo) != e.digest]
        if bad:
            for path in target.list(STAGING):
                target.delete(path)
            raise DigestMismatchError(f"staged content corrupt: {', '.join(bad)}; update aborted")

        new = TargetRecord(active=manifest, previous=record.active)
        _journal(target, new)
        _commit(target, new)
    return report


@dataclass
class VerifyReport:
    version: str | None
    results: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.version is not None and all(self.results.values())

    @property
    def status(self) -> str:
        if self.version is None:
            return "no active manifest"
        return "ok" if self.ok else "corrupt"


def verify_against(target: Transport, manifest: OtaManifest) -> VerifyReport:
    report = VerifyReport(manifest.version)
    for e in manifest.entries:
        report.results[e.filename] = target.digest(e.filename, manifest.digest_algo) == e.digest
    return report


def verify_target(target: Transport) -> VerifyReport:
    record = read_record(target)
    if record.active is None:
        return VerifyReport(None)
    return verify_against(target, record.active)


@dataclass
class RollbackReport:
    active: str
    previous: str


def rollback(target: Transport) -> RollbackReport:
    with _session(target):
        record = read_record(target)
        if record.previous is None:
            raise RollbackError("no previous image set to roll back to")
        algo = record.previous.digest_algo
        for e in record.previous.entries:
            if e.digest not in (target.digest(e.filename, algo), target.digest(PREVIOUS + e.filename, algo)):
                raise RollbackError(f"previous copy of {e.filename} is missing or corrupt")
        new = TargetRecord(active=record.previous, previous=record.active)
        _journal(target, new)
        _commit(target, new)
    return RollbackReport(new.active.version, new.previous.version)


def recover(target: Transport, break_lock: bool = False) -> str:
    """Finish or discard an interrupted operation; returns what was done."""
    if break_lock:
        target.delete(LOCK)
    token = secrets.token_hex(8).encode()
    if not target.create_exclusive(LOCK, token):
        raise LockError("target is locked by another session")
    try:
        return _recover(target)
    finally:
        target.delete(LOCK)
