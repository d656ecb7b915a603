"""Workspace build plans: merged configs, patch and hook manifests, root overlay."""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import kconfig
from .errors import ConflictError, ParseError, ResolutionError, SkiffError, StorageError
from .layers import Layer, LayerCatalog, LayerId, order_notes, render_selection, resolve_order

log = logging.getLogger(__name__)

PATCH_CLASSES = ("buildroot_patches", "kernel_patches", "uboot_patches")
HOOK_PHASES = ("pre", "post")
OVERRIDES_LABEL = "overrides"


class OverlayApplyError(StorageError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class HookError(SkiffError):
    pass


@dataclass(frozen=True)
class OverlayAction:
    path: str  # relative, "/"-separated
    layer: str
    source: Path
    kind: str  # "file" | "directory" | "symlink"

    def __post_init__(self):
        parts = self.path.split("/")
        if self.path.startswith("/") or ".." in parts or not self.path:
            raise ConflictError(f"unsafe overlay path {self.path!r} from {self.layer}")


@dataclass(frozen=True)
class OverlayPlan:
    actions: tuple[OverlayAction, ...] = ()
    final: dict[str, OverlayAction] = field(default_factory=dict)

    def winners(self) -> dict[str, str]:
        return {p: a.layer for p, a in self.final.items()}


@dataclass
class ApplyReport:
    files_written: int = 0
    symlinks_written: int = 0
    directories_created: int = 0
    bytes_written: int = 0
    winners: dict[str, str] = field(default_factory=dict)


def _walk_overlay(label: str, root: Path) -> list[OverlayAction]:
    actions = []
    for dirpath, dirnames, filenames in os.walk(root):
        here = Path(dirpath)
        rel_here = here.relative_to(root)
        entries = []
        keep = []
        for d in sorted(dirnames):
            if (here / d).is_symlink():
                entries.append((d, "symlink"))
            else:
                entries.append((d, "directory"))
                keep.append(d)
        dirnames[:] = keep
        for f in filenames:
            entries.append((f, "symlink" if (here / f).is_symlink() else "file"))
        for name, kind in sorted(entries):
            rel = (rel_here / name).as_posix()
            actions.append(OverlayAction(rel, label, here / name, kind))
    return actions


def compose_overlay(layers: Sequence[Layer], extra_roots: Sequence = ()) -> OverlayPlan:
    """Plan the root overlay: layer trees in resolved order, then extra roots.

    ``extra_roots`` items are paths or ``(label, path)`` pairs. A later
    provider of a path replaces an earlier one; directories merge. A file or
    symlink meeting a directory at the same path is a ConflictError.
    """
    sources: list[tuple[str, Path]] = [
        (str(layer.id), layer.root / "root_overlay") for layer in layers if layer.has("root_overlay")
    ]
    for extra in extra_roots:
        label, path = extra if isinstance(extra, tuple) else (OVERRIDES_LABEL, extra)
        if Path(path).is_dir():
            sources.append((label, Path(path)))

    actions: list[OverlayAction] = []
    final: dict[str, OverlayAction] = {}
    for label, root in sources:
        for act in _walk_overlay(label, root):
            prev = final.get(act.path)
            if prev is not None and (prev.kind == "directory") != (act.kind == "directory"):
                raise ConflictError(
                    f"overlay conflict at {act.path}: {prev.kind} from {prev.layer} "
                    f"vs {act.kind} from {act.layer}"
                )
            actions.append(act)
            final[act.path] = act
    ordered = dict(sorted(final.items(), key=lambda kv: kv[0].split("/")))
    return OverlayPlan(tuple(actions), ordered)


def apply_overlay(plan: OverlayPlan, target: str | os.PathLike) -> ApplyReport:
    target = Path(target)
    report = ApplyReport()
    dirs: list[tuple[Path, OverlayAction]] = []
    try:
        target.mkdir(parents=True, exist_ok=True)
        for rel, act in plan.final.items():
            dst = target / rel
            report.winners[rel] = act.layer
            if act.kind == "directory":
                if dst.is_symlink() or (dst.exists() and not dst.is_dir()):
                    raise ConflictError(f"overlay target {dst} exists and is not a directory")
                if not dst.exists():
                    dst.mkdir()
                    report.directories_created += 1
                dirs.append((dst, act))
                continue
            if dst.is_dir() and not dst.is_symlink():
                raise ConflictError(f"overlay target {dst} is a directory, plan has a {act.kind}")
            if os.path.lexists(dst):
                dst.unlink()
            if act.kind == "symlink":
                os.symlink(os.readlink(act.source), dst)
                report.symlinks_written += 1
            else:
                shutil.copy2(act.source, dst)
                report.files_written += 1
                report.bytes_written += dst.stat().st_size
        for dst, act in reversed(dirs):
            shutil.copymode(act.source, dst)
    except OSError as err:
        raise OverlayApplyError(f"overlay apply failed: {err}", report) from err
    return report


def collect_cflags(layers: Sequence[Layer]) -> list[str]:
    flags: list[str] = []
    for layer in layers:
        if not layer.has("cflags"):
            continue
        for line in (layer.root / "cflags").read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                flags.append(line)
    return flags


def collect_patches(layers: Sequence[Layer], patch_class: str,
                    diagnostics: list[str] | None = None) -> list[Path]:
    """``.patch`` files per layer, sorted by path relative to the patch directory.

    Per-package subdirectories are searched too. Other files are skipped
    with a warning.
    """
    if patch_class not in PATCH_CLASSES:
        raise ValueError(f"unknown patch class {patch_class!r}")
    out: list[Path] = []
    for layer in layers:
        base = layer.root / patch_class
        if not base.is_dir():
            continue
        files = sorted((p for p in base.rglob("*") if p.is_file()),
                       key=lambda p: p.relative_to(base).parts)
        for p in files:
            if p.suffix == ".patch":
                out.append(p)
            else:
                msg = f"{layer.id}: ignoring non-patch file {p.relative_to(layer.root)}"
                log.warning(msg)
                if diagnostics is not None:
                    diagnostics.append(msg)
    return out


def collect_hooks(layers: Sequence[Layer], phase: str) -> list[Path]:
    if phase not in HOOK_PHASES:
        raise ValueError(f"unknown hook phase {phase!r}")
    pattern = re.compile(rf"^{phase}([._-].*)?$")
    out: list[Path] = []
    for layer in layers:
        base = layer.root / "hooks"
        if base.is_dir():
            out.extend(sorted((p for p in base.iterdir() if p.is_file() and pattern.match(p.name)),
                              key=lambda p: p.name))
    return out


def collect_external_trees(layers: Sequence[Layer]) -> list[Path]:
    return [layer.root / "buildroot_ext" for layer in layers if layer.has("buildroot_ext")]


@dataclass
class BuildPlan:
    workspace: str
    selection: tuple[LayerId, ...]
    layers: tuple[Layer, ...]
    fragments: dict[str, list[Path]]
    configs: dict[str, kconfig.MergedConfig]
    cflags: list[str]
    patches: dict[str, list[Path]]
    external_trees: list[Path]
    hooks: dict[str, list[Path]]
    overlay: OverlayPlan
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "workspace": self.workspace,
            "selection": render_selection(self.selection),
            "layers": [{"id": str(l.id), "root": str(l.root)} for l in self.layers],
            "fragments": {c: [str(p) for p in ps] for c, ps in self.fragments.items()},
            "configs": {
                c: [{"key": k, "value": e.value.text, "kind": e.value.kind.name.lower(),
                     "source": f"{e.source}:{e.line}"} for k, e in m.items()]
                for c, m in self.configs.items()
            },
            "cflags": list(self.cflags),
            "patches": {c: [str(p) for p in ps] for c, ps in self.patches.items()},
            "external_trees": [str(p) for p in self.external_trees],
            "hooks": {ph: [str(p) for p in ps] for ph, ps in self.hooks.items()},
            "overlay": [{"path": p, "layer": a.layer, "kind": a.kind, "source": str(a.source)}
                        for p, a in self.overlay.final.items()],
            "diagnostics": list(self.diagnostics),
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def check_workspace_name(name: str) -> str:
    if not name or name in (".", "..") or "/" in name or "\\" in name or name != name.strip():
        raise ParseError(f"invalid workspace name {name!r}")
    return name


def _owner_of(path: Path, layers: Sequence[Layer]) -> str:
    for layer in layers:
        if layer.root in path.parents:
            return str(layer.id)
    return OVERRIDES_LABEL


def build_plan(selection: Sequence[LayerId], catalog: LayerCatalog, workspace: str = "default",
               overrides_root: str | os.PathLike | None = None) -> BuildPlan:
    if not selection:
        raise ResolutionError("no layers selected")
    check_workspace_name(workspace)
    order = resolve_order(selection, catalog)
    diagnostics = order_notes(selection, order)
    overrides = Path(overrides_root) if overrides_root is not None else None

    fragments: dict[str, list[Path]] = {}
    configs: dict[str, kconfig.MergedConfig] = {}
    for cls in kconfig.CONFIG_CLASSES:
        paths = kconfig.collect_fragment_paths(order, cls, overrides, workspace)
        parsed = []
        for p in paths:
            try:
                parsed.append(kconfig.load_fragment(p, diagnostics))
            except ParseError as err:
                raise ParseError(f"[{_owner_of(p, order)}] {err}") from err
            except OSError as err:
                raise StorageError(f"[{_owner_of(p, order)}] cannot read {p}: {err}") from err
        if any(_owner_of(p, order) == OVERRIDES_LABEL for p in paths):
            diagnostics.append(f"{cls}: override fragments applied after all layer fragments")
        fragments[cls] = paths
        configs[cls] = kconfig.merge_fragments(parsed)

    patches = {cls: collect_patches(order, cls, diagnostics) for cls in PATCH_CLASSES}
    hooks = {ph: collect_hooks(order, ph) for ph in HOOK_PHASES}

    extra = []
    if overrides is not None:
        extra = [(OVERRIDES_LABEL, overrides / "root_overlay"),
                 (f"{OVERRIDES_LABEL}/workspaces/{workspace}",
                  overrides / "workspaces" / workspace / "root_overlay")]

    return BuildPlan(
        workspace=workspace,
        selection=tuple(selection),
        layers=tuple(order),
        fragments=fragments,
        configs=configs,
        cflags=collect_cflags(order),
        patches=patches,
        external_trees=collect_external_trees(order),
        hooks=hooks,
        overlay=compose_overlay(order, extra),
        diagnostics=diagnostics,
    )


def workspace_dir(output_root: str | os.PathLike, workspace: str) -> Path:
    return Path(output_root) / "workspaces" / check_workspace_name(workspace)


@dataclass
class BuildArtifacts:
    output: Path
    files: list[Path]
    overlay: ApplyReport
    hooks_run: list[Path] = field(default_factory=list)


def _run_hooks(hooks: Sequence[Path], output: Path) -> list[Path]:
    ran = []
    for hook in hooks:
        argv = [str(hook)] if os.access(hook, os.X_OK) else ["sh", str(hook)]
        proc = subprocess.run(argv + [str(output)], capture_output=True, text=True)
        if proc.returncode != 0:
            raise HookError(f"hook {hook} exited {proc.returncode}: {proc.stderr.strip()}")
        ran.append(hook)
    return ran


def simulate_build(plan: BuildPlan, output: str | os.PathLike, run_hooks: bool = False) -> BuildArtifacts:
    """Write everything a real build would consume into ``output``.

    Produces the rendered configs, ``cflags.txt``, ``plan.json``, the patch,
    hook and external-tree manifests and the staged ``rootfs-overlay/``.
    Re-running with the same plan leaves an identical directory.
    """
    output = Path(output)
    written: list[Path] = []
    hooks_run: list[Path] = []
    try:
        output.mkdir(parents=True, exist_ok=True)
        if run_hooks:
            hooks_run += _run_hooks(plan.hooks["pre"], output)

        def emit(name: str, text: str) -> None:
            path = output / name
            path.write_text(text, encoding="utf-8")
            written.append(path)

        for cls, merged in plan.configs.items():
            emit(f"{cls}.config", kconfig.render_config(merged))
        emit("cflags.txt", "".join(f + "\n" for f in plan.cflags))
        emit("patches.txt", "".join(f"{cls} {p}\n" for cls, ps in plan.patches.items() for p in ps))
        emit("hooks.txt", "".join(f"{ph} {p}\n" for ph, ps in plan.hooks.items() for p in ps))
        emit("external-trees.txt", "".join(f"{p}\n" for p in plan.external_trees))
        emit("plan.json", plan.serialize())

        staged = output / "rootfs-overlay"
        if staged.is_symlink() or staged.is_file():
            staged.unlink()
        elif staged.exists():
            shutil.rmtree(staged)
        staged.mkdir()
    except OSError as err:
        raise StorageError(f"cannot write build output in {output}: {err}") from err
    report = apply_overlay(plan.overlay, staged)

    if run_hooks:
        hooks_run += _run_hooks(plan.hooks["post"], output)
    return BuildArtifacts(output, written, report, hooks_run)
