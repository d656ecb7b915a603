"""``skiff`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, TextIO

from . import compose, core, kconfig, ota, persist
from .errors import ResolutionError, SkiffError, UsageError
from .layers import Layer, LayerCatalog, LayerId, discover_layers, parse_selection, resolve_order

log = logging.getLogger(__name__)

ENV_CONFIG = "SKIFF_CONFIG"
ENV_LAYER_ROOTS = "SKIFF_LAYER_ROOTS"


@dataclass(frozen=True)
class CommandEntry:
    target: str
    description: str
    layer: LayerId


def command_entries(layers: Sequence[Layer]) -> list[CommandEntry]:
    return [
        CommandEntry(f"cmd/{layer.id}/{name}", desc, layer.id)
        for layer in layers
        for name, desc in layer.metadata.commands
    ]


def render_help(catalog: LayerCatalog, selection: Sequence[LayerId] | None = None) -> str:
    """Layer list followed by the extension command targets.

    Unlisted layers, and their commands, are hidden unless they are part
    of the resolved selection, in which case only their commands show.
    """
    lines = ["Configuration layers:"]
    for lid in catalog.ids():
        layer = catalog[lid]
        if layer.metadata.unlisted:
            continue
        lines.append(f"  {lid}: {layer.metadata.description}" if layer.metadata.description else f"  {lid}")
    if selection is None:
        layers = [catalog[lid] for lid in catalog.ids() if not catalog[lid].metadata.unlisted]
    else:
        layers = resolve_order(selection, catalog)
    entries = command_entries(layers)
    if entries:
        lines += ["", "Commands:"]
        lines += [f"{e.target}: {e.description}" for e in entries]
    return "\n".join(lines) + "\n"


def _layer_roots(args, env: Mapping[str, str]) -> list[Path]:
    roots = list(args.layers_root or [])
    if not roots:
        roots = [Path("configs")]
    extra = env.get(ENV_LAYER_ROOTS, "")
    roots += [Path(p) for p in extra.split(os.pathsep) if p]
    return [r.resolve() for r in roots]


def _selection(args, env: Mapping[str, str]) -> list[LayerId]:
    text = args.config if args.config is not None else env.get(ENV_CONFIG, "")
    return parse_selection(text)


def _catalog(args, env) -> LayerCatalog:
    return discover_layers(_layer_roots(args, env))


def cmd_help(args, env, out):
    catalog = _catalog(args, env)
    sel = _selection(args, env)
    out.write(render_help(catalog, sel or None))
    return 0


def cmd_commands(args, env, out):
    catalog = _catalog(args, env)
    sel = _selection(args, env)
    if sel:
        layers = resolve_order(sel, catalog)
    else:
        layers = [catalog[i] for i in catalog.ids() if not catalog[i].metadata.unlisted]
    entries = command_entries(layers)
    if args.run is None:
        for e in entries:
            out.write(f"{e.target}: {e.description}\n")
        return 0
    match = [e for e in entries if e.target == args.run]
    if not match:
        raise ResolutionError(f"unknown command target {args.run}")
    if not args.allow_exec:
        raise UsageError(f"refusing to run {args.run} without --allow-exec")
    entry = match[0]
    layer = catalog[entry.layer]
    name = entry.target.rsplit("/", 1)[1]
    ext = layer.root / "extensions"
    script = ext / name
    if script.is_file():
        argv = [str(script)] if os.access(script, os.X_OK) else ["sh", str(script)]
    elif (ext / "Makefile").is_file():
        argv = ["make", "-C", str(ext), name]
    else:
        raise ResolutionError(f"{layer.id} has no extension implementing {name}")
    run_env = dict(env)
    run_env.update({
        "SKIFF_LAYER_ROOT": str(layer.root),
        "SKIFF_WORKSPACE": args.workspace,
        ENV_CONFIG: ",".join(str(i) for i in sel),
    })
    return subprocess.run(argv, env=run_env).returncode


def cmd_compose(args, env, out):
    catalog = _catalog(args, env)
    plan = compose.build_plan(_selection(args, env), catalog, args.workspace, args.overrides_root)
    if args.run_hooks and not args.allow_exec:
        raise UsageError("--run-hooks requires --allow-exec")
    dest = compose.workspace_dir(args.output_root, args.workspace)
    arts = compose.simulate_build(plan, dest, run_hooks=args.run_hooks)
    for note in plan.diagnostics:
        out.write(f"note: {note}\n")
    out.write(f"workspace {args.workspace}: {len(plan.layers)} layers, "
              f"{arts.overlay.files_written} overlay files -> {dest}\n")
    return 0


def cmd_merge_config(args, env, out):
    merged = kconfig.merge_fragments(kconfig.load_fragment(p) for p in args.fragments)
    text = kconfig.render_config(merged)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return 0


def cmd_overlay_apply(args, env, out):
    catalog = _catalog(args, env)
    sel = _selection(args, env)
    if not sel:
        raise ResolutionError("no layers selected")
    plan = compose.compose_overlay(resolve_order(sel, catalog))
    report = compose.apply_overlay(plan, args.target)
    out.write(f"{report.files_written} files, {report.symlinks_written} symlinks, "
              f"{report.bytes_written} bytes written\n")
    return 0


def cmd_core_validate(args, env, out):
    cfg = core.parse_core_config(Path(args.file).read_text(encoding="utf-8"))
    for w in cfg.warnings:
        out.write(f"warning: {w}\n")
    out.write(f"ok: {len(cfg.containers)} containers, {len(cfg.users)} users, {len(cfg.images)} images\n")
    return 0


def cmd_core_route(args, env, out):
    cfg = core.parse_core_config(Path(args.file).read_text(encoding="utf-8"))
    container, cuser = core.route_session(args.user, cfg)
    out.write(f"{container} {cuser}\n")
    return 0


def cmd_core_plan(args, env, out):
    cfg = core.parse_core_config(Path(args.file).read_text(encoding="utf-8"))
    state = core.RuntimeState()
    if args.state:
        state = core.RuntimeState.from_json(Path(args.state).read_text(encoding="utf-8"))
    steps = core.plan_setup(cfg, state)
    if args.json:
        out.write(json.dumps([s.to_dict() for s in steps], indent=2, sort_keys=True) + "\n")
    else:
        for s in steps:
            out.write(s.describe() + "\n")
    return 0


def cmd_ota_manifest(args, env, out):
    manifest = ota.build_manifest(args.dir, args.version, allow_boot_extra_overflow=args.allow_boot_extra)
    text = manifest.render()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return 0


def cmd_ota_push(args, env, out):
    mpath = Path(args.manifest) if args.manifest else Path(args.dir) / "ota.manifest"
    if mpath.is_file():
        manifest = ota.OtaManifest.parse(mpath.read_text(encoding="utf-8"))
    elif args.version:
        manifest = ota.build_manifest(args.dir, args.version)
    else:
        raise ResolutionError(f"no manifest at {mpath}; pass --version to build one")
    report = ota.push_update(manifest, args.dir, ota.open_target(args.target))
    for note in report.notes:
        out.write(f"note: {note}\n")
    out.write(f"{report.status} {report.version}: {len(report.transferred_files)} files, "
              f"{report.transferred_bytes} bytes transferred\n")
    return 0


def cmd_ota_verify(args, env, out):
    report = ota.verify_target(ota.open_target(args.target))
    for name, good in report.results.items():
        out.write(f"{'ok' if good else 'FAIL'} {name}\n")
    out.write(f"{report.status}\n")
    return 0 if report.ok else 3


def cmd_ota_rollback(args, env, out):
    report = ota.rollback(ota.open_target(args.target))
    out.write(f"active {report.active} (previous {report.previous})\n")
    return 0


def cmd_ota_recover(args, env, out):
    out.write(ota.recover(ota.open_target(args.target), break_lock=args.break_lock) + "\n")
    return 0


def cmd_persist_plan(args, env, out):
    if args.descriptor:
        layout = persist.parse_layout(Path(args.descriptor).read_text(encoding="utf-8"),
                                      persist.parse_size(args.media_size))
    else:
        layout = persist.plan_layout(
            persist.parse_size(args.media_size), persist.parse_size(args.boot_size),
            persist.parse_size(args.rootfs_size), persist.parse_size(args.reserved_prefix),
        )
    out.write(layout.render())
    return 0


def cmd_persist_grow(args, env, out):
    layout = persist.parse_layout(Path(args.layout).read_text(encoding="utf-8"))
    out.write(persist.grow_persist(layout, persist.parse_size(args.media_size)).render())
    return 0


def cmd_persist_scaffold(args, env, out):
    size = persist.parse_size(args.swap_size) if args.swap_size else None
    report = persist.scaffold_tree(args.target, size)
    out.write(f"created: {' '.join(report.created) or '-'}\n")
    out.write(f"existing: {' '.join(report.existing) or '-'}\n")
    for note in report.notes:
        out.write(f"note: {note}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False, parents=[base])
    common.add_argument("--config", help=f"layer selection, overrides ${ENV_CONFIG}")
    common.add_argument("--workspace", default="default")
    common.add_argument("--layers-root", action="append", type=Path,
                        help="layer search root (repeatable, later roots shadow earlier)")
    common.add_argument("--overrides-root", type=Path)
    common.add_argument("--allow-exec", action="store_true")

    p = argparse.ArgumentParser(prog="skiff", description="Configuration layer composition tool.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    sub.add_parser("help", parents=[common], help="list layers and extension commands").set_defaults(fn=cmd_help)

    c = sub.add_parser("commands", parents=[common], help="list or run extension commands")
    c.add_argument("--run", metavar="TARGET")
    c.set_defaults(fn=cmd_commands)

    c = sub.add_parser("compose", parents=[common], help="compose a workspace build plan")
    c.add_argument("--output-root", type=Path, default=Path("."))
    c.add_argument("--run-hooks", action="store_true")
    c.set_defaults(fn=cmd_compose)

    c = sub.add_parser("merge-config", parents=[common], help="merge kconfig fragments in order")
    c.add_argument("fragments", nargs="+", type=Path)
    c.add_argument("-o", "--output")
    c.set_defaults(fn=cmd_merge_config)

    ov = sub.add_parser("overlay", help="root overlay operations").add_subparsers(dest="action", metavar="ACTION")
    c = ov.add_parser("apply", parents=[common])
    c.add_argument("target", type=Path)
    c.set_defaults(fn=cmd_overlay_apply)

    cs = sub.add_parser("core", help="skiff-core configuration").add_subparsers(dest="action", metavar="ACTION")
    c = cs.add_parser("validate", parents=[base])
    c.add_argument("file")
    c.set_defaults(fn=cmd_core_validate)
    c = cs.add_parser("route", parents=[base])
    c.add_argument("user")
    c.add_argument("file")
    c.set_defaults(fn=cmd_core_route)
    c = cs.add_parser("plan", parents=[base])
    c.add_argument("file")
    c.add_argument("--state")
    c.add_argument("--json", action="store_true")
    c.set_defaults(fn=cmd_core_plan)

    os_ = sub.add_parser("ota", help="over-the-air image updates").add_subparsers(dest="action", metavar="ACTION")
    c = os_.add_parser("manifest", parents=[base])
    c.add_argument("dir")
    c.add_argument("--version", required=True)
    c.add_argument("--allow-boot-extra", action="store_true")
    c.add_argument("-o", "--output")
    c.set_defaults(fn=cmd_ota_manifest)
    c = os_.add_parser("push", parents=[base])
    c.add_argument("dir")
    c.add_argument("target")
    c.add_argument("--manifest")
    c.add_argument("--version")
    c.set_defaults(fn=cmd_ota_push)
    for name, fn in (("verify", cmd_ota_verify), ("rollback", cmd_ota_rollback)):
        c = os_.add_parser(name, parents=[base])
        c.add_argument("target")
        c.set_defaults(fn=fn)
    c = os_.add_parser("recover", parents=[base])
    c.add_argument("target")
    c.add_argument("--break-lock", action="store_true")
    c.set_defaults(fn=cmd_ota_recover)

    ps = sub.add_parser("persist", help="persist partition planning").add_subparsers(dest="action", metavar="ACTION")
    c = ps.add_parser("plan", parents=[base])
    c.add_argument("--media-size", required=True)
    c.add_argument("--boot-size", default="64M")
    c.add_argument("--rootfs-size", default="512M")
    c.add_argument("--reserved-prefix", default="0")
    c.add_argument("--descriptor")
    c.set_defaults(fn=cmd_persist_plan)
    c = ps.add_parser("grow", parents=[base])
    c.add_argument("layout")
    c.add_argument("--media-size", required=True)
    c.set_defaults(fn=cmd_persist_grow)
    c = ps.add_parser("scaffold", parents=[base])
    c.add_argument("target")
    c.add_argument("--swap-size")
    c.set_defaults(fn=cmd_persist_scaffold)
    return p


def run(argv: Sequence[str], environ: Mapping[str, str] | None = None,
        out: TextIO | None = None, err: TextIO | None = None) -> int:
    env = dict(os.environ if environ is None else environ)
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "fn", None) is None:
        parser.print_usage(err)
        return 2
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.fn(args, env, out)
    except SkiffError as exc:
        err.write(f"skiff: error: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        err.write(f"skiff: error: {exc}\n")
        return 4


def main() -> None:
    sys.exit(run(sys.argv[1:]))
