import os
import random
import stat
from pathlib import Path

import pytest

from skiffcfg import compose
from skiffcfg.errors import ConflictError, ParseError, ResolutionError
from skiffcfg.layers import LayerId, discover_layers, parse_selection, resolve_order

from conftest import GOLDEN, tree_digest, write_tree
from oracles import random_overlay_layers, sequential_copy

L = LayerId.parse


def layers_from(tmp_path, files, order):
    write_tree(tmp_path / "c", files)
    cat = discover_layers([tmp_path / "c"])
    return [cat[L(i)] for i in order]


class TestCollectors:
    def test_cflags_concatenated(self, tmp_path):
        ls = layers_from(tmp_path, {"a/cflags": "-O2\n", "b/cflags": "-mcpu=native\n"}, ["a", "b"])
        assert compose.collect_cflags(ls) == ["-O2", "-mcpu=native"]

    def test_cflags_none(self, tmp_path):
        ls = layers_from(tmp_path, {"a/metadata/description": "x"}, ["a"])
        assert compose.collect_cflags(ls) == []

    def test_cflags_duplicates_kept(self, tmp_path):
        ls = layers_from(tmp_path, {"a/cflags": "-O2\n-pipe\n", "b/cflags": "# tuned\n\n-O2\n"}, ["a", "b"])
        assert compose.collect_cflags(ls) == ["-O2", "-pipe", "-O2"]

    def test_patches_sorted(self, tmp_path):
        ls = layers_from(tmp_path, {"a/kernel_patches/02-b.patch": "", "a/kernel_patches/01-a.patch": ""}, ["a"])
        assert [p.name for p in compose.collect_patches(ls, "kernel_patches")] == ["01-a.patch", "02-b.patch"]

    def test_patches_empty(self, tmp_path):
        ls = layers_from(tmp_path, {"a/cflags": ""}, ["a"])
        assert compose.collect_patches(ls, "uboot_patches") == []

    def test_patches_same_name_both_layers(self, tmp_path):
        ls = layers_from(tmp_path, {"a/kernel_patches/01-a.patch": "", "b/kernel_patches/01-a.patch": ""}, ["b", "a"])
        got = compose.collect_patches(ls, "kernel_patches")
        assert [p.parent.parent.name for p in got] == ["b", "a"]

    def test_non_patch_files_warned(self, tmp_path):
        ls = layers_from(tmp_path, {"a/buildroot_patches/README": "", "a/buildroot_patches/pkg/0001-x.patch": ""}, ["a"])
        diags = []
        got = compose.collect_patches(ls, "buildroot_patches", diags)
        assert [p.name for p in got] == ["0001-x.patch"]
        assert len(diags) == 1 and "README" in diags[0]

    def test_hooks_phase_filter(self, tmp_path):
        ls = layers_from(tmp_path, {"a/hooks/pre.sh": "", "a/hooks/post.sh": "", "a/hooks/post-image.sh": "",
                                    "a/hooks/prefix.sh": ""}, ["a"])
        assert [p.name for p in compose.collect_hooks(ls, "pre")] == ["pre.sh"]
        assert [p.name for p in compose.collect_hooks(ls, "post")] == ["post-image.sh", "post.sh"]

    def test_hooks_none(self, tmp_path):
        ls = layers_from(tmp_path, {"a/cflags": ""}, ["a"])
        assert compose.collect_hooks(ls, "post") == []

    def test_hooks_layer_order(self, tmp_path):
        ls = layers_from(tmp_path, {"a/hooks/post.sh": "", "b/hooks/post.sh": ""}, ["b", "a"])
        assert [p.parent.parent.name for p in compose.collect_hooks(ls, "post")] == ["b", "a"]


class TestOverlay:
    def test_later_layer_wins(self, tmp_path):
        ls = layers_from(tmp_path, {"pi/common/root_overlay/etc/a.conf": "early",
                                    "pi/4/root_overlay/etc/a.conf": "late"}, ["pi/common", "pi/4"])
        plan = compose.compose_overlay(ls)
        assert plan.final["etc/a.conf"].layer == "pi/4"
        out = tmp_path / "out"
        out.mkdir()
        compose.apply_overlay(plan, out)
        assert (out / "etc/a.conf").read_text() == "late"

    def test_single_layer_identity(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/x/y": "1", "a/root_overlay/z": "2"}, ["a"])
        plan = compose.compose_overlay(ls)
        assert list(plan.final) == ["x", "x/y", "z"]
        assert {a.kind for a in plan.final.values()} == {"directory", "file"}

    def test_pi_common_etc_and_usr(self, pi_catalog):
        plan = compose.compose_overlay([pi_catalog[L("pi/common")]])
        assert "etc/hostname" in plan.final
        assert "usr/lib/firmware/config.txt" in plan.final

    def test_type_conflict_names_both_layers(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/etc/x/inner": "", "b/root_overlay/etc/x": "file"}, ["a", "b"])
        with pytest.raises(ConflictError, match=r"etc/x.*from a.*from b"):
            compose.compose_overlay(ls)

    def test_symlink_over_directory_conflicts(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/d/f": "", "b/root_overlay/d": ("link", "elsewhere")}, ["a", "b"])
        with pytest.raises(ConflictError):
            compose.compose_overlay(ls)

    def test_extra_roots_last(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/f": "layer"}, ["a"])
        write_tree(tmp_path / "ov", {"f": "override"})
        plan = compose.compose_overlay(ls, [tmp_path / "ov"])
        assert plan.final["f"].layer == "overrides"

    def test_empty_plan_apply(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / "keep").write_text("k")
        report = compose.apply_overlay(compose.OverlayPlan(), out)
        assert report.files_written == 0 and report.bytes_written == 0
        assert os.listdir(out) == ["keep"]

    def test_symlink_target_preserved(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/etc/localtime": ("link", "../usr/share/zoneinfo/UTC"),
                                    "a/root_overlay/dangling": ("link", "/does/not/exist")}, ["a"])
        out = tmp_path / "out"
        out.mkdir()
        report = compose.apply_overlay(compose.compose_overlay(ls), out)
        assert os.readlink(out / "etc/localtime") == "../usr/share/zoneinfo/UTC"
        assert os.readlink(out / "dangling") == "/does/not/exist"
        assert report.symlinks_written == 2

    def test_permissions_preserved(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/bin/tool": "#!/bin/sh\n"}, ["a"])
        os.chmod(ls[0].root / "root_overlay/bin/tool", 0o750)
        out = tmp_path / "out"
        out.mkdir()
        compose.apply_overlay(compose.compose_overlay(ls), out)
        assert stat.S_IMODE((out / "bin/tool").stat().st_mode) == 0o750

    def test_apply_onto_existing_directory_conflict(self, tmp_path):
        ls = layers_from(tmp_path, {"a/root_overlay/etc": "file"}, ["a"])
        out = tmp_path / "out"
        (out / "etc").mkdir(parents=True)
        with pytest.raises(ConflictError):
            compose.apply_overlay(compose.compose_overlay(ls), out)

    def test_random_trees_match_sequential_copy(self, tmp_path):
        rng = random.Random(5)
        for i in range(25):
            base = tmp_path / f"case{i}"
            roots = random_overlay_layers(rng, base)
            actual, expected = base / "actual", base / "expected"
            actual.mkdir()
            expected.mkdir()
            sequential_copy(roots, expected)
            plan = compose.compose_overlay([], [(f"l{j}", r) for j, r in enumerate(roots)])
            compose.apply_overlay(plan, actual)
            assert tree_digest(actual) == tree_digest(expected)


class TestBuildPlan:
    def test_example_fixture_configs(self, pi_catalog):
        plan = compose.build_plan(parse_selection("pi/4,core/gentoo"), pi_catalog, "pi4")
        from skiffcfg.kconfig import render_config
        assert render_config(plan.configs["kernel"]) == (GOLDEN / "kernel.config").read_text()
        assert render_config(plan.configs["buildroot"]) == (GOLDEN / "buildroot.config").read_text()
        assert [str(l.id) for l in plan.layers] == ["pi/common", "pi/4", "core/gentoo"]
        assert plan.cflags == ["-O2", "-mcpu=cortex-a72"]

    def test_empty_selection(self, pi_catalog):
        with pytest.raises(ResolutionError, match="no layers selected"):
            compose.build_plan([], pi_catalog)

    def test_serialization_deterministic(self, pi_catalog):
        sel = parse_selection("pi/4,core/gentoo")
        a = compose.build_plan(sel, pi_catalog, "pi4").serialize()
        b = compose.build_plan(sel, pi_catalog, "pi4").serialize()
        assert a == b

    def test_parse_error_annotated_with_layer(self, pi_tree):
        write_tree(pi_tree, {"core/gentoo/kernel/99-bad.conf": "garbage line\n"})
        cat = discover_layers([pi_tree])
        with pytest.raises(ParseError, match=r"\[core/gentoo\].*99-bad.conf:1"):
            compose.build_plan(parse_selection("core/gentoo"), cat)

    def test_overrides(self, pi_catalog, tmp_path):
        ov = write_tree(tmp_path / "overrides", {
            "kernel/00-local.conf": "CONFIG_EXT3_FS=y\n",
            "workspaces/pi4/kernel/00-ws.conf": "# CONFIG_EXT4_FS is not set\n",
            "workspaces/pi4/root_overlay/etc/hostname": "workspace\n",
        })
        plan = compose.build_plan(parse_selection("pi/4,core/gentoo"), pi_catalog, "pi4", ov)
        kern = plan.configs["kernel"]
        assert kern["CONFIG_EXT3_FS"].value.text == "y"
        assert kern["CONFIG_EXT4_FS"].value.text == "n"
        assert plan.overlay.final["etc/hostname"].layer == "overrides/workspaces/pi4"
        assert any("override fragments" in d for d in plan.diagnostics)
        other = compose.build_plan(parse_selection("pi/4,core/gentoo"), pi_catalog, "other", ov)
        assert other.configs["kernel"]["CONFIG_EXT4_FS"].value.text == "y"
        assert other.overlay.final["etc/hostname"].layer == "pi/common"

    @pytest.mark.parametrize("bad", ["", "a/b", "..", " x"])
    def test_bad_workspace(self, pi_catalog, bad):
        with pytest.raises(ParseError):
            compose.build_plan(parse_selection("pi/4"), pi_catalog, bad)

    def test_collects_ext_trees_and_hooks(self, tmp_path):
        write_tree(tmp_path / "c", {"a/buildroot_ext/Config.in": "", "a/hooks/post.sh": "",
                                    "b/buildroot_ext/external.mk": ""})
        cat = discover_layers([tmp_path / "c"])
        plan = compose.build_plan(parse_selection("b,a"), cat)
        assert [p.parent.name for p in plan.external_trees] == ["b", "a"]
        assert [p.name for p in plan.hooks["post"]] == ["post.sh"]


class TestSimulateBuild:
    def test_outputs(self, pi_catalog, tmp_path):
        plan = compose.build_plan(parse_selection("pi/4,core/gentoo"), pi_catalog, "pi4")
        out = tmp_path / "out"
        compose.simulate_build(plan, out)
        assert "CONFIG_EXT4_FS=y\n" in (out / "kernel.config").read_text()
        assert (out / "uboot.config").read_text() == ""
        assert (out / "cflags.txt").read_text() == "-O2\n-mcpu=cortex-a72\n"
        assert (out / "rootfs-overlay/etc/hostname").read_text() == "skiff-pi\n"
        assert (out / "plan.json").read_text() == plan.serialize()

    def test_idempotent(self, pi_catalog, tmp_path):
        plan = compose.build_plan(parse_selection("pi/4,core/gentoo"), pi_catalog, "pi4")
        out = tmp_path / "out"
        compose.simulate_build(plan, out)
        first = tree_digest(out)
        compose.simulate_build(plan, out)
        assert tree_digest(out) == first

    def test_stale_overlay_files_removed(self, pi_catalog, tmp_path):
        plan = compose.build_plan(parse_selection("pi/4"), pi_catalog)
        out = tmp_path / "out"
        compose.simulate_build(plan, out)
        (out / "rootfs-overlay/stale").write_text("x")
        compose.simulate_build(plan, out)
        assert not (out / "rootfs-overlay/stale").exists()

    def test_hooks_only_run_when_asked(self, tmp_path):
        write_tree(tmp_path / "c", {"a/hooks/post.sh": 'echo ran > "$1/hook-ran"\n'})
        cat = discover_layers([tmp_path / "c"])
        plan = compose.build_plan(parse_selection("a"), cat)
        out = tmp_path / "out"
        compose.simulate_build(plan, out)
        assert not (out / "hook-ran").exists()
        assert (out / "hooks.txt").read_text().startswith("post ")
        arts = compose.simulate_build(plan, out, run_hooks=True)
        assert (out / "hook-ran").read_text() == "ran\n"
        assert len(arts.hooks_run) == 1

    def test_failing_hook(self, tmp_path):
        write_tree(tmp_path / "c", {"a/hooks/pre.sh": "exit 3\n"})
        plan = compose.build_plan(parse_selection("a"), discover_layers([tmp_path / "c"]))
        with pytest.raises(compose.HookError):
            compose.simulate_build(plan, tmp_path / "out", run_hooks=True)

    def test_workspaces_disjoint(self, tmp_path):
        a = compose.workspace_dir(tmp_path, "pi4")
        b = compose.workspace_dir(tmp_path, "x64")
        assert a != b and a not in b.parents and b not in a.parents
