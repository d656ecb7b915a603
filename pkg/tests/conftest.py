import hashlib
import os
from pathlib import Path

import pytest

from skiffcfg.layers import Layer, LayerCatalog, LayerId, LayerMetadata, discover_layers

GOLDEN = Path(__file__).parent / "golden"

BUILDROOT_FRAGMENT = (
    'BR2_LINUX_KERNEL_DEFCONFIG="versatile"\n'
    'BR2_LINUX_KERNEL_CUSTOM_VERSION_VALUE="5.11.2"\n'
)
KERNEL_FRAGMENT = (
    "CONFIG_EXT3_FS=m\n"
    "CONFIG_EXT3_FS_SECURITY=y\n"
    "CONFIG_EXT3_FS_XATTR=y\n"
    "CONFIG_EXT3_POSIX_ACL=y\n"
    "CONFIG_EXT4_FS=y\n"
    "CONFIG_EXT4_FS_SECURITY=y\n"
    "CONFIG_EXT4_POSIX_ACL=y\n"
)
COMMANDS_FILE = (
    "format Format a SD card and install bootloader.\n"
    "install Installs to a formatted SD card.\n"
)
CORE_YAML = """\
containers:
  core:
    image: skiffos/skiff-core-gentoo:latest
    mounts:
      - /dev:/dev
      - /etc/resolv.conf:/etc/resolv.conf:ro
      - /mnt/persist/data:/home
users:
  core:
    container: core
    containerUser: core
    auth: {copyRootKeys: true}
images:
  skiffos/skiff-core-gentoo:latest:
    pull:
      policy: ifnotexists
      registry: quay.io
    build:
      source: /opt/skiff/coreenv/base
"""


def write_tree(root, files):
    """Create files under root. Values: bytes/str content, or ("link", target)."""
    root = Path(root)
    for rel, content in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, tuple):
            os.symlink(content[1], path)
        elif content is None:
            path.mkdir(exist_ok=True)
        else:
            path.write_bytes(content.encode() if isinstance(content, str) else content)
    return root


def tree_digest(root):
    """Digest over relative paths, kinds, file bytes, link targets and modes."""
    root = Path(root)
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        here = Path(dirpath)
        for name in sorted(dirnames + filenames):
            p = here / name
            rel = p.relative_to(root).as_posix()
            if p.is_symlink():
                h.update(f"L {rel} {os.readlink(p)}\n".encode())
            elif p.is_dir():
                h.update(f"D {rel} {p.stat().st_mode & 0o7777:o}\n".encode())
            else:
                h.update(f"F {rel} {p.stat().st_mode & 0o7777:o} ".encode() + p.read_bytes() + b"\n")
    return h.hexdigest()


def mem_catalog(deps):
    """In-memory catalog from {"a": ["b", ...]} without touching disk."""
    layers = {}
    for name, ds in deps.items():
        lid = LayerId.parse(name)
        layers[lid] = Layer(lid, Path("/nonexistent") / name, frozenset({"metadata"}),
                            LayerMetadata(dependencies=tuple(LayerId.parse(d) for d in ds)))
    return LayerCatalog((Path("/nonexistent"),), layers)


def build_pi_tree(root):
    """Layer tree used across tests: pi/common, pi/4, core/gentoo and an unlisted layer."""
    return write_tree(root, {
        "pi/common/metadata/commands": COMMANDS_FILE,
        "pi/common/metadata/description": "Raspberry Pi common support\n",
        "pi/common/buildroot/00-kernel.conf": BUILDROOT_FRAGMENT,
        "pi/common/root_overlay/etc/hostname": "skiff-pi\n",
        "pi/common/root_overlay/usr/lib/firmware/config.txt": "dtparam=audio=on\n",
        "pi/common/cflags": "-O2\n",
        "pi/4/metadata/dependencies": "pi/common\n",
        "pi/4/metadata/description": "Raspberry Pi 4\n",
        "pi/4/cflags": "# cortex-a72\n-mcpu=cortex-a72\n",
        "core/gentoo/metadata/description": "Gentoo core environment\n",
        "core/gentoo/kernel/50-ext.conf": KERNEL_FRAGMENT,
        "util/hidden/metadata/unlisted": "",
        "util/hidden/metadata/commands": "secret Does hidden things.\n",
    })


@pytest.fixture
def pi_tree(tmp_path):
    return build_pi_tree(tmp_path / "configs")


@pytest.fixture
def pi_catalog(pi_tree):
    return discover_layers([pi_tree])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
