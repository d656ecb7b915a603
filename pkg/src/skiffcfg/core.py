"""Containerized user environments: the ``skiff-core.yaml`` model and setup planner.

The container engine itself is abstract; :class:`FakeRuntime` is an
in-memory implementation used by tests and the CLI.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import yaml

from .errors import ParseError, RoutingError, SkiffError, ValidationError

log = logging.getLogger(__name__)

CONFIG_FILENAME = "skiff-core.yaml"
PULL_POLICIES = ("ifnotexists", "always", "never")
DEFAULT_PULL_POLICY = "ifnotexists"

# Host-facing create options: init runs as PID 1 inside its own PID
# namespace, most other isolation is switched off.
CREATE_OPTIONS = (
    "init-as-pid1",
    "privileged",
    "network=host",
    "ipc=host",
    "uts=host",
)
PERSIST_KEYS_DIR = "/mnt/persist/skiff/keys"


class AcquisitionError(SkiffError):
    exit_code = 3


@dataclass(frozen=True)
class Mount:
    host: str
    container: str
    read_only: bool = False

    @classmethod
    def parse(cls, spec: str) -> Mount:
        parts = spec.split(":")
        if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
            raise ValueError(f"mount {spec!r} must be host:container[:ro]")
        if len(parts) == 3 and parts[2] != "ro":
            raise ValueError(f"mount {spec!r}: only 'ro' is accepted as a mount flag")
        return cls(parts[0], parts[1], len(parts) == 3)

    def __str__(self) -> str:
        return f"{self.host}:{self.container}" + (":ro" if self.read_only else "")


@dataclass(frozen=True)
class ContainerSpec:
    image: str
    mounts: tuple[Mount, ...] = ()


@dataclass(frozen=True)
class UserSpec:
    container: str
    container_user: str
    copy_root_keys: bool = False


@dataclass(frozen=True)
class PullSpec:
    policy: str = DEFAULT_PULL_POLICY
    registry: str | None = None


@dataclass(frozen=True)
class BuildSpec:
    source: str


@dataclass(frozen=True)
class ImageSpec:
    pull: PullSpec | None = None
    build: BuildSpec | None = None


# Images with no entry under "images:" are pulled when missing.
DEFAULT_IMAGE_SPEC = ImageSpec(pull=PullSpec())


@dataclass(frozen=True)
class CoreConfig:
    containers: dict[str, ContainerSpec]
    users: dict[str, UserSpec]
    images: dict[str, ImageSpec]
    warnings: tuple[str, ...] = ()

    def image_spec(self, image_ref: str) -> ImageSpec:
        return self.images.get(image_ref, DEFAULT_IMAGE_SPEC)

    def users_of(self, container: str) -> list[tuple[str, UserSpec]]:
        return [(name, u) for name, u in self.users.items() if u.container == container]


def _mapping(value, where, problems) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        problems.append(f"{where}: expected a mapping, got {type(value).__name__}")
        return {}
    return value


def _unknown(data: dict, known: Iterable[str], where: str, warnings: list[str]) -> None:
    for key in data:
        if key not in known:
            warnings.append(f"{where}: unknown key {key!r} ignored")


def _text(value) -> str | None:
    if isinstance(value, (str, int, float)) and not isinstance(value, bool):
        return str(value)
    return None


def parse_core_config(text: str | bytes) -> CoreConfig:
    """Parse and validate a skiff-core YAML document.

    Every violation is collected before raising, so one ValidationError
    reports all of them. Unknown keys only produce warnings.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ParseError(f"YAML syntax error: {err}") from None
    problems: list[str] = []
    warnings: list[str] = []
    doc = _mapping(doc, "document", problems)
    _unknown(doc, ("containers", "users", "images"), "document", warnings)

    containers: dict[str, ContainerSpec] = {}
    for name, body in _mapping(doc.get("containers"), "containers", problems).items():
        where = f"containers.{name}"
        body = _mapping(body, where, problems)
        _unknown(body, ("image", "mounts"), where, warnings)
        image = _text(body.get("image"))
        if not image:
            problems.append(f"{where}: image is required")
        mounts = []
        raw_mounts = body.get("mounts") or []
        if not isinstance(raw_mounts, list):
            problems.append(f"{where}.mounts: expected a list")
            raw_mounts = []
        for m in raw_mounts:
            try:
                mounts.append(Mount.parse(str(m)))
            except ValueError as err:
                problems.append(f"{where}.mounts: {err}")
        containers[str(name)] = ContainerSpec(image or "", tuple(mounts))

    users: dict[str, UserSpec] = {}
    for name, body in _mapping(doc.get("users"), "users", problems).items():
        where = f"users.{name}"
        body = _mapping(body, where, problems)
        _unknown(body, ("container", "containerUser", "auth"), where, warnings)
        container = _text(body.get("container"))
        cuser = _text(body.get("containerUser"))
        if not container:
            problems.append(f"{where}: container is required")
        elif container not in containers:
            problems.append(f"{where}: container {container!r} is not defined")
        if not cuser:
            problems.append(f"{where}: containerUser is required")
        auth = _mapping(body.get("auth"), f"{where}.auth", problems)
        _unknown(auth, ("copyRootKeys",), f"{where}.auth", warnings)
        copy_keys = auth.get("copyRootKeys", False)
        if not isinstance(copy_keys, bool):
            problems.append(f"{where}.auth.copyRootKeys: expected true or false")
            copy_keys = False
        users[str(name)] = UserSpec(container or "", cuser or "", copy_keys)
    if not users:
        problems.append("no users defined")

    images: dict[str, ImageSpec] = {}
    for ref, body in _mapping(doc.get("images"), "images", problems).items():
        where = f"images.{ref}"
        body = _mapping(body, where, problems)
        _unknown(body, ("pull", "build"), where, warnings)
        pull = None
        raw_pull = _mapping(body.get("pull"), f"{where}.pull", problems)
        if raw_pull:
            _unknown(raw_pull, ("policy", "registry"), f"{where}.pull", warnings)
            policy = raw_pull.get("policy", DEFAULT_PULL_POLICY)
            if policy not in PULL_POLICIES:
                problems.append(f"{where}.pull.policy: {policy!r} is not one of {', '.join(PULL_POLICIES)}")
                policy = DEFAULT_PULL_POLICY
            pull = PullSpec(policy, _text(raw_pull.get("registry")))
        build = None
        raw_build = _mapping(body.get("build"), f"{where}.build", problems)
        if raw_build:
            _unknown(raw_build, ("source",), f"{where}.build", warnings)
            source = _text(raw_build.get("source"))
            if not source:
                problems.append(f"{where}.build: source is required")
            build = BuildSpec(source or "")
        if pull is None and build is None:
            problems.append(f"{where}: needs a pull or a build section")
        images[str(ref)] = ImageSpec(pull, build)

    referenced = {c.image for c in containers.values()}
    for ref in images:
        if ref not in referenced:
            warnings.append(f"images.{ref}: not used by any container")

    if problems:
        raise ValidationError(problems)
    for w in warnings:
        log.warning(w)
    return CoreConfig(containers, users, images, tuple(warnings))


@dataclass(frozen=True)
class Decision:
    action: str  # "use-local" | "pull" | "build" | "fail"
    reason: str = ""


def resolve_acquisition(image_ref: str, spec: ImageSpec | None, local_present: bool,
                        pull_available: bool) -> Decision:
    """Decide how to obtain ``image_ref``.

    Without a pull section the image is always built from source. With
    one, ``always`` re-pulls whenever the registry is reachable; otherwise
    a local copy is used if present, then a pull (unless policy is
    ``never``), then a build.
    """
    spec = spec if spec is not None else DEFAULT_IMAGE_SPEC
    pull = spec.pull
    if pull is not None and pull.policy == "always" and pull_available:
        return Decision("pull", "policy always")
    if local_present and pull is not None:
        return Decision("use-local", "image present locally")
    if pull is not None and pull.policy != "never" and pull_available:
        return Decision("pull", f"policy {pull.policy}, image absent")
    if spec.build is not None:
        if pull is None:
            why = "no pull section"
        elif pull.policy == "never":
            why = "pull policy never"
        else:
            why = "pull unavailable"
        return Decision("build", why)
    if pull is None:
        return Decision("fail", f"{image_ref}: no pull section and no build source")
    if pull.policy == "never":
        return Decision("fail", f"{image_ref}: pull policy never and no build source")
    return Decision("fail", f"{image_ref}: pull unavailable and no build source")


def route_session(user: str, config: CoreConfig) -> tuple[str, str]:
    spec = config.users.get(user)
    if spec is None:
        raise RoutingError(f"session refused: no core user {user!r}")
    return spec.container, spec.container_user


@dataclass(frozen=True)
class SetupStep:
    kind: str  # pull | build | create | start | provision-user
    container: str | None = None
    image: str | None = None
    registry: str | None = None
    source: str | None = None
    mounts: tuple[str, ...] = ()
    options: tuple[str, ...] = ()
    user: str | None = None
    copy_root_keys: bool = False
    keys_source: str | None = None

    def describe(self) -> str:
        if self.kind == "pull":
            return f"pull {self.image}" + (f" from {self.registry}" if self.registry else "")
        if self.kind == "build":
            return f"build {self.image} from {self.source}"
        if self.kind == "create":
            return f"create {self.container} from {self.image}"
        if self.kind == "start":
            return f"start {self.container}"
        return f"provision {self.user} in {self.container}" + (" (copy root keys)" if self.copy_root_keys else "")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v not in (None, (), False)} | {"kind": self.kind}


@dataclass
class RuntimeState:
    images: set[str] = field(default_factory=set)
    containers: set[str] = field(default_factory=set)
    running: set[str] = field(default_factory=set)
    provisioned: set[tuple[str, str]] = field(default_factory=set)
    pull_available: bool = True

    @classmethod
    def from_json(cls, text: str) -> RuntimeState:
        data = json.loads(text) if text.strip() else {}
        return cls(
            images=set(data.get("images", [])),
            containers=set(data.get("containers", [])),
            running=set(data.get("running", [])),
            provisioned={tuple(p) for p in data.get("provisioned", [])},
            pull_available=bool(data.get("pull_available", True)),
        )

    def to_json(self) -> str:
        return json.dumps({
            "images": sorted(self.images),
            "containers": sorted(self.containers),
            "running": sorted(self.running),
            "provisioned": [list(p) for p in sorted(self.provisioned)],
            "pull_available": self.pull_available,
        }, indent=2) + "\n"


def plan_setup(config: CoreConfig, state: RuntimeState) -> list[SetupStep]:
    """Steps that bring ``state`` in line with ``config``; empty when converged.

    An image is only acquired for containers that still need creating.
    """
    steps: list[SetupStep] = []
    acquired: set[str] = set()
    failures: list[str] = []
    for name, spec in config.containers.items():
        if name not in state.containers:
            if spec.image not in acquired:
                image_spec = config.image_spec(spec.image)
                decision = resolve_acquisition(spec.image, image_spec, spec.image in state.images,
                                               state.pull_available)
                if decision.action == "pull":
                    steps.append(SetupStep("pull", image=spec.image, registry=image_spec.pull.registry))
                elif decision.action == "build":
                    steps.append(SetupStep("build", image=spec.image, source=image_spec.build.source))
                elif decision.action == "fail":
                    failures.append(f"container {name}: {decision.reason}")
                acquired.add(spec.image)
            steps.append(SetupStep("create", container=name, image=spec.image,
                                   mounts=tuple(str(m) for m in spec.mounts), options=CREATE_OPTIONS))
        if name not in state.running:
            steps.append(SetupStep("start", container=name))
        for _, user in config.users_of(name):
            if (name, user.container_user) not in state.provisioned:
                steps.append(SetupStep(
                    "provision-user", container=name, user=user.container_user,
                    copy_root_keys=user.copy_root_keys,
                    keys_source=PERSIST_KEYS_DIR if user.copy_root_keys else None,
                ))
    if failures:
        raise AcquisitionError("; ".join(failures))
    return steps


class ContainerRuntime:
    """Operations a container engine must provide. Calls are serialized by contract."""

    def pull(self, image: str, registry: str | None) -> None:
        raise NotImplementedError

    def build(self, image: str, source: str) -> None:
        raise NotImplementedError

    def create(self, name: str, image: str, mounts: Sequence[str], options: Sequence[str]) -> None:
        raise NotImplementedError

    def start(self, name: str) -> None:
        raise NotImplementedError

    def exec(self, name: str, user: str, argv: Sequence[str]) -> int:
        raise NotImplementedError

    def list(self) -> RuntimeState:
        raise NotImplementedError

    def provision(self, name: str, user: str, copy_root_keys: bool) -> None:
        argv = ["skiff-core-provision", user]
        if copy_root_keys:
            argv += ["--copy-keys", PERSIST_KEYS_DIR]
        rc = self.exec(name, "root", argv)
        if rc != 0:
            raise SkiffError(f"provisioning {user} in {name} failed with status {rc}")


class FakeRuntime(ContainerRuntime):
    def __init__(self, state: RuntimeState | None = None):
        self.state = state or RuntimeState()
        self.created: dict[str, SetupStep] = {}
        self.log: list[str] = []
        self._guard = threading.Lock()

    def _enter(self, what: str) -> None:
        if not self._guard.acquire(blocking=False):
            raise RuntimeError(f"concurrent runtime call ({what}) rejected")
        self.log.append(what)

    def pull(self, image, registry):
        self._enter(f"pull {image}")
        try:
            if not self.state.pull_available:
                raise SkiffError(f"registry unreachable for {image}")
            self.state.images.add(image)
        finally:
            self._guard.release()

    def build(self, image, source):
        self._enter(f"build {image}")
        try:
            self.state.images.add(image)
        finally:
            self._guard.release()

    def create(self, name, image, mounts, options):
        self._enter(f"create {name}")
        try:
            if image not in self.state.images:
                raise SkiffError(f"image {image} not present")
            self.state.containers.add(name)
        finally:
            self._guard.release()

    def start(self, name):
        self._enter(f"start {name}")
        try:
            if name not in self.state.containers:
                raise SkiffError(f"container {name} does not exist")
            self.state.running.add(name)
        finally:
            self._guard.release()

    def exec(self, name, user, argv):
        self._enter(f"exec {name} {user}")
        try:
            if name not in self.state.running:
                raise SkiffError(f"container {name} is not running")
            return 0
        finally:
            self._guard.release()

    def provision(self, name, user, copy_root_keys):
        self._enter(f"provision {name} {user}")
        try:
            self.state.provisioned.add((name, user))
        finally:
            self._guard.release()

    def list(self):
        return self.state


def apply_setup(steps: Sequence[SetupStep], runtime: ContainerRuntime,
                progress: Callable[[int, int, SetupStep], None] | None = None) -> None:
    for i, step in enumerate(steps, 1):
        if progress is not None:
            progress(i, len(steps), step)
        if step.kind == "pull":
            runtime.pull(step.image, step.registry)
        elif step.kind == "build":
            runtime.build(step.image, step.source)
        elif step.kind == "create":
            runtime.create(step.container, step.image, step.mounts, step.options)
        elif step.kind == "start":
            runtime.start(step.container)
        elif step.kind == "provision-user":
            runtime.provision(step.container, step.user, step.copy_root_keys)
        else:
            raise ValueError(f"unknown step kind {step.kind!r}")
