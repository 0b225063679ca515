"""Parsing, canonicalization, and validation of slice descriptors.

The external format is a YAML tree with kind ``MultiClusterSliceRequest``.
Parsing is strict: unknown fields, missing fields, and mistyped values are
hard errors carrying a json-path-like locator. Cross-field rules (unknown
domains, incompatible kubernetes/fabric pairs, dangling peers, ...) are
checked separately by :func:`validate`, which reports findings instead of
raising, so an operator sees every problem in one pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import yaml

API_VERSION = "swn.uom.gr/v1"
KIND = "MultiClusterSliceRequest"

_NAME_RE = re.compile(r"^[a-z0-9][a-z0-9-]*$")
_SHA512_CRYPT_RE = re.compile(r"^\$6\$[^$]*\$?[./A-Za-z0-9$=,]+$")
_HEX_DIGEST_RE = re.compile(r"^[0-9a-fA-F]{128}$")

# Lines like `parameters:"{peers:[liqo1,liqo2]}"` (no space after the colon)
# appear in real descriptors; YAML scanners reject them, so give the quoted
# value its separating space before loading.
_COLON_QUOTE_RE = re.compile(r"(?m)^(\s*(?:- )?[A-Za-z][A-Za-z0-9_-]*):([\"'])")


class DescriptorSyntaxError(Exception):
    """The document is not well-formed YAML."""


class SchemaError(Exception):
    """A field is missing, unknown, or mistyped."""

    def __init__(self, locator: str, message: str):
        self.locator = locator
        self.message = message
        super().__init__(f"{locator}: {message}")


class ParameterSyntaxError(Exception):
    """A compact parameter string violates the parameter grammar."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class DeploymentStrategy(str, Enum):
    BALANCED = "balanced"
    PACKED = "packed"


class KubernetesType(str, Enum):
    VANILLA = "vanilla"
    K0S = "k0s"
    K3S = "k3s"
    MICROK8S = "microk8s"


class NetworkFabric(str, Enum):
    FLANNEL = "flannel"
    CALICO = "calico"
    KUBEROUTER = "kuberouter"
    KUBEOVN = "kubeovn"


class AppScope(str, Enum):
    CLUSTER = "cluster"


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class Credentials:
    username: str
    password_hash: str


@dataclass(frozen=True)
class NodeGroupSpec:
    count: int
    osimage: str
    nodetype: str
    osaccount: str | None = None


@dataclass(frozen=True)
class ApplicationSpec:
    """One application module of a cluster.

    ``parameters`` is the parsed form of the compact string in the document;
    an application is a peering producer when it carries a ``peers`` list, a
    consumer when ``sharefile`` is set, and plain otherwise.
    """

    name: str
    scope: AppScope
    parameters: Mapping[str, Any] | None = None
    sharefile: str | None = None

    @property
    def peers(self) -> tuple[str, ...]:
        if self.parameters and "peers" in self.parameters:
            value = self.parameters["peers"]
            if isinstance(value, (list, tuple)):
                return tuple(value)
            return (value,)
        return ()

    @property
    def is_producer(self) -> bool:
        return bool(self.peers)

    @property
    def is_consumer(self) -> bool:
        return self.sharefile is not None


@dataclass(frozen=True)
class ClusterSpec:
    name: str
    deploymentdomain: str
    masters: NodeGroupSpec
    workers: NodeGroupSpec
    kubernetestype: KubernetesType
    networkfabric: NetworkFabric
    kubernetesversion: str | None = None
    applications: tuple[ApplicationSpec, ...] = ()


@dataclass(frozen=True)
class SliceRequest:
    name: str
    namespace: str
    deploymentstrategy: DeploymentStrategy
    credentials: Credentials
    clusters: tuple[ClusterSpec, ...]

    @property
    def slice_id(self) -> str:
        return f"{self.namespace}/{self.name}"

    def cluster(self, name: str) -> ClusterSpec:
        for c in self.clusters:
            if c.name == name:
                return c
        raise KeyError(name)


@dataclass(frozen=True)
class CompatibilityMatrix:
    """Allowed (kubernetes type, network fabric) combinations, O(1) lookup."""

    allowed: frozenset[tuple[KubernetesType, NetworkFabric]]

    @classmethod
    def default(cls) -> "CompatibilityMatrix":
        pairs = {
            (kt, nf)
            for kt in KubernetesType
            for nf in NetworkFabric
            if not (kt is KubernetesType.MICROK8S and nf is NetworkFabric.KUBEOVN)
        }
        return cls(allowed=frozenset(pairs))

    def allows(self, kt: KubernetesType, nf: NetworkFabric) -> bool:
        return (kt, nf) in self.allowed


@dataclass(frozen=True)
class Finding:
    severity: Severity
    locator: str
    message: str


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not any(f.severity is Severity.ERROR for f in self.findings)

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.ERROR]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.WARNING]

    def add(self, severity: Severity, locator: str, message: str) -> None:
        self.findings.append(Finding(severity, locator, message))


# --------------------------------------------------------------------------
# compact parameter strings


def parse_parameters(raw: str) -> dict[str, Any]:
    """Parse ``{key:value,key:[item,item]}`` into an ordered map.

    Scalars stay strings; bracketed values become lists of identifiers.
    Raises :class:`ParameterSyntaxError` with the byte offset of the first
    offending character.
    """
    scanner = _ParameterScanner(raw)
    return scanner.parse()


def render_parameters(params: Mapping[str, Any]) -> str:
    """Inverse of :func:`parse_parameters` for maps within the grammar."""
    parts = []
    for key, value in params.items():
        if isinstance(value, (list, tuple)):
            parts.append(f"{key}:[{','.join(value)}]")
        else:
            parts.append(f"{key}:{value}")
    return "{" + ",".join(parts) + "}"


_IDENT_CHARS = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-/")


class _ParameterScanner:
    def __init__(self, raw: str):
        self.raw = raw
        self.pos = 0

    def error(self, message: str) -> ParameterSyntaxError:
        return ParameterSyntaxError(message, self.pos)

    def peek(self) -> str:
        return self.raw[self.pos] if self.pos < len(self.raw) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def ident(self, what: str) -> str:
        start = self.pos
        while self.peek() and self.peek() in _IDENT_CHARS:
            self.pos += 1
        if self.pos == start:
            raise self.error(f"expected {what}")
        return self.raw[start : self.pos]

    def parse(self) -> dict[str, Any]:
        self.expect("{")
        result: dict[str, Any] = {}
        if self.peek() == "}":
            self.pos += 1
            self.expect_end()
            return result
        while True:
            key = self.ident("key")
            self.expect(":")
            if self.peek() == "[":
                self.pos += 1
                items = [self.ident("list item")]
                while self.peek() == ",":
                    self.pos += 1
                    items.append(self.ident("list item"))
                self.expect("]")
                result[key] = items
            else:
                result[key] = self.ident("value")
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("}")
            self.expect_end()
            return result

    def expect_end(self) -> None:
        if self.pos != len(self.raw):
            raise self.error("trailing characters after closing brace")


# --------------------------------------------------------------------------
# descriptor parsing


def parse_slice_request(text: str) -> SliceRequest:
    """Parse a descriptor document into a :class:`SliceRequest`.

    Strict: every field of the schema must be present with the right type,
    and any unknown field is rejected with its locator.
    """
    try:
        doc = yaml.safe_load(_COLON_QUOTE_RE.sub(r"\1: \2", text))
    except yaml.YAMLError as exc:
        raise DescriptorSyntaxError(f"malformed document: {exc}") from exc
    if not isinstance(doc, dict):
        raise DescriptorSyntaxError("document is not a mapping")
    return _parse_root(doc)


def _parse_root(doc: Mapping[str, Any]) -> SliceRequest:
    _check_keys(doc, ".", {"apiVersion", "kind", "metadata", "spec"})
    api = _str_field(doc, ".", "apiVersion")
    if api != API_VERSION:
        raise SchemaError(".apiVersion", f"unsupported apiVersion {api!r}")
    kind = _str_field(doc, ".", "kind")
    if kind != KIND:
        raise SchemaError(".kind", f"unsupported kind {kind!r}")
    metadata = _map_field(doc, ".", "metadata")
    _check_keys(metadata, ".metadata", {"name"})
    _str_field(metadata, ".metadata", "name")
    spec = _map_field(doc, ".", "spec")
    return _parse_spec(spec)


def _parse_spec(spec: Mapping[str, Any]) -> SliceRequest:
    loc = ".spec"
    _check_keys(
        spec, loc, {"name", "namespace", "deploymentstrategy", "credentials", "clusters"}
    )
    name = _str_field(spec, loc, "name")
    namespace = _str_field(spec, loc, "namespace")
    for key, value in (("name", name), ("namespace", namespace)):
        if not _NAME_RE.match(value):
            raise SchemaError(
                f"{loc}.{key}", "must be nonempty lowercase alphanumeric plus hyphen"
            )
    strategy = _enum_field(spec, loc, "deploymentstrategy", DeploymentStrategy)
    credentials = _parse_credentials(_map_field(spec, loc, "credentials"))
    raw_clusters = _list_field(spec, loc, "clusters")
    if not raw_clusters:
        raise SchemaError(f"{loc}.clusters", "empty list; at least one cluster required")
    clusters = tuple(
        _parse_cluster(c, f"{loc}.clusters[{i}]") for i, c in enumerate(raw_clusters)
    )
    return SliceRequest(
        name=name,
        namespace=namespace,
        deploymentstrategy=strategy,
        credentials=credentials,
        clusters=clusters,
    )


def _parse_credentials(node: Mapping[str, Any]) -> Credentials:
    loc = ".spec.credentials"
    _check_keys(node, loc, {"username", "password"})
    username = _str_field(node, loc, "username")
    password = _str_field(node, loc, "password")
    return Credentials(username=username, password_hash=password)


def _parse_cluster(node: Any, loc: str) -> ClusterSpec:
    if not isinstance(node, Mapping):
        raise SchemaError(loc, "cluster entry must be a mapping")
    _check_keys(
        node, loc, {"name", "deploymentdomain", "infrastructure", "kubernetes", "applications"},
        optional={"applications"},
    )
    name = _str_field(node, loc, "name")
    domain = _str_field(node, loc, "deploymentdomain")
    infra = _map_field(node, loc, "infrastructure")
    _check_keys(infra, f"{loc}.infrastructure", {"masters", "workers"})
    masters = _parse_nodegroup(
        _map_field(infra, f"{loc}.infrastructure", "masters"),
        f"{loc}.infrastructure.masters",
        "mastertype",
    )
    workers = _parse_nodegroup(
        _map_field(infra, f"{loc}.infrastructure", "workers"),
        f"{loc}.infrastructure.workers",
        "workertype",
    )
    k8s = _map_field(node, loc, "kubernetes")
    k8s_loc = f"{loc}.kubernetes"
    _check_keys(k8s, k8s_loc, {"kubernetestype", "networkfabric"}, optional={"kubernetesversion"})
    ktype = _enum_field(k8s, k8s_loc, "kubernetestype", KubernetesType)
    fabric = _enum_field(k8s, k8s_loc, "networkfabric", NetworkFabric)
    version = None
    if "kubernetesversion" in k8s:
        version = _str_field(k8s, k8s_loc, "kubernetesversion")
    apps: tuple[ApplicationSpec, ...] = ()
    if "applications" in node:
        raw_apps = _list_field(node, loc, "applications")
        apps = tuple(
            _parse_application(a, f"{loc}.applications[{i}]") for i, a in enumerate(raw_apps)
        )
    return ClusterSpec(
        name=name,
        deploymentdomain=domain,
        masters=masters,
        workers=workers,
        kubernetestype=ktype,
        networkfabric=fabric,
        kubernetesversion=version,
        applications=apps,
    )


def _parse_nodegroup(node: Mapping[str, Any], loc: str, type_key: str) -> NodeGroupSpec:
    _check_keys(node, loc, {"count", "osimage", type_key}, optional={"osaccount"})
    count = node["count"]
    if not isinstance(count, int) or isinstance(count, bool) or count < 0:
        raise SchemaError(f"{loc}.count", "must be a non-negative integer")
    osimage = _str_field(node, loc, "osimage")
    nodetype = _str_field(node, loc, type_key)
    osaccount = None
    if "osaccount" in node:
        osaccount = _str_field(node, loc, "osaccount")
    return NodeGroupSpec(count=count, osimage=osimage, nodetype=nodetype, osaccount=osaccount)


def _parse_application(node: Any, loc: str) -> ApplicationSpec:
    if not isinstance(node, Mapping):
        raise SchemaError(loc, "application entry must be a mapping")
    _check_keys(node, loc, {"name", "scope"}, optional={"parameters", "sharefile"})
    name = _str_field(node, loc, "name")
    scope = _enum_field(node, loc, "scope", AppScope)
    parameters = None
    if "parameters" in node:
        raw = _str_field(node, loc, "parameters")
        try:
            parameters = parse_parameters(raw)
        except ParameterSyntaxError as exc:
            raise SchemaError(f"{loc}.parameters", str(exc)) from exc
    sharefile = None
    if "sharefile" in node:
        sharefile = _str_field(node, loc, "sharefile")
        if "/" in sharefile or "\\" in sharefile:
            raise SchemaError(f"{loc}.sharefile", "filename must not contain path separators")
    app = ApplicationSpec(name=name, scope=scope, parameters=parameters, sharefile=sharefile)
    if app.is_producer and app.is_consumer:
        raise SchemaError(
            loc, "application cannot both produce (peers) and consume (sharefile)"
        )
    return app


def _check_keys(
    node: Mapping[str, Any], loc: str, allowed: set[str], optional: set[str] | None = None
) -> None:
    optional = optional or set()
    for key in node:
        if key not in allowed and key not in optional:
            raise SchemaError(f"{loc}.{key}", "unknown field")
    for key in allowed - optional:
        if key not in node:
            raise SchemaError(f"{loc}.{key}", "missing required field")


def _str_field(node: Mapping[str, Any], loc: str, key: str) -> str:
    if key not in node:
        raise SchemaError(f"{loc}.{key}", "missing required field")
    value = node[key]
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{loc}.{key}", "must be a nonempty string")
    return value


def _map_field(node: Mapping[str, Any], loc: str, key: str) -> Mapping[str, Any]:
    if key not in node:
        raise SchemaError(f"{loc}.{key}", "missing required field")
    value = node[key]
    if not isinstance(value, Mapping):
        raise SchemaError(f"{loc}.{key}", "must be a mapping")
    return value


def _list_field(node: Mapping[str, Any], loc: str, key: str) -> list:
    if key not in node:
        raise SchemaError(f"{loc}.{key}", "missing required field")
    value = node[key]
    if not isinstance(value, list):
        raise SchemaError(f"{loc}.{key}", "must be a list")
    return value


def _enum_field(node: Mapping[str, Any], loc: str, key: str, enum_cls: type) -> Any:
    raw = _str_field(node, loc, key)
    try:
        return enum_cls(raw)
    except ValueError:
        valid = ", ".join(e.value for e in enum_cls)
        raise SchemaError(f"{loc}.{key}", f"unknown value {raw!r}; one of: {valid}") from None


# --------------------------------------------------------------------------
# serialization (canonical round-trip form)


def serialize(req: SliceRequest) -> str:
    """Render a request back to a document that reparses structurally equal."""
    clusters = []
    for c in req.clusters:
        apps = []
        for a in c.applications:
            entry: dict[str, Any] = {"name": a.name, "scope": a.scope.value}
            if a.parameters is not None:
                entry["parameters"] = render_parameters(a.parameters)
            if a.sharefile is not None:
                entry["sharefile"] = a.sharefile
            apps.append(entry)
        k8s: dict[str, Any] = {
            "kubernetestype": c.kubernetestype.value,
            "networkfabric": c.networkfabric.value,
        }
        if c.kubernetesversion is not None:
            k8s["kubernetesversion"] = c.kubernetesversion
        entry = {
            "name": c.name,
            "deploymentdomain": c.deploymentdomain,
            "infrastructure": {
                "masters": _nodegroup_doc(c.masters, "mastertype"),
                "workers": _nodegroup_doc(c.workers, "workertype"),
            },
            "kubernetes": k8s,
        }
        if apps:
            entry["applications"] = apps
        clusters.append(entry)
    doc = {
        "apiVersion": API_VERSION,
        "kind": KIND,
        "metadata": {"name": req.name},
        "spec": {
            "name": req.name,
            "namespace": req.namespace,
            "deploymentstrategy": req.deploymentstrategy.value,
            "credentials": {
                "username": req.credentials.username,
                "password": req.credentials.password_hash,
            },
            "clusters": clusters,
        },
    }
    return yaml.safe_dump(doc, sort_keys=False)


def _nodegroup_doc(group: NodeGroupSpec, type_key: str) -> dict[str, Any]:
    doc: dict[str, Any] = {"count": group.count, "osimage": group.osimage}
    if group.osaccount is not None:
        doc["osaccount"] = group.osaccount
    doc[type_key] = group.nodetype
    return doc


# --------------------------------------------------------------------------
# validation


def validate(
    req: SliceRequest,
    matrix: CompatibilityMatrix | None = None,
    domains: Iterable[str] = (),
) -> ValidationReport:
    """Apply cross-field rules; findings carry the outcome, nothing raises.

    Error rules: unknown deployment domain, incompatible kubernetes/fabric
    pair, dangling peer reference, duplicate cluster name, sharefile with no
    producing peers-application anywhere in the slice, zero masters.
    """
    matrix = matrix or CompatibilityMatrix.default()
    domain_set = set(domains)
    report = ValidationReport()
    cluster_names = {c.name for c in req.clusters}
    any_producer = any(a.is_producer for c in req.clusters for a in c.applications)

    seen: set[str] = set()
    for i, cluster in enumerate(req.clusters):
        loc = f".spec.clusters[{i}]"
        if cluster.name in seen:
            report.add(Severity.ERROR, f"{loc}.name", f"duplicate cluster name {cluster.name!r}")
        seen.add(cluster.name)
        if cluster.deploymentdomain not in domain_set:
            report.add(
                Severity.ERROR,
                f"{loc}.deploymentdomain",
                f"unknown deployment domain {cluster.deploymentdomain!r}",
            )
        if not matrix.allows(cluster.kubernetestype, cluster.networkfabric):
            report.add(
                Severity.ERROR,
                f"{loc}.kubernetes",
                f"incompatible combination ({cluster.kubernetestype.value}, "
                f"{cluster.networkfabric.value})",
            )
        if cluster.masters.count == 0:
            report.add(
                Severity.ERROR,
                f"{loc}.infrastructure.masters.count",
                "cluster requires at least one master",
            )
        for j, app in enumerate(cluster.applications):
            app_loc = f"{loc}.applications[{j}]"
            for peer in app.peers:
                if peer not in cluster_names:
                    report.add(
                        Severity.ERROR,
                        f"{app_loc}.parameters",
                        f"peer {peer} not a cluster in this slice",
                    )
            if app.is_consumer and not any_producer:
                report.add(
                    Severity.ERROR,
                    f"{app_loc}.sharefile",
                    f"sharefile {app.sharefile!r} has no producing peers-application "
                    "anywhere in the slice",
                )

    password = req.credentials.password_hash
    if not (_SHA512_CRYPT_RE.match(password) or _HEX_DIGEST_RE.match(password)):
        report.add(
            Severity.WARNING,
            ".spec.credentials.password",
            "password is not a $6$ crypt digest or 128-hex digest",
        )
    return report
