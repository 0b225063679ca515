"""Descriptor parsing, parameter grammar, and validation rules."""

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from slicectl import descriptor
from slicectl.descriptor import (
    ApplicationSpec,
    AppScope,
    CompatibilityMatrix,
    Credentials,
    ClusterSpec,
    DeploymentStrategy,
    DescriptorSyntaxError,
    KubernetesType,
    NetworkFabric,
    NodeGroupSpec,
    ParameterSyntaxError,
    SchemaError,
    Severity,
    SliceRequest,
    parse_parameters,
    parse_slice_request,
    render_parameters,
    serialize,
    validate,
)

DEMO_DOMAINS = {"swntestbed", "lefteris", "cloudlab"}


# ---------------------------------------------------------------------------
# golden document


def test_golden_document_parses(fig_text):
    req = parse_slice_request(fig_text)
    assert req.name == "liqo"
    assert req.namespace == "swn"
    assert req.deploymentstrategy is DeploymentStrategy.BALANCED
    assert req.credentials.username == "clusterslice"
    assert [c.name for c in req.clusters] == ["liqo", "liqo1", "liqo2"]
    assert [c.deploymentdomain for c in req.clusters] == [
        "swntestbed",
        "lefteris",
        "cloudlab",
    ]
    for c in req.clusters:
        assert c.masters.count == 1
        assert c.workers.count == 1
        assert c.kubernetestype is KubernetesType.VANILLA
        assert c.networkfabric is NetworkFabric.FLANNEL
    liqo, liqo1, liqo2 = req.clusters
    assert liqo.masters.nodetype == "vm"
    assert liqo.masters.osimage == "ubuntu-22-clean"
    assert liqo2.masters.nodetype == "pc3000"
    assert liqo2.masters.osimage == "UBUNTU22-64-STD"
    assert liqo2.masters.osaccount == "lmamatas"
    [master_app] = liqo.applications
    assert master_app.name == "liqo-master"
    assert master_app.scope is AppScope.CLUSTER
    assert master_app.parameters == {"peers": ["liqo1", "liqo2"]}
    assert master_app.is_producer and not master_app.is_consumer
    [peer1] = liqo1.applications
    assert peer1.sharefile == "liqo1-peer-join.sh"
    assert peer1.is_consumer
    [peer2] = liqo2.applications
    assert peer2.sharefile == "liqo2-peer-join.sh"


def test_empty_clusters_rejected(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["spec"]["clusters"] = []
    with pytest.raises(SchemaError) as err:
        parse_slice_request(yaml.safe_dump(doc))
    assert err.value.locator == ".spec.clusters"


def test_missing_workertype_locator(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    del doc["spec"]["clusters"][1]["infrastructure"]["workers"]["workertype"]
    with pytest.raises(SchemaError) as err:
        parse_slice_request(yaml.safe_dump(doc))
    assert err.value.locator == ".spec.clusters[1].infrastructure.workers.workertype"


def test_malformed_yaml():
    with pytest.raises(DescriptorSyntaxError):
        parse_slice_request("kind: [unclosed")


def test_document_must_be_mapping():
    with pytest.raises(DescriptorSyntaxError):
        parse_slice_request("- just\n- a\n- list\n")


def test_unknown_field_is_hard_error(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["spec"]["extra"] = True
    with pytest.raises(SchemaError) as err:
        parse_slice_request(yaml.safe_dump(doc))
    assert err.value.locator == ".spec.extra"


def test_wrong_kind_rejected(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["kind"] = "SliceRequest"
    with pytest.raises(SchemaError) as err:
        parse_slice_request(yaml.safe_dump(doc))
    assert err.value.locator == ".kind"


def test_unknown_enum_value(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["spec"]["clusters"][0]["kubernetes"]["kubernetestype"] = "k9s"
    with pytest.raises(SchemaError) as err:
        parse_slice_request(yaml.safe_dump(doc))
    assert err.value.locator == ".spec.clusters[0].kubernetes.kubernetestype"


def test_unknown_strategy_rejected(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["spec"]["deploymentstrategy"] = "spread"
    with pytest.raises(SchemaError):
        parse_slice_request(yaml.safe_dump(doc))


def test_producer_and_consumer_roles_exclusive(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["spec"]["clusters"][0]["applications"][0]["sharefile"] = "x.sh"
    with pytest.raises(SchemaError):
        parse_slice_request(yaml.safe_dump(doc))


def test_sharefile_path_separator_rejected(fig_text):
    doc = yaml.safe_load(_normalized(fig_text))
    doc["spec"]["clusters"][1]["applications"][0]["sharefile"] = "../escape.sh"
    with pytest.raises(SchemaError):
        parse_slice_request(yaml.safe_dump(doc))


def _normalized(text: str) -> str:
    # reuse the parser's colon-quote fix to get a loadable tree for mutation
    return descriptor._COLON_QUOTE_RE.sub(r"\1: \2", text)


# ---------------------------------------------------------------------------
# compact parameter strings


def test_parse_parameters_peers():
    assert parse_parameters("{peers:[liqo1,liqo2]}") == {"peers": ["liqo1", "liqo2"]}


def test_parse_parameters_empty():
    assert parse_parameters("{}") == {}


def test_parse_parameters_mixed():
    # hand-run of the grammar: scalars stay strings, brackets become lists
    assert parse_parameters("{a:1,b:[x]}") == {"a": "1", "b": ["x"]}


@pytest.mark.parametrize(
    "raw,offset",
    [
        ("peers:[a]}", 0),  # missing opening brace
        ("{peers[a]}", 6),  # missing colon
        ("{a:1,}", 5),  # trailing comma
        ("{a:[]}", 4),  # empty list not in grammar
        ("{a:1}x", 5),  # trailing junk
    ],
)
def test_parse_parameters_errors(raw, offset):
    with pytest.raises(ParameterSyntaxError) as err:
        parse_parameters(raw)
    assert err.value.offset == offset


_ident = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=8)
_value = st.one_of(_ident, st.lists(_ident, min_size=1, max_size=4))


@given(st.dictionaries(_ident, _value, max_size=5))
def test_parameters_round_trip(params):
    assert parse_parameters(render_parameters(params)) == params


# ---------------------------------------------------------------------------
# compatibility matrix


def test_default_matrix_shape():
    matrix = CompatibilityMatrix.default()
    assert len(matrix.allowed) == 15
    assert not matrix.allows(KubernetesType.MICROK8S, NetworkFabric.KUBEOVN)
    assert matrix.allows(KubernetesType.VANILLA, NetworkFabric.FLANNEL)
    assert matrix.allows(KubernetesType.MICROK8S, NetworkFabric.CALICO)


# ---------------------------------------------------------------------------
# validation


def test_golden_validates_clean(fig_text):
    req = parse_slice_request(fig_text)
    report = validate(req, CompatibilityMatrix.default(), DEMO_DOMAINS)
    assert report.ok
    assert report.errors == []


def test_unknown_domain_finding(fig_text):
    req = parse_slice_request(fig_text)
    report = validate(req, None, DEMO_DOMAINS - {"cloudlab"})
    assert not report.ok
    [finding] = report.errors
    assert finding.locator == ".spec.clusters[2].deploymentdomain"


def test_dangling_peer_finding(fig_text):
    req = _mutate_peers(parse_slice_request(fig_text), ["liqoX"])
    report = validate(req, None, DEMO_DOMAINS)
    [finding] = report.errors
    assert "peer liqoX not a cluster in this slice" in finding.message
    assert finding.locator == ".spec.clusters[0].applications[0].parameters"


def _mutate_peers(req: SliceRequest, peers: list) -> SliceRequest:
    from dataclasses import replace

    liqo = req.clusters[0]
    app = replace(liqo.applications[0], parameters={"peers": peers})
    return replace(req, clusters=(replace(liqo, applications=(app,)),) + req.clusters[1:])


def _replace_cluster(req: SliceRequest, index: int, cluster: ClusterSpec) -> SliceRequest:
    clusters = list(req.clusters)
    clusters[index] = cluster
    from dataclasses import replace

    return replace(req, clusters=tuple(clusters))


class TestRejectionCompleteness:
    """One mutation per rule yields exactly one error with the right locator."""

    def _report(self, req, domains=DEMO_DOMAINS):
        return validate(req, CompatibilityMatrix.default(), domains)

    def test_rule_unknown_domain(self, fig_text):
        req = parse_slice_request(fig_text)
        report = self._report(req, DEMO_DOMAINS - {"cloudlab"})
        [f] = report.errors
        assert f.locator == ".spec.clusters[2].deploymentdomain"

    def test_rule_incompatible_pair(self, fig_text):
        from dataclasses import replace

        req = parse_slice_request(fig_text)
        bad = replace(
            req.clusters[0],
            kubernetestype=KubernetesType.MICROK8S,
            networkfabric=NetworkFabric.KUBEOVN,
        )
        report = self._report(_replace_cluster(req, 0, bad))
        [f] = report.errors
        assert f.locator == ".spec.clusters[0].kubernetes"

    def test_rule_dangling_peer(self, fig_text):
        req = _mutate_peers(parse_slice_request(fig_text), ["liqoX", "liqo2"])
        report = self._report(req)
        [f] = report.errors
        assert f.locator == ".spec.clusters[0].applications[0].parameters"

    def test_rule_duplicate_name(self, fig_text):
        from dataclasses import replace

        req = parse_slice_request(fig_text)
        renamed = replace(req.clusters[0], name="liqo1")
        report = self._report(_replace_cluster(req, 0, renamed))
        [f] = report.errors
        assert f.locator == ".spec.clusters[1].name"
        assert "duplicate" in f.message

    def test_rule_orphan_sharefile(self, fig_text):
        from dataclasses import replace

        req = parse_slice_request(fig_text)
        # drop the producer's peers and liqo2's consumer: exactly one orphan left
        liqo = req.clusters[0]
        plain = replace(liqo.applications[0], parameters=None)
        req = _replace_cluster(req, 0, replace(liqo, applications=(plain,)))
        req = _replace_cluster(req, 2, replace(req.clusters[2], applications=()))
        report = self._report(req)
        [f] = report.errors
        assert f.locator == ".spec.clusters[1].applications[0].sharefile"

    def test_rule_zero_masters(self, fig_text):
        from dataclasses import replace

        req = parse_slice_request(fig_text)
        hollow = replace(
            req.clusters[0], masters=replace(req.clusters[0].masters, count=0)
        )
        report = self._report(_replace_cluster(req, 0, hollow))
        [f] = report.errors
        assert f.locator == ".spec.clusters[0].infrastructure.masters.count"


def test_placeholder_password_warns_not_errors(fig_text):
    req = parse_slice_request(fig_text)
    report = validate(req, None, DEMO_DOMAINS)
    assert report.ok
    assert any(f.severity is Severity.WARNING for f in report.findings)


def test_crypt_password_no_warning(fig_text):
    from dataclasses import replace

    req = parse_slice_request(fig_text)
    req = replace(
        req, credentials=Credentials("clusterslice", "$6$salt$" + "a" * 86)
    )
    assert validate(req, None, DEMO_DOMAINS).findings == []


# ---------------------------------------------------------------------------
# round-trip property

_name = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789", min_size=1, max_size=6)
_image = st.sampled_from(["ubuntu-22-clean", "UBUNTU22-64-STD", "debian-12"])
_nodetype = st.sampled_from(["vm", "pc3000", "rpi"])


@st.composite
def _nodegroup(draw):
    return NodeGroupSpec(
        count=draw(st.integers(0, 3)),
        osimage=draw(_image),
        nodetype=draw(_nodetype),
        osaccount=draw(st.one_of(st.none(), _name)),
    )


@st.composite
def _application(draw, index: int):
    kind = draw(st.sampled_from(["plain", "producer", "consumer"]))
    params = None
    sharefile = None
    if kind == "producer":
        params = {"peers": draw(st.lists(_name, min_size=1, max_size=3))}
    elif kind == "consumer":
        sharefile = draw(_name) + "-peer-join.sh"
    return ApplicationSpec(
        name=f"app{index}-" + draw(_name),
        scope=AppScope.CLUSTER,
        parameters=params,
        sharefile=sharefile,
    )


@st.composite
def _cluster(draw, index: int):
    n_apps = draw(st.integers(0, 2))
    return ClusterSpec(
        name=f"c{index}" + draw(_name),
        deploymentdomain=draw(_name),
        masters=draw(_nodegroup()),
        workers=draw(_nodegroup()),
        kubernetestype=draw(st.sampled_from(list(KubernetesType))),
        networkfabric=draw(st.sampled_from(list(NetworkFabric))),
        kubernetesversion=draw(st.one_of(st.none(), st.sampled_from(["1.28", "1.29.4"]))),
        applications=tuple(draw(_application(i)) for i in range(n_apps)),
    )


@st.composite
def _request(draw):
    n = draw(st.integers(1, 3))
    return SliceRequest(
        name=draw(_name),
        namespace=draw(_name),
        deploymentstrategy=draw(st.sampled_from(list(DeploymentStrategy))),
        credentials=Credentials(username=draw(_name), password_hash=draw(_name)),
        clusters=tuple(draw(_cluster(i)) for i in range(n)),
    )


@settings(max_examples=60, deadline=None)
@given(_request())
def test_serialize_parse_round_trip(req):
    assert parse_slice_request(serialize(req)) == req
