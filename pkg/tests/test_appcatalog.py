"""Application drivers, share artifacts, and peering edges."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicectl.appcatalog import (
    SHARE_TIMEOUT,
    ArtifactConflict,
    ArtifactStore,
    DriverRole,
    PeeringTopology,
    ShareTimeout,
    ShareTokenMismatch,
    UnknownApplication,
    await_sharefile,
    deploy_application,
    driver,
    make_join_token,
    producer_artifacts,
    verify_share,
)
from slicectl.descriptor import ApplicationSpec, AppScope


def _app(name="liqo-master", parameters=None, sharefile=None):
    return ApplicationSpec(
        name=name, scope=AppScope.CLUSTER, parameters=parameters, sharefile=sharefile
    )


def _store(slice_id="swn/liqo"):
    return ArtifactStore(slice_id=slice_id)


# ---------------------------------------------------------------------------
# drivers


def test_known_drivers():
    assert driver("liqo-master").role is DriverRole.PEERING_MASTER
    assert driver("liqo-peer").role is DriverRole.PEERING_PEER


def test_unknown_name_falls_back_to_standalone():
    d = driver("my-experimental-app")
    assert d.role is DriverRole.STANDALONE
    assert d.duration > 0


def test_strict_lookup_raises():
    with pytest.raises(UnknownApplication):
        driver("my-experimental-app", strict=True)


# ---------------------------------------------------------------------------
# producer / consumer flows


def test_master_writes_one_artifact_per_peer():
    store = _store()
    app = _app(parameters={"peers": ["liqo1", "liqo2"]})
    outcome = deploy_application(app, "liqo", store, clock=0)
    assert outcome.status == "Deployed"
    assert outcome.artifacts_written == ("liqo1-peer-join.sh", "liqo2-peer-join.sh")
    assert {a.filename for a in store.listing()} == {
        "liqo1-peer-join.sh",
        "liqo2-peer-join.sh",
    }
    token = store.get("liqo1-peer-join.sh").token
    assert token == {
        "slice": "swn/liqo",
        "master": "liqo",
        "peer": "liqo1",
        "filename": "liqo1-peer-join.sh",
    }


def test_peer_consumes_artifact_and_records_edge():
    store = _store()
    deploy_application(_app(parameters={"peers": ["liqo1"]}), "liqo", store, clock=0)
    topology = PeeringTopology()
    outcome = deploy_application(
        _app("liqo-peer", sharefile="liqo1-peer-join.sh"), "liqo1", store, 10, topology
    )
    assert outcome.status == "Deployed"
    assert topology.sorted_edges() == [("liqo", "liqo1")]


def test_token_bound_to_other_peer_rejected():
    store = _store()
    deploy_application(_app(parameters={"peers": ["liqo1"]}), "liqo", store, clock=0)
    with pytest.raises(ShareTokenMismatch):
        deploy_application(
            _app("liqo-peer", sharefile="liqo1-peer-join.sh"), "liqo2", store, 10
        )


def test_standalone_app_deploys():
    outcome = deploy_application(_app("nginx"), "c0", _store(), clock=0)
    assert outcome.status == "Deployed"
    assert outcome.artifacts_written == ()
    assert outcome.edges_added == ()


def test_producer_artifact_tokens_bind_slice_and_peers():
    pairs = producer_artifacts(_app(parameters={"peers": ["a", "b"]}), "m", "ns/s")
    assert [f for f, _ in pairs] == ["a-peer-join.sh", "b-peer-join.sh"]
    for filename, content in pairs:
        assert verify_share(
            _store("ns/s").write(filename, content, ("ns/s", "m", "x"), 0),
            filename.removesuffix("-peer-join.sh"),
            "ns/s",
        ) == "m"


# ---------------------------------------------------------------------------
# await semantics


def test_await_artifact_already_present():
    store = _store()
    store.write("f.sh", b"{}", ("s", "c", "a"), at=0)
    result = await_sharefile(store, "f.sh", from_time=7)
    assert result.available_at == 7


def test_await_artifact_written_later_in_virtual_time():
    store = _store()
    store.write("f.sh", b"{}", ("s", "c", "a"), at=5)
    result = await_sharefile(store, "f.sh", from_time=0)
    assert result.available_at == 5


def test_await_times_out():
    with pytest.raises(ShareTimeout) as err:
        await_sharefile(_store(), "never.sh", from_time=0)
    assert err.value.fires_at == SHARE_TIMEOUT


# ---------------------------------------------------------------------------
# write-once store


def test_write_once_conflict():
    store = _store()
    store.write("f.sh", b"x", ("s", "c", "a"), at=0)
    with pytest.raises(ArtifactConflict):
        store.write("f.sh", b"y", ("s", "c2", "a2"), at=1)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.sampled_from(["a.sh", "b.sh", "c.sh"]),
        min_size=1,
        max_size=12,
    )
)
def test_write_once_under_adversarial_schedules(filenames):
    store = _store()
    written = set()
    for i, name in enumerate(filenames):
        if name in written:
            with pytest.raises(ArtifactConflict):
                store.write(name, b"x", ("s", "c", "a"), at=i)
        else:
            store.write(name, b"x", ("s", "c", "a"), at=i)
            written.add(name)
    assert {a.filename for a in store.listing()} == written


def test_artifact_conservation_matches_peer_lists():
    store = _store()
    apps = [
        _app("m1", parameters={"peers": ["p1", "p2"]}),
        _app("m2", parameters={"peers": ["p3"]}),
    ]
    for app in apps:
        deploy_application(app, "m", store, clock=0)
    total_peers = sum(len(a.peers) for a in apps)
    assert len(store.listing()) == total_peers


def test_token_round_trip():
    content = make_join_token("ns/s", "m", "p", "p-peer-join.sh")
    store = _store("ns/s")
    artifact = store.write("p-peer-join.sh", content, ("ns/s", "m", "app"), at=3)
    assert verify_share(artifact, "p", "ns/s") == "m"
    with pytest.raises(ShareTokenMismatch):
        verify_share(artifact, "other", "ns/s")
    with pytest.raises(ShareTokenMismatch):
        verify_share(artifact, "p", "ns/other")
