"""kubectl-style operator surface: apply, get, describe, delete, campaign.

Each invocation replays the persisted world from the state directory's event
log, executes one command, and leaves new records behind; ``--step`` advances
virtual time between invocations so the apply-then-poll flow works without a
daemon. Exit codes: 0 success, 1 user error, 2 campaign failure.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
from filelock import FileLock

from . import descriptor, infra
from .engine import (
    AlreadyExists,
    Engine,
    EngineError,
    NotFound,
    PlanningFailed,
    SliceStatus,
    ValidationFailed,
)
from .infra import FaultSpec
from .store import FileLog, MemoryLog

STATE_DIR_ENV = "SLICECTL_STATE_DIR"
LOG_FILENAME = "events.log"


def _state_dir(override: str | None) -> Path:
    path = override or os.environ.get(STATE_DIR_ENV) or ".slicectl"
    return Path(path)


class WorldHandle:
    """Locked, persisted engine for the duration of one command."""

    def __init__(self, state_dir: Path, seed: int):
        self.state_dir = state_dir
        self.seed = seed
        self.lock = None
        self.log: FileLog | None = None

    def __enter__(self) -> Engine:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.state_dir / "lock"))
        self.lock.acquire(timeout=10)
        path = self.state_dir / LOG_FILENAME
        if path.exists() and path.stat().st_size > 0:
            self.log, contents = FileLog.resume(path)
            engine = Engine.from_contents(contents, log=self.log)
        else:
            self.log = FileLog(path)
            engine = Engine(log=self.log, seed=self.seed)
        return engine

    def __exit__(self, exc_type, exc, tb):
        if self.log is not None:
            self.log.close()
        if self.lock is not None:
            self.lock.release()
        return False


def _format_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip()]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    return "\n".join(lines)


def _age(units: int) -> str:
    return f"{units}vu"


def _print_findings(report: descriptor.ValidationReport) -> None:
    for f in report.findings:
        click.echo(f"{f.severity.value}: {f.locator}: {f.message}", file=sys.stderr)


def _emit_status(st: SliceStatus, output: str) -> None:
    if output == "json":
        click.echo(json.dumps(st.to_dict(), sort_keys=True))
        return
    click.echo(f"slice {st.slice_id}: {st.phase} (t={st.clock})")
    rows = [
        [n.node_id, n.cluster, n.role, n.domain, n.host, n.state, str(n.attempts)]
        for n in st.nodes
    ]
    click.echo(
        _format_table(["NAME", "CLUSTER", "ROLE", "DOMAIN", "HOST", "STATE", "ATTEMPTS"], rows)
    )
    if st.peering:
        click.echo("peering: " + ", ".join(f"{a}<->{b}" for a, b in st.peering))


def _fail(message: str, code: int = 1) -> None:
    click.echo(f"error: {message}", file=sys.stderr)
    sys.exit(code)


@click.group()
@click.option("--state-dir", default=None, help=f"State directory (or ${STATE_DIR_ENV}).")
@click.option("--seed", default=42, show_default=True, help="Seed when creating a fresh world.")
@click.pass_context
def main(ctx: click.Context, state_dir: str | None, seed: int) -> None:
    """Declarative slice orchestration over simulated infrastructure."""
    ctx.ensure_object(dict)
    ctx.obj["state_dir"] = _state_dir(state_dir)
    ctx.obj["seed"] = seed


def _world(ctx: click.Context) -> WorldHandle:
    return WorldHandle(ctx.obj["state_dir"], ctx.obj["seed"])


# ---------------------------------------------------------------------------
# apply


@main.command("apply")
@click.option("-f", "--file", "path", required=True, type=click.Path(exists=True))
@click.option("--dry-run", is_flag=True, help="Validate and show the plan; change nothing.")
@click.option("--wait", is_flag=True, help="Run until the slice settles, then show status.")
@click.option("-o", "--output", type=click.Choice(["table", "json"]), default="table")
@click.pass_context
def cmd_apply(ctx: click.Context, path: str, dry_run: bool, wait: bool, output: str) -> None:
    """Apply a slice descriptor file."""
    text = Path(path).read_text()
    try:
        req = descriptor.parse_slice_request(text)
    except (descriptor.DescriptorSyntaxError, descriptor.SchemaError) as exc:
        _fail(str(exc))
    with _world(ctx) as engine:
        report = engine.validate_request(req)
        _print_findings(report)
        if not report.ok:
            sys.exit(1)
        if dry_run:
            _dry_run(engine, req, output)
            return
        try:
            sid = engine.apply(text)
        except (AlreadyExists, ValidationFailed, PlanningFailed) as exc:
            _fail(str(exc))
        click.echo(f"slice {sid} created")
        if wait:
            engine.run_until_settled()
            _emit_status(engine.status(sid), output)


def _dry_run(engine: Engine, req: descriptor.SliceRequest, output: str) -> None:
    try:
        placements, graph, path, durations = engine.plan_preview(req)
    except PlanningFailed as exc:
        _fail(str(exc))
    except Exception as exc:  # planner errors surface as user errors here
        _fail(str(exc))
    order = graph.topological_order()
    if output == "json":
        click.echo(
            json.dumps(
                {
                    "placements": [vars(p) | {"role": p.role.value} for p in placements.entries],
                    "tasks": [
                        {"task": t, "kind": graph.task(t).kind.value} for t in order
                    ],
                    "critical_path": path,
                    "counts": graph.counts(),
                },
                sort_keys=True,
                default=str,
            )
        )
        return
    click.echo("Placements:")
    rows = [
        [p.node_id, p.cluster, p.role.value, p.domain, p.host_id, p.nodetype, p.osimage]
        for p in placements.entries
    ]
    click.echo(
        _format_table(["NODE", "CLUSTER", "ROLE", "DOMAIN", "HOST", "TYPE", "OSIMAGE"], rows)
    )
    click.echo(f"\nTasks ({len(graph.tasks)}):")
    task_rows = [[t, graph.task(t).kind.value, graph.task(t).cluster] for t in order]
    click.echo(_format_table(["TASK", "KIND", "CLUSTER"], task_rows))
    total = sum(durations[t] for t in path)
    click.echo(f"\nCritical path (expected {total:g} virtual units):")
    for t in path:
        click.echo(f"  {t}")


# ---------------------------------------------------------------------------
# get


@main.command("get")
@click.argument("kind", type=click.Choice(["slices", "clusters", "resources"]))
@click.option("-n", "--namespace", default=None)
@click.option("-o", "--output", type=click.Choice(["table", "json"]), default="table")
@click.option("--step", default=0, help="Advance virtual time by this many units first.")
@click.pass_context
def cmd_get(ctx: click.Context, kind: str, namespace: str | None, output: str, step: int) -> None:
    """List slices, clusters, or compute resources."""
    with _world(ctx) as engine:
        if step:
            engine.advance_to(engine.clock + step)
        statuses = [
            st for st in engine.list_slices() if namespace is None or st.namespace == namespace
        ]
        if output == "json":
            click.echo(json.dumps([st.to_dict() for st in statuses], sort_keys=True))
            return
        if kind == "slices":
            rows = [
                [
                    st.slice_id,
                    st.phase,
                    str(len(st.clusters)),
                    str(len(st.nodes)),
                    _age(st.clock - st.created_at),
                ]
                for st in statuses
            ]
            click.echo(_format_table(["NAME", "PHASE", "CLUSTERS", "NODES", "AGE"], rows))
        elif kind == "clusters":
            rows = []
            for st in statuses:
                for c in st.clusters:
                    apps = ",".join(f"{a}={s}" for a, s in c["apps"].items()) or "-"
                    rows.append([c["name"], st.slice_id, c["domain"], c["phase"], apps])
            click.echo(_format_table(["NAME", "SLICE", "DOMAIN", "PHASE", "APPS"], rows))
        else:
            rows = []
            for st in statuses:
                for n in st.nodes:
                    rows.append(
                        [
                            n.node_id,
                            st.slice_id,
                            n.cluster,
                            n.role,
                            n.domain,
                            n.host,
                            n.state,
                            str(n.attempts),
                            _age(n.age),
                        ]
                    )
            click.echo(
                _format_table(
                    [
                        "NAME",
                        "SLICE",
                        "CLUSTER",
                        "ROLE",
                        "DOMAIN",
                        "HOST",
                        "STATE",
                        "ATTEMPTS",
                        "AGE",
                    ],
                    rows,
                )
            )


# ---------------------------------------------------------------------------
# describe / delete


@main.command("describe")
@click.argument("slice_id")
@click.option("-o", "--output", type=click.Choice(["table", "json"]), default="table")
@click.option("--step", default=0, help="Advance virtual time by this many units first.")
@click.pass_context
def cmd_describe(ctx: click.Context, slice_id: str, output: str, step: int) -> None:
    """Show one slice in detail, including recent events."""
    with _world(ctx) as engine:
        if step:
            engine.advance_to(engine.clock + step)
        try:
            st = engine.status(slice_id)
        except NotFound:
            _fail(f"slice {slice_id!r} not found")
        events = [r for r in engine.log.records() if r.subject.slice == slice_id][-20:]
        if output == "json":
            doc = st.to_dict()
            doc["events"] = [
                {"seq": r.seq, "at": r.at, "kind": r.kind, "subject": r.subject.to_dict()}
                for r in events
            ]
            click.echo(json.dumps(doc, sort_keys=True))
            return
        s = engine.slices[slice_id]
        click.echo(f"Slice:     {st.slice_id}")
        click.echo(f"Phase:     {st.phase}")
        click.echo(f"Strategy:  {s.request.deploymentstrategy.value}")
        click.echo(f"Clock:     {st.clock} (age {_age(st.clock - st.created_at)})")
        click.echo("\nNodes:")
        rows = [
            [n.node_id, n.cluster, n.role, n.domain, n.host, n.state, str(n.attempts)]
            for n in st.nodes
        ]
        click.echo(
            _format_table(["NAME", "CLUSTER", "ROLE", "DOMAIN", "HOST", "STATE", "ATTEMPTS"], rows)
        )
        click.echo("\nApplications:")
        for c in st.clusters:
            for app, status in c["apps"].items():
                click.echo(f"  {c['name']}/{app}: {status}")
        click.echo("\nPeering:")
        if st.peering:
            for a, b in st.peering:
                click.echo(f"  {a} <-> {b}")
        else:
            click.echo("  (none)")
        click.echo("\nArtifacts:")
        if st.artifacts:
            for a in st.artifacts:
                producer = "/".join(a["producer"])
                click.echo(f"  {a['filename']} -> {producer}, t={a['created_at']}")
        else:
            click.echo("  (none)")
        click.echo("\nRecent events:")
        for r in events:
            subject = r.subject.node or r.subject.app or r.subject.cluster or ""
            click.echo(f"  #{r.seq} t={r.at} {r.kind} {subject}")


@main.command("delete")
@click.argument("slice_id")
@click.pass_context
def cmd_delete(ctx: click.Context, slice_id: str) -> None:
    """Delete a slice, releasing all its resources."""
    with _world(ctx) as engine:
        try:
            engine.delete(slice_id)
        except NotFound:
            _fail(f"slice {slice_id!r} not found")
        click.echo(f"slice {slice_id} deleted")


# ---------------------------------------------------------------------------
# domains


@main.group("domains")
def cmd_domains() -> None:
    """Deployment-domain registry commands."""


@cmd_domains.command("register")
@click.option("-f", "--file", "path", required=True, type=click.Path(exists=True))
@click.pass_context
def cmd_domains_register(ctx: click.Context, path: str) -> None:
    """Register every domain in an inventory registry file."""
    try:
        inventories = infra.load_inventories(Path(path).read_text())
    except infra.InvalidInventory as exc:
        _fail(str(exc))
    with _world(ctx) as engine:
        for inv in inventories:
            try:
                engine.register_domain(inv)
            except infra.InfraError as exc:
                _fail(str(exc))
            click.echo(f"domain {inv.domain} registered ({inv.kind.value}, {len(inv.hosts)} hosts)")


# ---------------------------------------------------------------------------
# campaign


def parse_fault_profile(profile: str) -> list[FaultSpec]:
    """Parse ``target:domain:p=0.1`` / ``target:domain:nth=2`` fault specs."""
    specs = []
    for part in profile.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ValueError(f"bad fault spec {part!r}; want target:domain:p=X or nth=N")
        target, domain, mode = fields
        if mode.startswith("p="):
            specs.append(FaultSpec(target=target, domain=domain, probability=float(mode[2:])))
        elif mode.startswith("nth="):
            specs.append(FaultSpec(target=target, domain=domain, fire_on_nth=int(mode[4:])))
        else:
            raise ValueError(f"bad fault mode {mode!r}")
    return specs


def synthesize_domains(req: descriptor.SliceRequest) -> list[infra.DomainInventory]:
    """Build cloud inventories sized for one deployment of the request."""
    needs: dict[str, dict[str, object]] = {}
    for c in req.clusters:
        entry = needs.setdefault(
            c.deploymentdomain, {"nodes": 0, "types": set(), "images": set()}
        )
        entry["nodes"] += c.masters.count + c.workers.count
        entry["types"].update({c.masters.nodetype, c.workers.nodetype})
        entry["images"].update({c.masters.osimage, c.workers.osimage})
    inventories = []
    for domain, entry in needs.items():
        per_host = max(2, (entry["nodes"] + 1) // 2)
        hosts = [
            infra.HostRecord(
                host_id=f"{domain}-h{i}",
                capacity_slots=per_host,
                supported_nodetypes=frozenset(entry["types"]),
                available_osimages=frozenset(entry["images"]),
            )
            for i in (1, 2)
        ]
        inventories.append(
            infra.DomainInventory(domain=domain, kind=infra.DomainKind.CLOUD, hosts=hosts)
        )
    return inventories


@main.command("campaign")
@click.option("-f", "--file", "path", required=True, type=click.Path(exists=True))
@click.option("--count", required=True, type=int)
@click.option("--seed", "campaign_seed", default=42, show_default=True)
@click.option("--faults", default=None, help="Fault profile, e.g. allocate:cloudlab:p=0.1")
@click.option("--domains", "domains_path", default=None, type=click.Path(exists=True))
@click.option("--auto-domains", is_flag=True, help="Synthesize inventories from the fixture.")
@click.pass_context
def cmd_campaign(
    ctx: click.Context,
    path: str,
    count: int,
    campaign_seed: int,
    faults: str | None,
    domains_path: str | None,
    auto_domains: bool,
) -> None:
    """Run repeated apply/settle/delete cycles in a throwaway world."""
    if count < 0:
        _fail("--count must be non-negative")
    text = Path(path).read_text()
    try:
        req = descriptor.parse_slice_request(text)
    except (descriptor.DescriptorSyntaxError, descriptor.SchemaError) as exc:
        _fail(str(exc))
    engine = Engine(log=MemoryLog(), seed=campaign_seed)
    if auto_domains:
        inventories = synthesize_domains(req)
    elif domains_path:
        inventories = infra.load_inventories(Path(domains_path).read_text())
    else:
        _fail("campaign needs --domains FILE or --auto-domains")
    for inv in inventories:
        engine.register_domain(inv)
    if faults:
        try:
            for spec in parse_fault_profile(faults):
                engine.register_fault(spec)
        except ValueError as exc:
            _fail(str(exc))

    totals = run_campaign(engine, text, count)
    click.echo(f"cycles:              {totals['cycles']}")
    click.echo(f"clusters deployed:   {totals['clusters']}")
    click.echo(f"nodes deployed:      {totals['nodes']}")
    click.echo(f"failures:            {totals['failures']}")
    click.echo(f"retries:             {totals['retries']}")
    click.echo(f"mean virtual time:   {totals['mean_virtual_time']:.1f}")
    if totals["failures"] and not faults:
        sys.exit(2)


def run_campaign(engine: Engine, document: str, count: int) -> dict[str, float]:
    """Drive ``count`` apply -> settle -> delete cycles; returns the totals."""
    clusters = nodes = failures = 0
    durations: list[int] = []
    for _ in range(count):
        t0 = engine.clock
        sid = engine.apply(document)
        engine.run_until_settled()
        st = engine.status(sid)
        clusters += len(st.clusters)
        nodes += len(st.nodes)
        failures += sum(1 for c in st.clusters if c["phase"] == "Failed")
        durations.append(engine.clock - t0)
        engine.delete(sid)
    retries = sum(1 for r in engine.log.records() if r.kind == "retry-granted")
    return {
        "cycles": count,
        "clusters": clusters,
        "nodes": nodes,
        "failures": failures,
        "retries": retries,
        "mean_virtual_time": (sum(durations) / len(durations)) if durations else 0.0,
    }


if __name__ == "__main__":
    main()
