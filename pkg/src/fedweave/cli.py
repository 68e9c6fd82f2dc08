"""Command line front end.

State lives in a workspace directory (``--workspace`` / ``-w``, or the
``FEDWEAVE_WORKSPACE`` environment variable, default ``.``):

    charms/*.yaml     charm definitions; together they form the store
    inventory.yaml    the local provider inventory
    model.yaml        deployment checkpoint + which provider it points at
    federation.yaml   regions, catalog, identity mappings
    projects.yaml     project tree with quotas and usage

A lock marker (``.fedweave-lock``) guards each invocation; a second
concurrent invocation fails rather than interleaving writes.

Exit codes: 0 success, 1 operational error (printed as ``module:
message`` on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import yaml

from . import builtin
from .bundle import parse_bundle, parse_placement, validate_bundle
from .charms import CharmStore, load_charm
from .engine import (
    DEFAULT_BUDGET,
    DEFAULT_SEED,
    Model,
    add_relation,
    add_unit,
    checkpoint,
    deploy_bundle,
    load_checkpoint,
    remove_unit,
    run_to_convergence,
    set_config,
    state_hash,
    status_snapshot,
)
from .errors import FedweaveError
from .federation import Federation
from .plan import compile_plan, execute_plan, export_dot, parse_plan
from .provider import Inventory
from .quota import COMPONENTS, ProjectTree, QuotaSet

LOCK_FILE = ".fedweave-lock"


class CliError(FedweaveError):
    module = "cli"


# ---------------------------------------------------------------------------
# Workspace


class Workspace:
    """Loads and saves the state files of one workspace directory."""

    def __init__(self, root: Path) -> None:
        self.root = root
        self.inventory_path = root / "inventory.yaml"
        self.model_path = root / "model.yaml"
        self.federation_path = root / "federation.yaml"
        self.projects_path = root / "projects.yaml"
        self.charms_dir = root / "charms"

    def require_init(self) -> None:
        if not self.inventory_path.exists():
            raise CliError(
                f"{self.root} is not an initialised workspace (run `fedweave init`)"
            )

    def store(self) -> CharmStore:
        store = CharmStore()
        if self.charms_dir.is_dir():
            for path in sorted(self.charms_dir.glob("*.yaml")):
                spec, owner = load_charm(path.read_text())
                store.register_charm(spec, owner=owner)
        return store

    def inventory(self) -> Inventory:
        if self.inventory_path.exists():
            return Inventory.load_yaml(self.inventory_path.read_text())
        return Inventory()

    def save_inventory(self, inventory: Inventory) -> None:
        self.inventory_path.write_text(inventory.dump_yaml())

    def federation(self) -> Federation:
        if self.federation_path.exists():
            return Federation.load_yaml(self.federation_path.read_text())
        return Federation()

    def save_federation(self, federation: Federation) -> None:
        self.federation_path.write_text(federation.dump_yaml())

    def projects(self) -> ProjectTree:
        if self.projects_path.exists():
            return ProjectTree.load_yaml(self.projects_path.read_text())
        return ProjectTree()

    def save_projects(self, tree: ProjectTree) -> None:
        self.projects_path.write_text(tree.dump_yaml())

    # -- the model and the provider behind it ---------------------------

    def load_model(self) -> tuple[Model, str, Federation | None]:
        if not self.model_path.exists():
            raise CliError("no model in this workspace (deploy a bundle first)")
        doc = yaml.safe_load(self.model_path.read_text())
        provider_ref = doc.get("provider_ref", "local")
        federation = None
        if provider_ref == "local":
            inventory = self.inventory()
        else:
            federation = self.federation()
            region = federation.regions.get(provider_ref)
            if region is None:
                raise CliError(f"model references unknown region {provider_ref!r}")
            inventory = region.inventory
        body = doc.get("model") or {}
        tree = self.projects() if body.get("project") else None
        model = load_checkpoint(body, self.store(), inventory=inventory, quota_tree=tree)
        return model, provider_ref, federation

    def save_model(
        self, model: Model, provider_ref: str, federation: Federation | None = None
    ) -> None:
        doc = {
            "provider_ref": provider_ref,
            "model": checkpoint(model, include_inventory=False),
        }
        self.model_path.write_text(yaml.safe_dump(doc, sort_keys=False))
        if provider_ref == "local":
            self.save_inventory(model.inventory)
        else:
            assert federation is not None
            self.save_federation(federation)
        if model.project is not None and model.quota_tree is not None:
            self.save_projects(model.quota_tree)


@contextlib.contextmanager
def _locked(root: Path):
    lock = root / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"workspace {root} is locked by another invocation "
            f"(remove {LOCK_FILE} if stale)"
        ) from None
    except FileNotFoundError:
        raise CliError(f"workspace directory {root} does not exist") from None
    os.close(fd)
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


# ---------------------------------------------------------------------------
# Small output helpers


def _table(rows: list[tuple]) -> str:
    cells = [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
    return "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in cells
    )


def _parse_pairs(pairs: list[str], what: str) -> dict[str, str]:
    parsed = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise CliError(f"malformed {what} {pair!r} (expected key=value)")
        parsed[key] = value
    return parsed


def _quota_amounts(pairs: list[str]) -> QuotaSet:
    raw = _parse_pairs(pairs, "amount")
    unknown = sorted(set(raw) - set(COMPONENTS))
    if unknown:
        raise CliError(f"unknown quota components: {', '.join(unknown)}")
    try:
        return QuotaSet(**{key: int(value) for key, value in raw.items()})
    except ValueError as exc:
        raise CliError(f"malformed quota amount: {exc}") from None


def _read_bundle(path_text: str):
    path = Path(path_text)
    if not path.exists():
        raise CliError(f"no such bundle file: {path}")
    return parse_bundle(path.read_text())


# ---------------------------------------------------------------------------
# Commands


def cmd_init(ws: Workspace, args) -> int:
    if ws.inventory_path.exists():
        raise CliError(f"workspace {ws.root} is already initialised")
    ws.charms_dir.mkdir(parents=True, exist_ok=True)
    ws.save_inventory(Inventory())
    if args.demo:
        for text, name in (
            (builtin.MOODLE_CHARM, "moodle"),
            (builtin.POSTGRESQL_CHARM, "postgresql"),
            (builtin.HAPROXY_CHARM, "haproxy"),
        ):
            (ws.charms_dir / f"{name}.yaml").write_text(text)
        (ws.root / "moodle-bundle.yaml").write_text(builtin.MOODLE_BUNDLE)
        (ws.root / "scaled-bundle.yaml").write_text(builtin.SCALED_BUNDLE)
        print(f"initialised {ws.root} with demo charms and bundles")
    else:
        print(f"initialised {ws.root}")
    return 0


def cmd_validate(ws: Workspace, args) -> int:
    bundle = _read_bundle(args.bundle)
    diagnostics = validate_bundle(bundle, ws.store())
    for diag in diagnostics:
        print(diag.render())
    if any(d.severity == "error" for d in diagnostics):
        return 1
    print("bundle is deployable")
    return 0


def _provider_for(ws: Workspace, region_name: str | None):
    """The inventory to place on, its reference marker, and (for regions)
    the federation object that owns it."""
    if region_name is None:
        return ws.inventory(), "local", None
    federation = ws.federation()
    region = federation.production_region(region_name)
    return region.inventory, region_name, federation


def cmd_deploy(ws: Workspace, args) -> int:
    bundle = _read_bundle(args.bundle)
    if ws.model_path.exists():
        model, provider_ref, federation = ws.load_model()
        if args.region is not None and args.region != provider_ref:
            raise CliError(
                f"model already placed on {provider_ref!r}; cannot deploy to {args.region!r}"
            )
        if args.project is not None and args.project != model.project:
            raise CliError(
                f"model already charges project {model.project!r}; "
                f"cannot switch to {args.project!r}"
            )
    else:
        inventory, provider_ref, federation = _provider_for(ws, args.region)
        tree = ws.projects() if args.project else None
        project_id = None
        if args.project:
            project_id = tree.find(args.project).id
        model = Model(
            ws.store(),
            inventory,
            project=project_id,
            quota_tree=tree,
            strict_conflicts=not args.lax_conflicts,
        )
    result = deploy_bundle(model, bundle)
    for bundle_id, provider_id in sorted(result.machine_map.items(), key=lambda i: int(i[0])):
        print(f"machine {bundle_id} -> {provider_id}")
    for unit_id in result.units:
        print(f"unit {unit_id} on {model.units[unit_id].machine}")
    for relation_id in result.relations:
        print(f"relation {relation_id}")
    if not args.no_converge:
        outcome = run_to_convergence(model, budget=args.budget, rng_seed=args.seed)
        print(f"{outcome.outcome} after {outcome.events_processed} events")
    ws.save_model(model, provider_ref, federation)
    print(f"state hash: {state_hash(model)}")
    return 0


def cmd_add_unit(ws: Workspace, args) -> int:
    model, provider_ref, federation = ws.load_model()
    placement = parse_placement(args.to) if args.to is not None else None
    new_ids = add_unit(model, args.application, count=args.num_units, placement=placement)
    for unit_id in new_ids:
        print(f"unit {unit_id} on {model.units[unit_id].machine}")
    if not args.no_converge:
        outcome = run_to_convergence(model, budget=args.budget, rng_seed=args.seed)
        print(f"{outcome.outcome} after {outcome.events_processed} events")
    ws.save_model(model, provider_ref, federation)
    print(f"state hash: {state_hash(model)}")
    return 0


def cmd_remove_unit(ws: Workspace, args) -> int:
    model, provider_ref, federation = ws.load_model()
    remove_unit(model, args.unit)
    if not args.no_converge:
        outcome = run_to_convergence(model, budget=args.budget, rng_seed=args.seed)
        print(f"{outcome.outcome} after {outcome.events_processed} events")
    ws.save_model(model, provider_ref, federation)
    print(f"state hash: {state_hash(model)}")
    return 0


def cmd_config(ws: Workspace, args) -> int:
    model, provider_ref, federation = ws.load_model()
    changed = set_config(model, args.application, _parse_pairs(args.options, "option"))
    if changed:
        print(f"changed: {', '.join(changed)}")
    else:
        print("no changes")
    if not args.no_converge:
        outcome = run_to_convergence(model, budget=args.budget, rng_seed=args.seed)
        print(f"{outcome.outcome} after {outcome.events_processed} events")
    ws.save_model(model, provider_ref, federation)
    print(f"state hash: {state_hash(model)}")
    return 0


def cmd_add_relation(ws: Workspace, args) -> int:
    model, provider_ref, federation = ws.load_model()
    relation = add_relation(model, args.left, args.right)
    print(f"relation {relation.id} ({relation.interface})")
    if not args.no_converge:
        outcome = run_to_convergence(model, budget=args.budget, rng_seed=args.seed)
        print(f"{outcome.outcome} after {outcome.events_processed} events")
    ws.save_model(model, provider_ref, federation)
    print(f"state hash: {state_hash(model)}")
    return 0


def cmd_converge(ws: Workspace, args) -> int:
    model, provider_ref, federation = ws.load_model()
    outcome = run_to_convergence(model, budget=args.budget, rng_seed=args.seed)
    print(f"{outcome.outcome} after {outcome.events_processed} events")
    ws.save_model(model, provider_ref, federation)
    print(f"state hash: {state_hash(model)}")
    return 0 if outcome.converged else 1


def cmd_status(ws: Workspace, args) -> int:
    model, _, _ = ws.load_model()
    snapshot = status_snapshot(model)
    if args.format == "json":
        print(json.dumps(snapshot, indent=2, sort_keys=True))
        return 0
    print(f"state hash  {snapshot['state_hash']}")
    print(f"generation  {snapshot['generation']}")
    print(f"pending     {snapshot['pending_events']}")
    if snapshot["applications"]:
        rows = [("APP", "CHARM", "SERIES", "EXPOSED", "UNITS")]
        for name, app in snapshot["applications"].items():
            rows.append(
                (name, app["charm"], app["series"],
                 "yes" if app["exposed"] else "no", len(app["units"]))
            )
        print()
        print(_table(rows))
    if snapshot["units"]:
        rows = [("UNIT", "MACHINE", "STATUS", "LEADER", "PORTS", "STATES")]
        for unit_id, unit in snapshot["units"].items():
            rows.append(
                (
                    unit_id,
                    unit["machine"],
                    unit["status"] + (f" ({unit['message']})" if unit["message"] else ""),
                    "*" if unit["leader"] else "",
                    ",".join(str(p) for p in unit["open_ports"]),
                    ",".join(unit["states"]),
                )
            )
        print()
        print(_table(rows))
    if snapshot["machines"]:
        rows = [("MACHINE", "STATE", "SERIES", "ARCH", "CORES", "MEM", "DISK")]
        for machine_id, rec in snapshot["machines"].items():
            rows.append(
                (machine_id, rec["state"], rec["series"], rec["arch"],
                 rec["cores"], rec["mem"], rec["disk"])
            )
        print()
        print(_table(rows))
    if snapshot["relations"]:
        rows = [("RELATION", "INTERFACE")]
        for relation_id, rel in snapshot["relations"].items():
            rows.append((relation_id, rel["interface"]))
        print()
        print(_table(rows))
    return 0


# -- plan ------------------------------------------------------------------


def cmd_plan_compile(ws: Workspace, args) -> int:
    bundle = _read_bundle(args.bundle)
    plan = compile_plan(bundle, ws.store())
    text = plan.render()
    if args.output:
        Path(args.output).write_text(text)
        print(f"{len(plan.steps)} steps -> {args.output}")
    else:
        print(text, end="")
    return 0


def cmd_plan_execute(ws: Workspace, args) -> int:
    if ws.model_path.exists():
        raise CliError("a model already exists in this workspace")
    path = Path(args.plan)
    if not path.exists():
        raise CliError(f"no such plan file: {path}")
    plan = parse_plan(path.read_text())
    tree = ws.projects() if args.project else None
    project_id = tree.find(args.project).id if args.project else None
    model = execute_plan(
        plan,
        ws.inventory(),
        ws.store(),
        project=project_id,
        quota_tree=tree,
        budget=args.budget,
        rng_seed=args.seed,
    )
    ws.save_model(model, "local")
    print(f"executed {len(plan.steps)} steps")
    print(f"state hash: {state_hash(model)}")
    return 0


def cmd_plan_dot(ws: Workspace, args) -> int:
    if args.bundle:
        bundle = _read_bundle(args.bundle)
        print(export_dot(compile_plan(bundle, ws.store())), end="")
    else:
        model, _, _ = ws.load_model()
        print(export_dot(model), end="")
    return 0


# -- machines ---------------------------------------------------------------


def cmd_machine_add_zone(ws: Workspace, args) -> int:
    inventory = ws.inventory()
    inventory.add_zone(args.region, args.az)
    ws.save_inventory(inventory)
    print(f"zone {args.region}/{args.az}")
    return 0


def _machine_spec(args) -> dict:
    return {
        "arch": args.arch,
        "cores": args.cores,
        "mem": args.mem,
        "disk": args.disk,
        "series": args.series,
        "properties": set(args.tags.split(",")) if args.tags else set(),
    }


def cmd_machine_enlist(ws: Workspace, args) -> int:
    region, sep, az = args.zone.partition("/")
    if not sep:
        raise CliError(f"malformed zone {args.zone!r} (expected region/az)")
    inventory = ws.inventory()
    spec = _machine_spec(args)
    for _ in range(args.count):
        record = inventory.enlist(region=region, az=az, **spec)
        print(f"machine {record.id} ({record.state})")
    ws.save_inventory(inventory)
    return 0


def cmd_machine_list(ws: Workspace, args) -> int:
    inventory = ws.inventory()
    if args.format == "json":
        print(json.dumps(inventory.dump(), indent=2, sort_keys=True))
        return 0
    if not inventory.machines:
        print("no machines")
        return 0
    rows = [("MACHINE", "STATE", "ZONE", "ARCH", "CORES", "MEM", "DISK", "SERIES", "TAGS")]
    from .provider import machine_sort_key

    for machine_id in sorted(inventory.machines, key=machine_sort_key):
        rec = inventory.machines[machine_id]
        rows.append(
            (rec.id, rec.state, f"{rec.region}/{rec.az}", rec.arch,
             rec.cores, rec.mem, rec.disk, rec.series, ",".join(sorted(rec.properties)))
        )
    print(_table(rows))
    return 0


def cmd_machine_release(ws: Workspace, args) -> int:
    inventory = ws.inventory()
    inventory.release(args.machine)
    ws.save_inventory(inventory)
    print(f"released {args.machine}")
    return 0


# -- federation ---------------------------------------------------------------


def cmd_region_register(ws: Workspace, args) -> int:
    federation = ws.federation()
    region = federation.register_region(args.name, _parse_pairs(args.endpoints, "endpoint"))
    ws.save_federation(federation)
    print(f"region {region.name} registered ({region.status})")
    return 0


def cmd_region_validate(ws: Workspace, args) -> int:
    federation = ws.federation()
    report = federation.validate_region(args.name)
    ws.save_federation(federation)
    print(report.render())
    return 0 if report.promoted else 1


def cmd_region_reject(ws: Workspace, args) -> int:
    federation = ws.federation()
    federation.reject_region(args.name)
    ws.save_federation(federation)
    print(f"region {args.name} rejected")
    return 0


def cmd_region_enlist(ws: Workspace, args) -> int:
    federation = ws.federation()
    spec = _machine_spec(args)
    for _ in range(args.count):
        machine_id = federation.enlist_machine(args.name, az=args.az, **spec)
        print(f"machine {machine_id} in {args.name}/{args.az}")
    ws.save_federation(federation)
    return 0


def cmd_region_list(ws: Workspace, args) -> int:
    federation = ws.federation()
    if args.format == "json":
        print(json.dumps(federation.dump(), indent=2, sort_keys=True))
        return 0
    if not federation.regions:
        print("no regions")
        return 0
    rows = [("REGION", "STATUS", "MACHINES", "SERVICES")]
    for name in sorted(federation.regions):
        region = federation.regions[name]
        rows.append(
            (name, region.status, len(region.inventory.machines),
             ",".join(sorted(region.endpoints)))
        )
    print(_table(rows))
    return 0


def cmd_region_sync(ws: Workspace, args) -> int:
    federation = ws.federation()
    generation = federation.sync_catalog(args.name)
    ws.save_federation(federation)
    print(f"replica of {args.name} at generation {generation}")
    return 0


def cmd_region_catalog(ws: Workspace, args) -> int:
    federation = ws.federation()
    if args.name:
        entries, generation = federation.replica_catalog(args.name)
        print(f"# replica generation {generation}")
    else:
        entries = federation.master_catalog
        print(f"# master generation {federation.master_generation}")
    for entry in entries:
        print(f"{entry.region} {entry.service_type} {entry.endpoint}")
    return 0


def cmd_identity_map(ws: Workspace, args) -> int:
    federation = ws.federation()
    for eppn in args.eppn:
        user_id = federation.map_identity(eppn)
        print(f"{eppn} -> {user_id}")
    ws.save_federation(federation)
    return 0


# -- quota --------------------------------------------------------------------


def cmd_quota_create(ws: Workspace, args) -> int:
    tree = ws.projects()
    if "/" in args.path:
        parent, _, name = args.path.rpartition("/")
        project_id = tree.create_project(name, parent)
    else:
        project_id = tree.add_domain(args.path)
    ws.save_projects(tree)
    print(f"created {project_id}")
    return 0


def cmd_quota_set(ws: Workspace, args) -> int:
    tree = ws.projects()
    node = tree.find(args.project)
    tree.set_quota(node.id, _quota_amounts(args.amounts))
    ws.save_projects(tree)
    print(f"{node.id} quota {_render_quota(node.quota)}")
    return 0


def cmd_quota_charge(ws: Workspace, args) -> int:
    tree = ws.projects()
    node = tree.find(args.project)
    tree.charge(node.id, _quota_amounts(args.amounts))
    ws.save_projects(tree)
    print(f"{node.id} usage {_render_quota(node.usage)}")
    return 0


def cmd_quota_release(ws: Workspace, args) -> int:
    tree = ws.projects()
    node = tree.find(args.project)
    tree.release(node.id, _quota_amounts(args.amounts))
    ws.save_projects(tree)
    print(f"{node.id} usage {_render_quota(node.usage)}")
    return 0


def _render_quota(amounts: QuotaSet) -> str:
    return " ".join(f"{name}={getattr(amounts, name)}" for name in COMPONENTS)


def cmd_quota_show(ws: Workspace, args) -> int:
    tree = ws.projects()
    if args.format == "json":
        print(json.dumps(tree.dump(), indent=2, sort_keys=True))
        return 0
    roots = [args.project] if args.project else sorted(
        node_id for node_id, node in tree.nodes.items() if node.parent is None
    )
    if not roots:
        print("no projects")
        return 0
    for root_id in roots:
        _print_quota_node(tree, tree.find(root_id).id, 0)
    return 0


def _print_quota_node(tree: ProjectTree, node_id: str, depth: int) -> None:
    node = tree.nodes[node_id]
    indent = "  " * depth
    print(
        f"{indent}{node.id}  quota[{_render_quota(node.quota)}]  "
        f"usage[{_render_quota(node.usage)}]"
    )
    for child_id in sorted(node.children):
        _print_quota_node(tree, child_id, depth + 1)


def cmd_quota_role(ws: Workspace, args) -> int:
    tree = ws.projects()
    node = tree.find(args.project)
    if args.role:
        tree.assign_role(node.id, args.user, args.role)
        ws.save_projects(tree)
    roles = tree.effective_roles(node.id, args.user)
    print(f"{args.user}@{node.id}: {', '.join(sorted(roles)) or '(none)'}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_converge_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--budget", type=int, default=DEFAULT_BUDGET,
                        help="maximum events to process while converging")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED,
                        help="seed for handler-order shuffling")


def _add_mutation_flags(parser: argparse.ArgumentParser) -> None:
    _add_converge_flags(parser)
    parser.add_argument("--no-converge", action="store_true",
                        help="enqueue events but do not process them")


def _add_machine_spec_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--arch", default="amd64")
    parser.add_argument("--cores", type=int, required=True)
    parser.add_argument("--mem", type=int, required=True, help="MiB")
    parser.add_argument("--disk", type=int, required=True, help="MiB")
    parser.add_argument("--series", default="xenial")
    parser.add_argument("--tags", default="", help="comma-separated host tags")
    parser.add_argument("-n", "--count", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedweave",
        description="Model-driven service deployment across federated regions.",
    )
    parser.add_argument(
        "-w", "--workspace",
        default=None,
        help="workspace directory (default: $FEDWEAVE_WORKSPACE or .)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("init", help="initialise a workspace")
    p.add_argument("--demo", action="store_true", help="include demo charms and bundles")
    p.set_defaults(func=cmd_init)

    p = commands.add_parser("validate", help="check a bundle against the charm store")
    p.add_argument("bundle")
    p.set_defaults(func=cmd_validate)

    p = commands.add_parser("deploy", help="deploy a bundle and converge")
    p.add_argument("bundle")
    p.add_argument("--project", help="project charged for the footprint")
    p.add_argument("--region", help="place on this production region instead of locally")
    p.add_argument("--lax-conflicts", action="store_true",
                   help="resolve write conflicts last-writer-wins instead of failing")
    _add_mutation_flags(p)
    p.set_defaults(func=cmd_deploy)

    p = commands.add_parser("add-unit", help="scale an application")
    p.add_argument("application")
    p.add_argument("-n", "--num-units", type=int, default=1)
    p.add_argument("--to", help="placement (machine id or kind:id)")
    _add_mutation_flags(p)
    p.set_defaults(func=cmd_add_unit)

    p = commands.add_parser("remove-unit", help="remove one unit")
    p.add_argument("unit")
    _add_mutation_flags(p)
    p.set_defaults(func=cmd_remove_unit)

    p = commands.add_parser("config", help="change application options")
    p.add_argument("application")
    p.add_argument("options", nargs="+", metavar="KEY=VALUE")
    _add_mutation_flags(p)
    p.set_defaults(func=cmd_config)

    p = commands.add_parser("add-relation", help="relate two applications")
    p.add_argument("left", metavar="APP:ENDPOINT")
    p.add_argument("right", metavar="APP:ENDPOINT")
    _add_mutation_flags(p)
    p.set_defaults(func=cmd_add_relation)

    p = commands.add_parser("converge", help="process pending events")
    _add_converge_flags(p)
    p.set_defaults(func=cmd_converge)

    p = commands.add_parser("status", help="show the model")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_status)

    plan = commands.add_parser("plan", help="imperative plans").add_subparsers(
        dest="plan_command", required=True
    )
    p = plan.add_parser("compile", help="compile a bundle to a step list")
    p.add_argument("bundle")
    p.add_argument("-o", "--output", help="write the plan here instead of stdout")
    p.set_defaults(func=cmd_plan_compile)
    p = plan.add_parser("execute", help="replay a compiled plan")
    p.add_argument("plan")
    p.add_argument("--project")
    _add_converge_flags(p)
    p.set_defaults(func=cmd_plan_execute)
    p = plan.add_parser("dot", help="export topology as DOT")
    p.add_argument("bundle", nargs="?", help="bundle to compile (default: current model)")
    p.set_defaults(func=cmd_plan_dot)

    machine = commands.add_parser("machine", help="local inventory").add_subparsers(
        dest="machine_command", required=True
    )
    p = machine.add_parser("add-zone", help="register an availability zone")
    p.add_argument("region")
    p.add_argument("az")
    p.set_defaults(func=cmd_machine_add_zone)
    p = machine.add_parser("enlist", help="enlist machines")
    p.add_argument("--zone", required=True, metavar="REGION/AZ")
    _add_machine_spec_flags(p)
    p.set_defaults(func=cmd_machine_enlist)
    p = machine.add_parser("list", help="list machines")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_machine_list)
    p = machine.add_parser("release", help="release an acquired machine")
    p.add_argument("machine")
    p.set_defaults(func=cmd_machine_release)

    region = commands.add_parser("region", help="federated regions").add_subparsers(
        dest="region_command", required=True
    )
    p = region.add_parser("register", help="register a candidate region")
    p.add_argument("name")
    p.add_argument("endpoints", nargs="+", metavar="SERVICE=URL")
    p.set_defaults(func=cmd_region_register)
    p = region.add_parser("validate", help="run validation; promote on success")
    p.add_argument("name")
    p.set_defaults(func=cmd_region_validate)
    p = region.add_parser("reject", help="reject a candidate region")
    p.add_argument("name")
    p.set_defaults(func=cmd_region_reject)
    p = region.add_parser("enlist", help="enlist machines into a region")
    p.add_argument("name")
    p.add_argument("--az", default="default")
    _add_machine_spec_flags(p)
    p.set_defaults(func=cmd_region_enlist)
    p = region.add_parser("list", help="list regions")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_region_list)
    p = region.add_parser("sync", help="sync a region's catalog replica")
    p.add_argument("name")
    p.set_defaults(func=cmd_region_sync)
    p = region.add_parser("catalog", help="show master (or a replica) catalog")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_region_catalog)

    identity = commands.add_parser("identity", help="identity federation").add_subparsers(
        dest="identity_command", required=True
    )
    p = identity.add_parser("map", help="map external principals to local users")
    p.add_argument("eppn", nargs="+")
    p.set_defaults(func=cmd_identity_map)

    quota = commands.add_parser("quota", help="project quotas").add_subparsers(
        dest="quota_command", required=True
    )
    p = quota.add_parser("create", help="create a domain or nested project")
    p.add_argument("path", metavar="DOMAIN[/PROJECT...]")
    p.set_defaults(func=cmd_quota_create)
    p = quota.add_parser("set", help="set a project's quota")
    p.add_argument("project")
    p.add_argument("amounts", nargs="+", metavar="COMPONENT=N")
    p.set_defaults(func=cmd_quota_set)
    p = quota.add_parser("charge", help="charge usage against a project")
    p.add_argument("project")
    p.add_argument("amounts", nargs="+", metavar="COMPONENT=N")
    p.set_defaults(func=cmd_quota_charge)
    p = quota.add_parser("release", help="release previously charged usage")
    p.add_argument("project")
    p.add_argument("amounts", nargs="+", metavar="COMPONENT=N")
    p.set_defaults(func=cmd_quota_release)
    p = quota.add_parser("show", help="show the project tree")
    p.add_argument("project", nargs="?")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_quota_show)
    p = quota.add_parser("role", help="assign or inspect a user's roles")
    p.add_argument("project")
    p.add_argument("user")
    p.add_argument("role", nargs="?")
    p.set_defaults(func=cmd_quota_role)

    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    root = Path(args.workspace or os.environ.get("FEDWEAVE_WORKSPACE") or ".")
    try:
        if args.func is cmd_init:
            root.mkdir(parents=True, exist_ok=True)
        with _locked(root):
            ws = Workspace(root)
            if args.func is not cmd_init:
                ws.require_init()
            return args.func(ws, args)
    except FedweaveError as exc:
        print(f"{exc.module}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cli: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(argv=None))


if __name__ == "__main__":
    main()
