"""Compilation of bundles into imperative plans.

Where the reactive engine converges on a bundle, a plan spells out the
equivalent fixed step sequence up front, phase by phase::

    acquire-machine* create-container* install-unit* configure*
    join-relation* start-unit*

Steps are deterministic: sorted by entity id within each phase, with
declared machines before fresh ones and the provider side named first in
every relation pair.  Executing a plan against a fresh inventory produces
a model whose converged state hash equals what deploy-and-converge yields
for the source bundle.

A plan is a snapshot: it embeds digests of the source bundle and of the
charm specs it compiled against.  Executing it against a store whose
charms have since changed logs a divergence warning — the plan replays its
stale steps regardless, which is exactly the failure mode that makes the
reactive path preferable for long-lived deployments.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
from dataclasses import dataclass, field

from .bundle import Bundle, Constraints, parse_constraints, render_bundle, render_constraints
from .charms import EventKind
from .engine import (
    DEFAULT_BUDGET,
    DEFAULT_SEED,
    Application,
    Event,
    Model,
    _create_unit,
    _ensure_leader,
    _quota_charge,
    add_relation,
    run_to_convergence,
    set_config,
)
from .errors import FedweaveError
from .provider import Inventory

logger = logging.getLogger(__name__)


class PlanError(FedweaveError):
    module = "plan"


class PlanExecutionError(PlanError):
    """A step failed; carries the index of the failing step."""

    def __init__(self, index: int, step: "PlanStep", cause: Exception):
        self.index = index
        self.step = step
        self.cause = cause
        super().__init__(f"step {index} ({step.render()}): {cause}")


# ---------------------------------------------------------------------------
# Steps


@dataclass(frozen=True)
class AcquireMachine:
    machine: str  # bundle-local id, or "fresh:<unit>" for implicit machines
    series: str
    constraints: Constraints = Constraints()

    def render(self) -> str:
        text = f"acquire-machine {self.machine} series={self.series}"
        rendered = render_constraints(self.constraints)
        if rendered:
            text += f" constraints={shlex.quote(rendered)}"
        return text


@dataclass(frozen=True)
class CreateContainer:
    host: str  # bundle-local machine id
    kind: str
    alias: str  # bundle-local container id, e.g. "0/lxd/0"

    def render(self) -> str:
        return f"create-container {self.host} {self.kind} {self.alias}"


@dataclass(frozen=True)
class InstallUnit:
    unit: str
    charm: str
    machine: str  # bundle-local machine or container alias

    def render(self) -> str:
        return f"install-unit {self.unit} {self.charm} {self.machine}"


@dataclass(frozen=True)
class Configure:
    application: str
    options: tuple[tuple[str, str], ...] = ()
    expose: bool = False

    def render(self) -> str:
        parts = [f"configure {self.application}"]
        if self.expose:
            parts.append("expose=true")
        for key, value in self.options:
            parts.append(f"{key}={shlex.quote(value)}")
        return " ".join(parts)


@dataclass(frozen=True)
class JoinRelation:
    provider: str  # "app:endpoint", provider side first
    requirer: str
    interface: str

    def render(self) -> str:
        return f"join-relation {self.provider} {self.requirer} interface={self.interface}"


@dataclass(frozen=True)
class StartUnit:
    unit: str

    def render(self) -> str:
        return f"start-unit {self.unit}"


PlanStep = AcquireMachine | CreateContainer | InstallUnit | Configure | JoinRelation | StartUnit


@dataclass(frozen=True)
class ImperativePlan:
    steps: tuple[PlanStep, ...]
    bundle_digest: str
    charm_digest: str

    def render(self) -> str:
        lines = [
            f"# bundle-digest: {self.bundle_digest}",
            f"# charm-digest: {self.charm_digest}",
        ]
        lines.extend(step.render() for step in self.steps)
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Compilation


def compile_plan(bundle: Bundle, store) -> ImperativePlan:
    """Compile a validated bundle into its imperative step sequence."""
    from .bundle import validate_bundle

    errors = [d for d in validate_bundle(bundle, store) if d.severity == "error"]
    if errors:
        raise PlanError(
            "bundle does not validate: " + "; ".join(d.render() for d in errors)
        )

    acquire_steps: list[AcquireMachine] = []
    for bundle_id in sorted(bundle.machines, key=int):
        spec = bundle.machines[bundle_id]
        acquire_steps.append(
            AcquireMachine(machine=bundle_id, series=spec.series, constraints=spec.constraints)
        )

    container_steps: list[CreateContainer] = []
    install_steps: list[InstallUnit] = []
    container_counters: dict[tuple[str, str], int] = {}
    charm_refs: set[str] = set()
    for name in sorted(bundle.applications):
        app_spec = bundle.applications[name]
        charm = store.resolve_charm(app_spec.charm)
        charm_refs.add(app_spec.charm)
        series = _series_for(bundle, app_spec, charm)
        for index in range(app_spec.num_units):
            unit_id = f"{name}/{index}"
            if index < len(app_spec.placements):
                placement = app_spec.placements[index]
            else:
                placement = None
            if placement is not None and placement.kind == "machine":
                machine = placement.machine
            elif placement is not None and placement.kind == "container":
                key = (placement.machine, placement.container_kind)
                slot = container_counters.get(key, 0)
                container_counters[key] = slot + 1
                alias = f"{placement.machine}/{placement.container_kind}/{slot}"
                container_steps.append(
                    CreateContainer(
                        host=placement.machine, kind=placement.container_kind, alias=alias
                    )
                )
                machine = alias
            else:
                machine = f"fresh:{unit_id}"
                acquire_steps.append(
                    AcquireMachine(machine=machine, series=series, constraints=Constraints())
                )
            install_steps.append(InstallUnit(unit=unit_id, charm=app_spec.charm, machine=machine))

    configure_steps: list[Configure] = []
    for name in sorted(bundle.applications):
        app_spec = bundle.applications[name]
        if not app_spec.options and not app_spec.expose:
            continue
        options = tuple(
            (key, _scalar_str(app_spec.options[key])) for key in sorted(app_spec.options, key=str)
        )
        configure_steps.append(
            Configure(application=name, options=options, expose=app_spec.expose)
        )

    join_steps: list[JoinRelation] = []
    for left, right in bundle.relations:
        provider, requirer, interface = _orient_endpoints(bundle, store, left, right)
        join_steps.append(
            JoinRelation(provider=provider, requirer=requirer, interface=interface)
        )
    join_steps.sort(key=lambda s: (s.provider, s.requirer))

    start_steps = [StartUnit(unit=s.unit) for s in sorted(install_steps, key=lambda s: s.unit)]

    # Container steps keep their enumeration order (applications sorted by
    # name, then unit index) — that is already canonical, and it is the
    # order the reactive path creates them in.
    steps: tuple[PlanStep, ...] = tuple(
        [*acquire_steps, *container_steps, *install_steps,
         *configure_steps, *join_steps, *start_steps]
    )
    return ImperativePlan(
        steps=steps,
        bundle_digest=bundle_digest(bundle),
        charm_digest=charm_digest(store, sorted(charm_refs)),
    )


def _series_for(bundle: Bundle, app_spec, charm) -> str:
    for placement in app_spec.placements:
        if placement.machine is not None:
            return bundle.machines[placement.machine].series
    if bundle.default_series:
        return bundle.default_series
    return sorted(charm.series)[0]


def _orient_endpoints(bundle: Bundle, store, left, right) -> tuple[str, str, str]:
    left_charm = store.resolve_charm(bundle.applications[left.application].charm)
    right_charm = store.resolve_charm(bundle.applications[right.application].charm)
    if left.endpoint in left_charm.provides:
        return left.render(), right.render(), left_charm.provides[left.endpoint]
    return right.render(), left.render(), right_charm.provides[right.endpoint]


def _scalar_str(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def bundle_digest(bundle: Bundle) -> str:
    return hashlib.sha256(render_bundle(bundle).encode("utf-8")).hexdigest()


def charm_digest(store, refs) -> str:
    """Digest over the canonical serialization of the named charm specs."""
    canonical = []
    for ref in sorted(refs):
        spec = store.resolve_charm(ref)
        canonical.append(
            {
                "ref": ref,
                "name": spec.name,
                "series": sorted(spec.series),
                "provides": dict(sorted(spec.provides.items())),
                "requires": dict(sorted(spec.requires.items())),
                "options": {
                    name: {"type": schema.type, "default": schema.default}
                    for name, schema in sorted(spec.config.items())
                },
                "handlers": [
                    {
                        "on": handler.on.render(),
                        "when": sorted(handler.when_states),
                        "do": [repr(action) for action in handler.actions],
                    }
                    for handler in spec.handlers
                ],
                "storage": list(spec.storage_pools),
            }
        )
    blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Execution


def execute_plan(
    plan: ImperativePlan,
    inventory: Inventory,
    store,
    project: str | None = None,
    quota_tree=None,
    budget: int = DEFAULT_BUDGET,
    rng_seed: int = DEFAULT_SEED,
) -> Model:
    """Replay a plan against a fresh inventory and converge the result.

    Raises PlanExecutionError naming the failing step on placement or
    quota problems.  When the store's charms no longer match the digest
    recorded at compile time, a divergence warning is logged and the stale
    steps are executed as written.
    """
    refs = sorted({s.charm for s in plan.steps if isinstance(s, InstallUnit)})
    current_digest = charm_digest(store, refs)
    if current_digest != plan.charm_digest:
        logger.warning(
            "plan was compiled against charm digest %s but the store now holds %s; "
            "executing stale steps",
            plan.charm_digest[:12],
            current_digest[:12],
        )

    model = Model(store, inventory, project=project, quota_tree=quota_tree)
    _admit_plan(model, plan)
    machine_map: dict[str, str] = {}
    new_unit_ids: list[str] = []
    for index, planned in enumerate(plan.steps):
        try:
            _execute_step(model, planned, machine_map, new_unit_ids)
        except FedweaveError as exc:
            raise PlanExecutionError(index, planned, exc) from exc
    run_to_convergence(model, budget=budget, rng_seed=rng_seed)
    return model


def _admit_plan(model: Model, plan: ImperativePlan) -> None:
    if model.project is None or model.quota_tree is None:
        return
    vcpus = ram = disk_mib = instances = 0
    for planned in plan.steps:
        if isinstance(planned, AcquireMachine):
            vcpus += planned.constraints.cpu_cores or 0
            ram += planned.constraints.mem or 0
            disk_mib += planned.constraints.root_disk or 0
        elif isinstance(planned, InstallUnit):
            instances += 1
    # Constraints are MiB; quota disk is GiB.  Partial GiB rounds up.
    _quota_charge(
        model,
        {"vcpus": vcpus, "ram": ram, "disk": -(-disk_mib // 1024), "instances": instances},
    )


def _execute_step(
    model: Model, planned: PlanStep, machine_map: dict[str, str], new_unit_ids: list[str]
) -> None:
    if isinstance(planned, AcquireMachine):
        record = model.inventory.acquire(planned.constraints)
        record.series = planned.series
        machine_map[planned.machine] = record.id
        model.machines.add(record.id)
    elif isinstance(planned, CreateContainer):
        host = machine_map[planned.host]
        container = model.inventory.create_container(host, planned.kind)
        machine_map[planned.alias] = container.id
        model.machines.add(container.id)
    elif isinstance(planned, InstallUnit):
        app_name = planned.unit.partition("/")[0]
        app = model.applications.get(app_name)
        if app is None:
            charm = model.store.resolve_charm(planned.charm)
            machine_id = machine_map[planned.machine]
            app = Application(
                name=app_name,
                charm_ref=planned.charm,
                charm=charm,
                series=model.inventory.machines[machine_id].series,
                config=charm.default_config(),
            )
            model.applications[app_name] = app
        machine_id = machine_map[planned.machine]
        record = model.inventory.machines[machine_id]
        if record.series not in app.charm.series:
            raise PlanError(
                f"charm {app.charm.name!r} does not support series {record.series!r}"
            )
        unit = _create_unit(model, app, machine_id)
        new_unit_ids.append(unit.id)
        model.event_queue.append(Event(EventKind.install(), unit.id))
        _ensure_leader(model, app_name)
    elif isinstance(planned, Configure):
        if planned.options:
            set_config(model, planned.application, dict(planned.options))
        if planned.expose:
            model.applications[planned.application].exposed = True
    elif isinstance(planned, JoinRelation):
        add_relation(model, planned.provider, planned.requirer)
    elif isinstance(planned, StartUnit):
        model.event_queue.append(Event(EventKind.start(), planned.unit))
    else:  # pragma: no cover - the step language is closed
        raise PlanError(f"unknown step {planned!r}")


# ---------------------------------------------------------------------------
# Serialization


def render_plan(plan: ImperativePlan) -> str:
    return plan.render()


def parse_plan(text: str) -> ImperativePlan:
    """Parse the one-step-per-line form produced by ``render_plan``."""
    bundle_dig = ""
    charm_dig = ""
    steps: list[PlanStep] = []
    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line:
            continue
        if line.startswith("#"):
            comment = line.lstrip("#").strip()
            if comment.startswith("bundle-digest:"):
                bundle_dig = comment.partition(":")[2].strip()
            elif comment.startswith("charm-digest:"):
                charm_dig = comment.partition(":")[2].strip()
            continue
        steps.append(_parse_step_line(line))
    return ImperativePlan(steps=tuple(steps), bundle_digest=bundle_dig, charm_digest=charm_dig)


def _parse_step_line(line: str) -> PlanStep:
    tokens = shlex.split(line)
    verb, args = tokens[0], tokens[1:]
    try:
        if verb == "acquire-machine":
            machine = args[0]
            fields = _kv(args[1:])
            return AcquireMachine(
                machine=machine,
                series=fields["series"],
                constraints=parse_constraints(fields.get("constraints", "")),
            )
        if verb == "create-container":
            return CreateContainer(host=args[0], kind=args[1], alias=args[2])
        if verb == "install-unit":
            return InstallUnit(unit=args[0], charm=args[1], machine=args[2])
        if verb == "configure":
            fields = _kv(args[1:])
            expose = fields.pop("expose", "false") == "true"
            options = tuple(sorted(fields.items()))
            return Configure(application=args[0], options=options, expose=expose)
        if verb == "join-relation":
            fields = _kv(args[2:])
            return JoinRelation(
                provider=args[0], requirer=args[1], interface=fields["interface"]
            )
        if verb == "start-unit":
            return StartUnit(unit=args[0])
    except (IndexError, KeyError) as exc:
        raise PlanError(f"malformed plan line {line!r}") from exc
    raise PlanError(f"unknown plan step {verb!r}")


def _kv(tokens: list[str]) -> dict[str, str]:
    fields = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep:
            raise PlanError(f"malformed field {token!r}")
        fields[key] = value
    return fields


# ---------------------------------------------------------------------------
# DOT export


def export_dot(source) -> str:
    """Render a deployment topology as a DOT digraph.

    Accepts a converged (or in-flight) Model or an ImperativePlan.
    Applications are nodes, relations are edges labelled with their
    interface, machines are clusters containing their units, containers
    nest one level deeper.
    """
    if isinstance(source, ImperativePlan):
        apps, units, machines, containers, edges = _topology_of_plan(source)
    else:
        apps, units, machines, containers, edges = _topology_of_model(source)

    lines = ["digraph deployment {"]
    if apps or machines:
        lines.append("  rankdir=LR;")
    for app in sorted(apps):
        lines.append(f'  "app:{app}" [label="{app}", shape=ellipse];')
    for machine in sorted(machines, key=_dot_machine_key):
        lines.append(f'  subgraph "cluster_{machine}" {{')
        lines.append(f'    label="machine {machine}";')
        for unit in sorted(units.get(machine, ())):
            lines.append(f'    "unit:{unit}" [label="{unit}", shape=box];')
        for container in sorted(containers.get(machine, ()), key=_dot_machine_key):
            lines.append(f'    subgraph "cluster_{container}" {{')
            lines.append(f'      label="{container}";')
            for unit in sorted(units.get(container, ())):
                lines.append(f'      "unit:{unit}" [label="{unit}", shape=box];')
            lines.append("    }")
        lines.append("  }")
    for provider_app, requirer_app, interface in sorted(edges):
        lines.append(
            f'  "app:{provider_app}" -> "app:{requirer_app}" [label="{interface}"];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def _dot_machine_key(machine_id: str):
    return tuple(int(p) if p.isdigit() else p for p in machine_id.split("/"))


def _topology_of_model(model: Model):
    apps = set(model.applications)
    units: dict[str, list[str]] = {}
    machines: set[str] = set()
    containers: dict[str, list[str]] = {}
    for unit in model.units.values():
        units.setdefault(unit.machine, []).append(unit.id)
        record = model.inventory.machines.get(unit.machine)
        if record is not None and record.is_container():
            machines.add(record.parent)
            containers.setdefault(record.parent, []).append(record.id)
        else:
            machines.add(unit.machine)
    edges = set()
    for relation in model.relations.values():
        provider_app = relation.provider.partition(":")[0]
        requirer_app = relation.requirer.partition(":")[0]
        edges.add((provider_app, requirer_app, relation.interface))
    return apps, units, machines, containers, edges


def _topology_of_plan(plan: ImperativePlan):
    apps = set()
    units: dict[str, list[str]] = {}
    machines: set[str] = set()
    containers: dict[str, list[str]] = {}
    for planned in plan.steps:
        if isinstance(planned, AcquireMachine):
            machines.add(planned.machine)
        elif isinstance(planned, CreateContainer):
            containers.setdefault(planned.host, []).append(planned.alias)
        elif isinstance(planned, InstallUnit):
            apps.add(planned.unit.partition("/")[0])
            units.setdefault(planned.machine, []).append(planned.unit)
    edges = set()
    for planned in plan.steps:
        if isinstance(planned, JoinRelation):
            edges.add(
                (
                    planned.provider.partition(":")[0],
                    planned.requirer.partition(":")[0],
                    planned.interface,
                )
            )
    return apps, units, machines, containers, edges
