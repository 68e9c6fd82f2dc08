"""The reactive model and convergence engine.

A model holds applications, units, relations and a FIFO event queue.
Commands (deploy, add-unit, config, add-relation) mutate structure and
enqueue events; they never run handlers.  ``step`` dequeues one event,
collects every handler of the target unit whose event kind matches and
whose state-flag guard is satisfied, runs them in a seed-determined
pseudo-random order, applies their actions, and enqueues follow-on
events.  ``run_to_convergence`` steps until the queue drains or a budget
is exhausted.

Three rules make convergence insensitive to ordering:

* every hook action is an absolute write, so re-running a handler is a
  no-op (idempotence);
* relation-data writes only propagate ``relation-changed`` events when the
  value actually changed, and templates read live state rather than event
  payloads;
* when a step changes a unit's state flags, events the unit has already
  seen are re-delivered if some handler's guard newly became satisfiable,
  so a handler can never be lost to an unlucky arrival order.

Two handlers triggered by one event that write different values to the
same location are a charm bug; in strict mode (the default) the step
raises a conflict error instead of letting the last writer win.

Interrupted runs are resumable: ``checkpoint`` captures the full model
(optionally with its inventory) and ``load_checkpoint`` restores it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field

from .bundle import Bundle, Constraints, Placement, render_constraints
from .charms import (
    CharmSpec,
    ClearState,
    EventKind,
    Fail,
    HookHandler,
    OpenPort,
    SetRelationData,
    SetState,
    SetUnitStatus,
    resolve_template,
)
from .errors import FedweaveError
from .provider import Inventory, machine_sort_key

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 10_000
DEFAULT_SEED = 1

UNIT_STATUSES = ("allocating", "installing", "active", "blocked", "error")


class EngineError(FedweaveError):
    module = "engine"


class CharmConflictError(EngineError):
    """Two handlers for one event wrote different values to one location."""


class UnknownEntityError(EngineError):
    """A command referenced an application, unit or relation that does not exist."""


class DeploymentError(EngineError):
    """A deploy or add-unit command could not be satisfied."""


# ---------------------------------------------------------------------------
# Model state


@dataclass(frozen=True)
class Event:
    kind: EventKind
    target: str  # unit id
    payload: str = ""  # relation id or storage pool
    remote: str = ""  # remote unit id for relation events

    def key(self) -> tuple[str, str, str, str]:
        return (self.kind.kind, self.kind.name, self.payload, self.remote)

    def render(self) -> str:
        text = f"{self.kind.render()}@{self.target}"
        if self.remote:
            text += f" (remote {self.remote})"
        return text


@dataclass
class Application:
    name: str
    charm_ref: str
    charm: CharmSpec
    series: str
    config: dict = field(default_factory=dict)
    exposed: bool = False
    unit_counter: int = 0


@dataclass
class Unit:
    id: str
    app: str
    machine: str
    status: str = "allocating"
    message: str = ""
    leader: bool = False
    states: set[str] = field(default_factory=set)
    open_ports: set[int] = field(default_factory=set)
    # Events this unit has processed, for guard-triggered re-delivery.
    seen: dict[tuple[str, str, str, str], Event] = field(default_factory=dict)


@dataclass
class Relation:
    id: str
    provider: str  # "app:endpoint"
    requirer: str
    interface: str
    # unit id -> that unit's data bag in this relation
    data: dict[str, dict[str, str]] = field(default_factory=dict)

    def endpoint_of(self, app: str) -> str | None:
        for side in (self.provider, self.requirer):
            side_app, _, endpoint = side.partition(":")
            if side_app == app:
                return endpoint
        return None

    def apps(self) -> tuple[str, str]:
        return (self.provider.partition(":")[0], self.requirer.partition(":")[0])


class Model:
    """A deployment model bound to a charm store and a provider inventory."""

    def __init__(
        self,
        store,
        inventory: Inventory,
        project: str | None = None,
        quota_tree=None,
        strict_conflicts: bool = True,
    ) -> None:
        self.store = store
        self.inventory = inventory
        self.project = project
        self.quota_tree = quota_tree
        self.strict_conflicts = strict_conflicts
        self.applications: dict[str, Application] = {}
        self.units: dict[str, Unit] = {}
        self.relations: dict[str, Relation] = {}
        self.event_queue: deque[Event] = deque()
        self.generation = 0
        self.machines: set[str] = set()  # provider machine ids this model owns
        self.shadow_check = False
        self.shadow_deltas = 0
        self.trace: list[dict] | None = None

    @property
    def converged(self) -> bool:
        return not self.event_queue

    # -- small helpers -------------------------------------------------

    def unit_ids_of(self, app: str) -> list[str]:
        return sorted(
            (u.id for u in self.units.values() if u.app == app),
            key=_unit_sort_key,
        )

    def relations_of(self, app: str, endpoint: str | None = None) -> list[Relation]:
        found = []
        for rel_id in sorted(self.relations):
            relation = self.relations[rel_id]
            app_endpoint = relation.endpoint_of(app)
            if app_endpoint is None:
                continue
            if endpoint is not None and app_endpoint != endpoint:
                continue
            found.append(relation)
        return found


def _unit_sort_key(unit_id: str):
    app, _, index = unit_id.partition("/")
    return (app, int(index))


# ---------------------------------------------------------------------------
# Results


@dataclass(frozen=True)
class StepReport:
    event: str | None
    handlers_run: int = 0
    actions_applied: int = 0
    dropped: bool = False
    emitted: int = 0
    redelivered: int = 0


@dataclass(frozen=True)
class ConvergenceResult:
    outcome: str  # "converged" | "budget-exhausted"
    events_processed: int

    @property
    def converged(self) -> bool:
        return self.outcome == "converged"


@dataclass(frozen=True)
class DeploymentResult:
    machine_map: dict[str, str]  # bundle-local id -> provider id
    units: tuple[str, ...]
    relations: tuple[str, ...]


# ---------------------------------------------------------------------------
# Commands


def deploy_bundle(model: Model, bundle: Bundle) -> DeploymentResult:
    """Apply a bundle to the model: admit against quota, acquire machines,
    create containers, applications and units, and add relations.

    Enqueues install (and leader-elected / relation-joined) events; it does
    not run the engine.  On placement failure everything acquired so far is
    rolled back, including the quota charge.
    """
    from .bundle import validate_bundle

    diagnostics = [d for d in validate_bundle(bundle, model.store) if d.severity == "error"]
    if diagnostics:
        raise DeploymentError(
            "bundle does not validate: " + "; ".join(d.render() for d in diagnostics)
        )
    for name in bundle.applications:
        if name in model.applications:
            raise DeploymentError(f"application {name!r} already deployed")

    charge = _bundle_charge(bundle)
    _quota_charge(model, charge)

    acquired: list[str] = []
    created_containers: list[str] = []
    machine_map: dict[str, str] = {}
    new_units: list[tuple[Unit, CharmSpec]] = []
    try:
        for bundle_id in sorted(bundle.machines, key=int):
            spec = bundle.machines[bundle_id]
            record = model.inventory.acquire(spec.constraints)
            record.series = spec.series
            machine_map[bundle_id] = record.id
            acquired.append(record.id)
            # owned even when no unit lands on it directly (container hosts)
            model.machines.add(record.id)

        for name in sorted(bundle.applications):
            app_spec = bundle.applications[name]
            charm = model.store.resolve_charm(app_spec.charm)
            series = _app_series(bundle, app_spec, charm)
            config = charm.default_config()
            for opt_name, raw in app_spec.options.items():
                config[opt_name] = charm.config[opt_name].coerce(raw)
            app = Application(
                name=name,
                charm_ref=app_spec.charm,
                charm=charm,
                series=series,
                config=config,
                exposed=app_spec.expose,
            )
            model.applications[name] = app
            for index in range(app_spec.num_units):
                placement = (
                    app_spec.placements[index]
                    if index < len(app_spec.placements)
                    else Placement.fresh()
                )
                machine_id = _place_unit(
                    model, placement, machine_map, series, charm,
                    acquired, created_containers,
                )
                unit = _create_unit(model, app, machine_id)
                new_units.append((unit, charm))
    except FedweaveError:
        for container_id in reversed(created_containers):
            model.inventory.release(container_id)
            model.machines.discard(container_id)
        for machine_id in reversed(acquired):
            model.inventory.release(machine_id)
            model.machines.discard(machine_id)
        for unit, _ in new_units:
            model.units.pop(unit.id, None)
        for name in bundle.applications:
            model.applications.pop(name, None)
        _quota_release(model, charge)
        raise

    for unit, _ in new_units:
        model.event_queue.append(Event(EventKind.install(), unit.id))
        _ensure_leader(model, unit.app)

    relation_ids = []
    for left, right in bundle.relations:
        relation = add_relation(model, left.render(), right.render())
        relation_ids.append(relation.id)

    return DeploymentResult(
        machine_map=machine_map,
        units=tuple(unit.id for unit, _ in new_units),
        relations=tuple(relation_ids),
    )


def _app_series(bundle: Bundle, app_spec, charm: CharmSpec) -> str:
    for placement in app_spec.placements:
        if placement.machine is not None:
            return bundle.machines[placement.machine].series
    if bundle.default_series:
        return bundle.default_series
    return sorted(charm.series)[0]


def _place_unit(
    model: Model,
    placement: Placement,
    machine_map: dict[str, str],
    series: str,
    charm: CharmSpec,
    acquired: list[str],
    created_containers: list[str],
) -> str:
    if placement.kind == "machine":
        machine_id = machine_map[placement.machine]
    elif placement.kind == "container":
        host_id = machine_map[placement.machine]
        container = model.inventory.create_container(host_id, placement.container_kind)
        created_containers.append(container.id)
        model.machines.add(container.id)
        machine_id = container.id
    else:
        record = model.inventory.acquire(Constraints())
        record.series = series
        acquired.append(record.id)
        machine_id = record.id
    record = model.inventory.machines[machine_id]
    if record.series not in charm.series:
        raise DeploymentError(
            f"charm {charm.name!r} does not support series {record.series!r} "
            f"of machine {machine_id!r}"
        )
    model.machines.add(machine_id)
    return machine_id


def _create_unit(model: Model, app: Application, machine_id: str) -> Unit:
    unit = Unit(id=f"{app.name}/{app.unit_counter}", app=app.name, machine=machine_id)
    app.unit_counter += 1
    model.units[unit.id] = unit
    for relation in model.relations_of(app.name):
        relation.data.setdefault(unit.id, {})
    return unit


def add_unit(model: Model, app_name: str, count: int = 1, placement: Placement | None = None) -> list[str]:
    """Scale an application by ``count`` units.

    Placements reference live provider machines (``lxd:3`` means a
    container on provider machine 3); without one, each unit gets a fresh
    unconstrained machine.  New units receive install events, and every
    relation of the application gains relation-joined events on both
    sides; data already published by remote units is re-delivered to the
    newcomers as relation-changed events.
    """
    app = model.applications.get(app_name)
    if app is None:
        raise UnknownEntityError(f"unknown application {app_name!r}")
    if count < 1:
        raise EngineError(f"add_unit count must be positive, got {count}")
    _quota_charge(model, {"instances": count})
    new_ids: list[str] = []
    try:
        for _ in range(count):
            machine_id = _place_added_unit(model, app, placement)
            unit = _create_unit(model, app, machine_id)
            new_ids.append(unit.id)
    except FedweaveError:
        _quota_release(model, {"instances": count})
        for unit_id in new_ids:
            model.units.pop(unit_id, None)
        raise
    for unit_id in new_ids:
        model.event_queue.append(Event(EventKind.install(), unit_id))
        _ensure_leader(model, app_name)
        _join_existing_relations(model, app, unit_id)
    return new_ids


def _place_added_unit(model: Model, app: Application, placement: Placement | None) -> str:
    if placement is None or placement.kind == "fresh":
        record = model.inventory.acquire(Constraints())
        record.series = app.series
        model.machines.add(record.id)
        return record.id
    if placement.kind == "machine":
        record = model.inventory.machines.get(placement.machine)
        if record is None:
            raise UnknownEntityError(f"unknown machine {placement.machine!r}")
        if record.state == "ready":
            model.inventory.acquire(Constraints(), machine=record.id)
        model.machines.add(record.id)
        return record.id
    host = placement.machine
    if host not in model.inventory.machines:
        raise UnknownEntityError(f"unknown machine {host!r}")
    container = model.inventory.create_container(host, placement.container_kind)
    model.machines.add(container.id)
    return container.id


def _join_existing_relations(model: Model, app: Application, unit_id: str) -> None:
    for relation in model.relations_of(app.name):
        own_endpoint = relation.endpoint_of(app.name)
        other_app = next(a for a in relation.apps() if a != app.name)
        other_endpoint = relation.endpoint_of(other_app)
        relation.data.setdefault(unit_id, {})
        for remote_id in model.unit_ids_of(other_app):
            model.event_queue.append(
                Event(EventKind.relation_joined(own_endpoint), unit_id, relation.id, remote_id)
            )
            model.event_queue.append(
                Event(EventKind.relation_joined(other_endpoint), remote_id, relation.id, unit_id)
            )
            if relation.data.get(remote_id):
                model.event_queue.append(
                    Event(EventKind.relation_changed(own_endpoint), unit_id, relation.id, remote_id)
                )


def set_config(model: Model, app_name: str, options: dict) -> list[str]:
    """Update application options.  Values are coerced against the charm
    schema; a no-op update (all values already current) enqueues nothing,
    otherwise each unit of the application gets one config-changed event.
    Returns the option names that actually changed."""
    app = model.applications.get(app_name)
    if app is None:
        raise UnknownEntityError(f"unknown application {app_name!r}")
    coerced = {}
    for name, raw in options.items():
        schema = app.charm.config.get(name)
        if schema is None:
            raise EngineError(f"charm {app.charm.name!r} has no option {name!r}")
        coerced[name] = schema.coerce(raw)
    changed = [name for name, value in coerced.items() if app.config.get(name) != value]
    if not changed:
        return []
    app.config.update(coerced)
    for unit_id in model.unit_ids_of(app_name):
        model.event_queue.append(Event(EventKind.config_changed(), unit_id))
    return sorted(changed)


def add_relation(model: Model, left: str, right: str) -> Relation:
    """Relate two endpoints.  One side must provide and the other require
    the same interface; every existing unit on both sides receives a
    relation-joined event (provider side first)."""
    left_app, left_ep = _split_endpoint(model, left)
    right_app, right_ep = _split_endpoint(model, right)
    if left_app == right_app:
        raise EngineError(f"cannot relate application {left_app!r} to itself")
    provider, requirer = _orient(model, left_app, left_ep, right_app, right_ep)
    relation_id = f"{provider[0]}:{provider[1]} {requirer[0]}:{requirer[1]}"
    if relation_id in model.relations:
        raise EngineError(f"relation {relation_id!r} already exists")
    interface = model.applications[provider[0]].charm.provides[provider[1]]
    relation = Relation(
        id=relation_id,
        provider=f"{provider[0]}:{provider[1]}",
        requirer=f"{requirer[0]}:{requirer[1]}",
        interface=interface,
    )
    model.relations[relation_id] = relation
    provider_units = model.unit_ids_of(provider[0])
    requirer_units = model.unit_ids_of(requirer[0])
    for unit_id in provider_units + requirer_units:
        relation.data.setdefault(unit_id, {})
    for unit_id in provider_units:
        for remote_id in requirer_units:
            model.event_queue.append(
                Event(EventKind.relation_joined(provider[1]), unit_id, relation_id, remote_id)
            )
    for unit_id in requirer_units:
        for remote_id in provider_units:
            model.event_queue.append(
                Event(EventKind.relation_joined(requirer[1]), unit_id, relation_id, remote_id)
            )
    return relation


def _split_endpoint(model: Model, text: str) -> tuple[str, str]:
    app_name, sep, endpoint = text.partition(":")
    if not sep or not app_name or not endpoint:
        raise EngineError(f"malformed endpoint {text!r} (want application:endpoint)")
    app = model.applications.get(app_name)
    if app is None:
        raise UnknownEntityError(f"unknown application {app_name!r}")
    if endpoint not in app.charm.endpoints():
        raise EngineError(f"charm {app.charm.name!r} has no endpoint {endpoint!r}")
    return app_name, endpoint


def _orient(model, left_app, left_ep, right_app, right_ep):
    """Return ((provider app, endpoint), (requirer app, endpoint))."""
    left_charm = model.applications[left_app].charm
    right_charm = model.applications[right_app].charm
    if left_ep in left_charm.provides and right_ep in right_charm.requires:
        provider, requirer = (left_app, left_ep), (right_app, right_ep)
        provider_iface = left_charm.provides[left_ep]
        requirer_iface = right_charm.requires[right_ep]
    elif right_ep in right_charm.provides and left_ep in left_charm.requires:
        provider, requirer = (right_app, right_ep), (left_app, left_ep)
        provider_iface = right_charm.provides[right_ep]
        requirer_iface = left_charm.requires[left_ep]
    else:
        raise EngineError(
            f"{left_app}:{left_ep} and {right_app}:{right_ep} do not form a "
            "provider/requirer pair"
        )
    if provider_iface != requirer_iface:
        raise EngineError(
            f"interface mismatch: {provider_iface!r} vs {requirer_iface!r}"
        )
    return provider, requirer


def remove_unit(model: Model, unit_id: str) -> None:
    """Remove a unit.  Remote units get relation-departed events; the
    unit's machine is released when nothing else occupies it.  If the unit
    led its application, the next step re-elects a leader."""
    unit = model.units.get(unit_id)
    if unit is None:
        raise UnknownEntityError(f"unknown unit {unit_id!r}")
    app = model.applications[unit.app]
    for relation in model.relations_of(app.name):
        other_app = next(a for a in relation.apps() if a != app.name)
        other_endpoint = relation.endpoint_of(other_app)
        relation.data.pop(unit_id, None)
        for remote_id in model.unit_ids_of(other_app):
            if remote_id == unit_id:
                continue
            model.event_queue.append(
                Event(EventKind.relation_departed(other_endpoint), remote_id, relation.id, unit_id)
            )
    del model.units[unit_id]
    _quota_release(model, {"instances": 1})
    machine_id = unit.machine
    still_used = any(u.machine == machine_id for u in model.units.values())
    record = model.inventory.machines.get(machine_id)
    if record is not None and not still_used:
        hosts_containers = bool(record.containers)
        if not hosts_containers:
            model.inventory.release(machine_id)
            model.machines.discard(machine_id)


def elect_leader(model: Model, app_name: str) -> str:
    """Make the lowest-index unit the leader and enqueue leader-elected."""
    app = model.applications.get(app_name)
    if app is None:
        raise UnknownEntityError(f"unknown application {app_name!r}")
    unit_ids = model.unit_ids_of(app_name)
    if not unit_ids:
        raise EngineError(f"application {app_name!r} has no units to lead")
    if any(model.units[u].leader for u in unit_ids):
        raise EngineError(f"application {app_name!r} already has a leader")
    leader_id = unit_ids[0]
    model.units[leader_id].leader = True
    model.event_queue.append(Event(EventKind.leader_elected(), leader_id))
    return leader_id


def _ensure_leader(model: Model, app_name: str) -> None:
    unit_ids = model.unit_ids_of(app_name)
    if unit_ids and not any(model.units[u].leader for u in unit_ids):
        elect_leader(model, app_name)


def update_status(model: Model, app_name: str | None = None) -> int:
    """Enqueue an update-status event for every unit (of one application,
    or of the whole model).  Returns the number of events enqueued."""
    if app_name is not None and app_name not in model.applications:
        raise UnknownEntityError(f"unknown application {app_name!r}")
    unit_ids = sorted(model.units, key=_unit_sort_key)
    if app_name is not None:
        unit_ids = [u for u in unit_ids if model.units[u].app == app_name]
    for unit_id in unit_ids:
        model.event_queue.append(Event(EventKind.update_status(), unit_id))
    return len(unit_ids)


# ---------------------------------------------------------------------------
# Quota plumbing


def _bundle_charge(bundle: Bundle) -> dict:
    vcpus = sum(m.constraints.cpu_cores or 0 for m in bundle.machines.values())
    ram = sum(m.constraints.mem or 0 for m in bundle.machines.values())
    disk_mib = sum(m.constraints.root_disk or 0 for m in bundle.machines.values())
    instances = sum(a.num_units for a in bundle.applications.values())
    # Constraints are MiB; quota disk is GiB.  Partial GiB rounds up.
    return {
        "vcpus": vcpus,
        "ram": ram,
        "disk": -(-disk_mib // 1024),
        "instances": instances,
    }


def _quota_charge(model: Model, amounts: dict) -> None:
    if model.project is None or model.quota_tree is None:
        return
    from .quota import QuotaSet

    model.quota_tree.charge(model.project, QuotaSet(**amounts))


def _quota_release(model: Model, amounts: dict) -> None:
    if model.project is None or model.quota_tree is None:
        return
    from .quota import QuotaSet

    model.quota_tree.release(model.project, QuotaSet(**amounts))


# ---------------------------------------------------------------------------
# The step


class _ConflictTracker:
    """Detects two handlers writing different values to one location
    within a single step."""

    def __init__(self, strict: bool) -> None:
        self.strict = strict
        self._writes: dict[tuple, tuple[int, object]] = {}

    def record(self, handler_index: int, location: tuple, value: object) -> None:
        previous = self._writes.get(location)
        if previous is not None:
            prev_handler, prev_value = previous
            if prev_handler != handler_index and prev_value != value and self.strict:
                raise CharmConflictError(
                    f"handlers wrote conflicting values to {location}: "
                    f"{prev_value!r} vs {value!r}"
                )
        self._writes[location] = (handler_index, value)


class _HandlerFailed(Exception):
    """Internal: aborts the remaining actions of one handler."""


def step(model: Model, rng_seed: int | None = None, _rng: random.Random | None = None) -> StepReport:
    """Process one event from the queue.

    Leader maintenance runs first (an application left leaderless by a
    removal gets a new leader).  An empty queue is a no-op.  Events whose
    target unit no longer exists are dropped with a notice.
    """
    for app_name in sorted(model.applications):
        _ensure_leader(model, app_name)
    if not model.event_queue:
        return StepReport(event=None)
    rng = _rng if _rng is not None else random.Random(DEFAULT_SEED if rng_seed is None else rng_seed)
    event = model.event_queue.popleft()
    model.generation += 1
    unit = model.units.get(event.target)
    if unit is None:
        logger.info("dropping %s: target unit no longer exists", event.render())
        return StepReport(event=event.render(), dropped=True)

    unit.seen[event.key()] = event
    flags_before = frozenset(unit.states)
    app = model.applications[unit.app]
    matching = [
        (index, handler)
        for index, handler in enumerate(app.charm.handlers)
        if handler.matches(event.kind) and handler.guard_satisfied(unit.states)
    ]
    rng.shuffle(matching)

    tracker = _ConflictTracker(model.strict_conflicts)
    changed_bags: set[tuple[str, str]] = set()  # (relation id, writer unit id)
    actions_applied = 0
    for index, handler in matching:
        actions_applied += _run_handler(model, unit, event, index, handler, tracker, changed_bags)
        if model.shadow_check:
            model.shadow_deltas += _shadow_delta(model, unit, event, handler)

    emitted = _emit_changed(model, changed_bags)
    if event.kind == EventKind.install():
        model.event_queue.append(Event(EventKind.start(), unit.id))
    redelivered = _redeliver(model, unit, flags_before)

    if model.trace is not None:
        model.trace.append(
            {
                "generation": model.generation,
                "event": event.key(),
                "target": unit.id,
                "handlers": len(matching),
                "writes": sorted(changed_bags),
            }
        )
    return StepReport(
        event=event.render(),
        handlers_run=len(matching),
        actions_applied=actions_applied,
        emitted=emitted,
        redelivered=redelivered,
    )


def _run_handler(
    model: Model,
    unit: Unit,
    event: Event,
    handler_index: int,
    handler: HookHandler,
    tracker: _ConflictTracker,
    changed_bags: set[tuple[str, str]],
) -> int:
    applied = 0
    try:
        for action in handler.actions:
            _apply_action(model, unit, event, handler_index, action, tracker, changed_bags)
            applied += 1
    except _HandlerFailed:
        applied += 1
    return applied


def _apply_action(
    model: Model,
    unit: Unit,
    event: Event,
    handler_index: int,
    action,
    tracker: _ConflictTracker,
    changed_bags: set[tuple[str, str]],
) -> None:
    app = model.applications[unit.app]
    if isinstance(action, SetUnitStatus):
        tracker.record(handler_index, ("status", unit.id), action.status)
        unit.status = action.status
        unit.message = ""
    elif isinstance(action, SetState):
        tracker.record(handler_index, ("state", unit.id, action.flag), True)
        unit.states.add(action.flag)
    elif isinstance(action, ClearState):
        tracker.record(handler_index, ("state", unit.id, action.flag), False)
        unit.states.discard(action.flag)
    elif isinstance(action, OpenPort):
        unit.open_ports.add(action.port)
    elif isinstance(action, Fail):
        tracker.record(handler_index, ("status", unit.id), "error")
        unit.status = "error"
        unit.message = action.message
        raise _HandlerFailed()
    elif isinstance(action, SetRelationData):
        remote_bag = None
        if event.payload and event.remote:
            relation = model.relations.get(event.payload)
            if relation is not None:
                remote_bag = relation.data.get(event.remote)
        value = resolve_template(action.value, app.config, remote_bag)
        targets = _data_targets(model, unit, event, action.endpoint)
        for relation in targets:
            tracker.record(
                handler_index, ("relation-data", relation.id, unit.id, action.key), value
            )
            bag = relation.data.setdefault(unit.id, {})
            if bag.get(action.key) != value:
                bag[action.key] = value
                changed_bags.add((relation.id, unit.id))
    else:  # pragma: no cover - the action language is closed
        raise EngineError(f"unknown action {action!r}")


def _data_targets(model: Model, unit: Unit, event: Event, endpoint: str) -> list[Relation]:
    """Relations a set-relation-data action writes to.

    Inside a relation event whose relation sits on the named endpoint, the
    write targets that relation only; otherwise it targets every current
    relation on the endpoint (a re-publish, e.g. from config-changed).
    """
    if event.payload:
        relation = model.relations.get(event.payload)
        if relation is not None and relation.endpoint_of(unit.app) == endpoint:
            return [relation]
    return model.relations_of(unit.app, endpoint)


def _emit_changed(model: Model, changed_bags: set[tuple[str, str]]) -> int:
    """One relation-changed event per remote unit per changed bag."""
    emitted = 0
    for relation_id, writer_id in sorted(changed_bags):
        relation = model.relations[relation_id]
        writer_app = model.units[writer_id].app
        other_app = next(a for a in relation.apps() if a != writer_app)
        other_endpoint = relation.endpoint_of(other_app)
        for remote_unit in model.unit_ids_of(other_app):
            if remote_unit == writer_id:
                continue
            model.event_queue.append(
                Event(
                    EventKind.relation_changed(other_endpoint),
                    remote_unit,
                    relation_id,
                    writer_id,
                )
            )
            emitted += 1
    return emitted


def _redeliver(model: Model, unit: Unit, flags_before: frozenset[str]) -> int:
    """Re-enqueue seen events whose handlers' guards newly became
    satisfiable after this step's flag changes."""
    if frozenset(unit.states) == flags_before:
        return 0
    app = model.applications[unit.app]
    redelivered = 0
    for key in sorted(unit.seen):
        event = unit.seen[key]
        for handler in app.charm.handlers:
            if not handler.matches(event.kind):
                continue
            if handler.guard_satisfied(unit.states) and not handler.guard_satisfied(flags_before):
                model.event_queue.append(event)
                redelivered += 1
                break
    return redelivered


def _shadow_delta(model: Model, unit: Unit, event: Event, handler: HookHandler) -> int:
    """Re-apply a handler's actions to a copy of the post-state and count
    observable differences; idempotent handlers produce zero."""
    baseline = checkpoint(model, include_inventory=True)
    twin = load_checkpoint(baseline, model.store)
    twin_unit = twin.units[unit.id]
    tracker = _ConflictTracker(strict=False)
    try:
        for action in handler.actions:
            _apply_action(twin, twin_unit, event, 0, action, tracker, set())
    except _HandlerFailed:
        pass
    after = checkpoint(twin, include_inventory=True)
    return 0 if after == baseline else 1


def run_to_convergence(
    model: Model, budget: int = DEFAULT_BUDGET, rng_seed: int = DEFAULT_SEED
) -> ConvergenceResult:
    """Step until the queue drains; give up after ``budget`` events."""
    if budget < 1:
        raise EngineError(f"budget must be positive, got {budget}")
    rng = random.Random(rng_seed)
    processed = 0
    while processed < budget:
        report = step(model, _rng=rng)
        if report.event is None:
            return ConvergenceResult("converged", processed)
        processed += 1
    if model.converged and not _maintenance_pending(model):
        return ConvergenceResult("converged", processed)
    return ConvergenceResult("budget-exhausted", processed)


def _maintenance_pending(model: Model) -> bool:
    for app_name in model.applications:
        unit_ids = model.unit_ids_of(app_name)
        if unit_ids and not any(model.units[u].leader for u in unit_ids):
            return True
    return False


# ---------------------------------------------------------------------------
# Status and hashing


def status_snapshot(model: Model) -> dict:
    """An immutable point-in-time view: applications, units, machines,
    relations, pending event count, and the canonical state hash."""
    doc = _canonical_state(model)
    doc["generation"] = model.generation
    doc["state_hash"] = state_hash(model)
    return doc


def _canonical_state(model: Model) -> dict:
    applications = {}
    for name in sorted(model.applications):
        app = model.applications[name]
        applications[name] = {
            "charm": app.charm_ref,
            "series": app.series,
            "exposed": app.exposed,
            "config": {k: app.config[k] for k in sorted(app.config)},
            "units": model.unit_ids_of(name),
        }
    units = {}
    for unit_id in sorted(model.units, key=_unit_sort_key):
        unit = model.units[unit_id]
        units[unit_id] = {
            "application": unit.app,
            "machine": unit.machine,
            "status": unit.status,
            "message": unit.message,
            "leader": unit.leader,
            "states": sorted(unit.states),
            "open_ports": sorted(unit.open_ports),
        }
    machines = {}
    for machine_id in sorted(model.machines, key=machine_sort_key):
        record = model.inventory.machines.get(machine_id)
        if record is None:
            continue
        machines[machine_id] = {
            "state": record.state,
            "region": record.region,
            "az": record.az,
            "arch": record.arch,
            "cores": record.cores,
            "mem": record.mem,
            "disk": record.disk,
            "series": record.series,
            "properties": sorted(record.properties),
            "containers": sorted(record.containers, key=machine_sort_key),
        }
    relations = {}
    for relation_id in sorted(model.relations):
        relation = model.relations[relation_id]
        relations[relation_id] = {
            "provider": relation.provider,
            "requirer": relation.requirer,
            "interface": relation.interface,
            "data": {
                unit_id: {k: bag[k] for k in sorted(bag)}
                for unit_id, bag in sorted(relation.data.items())
            },
        }
    return {
        "applications": applications,
        "units": units,
        "machines": machines,
        "relations": relations,
        "pending_events": len(model.event_queue),
    }


def state_hash(model: Model) -> str:
    """Digest over the canonical sorted serialization of observable state.

    The step counter is excluded: equivalent deployments reached through
    different event histories (e.g. a compiled plan versus a reactive
    deploy) must hash identically.
    """
    canonical = json.dumps(_canonical_state(model), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Checkpoint / restore


def checkpoint(model: Model, include_inventory: bool = True) -> dict:
    """Serialize the model for resumption.  Charm bodies are not embedded;
    restoring resolves references against a store."""
    doc: dict = {
        "generation": model.generation,
        "project": model.project,
        "strict_conflicts": model.strict_conflicts,
        "applications": {
            name: {
                "charm": app.charm_ref,
                "series": app.series,
                "exposed": app.exposed,
                "unit_counter": app.unit_counter,
                "config": {k: app.config[k] for k in sorted(app.config)},
            }
            for name, app in sorted(model.applications.items())
        },
        "units": {
            unit.id: {
                "application": unit.app,
                "machine": unit.machine,
                "status": unit.status,
                "message": unit.message,
                "leader": unit.leader,
                "states": sorted(unit.states),
                "open_ports": sorted(unit.open_ports),
                "seen": [list(key) for key in sorted(unit.seen)],
            }
            for unit_id, unit in sorted(model.units.items())
        },
        "relations": {
            relation.id: {
                "provider": relation.provider,
                "requirer": relation.requirer,
                "interface": relation.interface,
                "data": {
                    unit_id: {k: bag[k] for k in sorted(bag)}
                    for unit_id, bag in sorted(relation.data.items())
                },
            }
            for relation_id, relation in sorted(model.relations.items())
        },
        "queue": [
            {
                "kind": event.kind.kind,
                "name": event.kind.name,
                "target": event.target,
                "payload": event.payload,
                "remote": event.remote,
            }
            for event in model.event_queue
        ],
        "machines": sorted(model.machines, key=machine_sort_key),
    }
    if include_inventory:
        doc["inventory"] = model.inventory.dump()
    return doc


def load_checkpoint(
    doc: dict,
    store,
    inventory: Inventory | None = None,
    quota_tree=None,
) -> Model:
    """Rebuild a model from a checkpoint.  The inventory is taken from the
    checkpoint when embedded, else it must be supplied."""
    if inventory is None:
        embedded = doc.get("inventory")
        if embedded is None:
            raise EngineError("checkpoint has no embedded inventory and none was supplied")
        inventory = Inventory.load(embedded)
    model = Model(
        store,
        inventory,
        project=doc.get("project"),
        quota_tree=quota_tree,
        strict_conflicts=bool(doc.get("strict_conflicts", True)),
    )
    model.generation = int(doc.get("generation", 0))
    for name, body in (doc.get("applications") or {}).items():
        charm = store.resolve_charm(body["charm"])
        model.applications[name] = Application(
            name=name,
            charm_ref=body["charm"],
            charm=charm,
            series=body["series"],
            exposed=bool(body.get("exposed", False)),
            unit_counter=int(body.get("unit_counter", 0)),
            config=dict(body.get("config") or {}),
        )
    for unit_id, body in (doc.get("units") or {}).items():
        unit = Unit(
            id=unit_id,
            app=body["application"],
            machine=body["machine"],
            status=body.get("status", "allocating"),
            message=body.get("message", ""),
            leader=bool(body.get("leader", False)),
            states=set(body.get("states") or ()),
            open_ports=set(body.get("open_ports") or ()),
        )
        for key in body.get("seen") or []:
            kind, name, payload, remote = key
            unit.seen[(kind, name, payload, remote)] = Event(
                EventKind(kind, name), unit_id, payload, remote
            )
        model.units[unit_id] = unit
    for relation_id, body in (doc.get("relations") or {}).items():
        model.relations[relation_id] = Relation(
            id=relation_id,
            provider=body["provider"],
            requirer=body["requirer"],
            interface=body["interface"],
            data={
                unit_id: dict(bag) for unit_id, bag in (body.get("data") or {}).items()
            },
        )
    for body in doc.get("queue") or []:
        model.event_queue.append(
            Event(
                EventKind(body["kind"], body.get("name", "")),
                body["target"],
                body.get("payload", ""),
                body.get("remote", ""),
            )
        )
    model.machines = set(doc.get("machines") or ())
    return model
