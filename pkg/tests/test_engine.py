"""Reactive engine: convergence, redelivery, scaling, checkpoints, hashing."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedweave.builtin import MOODLE_BUNDLE, SCALED_BUNDLE, builtin_store
from fedweave.bundle import Placement, parse_bundle
from fedweave.charms import load_charm
from fedweave.engine import (
    CharmConflictError,
    DeploymentError,
    EngineError,
    Model,
    UnknownEntityError,
    add_relation,
    add_unit,
    checkpoint,
    deploy_bundle,
    elect_leader,
    load_checkpoint,
    remove_unit,
    run_to_convergence,
    set_config,
    state_hash,
    status_snapshot,
    step,
    update_status,
)
from fedweave.provider import Inventory
from fedweave.quota import ProjectTree, QuotaExceededError, QuotaSet

REL_ID = "postgresql:db moodle:database"


def _store_with(*charm_texts):
    store = builtin_store()
    for text in charm_texts:
        spec, owner = load_charm(text)
        store.register_charm(spec, owner)
    return store


class TestMoodleConvergence:
    def test_placement_fidelity(self, deploy_fixture):
        model, result = deploy_fixture(MOODLE_BUNDLE)
        host = result.machine_map["0"]
        record = model.inventory.machines[host]
        assert record.arch == "amd64"
        assert record.cores >= 1 and record.mem >= 2048 and record.disk >= 20480
        assert model.units["moodle/0"].machine == host
        assert model.units["postgresql/0"].machine == f"{host}/lxd/0"

    def test_both_units_active(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        assert model.units["moodle/0"].status == "active"
        assert model.units["postgresql/0"].status == "active"
        assert model.converged

    def test_single_relation_with_published_data(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        assert list(model.relations) == [REL_ID]
        relation = model.relations[REL_ID]
        assert relation.interface == "pgsql"
        assert relation.data["postgresql/0"] == {
            "host": "10.0.0.1",
            "port": "5432",
            "user": "juju_moodle",
        }
        # moodle answered with the templated remote host.
        assert relation.data["moodle/0"] == {"connected": "10.0.0.1"}

    def test_flags_after_convergence(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        assert model.units["moodle/0"].states == {
            "installed", "database.connected", "started",
        }
        assert model.units["postgresql/0"].states == {"installed", "started"}

    def test_golden_event_trace(self, store, make_inventory):
        model = Model(store, make_inventory())
        model.trace = []
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        result = run_to_convergence(model)
        assert result.converged
        assert result.events_processed == 11
        observed = [(t["event"][0], t["event"][1], t["target"]) for t in model.trace]
        assert observed == [
            ("install", "", "moodle/0"),
            ("leader-elected", "", "moodle/0"),
            ("install", "", "postgresql/0"),
            ("leader-elected", "", "postgresql/0"),
            ("relation-joined", "db", "postgresql/0"),
            ("relation-joined", "database", "moodle/0"),
            # start arrives before the relation data: recorded, not run...
            ("start", "", "moodle/0"),
            ("start", "", "postgresql/0"),
            ("relation-changed", "database", "moodle/0"),
            ("relation-changed", "db", "postgresql/0"),
            # ...then redelivered once the database flag appears.
            ("start", "", "moodle/0"),
        ]

    def test_redelivery_is_what_unblocks_start(self, store, make_inventory):
        model = Model(store, make_inventory())
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        redelivered = 0
        while True:
            report = step(model)
            if report.event is None:
                break
            redelivered += report.redelivered
        assert redelivered == 1
        assert model.units["moodle/0"].status == "active"

    def test_leader_flags(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        assert model.units["moodle/0"].leader
        assert model.units["postgresql/0"].leader


class TestOrderInvariance:
    def test_handler_shuffle_seeds_agree(self, store, make_inventory):
        hashes = set()
        for seed in range(25):
            model = Model(store, make_inventory())
            deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
            assert run_to_convergence(model, rng_seed=seed).converged
            hashes.add(state_hash(model))
        assert len(hashes) == 1

    def test_scaled_bundle_seeds_agree(self, store, make_inventory):
        hashes = set()
        for seed in range(10):
            model = Model(store, make_inventory())
            deploy_bundle(model, parse_bundle(SCALED_BUNDLE))
            assert run_to_convergence(model, rng_seed=seed).converged
            hashes.add(state_hash(model))
        assert len(hashes) == 1


class TestIdempotence:
    def test_shadow_reapplication_produces_no_deltas(self, store, make_inventory):
        for bundle_text in (MOODLE_BUNDLE, SCALED_BUNDLE):
            model = Model(store, make_inventory())
            model.shadow_check = True
            deploy_bundle(model, parse_bundle(bundle_text))
            assert run_to_convergence(model).converged
            assert model.shadow_deltas == 0

    def test_converging_a_converged_model_is_free(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        result = run_to_convergence(model)
        assert result.converged and result.events_processed == 0

    @given(port=st.integers(min_value=1024, max_value=65535))
    @settings(deadline=None, max_examples=25)
    def test_repeated_config_write_is_absolute(self, port):
        store = builtin_store()
        inventory = Inventory()
        inventory.add_zone("garr-01", "az1")
        for _ in range(4):
            inventory.enlist(
                region="garr-01", az="az1", arch="amd64",
                cores=4, mem=8192, disk=102400, series="xenial",
            )
        model = Model(store, inventory)
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        run_to_convergence(model)
        set_config(model, "postgresql", {"listen_port": port})
        run_to_convergence(model)
        once = state_hash(model)
        assert set_config(model, "postgresql", {"listen_port": port}) == []
        assert model.converged
        assert state_hash(model) == once


class TestRelationDataFlow:
    def test_config_change_republishes_and_notifies(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        changed = set_config(model, "postgresql", {"listen_port": 6432})
        assert changed == ["listen_port"]
        result = run_to_convergence(model)
        assert result.converged
        bag = model.relations[REL_ID].data["postgresql/0"]
        assert bag["port"] == "6432"

    def test_unchanged_value_emits_no_relation_changed(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        # extra_pg_auth is not templated into the bag: the config-changed
        # handler rewrites port with its current value, so nothing changes
        # and no relation-changed reaches moodle.
        set_config(model, "postgresql", {"extra_pg_auth": "local all postgres peer"})
        result = run_to_convergence(model)
        assert result.events_processed == 1

    def test_no_op_config_enqueues_nothing(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        assert set_config(model, "postgresql", {"listen_port": 5432}) == []
        assert model.converged

    def test_unknown_option(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="has no option"):
            set_config(model, "postgresql", {"max_connections": 10})

    def test_unknown_application(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(UnknownEntityError, match="unknown application"):
            set_config(model, "mysql", {"x": 1})


class TestAddRelation:
    def test_orientation_is_provider_first(self, deploy_fixture):
        model, _ = deploy_fixture(SCALED_BUNDLE)
        relation = model.relations["moodle:website haproxy:reverseproxy"]
        assert relation.provider == "moodle:website"
        assert relation.requirer == "haproxy:reverseproxy"
        assert relation.interface == "http"

    def test_duplicate_relation(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="already exists"):
            add_relation(model, "moodle:database", "postgresql:db")

    def test_self_relation(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="to itself"):
            add_relation(model, "moodle:website", "moodle:database")

    def test_malformed_endpoint(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="malformed endpoint"):
            add_relation(model, "moodle", "postgresql:db")

    def test_requirer_requirer_pair_rejected(self, store, make_inventory):
        model = Model(store, make_inventory())
        deploy_bundle(model, parse_bundle(
            "applications:\n"
            "  front:\n    charm: cs:haproxy\n    num_units: 1\n"
            "  back:\n    charm: cs:haproxy\n    num_units: 1\n"
        ))
        with pytest.raises(EngineError, match="provider/requirer pair"):
            add_relation(model, "front:reverseproxy", "back:reverseproxy")


class TestScaling:
    def test_add_units_join_existing_relations(self, deploy_fixture):
        model, _ = deploy_fixture(SCALED_BUNDLE)
        new_ids = add_unit(model, "moodle", count=2)
        assert new_ids == ["moodle/1", "moodle/2"]
        assert run_to_convergence(model).converged
        assert model.unit_ids_of("moodle") == ["moodle/0", "moodle/1", "moodle/2"]
        for unit_id in new_ids:
            unit = model.units[unit_id]
            assert unit.status == "active"
            # The published database data was re-delivered to the newcomers.
            assert "database.connected" in unit.states
        db_relation = model.relations[REL_ID]
        assert db_relation.data["moodle/2"] == {"connected": "10.0.0.1"}

    def test_add_unit_into_container(self, deploy_fixture):
        model, result = deploy_fixture(MOODLE_BUNDLE)
        host = result.machine_map["0"]
        new_ids = add_unit(
            model, "postgresql", placement=Placement.in_container("lxd", host)
        )
        assert model.units[new_ids[0]].machine == f"{host}/lxd/1"

    def test_add_unit_onto_live_machine(self, deploy_fixture):
        model, result = deploy_fixture(MOODLE_BUNDLE)
        host = result.machine_map["0"]
        new_ids = add_unit(model, "moodle", placement=Placement.on_machine(host))
        assert model.units[new_ids[0]].machine == host

    def test_add_unit_fresh_machine(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        owned_before = set(model.machines)
        new_ids = add_unit(model, "moodle")
        machine = model.units[new_ids[0]].machine
        assert machine not in owned_before
        assert model.inventory.machines[machine].state == "acquired"
        assert model.inventory.machines[machine].series == "xenial"

    def test_add_unit_unknown_app(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(UnknownEntityError):
            add_unit(model, "mysql")

    def test_add_unit_nonpositive_count(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="must be positive"):
            add_unit(model, "moodle", count=0)


class TestRemoveUnit:
    def test_remote_units_get_departed_events(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        remove_unit(model, "postgresql/0")
        kinds = [e.kind.render() for e in model.event_queue]
        assert kinds == ["database-relation-departed"]
        assert "postgresql/0" not in model.units
        assert run_to_convergence(model).converged

    def test_machine_released_when_emptied(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        container = model.units["postgresql/0"].machine
        remove_unit(model, "postgresql/0")
        assert container not in model.inventory.machines
        assert container not in model.machines

    def test_shared_machine_stays_acquired(self, deploy_fixture):
        model, result = deploy_fixture(MOODLE_BUNDLE)
        host = result.machine_map["0"]
        add_unit(model, "moodle", placement=Placement.on_machine(host))
        run_to_convergence(model)
        remove_unit(model, "moodle/1")
        assert model.inventory.machines[host].state == "acquired"

    def test_host_with_containers_is_kept(self, deploy_fixture):
        model, result = deploy_fixture(MOODLE_BUNDLE)
        host = result.machine_map["0"]
        remove_unit(model, "moodle/0")
        # postgresql's container still lives on the host.
        assert model.inventory.machines[host].state == "acquired"

    def test_leader_reelection_after_removal(self, deploy_fixture):
        model, _ = deploy_fixture(SCALED_BUNDLE)
        add_unit(model, "moodle", count=2)
        run_to_convergence(model)
        assert model.units["moodle/0"].leader
        remove_unit(model, "moodle/0")
        run_to_convergence(model)
        leaders = [u for u in model.unit_ids_of("moodle") if model.units[u].leader]
        assert leaders == ["moodle/1"]

    def test_unknown_unit(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(UnknownEntityError, match="unknown unit"):
            remove_unit(model, "moodle/9")


class TestLeaderElection:
    def test_elect_requires_units(self, store, make_inventory):
        model = Model(store, make_inventory())
        with pytest.raises(UnknownEntityError):
            elect_leader(model, "moodle")

    def test_elect_twice_rejected(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="already has a leader"):
            elect_leader(model, "moodle")


class TestConflicts:
    CONFUSED = (
        "name: confused\n"
        "series: [xenial]\n"
        "handlers:\n"
        "  - on: install\n"
        "    do:\n"
        "      - set-status: active\n"
        "  - on: install\n"
        "    do:\n"
        "      - set-status: blocked\n"
    )
    AGREEING = (
        "name: agreeing\n"
        "series: [xenial]\n"
        "handlers:\n"
        "  - on: install\n"
        "    do:\n"
        "      - set-status: active\n"
        "  - on: install\n"
        "    do:\n"
        "      - set-status: active\n"
    )
    BUNDLE = "applications:\n  app:\n    charm: cs:{name}\n    num_units: 1\n"

    def test_strict_mode_raises(self, make_inventory):
        store = _store_with(self.CONFUSED)
        model = Model(store, make_inventory(), strict_conflicts=True)
        deploy_bundle(model, parse_bundle(self.BUNDLE.format(name="confused")))
        with pytest.raises(CharmConflictError, match="conflicting values"):
            run_to_convergence(model)

    def test_lax_mode_is_last_writer_wins(self, make_inventory):
        store = _store_with(self.CONFUSED)
        model = Model(store, make_inventory(), strict_conflicts=False)
        deploy_bundle(model, parse_bundle(self.BUNDLE.format(name="confused")))
        assert run_to_convergence(model).converged
        assert model.units["app/0"].status in {"active", "blocked"}

    def test_agreement_is_not_a_conflict(self, make_inventory):
        store = _store_with(self.AGREEING)
        model = Model(store, make_inventory(), strict_conflicts=True)
        deploy_bundle(model, parse_bundle(self.BUNDLE.format(name="agreeing")))
        assert run_to_convergence(model).converged
        assert model.units["app/0"].status == "active"


class TestDivergence:
    METRONOME = (
        "name: metronome\n"
        "series: [xenial]\n"
        "handlers:\n"
        "  - on: install\n"
        "    do:\n"
        "      - set-status: active\n"
        "      - set-state: ping\n"
        "  - on: update-status\n"
        "    when: [ping]\n"
        "    do:\n"
        "      - clear-state: ping\n"
        "      - set-state: pong\n"
        "  - on: update-status\n"
        "    when: [pong]\n"
        "    do:\n"
        "      - clear-state: pong\n"
        "      - set-state: ping\n"
    )

    def test_flag_oscillation_exhausts_budget(self, make_inventory):
        store = _store_with(self.METRONOME)
        model = Model(store, make_inventory())
        deploy_bundle(
            model,
            parse_bundle("applications:\n  tick:\n    charm: cs:metronome\n    num_units: 1\n"),
        )
        assert run_to_convergence(model).converged
        # Each beat re-arms the other handler's guard, so the queue never
        # drains: this is the one way to diverge, and the budget catches it.
        update_status(model)
        result = run_to_convergence(model, budget=60)
        assert result.outcome == "budget-exhausted"
        assert result.events_processed == 60
        assert not model.converged

    def test_budget_must_be_positive(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(EngineError, match="budget must be positive"):
            run_to_convergence(model, budget=0)


class TestFailAction:
    FRAGILE = (
        "name: fragile\n"
        "series: [xenial]\n"
        "handlers:\n"
        "  - on: install\n"
        "    do:\n"
        "      - fail: disk on fire\n"
        "      - set-status: active\n"
    )

    def test_fail_sets_error_and_aborts_handler(self, make_inventory):
        store = _store_with(self.FRAGILE)
        model = Model(store, make_inventory())
        deploy_bundle(
            model,
            parse_bundle("applications:\n  app:\n    charm: cs:fragile\n    num_units: 1\n"),
        )
        assert run_to_convergence(model).converged
        unit = model.units["app/0"]
        assert unit.status == "error"
        assert unit.message == "disk on fire"


class TestUpdateStatus:
    def test_enqueues_one_event_per_unit(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        assert update_status(model) == 2
        assert update_status(model, "moodle") == 1
        model.event_queue.clear()

    def test_unknown_application(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        with pytest.raises(UnknownEntityError):
            update_status(model, "mysql")

    def test_hash_ignores_generation(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        before = state_hash(model)
        generation = model.generation
        update_status(model)
        run_to_convergence(model)
        assert model.generation > generation
        assert state_hash(model) == before


class TestCheckpoint:
    def test_mid_flight_resume_reaches_same_state(self, store, make_inventory):
        reference = Model(store, make_inventory())
        deploy_bundle(reference, parse_bundle(MOODLE_BUNDLE))
        run_to_convergence(reference)
        target = state_hash(reference)

        model = Model(store, make_inventory())
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        for _ in range(5):
            step(model)
        resumed = load_checkpoint(checkpoint(model), store)
        run_to_convergence(resumed)
        assert state_hash(resumed) == target

    def test_round_trip_preserves_everything_observable(self, deploy_fixture):
        model, _ = deploy_fixture(SCALED_BUNDLE)
        doc = checkpoint(model)
        restored = load_checkpoint(doc, builtin_store())
        assert state_hash(restored) == state_hash(model)
        assert checkpoint(restored) == doc

    def test_seen_events_survive_for_redelivery(self, store, make_inventory):
        model = Model(store, make_inventory())
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        # Stop right before the relation data lands, while start@moodle/0
        # is already recorded as seen-but-unrunnable.
        for _ in range(8):
            step(model)
        restored = load_checkpoint(checkpoint(model), store)
        assert ("start", "", "", "") in restored.units["moodle/0"].seen
        run_to_convergence(restored)
        assert restored.units["moodle/0"].status == "active"

    def test_external_inventory(self, deploy_fixture, store):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        doc = checkpoint(model, include_inventory=False)
        assert "inventory" not in doc
        with pytest.raises(EngineError, match="no embedded inventory"):
            load_checkpoint(doc, store)
        restored = load_checkpoint(doc, store, inventory=model.inventory)
        assert state_hash(restored) == state_hash(model)


class TestStatusSnapshot:
    def test_snapshot_shape(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        snap = status_snapshot(model)
        assert snap["state_hash"] == state_hash(model)
        assert snap["pending_events"] == 0
        assert snap["units"]["moodle/0"]["status"] == "active"
        assert snap["applications"]["postgresql"]["units"] == ["postgresql/0"]
        machine = model.units["moodle/0"].machine
        assert snap["machines"][machine]["state"] == "acquired"


class TestDeploymentErrors:
    def test_redeploying_an_application(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE, machines=8)
        with pytest.raises(DeploymentError, match="already deployed"):
            deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))

    def test_invalid_bundle_is_rejected_up_front(self, store, make_inventory):
        model = Model(store, make_inventory())
        with pytest.raises(DeploymentError, match="does not validate"):
            deploy_bundle(
                model,
                parse_bundle("applications:\n  app:\n    charm: cs:nonesuch\n    num_units: 1\n"),
            )

    def test_series_mismatch_rolls_back(self, store, make_inventory):
        model = Model(store, make_inventory())
        bundle = parse_bundle(
            "applications:\n"
            "  moodle:\n"
            "    charm: cs:~csd-garr/moodle\n"
            "    num_units: 1\n"
            "    to: [0]\n"
            "machines:\n"
            "  \"0\":\n"
            "    series: trusty\n"
        )
        with pytest.raises(DeploymentError, match="does not support series"):
            deploy_bundle(model, bundle)
        assert model.applications == {}
        assert model.units == {}
        assert model.machines == set()
        assert all(r.state == "ready" for r in model.inventory.machines.values())

    def test_placement_failure_rolls_back(self, store):
        inventory = Inventory()
        inventory.add_zone("garr-01", "az1")
        inventory.enlist(
            region="garr-01", az="az1", arch="amd64",
            cores=1, mem=1024, disk=10240, series="xenial",
        )
        model = Model(store, inventory)
        # Machine 0 wants more memory than anything in the pool offers.
        with pytest.raises(Exception):
            deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        assert model.applications == {}
        assert all(r.state == "ready" for r in inventory.machines.values())


class TestQuotaIntegration:
    def _tree(self, **quota):
        tree = ProjectTree()
        tree.add_domain("garr")
        project = tree.create_project("cloud", "garr")
        tree.set_quota("garr", QuotaSet(**quota))
        tree.set_quota(project, QuotaSet(**quota))
        return tree, project

    def test_deploy_charges_the_project(self, store, make_inventory):
        tree, project = self._tree(vcpus=8, ram=16384, disk=100, instances=10)
        model = Model(store, make_inventory(), project=project, quota_tree=tree)
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        usage = tree.find(project).usage
        assert usage.instances == 2
        assert usage.vcpus == 1
        assert usage.ram == 2048
        assert usage.disk == 20  # 20480 MiB rounds to 20 GiB

    def test_overcommit_is_rejected_and_rolled_back(self, store, make_inventory):
        tree, project = self._tree(vcpus=8, ram=16384, disk=100, instances=1)
        model = Model(store, make_inventory(), project=project, quota_tree=tree)
        with pytest.raises(QuotaExceededError):
            deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        assert model.applications == {}
        assert tree.find(project).usage.instances == 0
        assert all(r.state == "ready" for r in model.inventory.machines.values())

    def test_add_and_remove_unit_track_instances(self, store, make_inventory):
        tree, project = self._tree(vcpus=8, ram=16384, disk=100, instances=10)
        model = Model(store, make_inventory(), project=project, quota_tree=tree)
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        run_to_convergence(model)
        add_unit(model, "moodle")
        assert tree.find(project).usage.instances == 3
        run_to_convergence(model)
        remove_unit(model, "moodle/1")
        assert tree.find(project).usage.instances == 2

    def test_add_unit_respects_quota(self, store, make_inventory):
        tree, project = self._tree(vcpus=8, ram=16384, disk=100, instances=2)
        model = Model(store, make_inventory(), project=project, quota_tree=tree)
        deploy_bundle(model, parse_bundle(MOODLE_BUNDLE))
        run_to_convergence(model)
        with pytest.raises(QuotaExceededError):
            add_unit(model, "moodle")
        assert model.unit_ids_of("moodle") == ["moodle/0"]


class TestEventHygiene:
    def test_events_for_dead_units_are_dropped(self, deploy_fixture):
        model, _ = deploy_fixture(MOODLE_BUNDLE)
        update_status(model)
        del model.units["moodle/0"]
        report = step(model)
        assert report.dropped
        assert report.handlers_run == 0
        run_to_convergence(model)
