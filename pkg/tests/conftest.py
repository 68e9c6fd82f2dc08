"""Shared fixtures: the demo store, inventory factories, fixture bundles."""

from __future__ import annotations

import pytest

from fedweave.builtin import MOODLE_BUNDLE, SCALED_BUNDLE, builtin_store
from fedweave.bundle import parse_bundle
from fedweave.engine import Model, deploy_bundle, run_to_convergence
from fedweave.provider import Inventory


@pytest.fixture
def store():
    return builtin_store()


@pytest.fixture
def make_inventory():
    def _make(
        count: int = 4,
        cores: int = 4,
        mem: int = 8192,
        disk: int = 102400,
        region: str = "garr-01",
        az: str = "az1",
        series: str = "xenial",
        arch: str = "amd64",
    ) -> Inventory:
        inventory = Inventory()
        inventory.add_zone(region, az)
        for _ in range(count):
            inventory.enlist(
                region=region, az=az, arch=arch, cores=cores, mem=mem,
                disk=disk, series=series,
            )
        return inventory

    return _make


@pytest.fixture
def moodle_bundle():
    return parse_bundle(MOODLE_BUNDLE)


@pytest.fixture
def scaled_bundle():
    return parse_bundle(SCALED_BUNDLE)


@pytest.fixture
def deploy_fixture(store, make_inventory):
    """Deploy a bundle text onto a fresh inventory; optionally converge."""

    def _deploy(bundle_text: str, machines: int = 4, converge: bool = True, **model_kw):
        bundle = parse_bundle(bundle_text)
        model = Model(store, make_inventory(machines), **model_kw)
        result = deploy_bundle(model, bundle)
        if converge:
            run_to_convergence(model)
        return model, result

    return _deploy
