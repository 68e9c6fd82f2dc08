"""Built-in demonstration charms and bundles.

These back the test corpus and `fedweave init --demo`: a three-handler
web application (moodle), a database (postgresql) that publishes its
connection data over the ``pgsql`` interface, and a front-end proxy
(haproxy).  The moodle charm deliberately guards its start handler on the
database flag, so a unit only goes active once the relation data has
arrived — whatever order the events land in.
"""

from __future__ import annotations

from .charms import CharmStore, load_charm

MOODLE_CHARM = """\
name: moodle
owner: csd-garr
series: [xenial]
provides:
  website: http
requires:
  database: pgsql
options:
  site_name:
    type: string
    default: Moodle
    description: Title shown on the front page.
handlers:
  - on: install
    do:
      - set-status: installing
      - set-state: installed
  - on: database-relation-changed
    when: [installed]
    do:
      - set-relation-data: {endpoint: database, key: connected, value: "{remote:host}"}
      - set-state: database.connected
  - on: start
    when: [installed, database.connected]
    do:
      - set-status: active
      - set-state: started
"""

POSTGRESQL_CHARM = """\
name: postgresql
series: [xenial]
provides:
  db: pgsql
options:
  extra_pg_auth:
    type: string
    default: ""
    description: Extra pg_hba.conf entries, one per line.
  listen_port:
    type: int
    default: 5432
    description: Server listen port.
handlers:
  - on: install
    do:
      - set-status: installing
      - set-state: installed
  - on: start
    when: [installed]
    do:
      - set-status: active
      - set-state: started
  - on: db-relation-joined
    when: [installed]
    do:
      - set-relation-data: {endpoint: db, key: host, value: "10.0.0.1"}
      - set-relation-data: {endpoint: db, key: port, value: "{config:listen_port}"}
      - set-relation-data: {endpoint: db, key: user, value: juju_moodle}
  - on: config-changed
    when: [installed]
    do:
      - set-relation-data: {endpoint: db, key: port, value: "{config:listen_port}"}
"""

HAPROXY_CHARM = """\
name: haproxy
series: [xenial]
requires:
  reverseproxy: http
options:
  default_timeout:
    type: int
    default: 30
    description: Connection timeout in seconds.
handlers:
  - on: install
    do:
      - set-status: installing
      - set-state: installed
      - open-port: 80
  - on: start
    when: [installed]
    do:
      - set-status: active
      - set-state: started
  - on: reverseproxy-relation-joined
    when: [installed]
    do:
      - set-state: backend.linked
"""

BUILTIN_CHARMS = (MOODLE_CHARM, POSTGRESQL_CHARM, HAPROXY_CHARM)

MOODLE_BUNDLE = """\
applications:
  moodle:
    charm: "cs:~csd-garr/moodle"
    num_units: 1
    to:
      - 0
  postgresql:
    charm: "cs:postgresql"
    num_units: 1
    to:
      - lxd:0
    options:
      extra_pg_auth: host moodle juju_moodle 10.0.0.1/24 md5
relations:
  - ["postgresql:db", "moodle:database"]
machines:
  "0":
    series: xenial
    constraints: "arch=amd64 cpu-cores=1 mem=2048 root-disk=20480"
"""

# The front-end scaling variant: the same stack plus an exposed haproxy on
# its own machine, reverse-proxying the web application.
SCALED_BUNDLE = """\
series: xenial
applications:
  moodle:
    charm: "cs:~csd-garr/moodle"
    num_units: 1
    to:
      - 0
  postgresql:
    charm: "cs:postgresql"
    num_units: 1
    to:
      - lxd:0
    options:
      extra_pg_auth: host moodle juju_moodle 10.0.0.1/24 md5
  haproxy:
    charm: "cs:haproxy"
    num_units: 1
    expose: true
    to:
      - "4"
relations:
  - ["postgresql:db", "moodle:database"]
  - ["haproxy:reverseproxy", "moodle:website"]
machines:
  "0":
    series: xenial
    constraints: "arch=amd64 cpu-cores=1 mem=2048 root-disk=20480"
  "4":
    series: xenial
"""


def builtin_store() -> CharmStore:
    """A store preloaded with the demonstration charms."""
    store = CharmStore()
    for text in BUILTIN_CHARMS:
        spec, owner = load_charm(text)
        store.register_charm(spec, owner=owner)
    return store
