"""Contamination-region inference on the directed flow graph.

The region at a step is ``upstream(S1) & downstream(S0)``: nodes that reach
some alarmed sensor and are reached from some clean sensor. Both sets
include the sensors themselves.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache

from addd.errors import ContractError, InvalidInputError, TopologyError
from addd.sim import _node_key


@dataclass(frozen=True)
class PredictionSnapshot:
    t: int
    y_hat: dict  # sensor -> 0/1


@dataclass(frozen=True)
class RegionReport:
    t: int
    region: frozenset
    s1: frozenset
    s0: frozenset


@dataclass(frozen=True)
class LocalizationMetrics:
    step_fp: int
    step_fn: int
    localized_nodes: frozenset
    evaluated_steps: int

    @property
    def source_in_region_rate(self):
        if self.evaluated_steps == 0:
            return 1.0
        return 1.0 - self.step_fn / self.evaluated_steps


def _closure(adj, start):
    seen = {start}
    stack = [start]
    while stack:
        for m in adj(stack.pop()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return frozenset(seen)


@lru_cache(maxsize=32)
def _reach(topology):
    """Per-sensor (ancestors, descendants), each including the sensor."""
    return {
        s: (_closure(topology.predecessors, s), _closure(topology.successors, s))
        for s in topology.sensors
    }


def _check_sensors(topology, sensors):
    unknown = set(sensors) - set(topology.sensors)
    if unknown:
        raise TopologyError(f"unknown sensors: {sorted(unknown, key=_node_key)}")


def upstream(topology, sensors):
    _check_sensors(topology, sensors)
    reach = _reach(topology)
    out = set()
    for s in sensors:
        out |= reach[s][0]
    return frozenset(out)


def downstream(topology, sensors):
    """Union of forward-reachable nodes; the empty set maps to all nodes."""
    _check_sensors(topology, sensors)
    if not sensors:
        return frozenset(topology.nodes)
    reach = _reach(topology)
    out = set()
    for s in sensors:
        out |= reach[s][1]
    return frozenset(out)


def contamination_region(topology, snapshot):
    y = snapshot.y_hat
    if set(y) != set(topology.sensors):
        raise ContractError(f"snapshot at t={snapshot.t} does not cover exactly the installed sensors")
    s1 = frozenset(s for s, v in y.items() if v)
    s0 = frozenset(y) - s1
    region = upstream(topology, s1) & downstream(topology, s0) if s1 else frozenset()
    return RegionReport(snapshot.t, region, s1, s0)


def localization_metrics(reports, true_regions, true_sources, sensors):
    """Step-level localization counts.

    A step is a false positive when a region is reported while nothing is
    contaminated. Contamination steps are evaluated once the contamination
    has reached at least one sensor; such a step is a false negative when
    some active source is missing from the reported region.
    """
    reports = list(reports)
    if not len(reports) == len(true_regions) == len(true_sources):
        raise InvalidInputError(
            f"misaligned horizons: {len(reports)} reports, {len(true_regions)} regions, "
            f"{len(true_sources)} source sets"
        )
    sensors = frozenset(sensors)
    fp = fn = evaluated = 0
    localized = set()
    for k, (rep, truth, src) in enumerate(zip(reports, true_regions, true_sources)):
        if rep.t != k:
            raise InvalidInputError(f"report at position {k} has t={rep.t}")
        if not truth:
            fp += bool(rep.region)
            continue
        localized |= rep.region
        if truth & sensors:
            evaluated += 1
            fn += not set(src) <= rep.region
    return LocalizationMetrics(fp, fn, frozenset(localized), evaluated)


def _join(nodes):
    return ";".join(sorted(nodes, key=_node_key))


def region_rows(reports):
    for r in reports:
        yield [r.t, _join(r.region), _join(r.s1), _join(r.s0)]


def write_regions_csv(reports, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "region_nodes", "s1", "s0"])
    w.writerows(region_rows(reports))


def read_regions_csv(fh):
    rows = csv.DictReader(line for line in fh if not line.startswith("#"))
    split = lambda v: frozenset(x for x in v.split(";") if x)  # noqa: E731
    return [RegionReport(int(r["t"]), split(r["region_nodes"]), split(r["s1"]), split(r["s0"]))
            for r in rows]
