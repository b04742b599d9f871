"""Desk-scale water network scenarios.

Chlorine at node v and step t (30-minute steps) follows

    C_v(t) = base * s(t) * decay**hops(reservoir, v) * m_v(t) + noise

where s(t) is a daily-plus-weekly demand pattern in [0.85, 1.15] and m_v(t)
is the depletion multiplier of any contamination event reaching v. Sensor
offsets scale the measured value. Event steps are given in online-phase
coordinates: step 0 is the first step after the pretraining phase.
"""

import csv
import io
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from addd.errors import TopologyError
from addd.rng import make_rng

STEPS_PER_DAY = 48
STEPS_PER_WEEK = 7 * STEPS_PER_DAY
PHASE_STEPS = 180 * STEPS_PER_DAY  # six months

TOPOLOGY_VERSION = 1
EVENT_SETS = ("all", "contamination", "offsets", "none")


# ---------------------------------------------------------------- topology


@dataclass(frozen=True)
class Topology:
    name: str
    nodes: tuple
    edges: tuple  # (from, to) pairs in flow direction
    reservoir: str
    sensors: tuple

    def __post_init__(self):
        succ = {n: [] for n in self.nodes}
        pred = {n: [] for n in self.nodes}
        for a, b in self.edges:
            succ[a].append(b)
            pred[b].append(a)
        object.__setattr__(self, "_succ", {k: tuple(v) for k, v in succ.items()})
        object.__setattr__(self, "_pred", {k: tuple(v) for k, v in pred.items()})

    def successors(self, node):
        return self._succ[node]

    def predecessors(self, node):
        return self._pred[node]

    def hops_from(self, source):
        """Shortest directed hop count from ``source`` to every reachable node."""
        dist = {source: 0}
        queue = deque([source])
        while queue:
            n = queue.popleft()
            for m in self._succ[n]:
                if m not in dist:
                    dist[m] = dist[n] + 1
                    queue.append(m)
        return dist

    def to_text(self):
        lines = [f"# addd topology", f"version {TOPOLOGY_VERSION}", f"name {self.name}",
                 f"reservoir {self.reservoir}"]
        lines += [f"node {n}" for n in self.nodes]
        lines += [f"edge {a} {b}" for a, b in self.edges]
        lines.append("sensors " + " ".join(self.sensors))
        return "\n".join(lines) + "\n"


def parse_topology(text, source="<string>"):
    """Parse the line-oriented topology format.

    Records: ``version N``, ``name X``, ``reservoir ID``, ``node ID``,
    ``edge FROM TO`` (flow direction) and ``sensors ID...``. Blank lines
    and ``#`` comments are ignored.
    """
    name = None
    reservoir = None
    nodes = {}
    edges = []
    sensors = []
    version = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()

        def fail(msg):
            raise TopologyError(f"{source}:{lineno}: {msg}")

        if key == "version":
            if args != [str(TOPOLOGY_VERSION)]:
                fail(f"unsupported topology version {' '.join(args)!r}")
            version = TOPOLOGY_VERSION
        elif key == "name" and len(args) == 1:
            name = args[0]
        elif key == "reservoir" and len(args) == 1:
            reservoir = (args[0], lineno)
        elif key == "node" and len(args) == 1:
            if args[0] in nodes:
                fail(f"duplicate node {args[0]!r}")
            nodes[args[0]] = lineno
        elif key == "edge" and len(args) == 2:
            edges.append((args[0], args[1], lineno))
        elif key == "sensors" and args:
            sensors.extend((s, lineno) for s in args)
        else:
            fail(f"malformed record {line!r}")
    if version is None:
        raise TopologyError(f"{source}: missing 'version' record")
    if reservoir is None:
        raise TopologyError(f"{source}: missing 'reservoir' record")
    if reservoir[0] not in nodes:
        raise TopologyError(f"{source}:{reservoir[1]}: unknown reservoir node {reservoir[0]!r}")
    for a, b, lineno in edges:
        for n in (a, b):
            if n not in nodes:
                raise TopologyError(f"{source}:{lineno}: edge references unknown node {n!r}")
    for s, lineno in sensors:
        if s not in nodes:
            raise TopologyError(f"{source}:{lineno}: unknown sensor node {s!r}")
    topo = Topology(
        name=name or "unnamed",
        nodes=tuple(nodes),
        edges=tuple((a, b) for a, b, _ in edges),
        reservoir=reservoir[0],
        sensors=tuple(dict.fromkeys(s for s, _ in sensors)),
    )
    reached = topo.hops_from(topo.reservoir)
    for n, lineno in nodes.items():
        if n not in reached:
            raise TopologyError(f"{source}:{lineno}: node {n!r} is not reachable from the reservoir")
    return topo


def load_topology(file):
    with open(file, encoding="utf-8") as fh:
        return parse_topology(fh.read(), source=str(file))


def shipped_topology(name):
    """Load one of the bundled topologies (``hanoi`` or ``zj``)."""
    text = resources.files("addd.data").joinpath(f"{name}.topo").read_text(encoding="utf-8")
    return parse_topology(text, source=f"{name}.topo")


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class ContaminationEvent:
    location: str
    periods: tuple  # ((start, end), ...) half-open, online steps
    depletion: float = 0.5


@dataclass(frozen=True)
class OffsetEvent:
    sensor: str
    period: tuple = (4000, PHASE_STEPS)
    factor: float = 0.98


@dataclass(frozen=True)
class SimParams:
    base_chlorine: float = 0.7
    decay: float = 0.97
    daily_amplitude: float = 0.10
    weekly_amplitude: float = 0.05
    delay_per_hop: int = 2
    attenuation: float = 0.9


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: Topology
    contamination: tuple = ()
    offsets: tuple = ()
    noise_sigma: float = 0.01
    seed: int = 0
    pretrain_steps: int = PHASE_STEPS
    online_steps: int = PHASE_STEPS
    params: SimParams = field(default_factory=SimParams)

    @property
    def horizon(self):
        return self.pretrain_steps + self.online_steps

    def with_seed(self, seed):
        return replace(self, seed=seed)

    def with_events(self, events):
        """Keep ``all`` events, only ``contamination`` or ``offsets``, or ``none``."""
        if events not in EVENT_SETS:
            raise ValueError(f"unknown event set {events!r}; choose from {EVENT_SETS}")
        keep_c = events in ("all", "contamination")
        keep_o = events in ("all", "offsets")
        return replace(self, contamination=self.contamination if keep_c else (),
                       offsets=self.offsets if keep_o else ())

    def validate(self):
        topo = self.topology
        for ev in self.contamination:
            if ev.location not in topo._succ:
                raise ValueError(f"contamination location {ev.location!r} is not a network node")
            if not 0 < ev.depletion < 1:
                raise ValueError("depletion must lie in (0, 1)")
            spans = sorted(ev.periods)
            for (s0, e0), (s1, _) in zip(spans, spans[1:]):
                if s1 < e0:
                    raise ValueError(f"overlapping contamination periods at {ev.location}")
            for s, e in spans:
                if not 0 <= s < e <= self.online_steps:
                    raise ValueError(f"contamination period {(s, e)} outside the online horizon")
        for ev in self.offsets:
            if ev.sensor not in topo.sensors:
                raise ValueError(f"offset sensor {ev.sensor!r} is not an installed sensor")
            if ev.factor <= 0:
                raise ValueError("offset factor must be positive")
            s, e = ev.period
            if not 0 <= s < e <= self.online_steps:
                raise ValueError(f"offset period {(s, e)} outside the online horizon")


@dataclass
class LabeledStream:
    """Per-sensor series over the full horizon; index 0 is online step -pretrain_steps."""

    scenario: str
    seed: int
    pretrain_steps: int
    sensors: tuple
    measured: dict
    true: dict
    labels: dict
    regions: list  # online steps: frozenset of contaminated nodes
    sources: list  # online steps: frozenset of active event locations

    @property
    def horizon(self):
        return len(next(iter(self.measured.values())))

    def pretrain(self, sensor):
        return self.measured[sensor][: self.pretrain_steps]

    def online(self, sensor):
        return self.measured[sensor][self.pretrain_steps :]

    def online_labels(self, sensor):
        return self.labels[sensor][self.pretrain_steps :]


def demand_pattern(t, params=SimParams()):
    t = np.asarray(t, dtype=np.float64)
    return (1.0 + params.daily_amplitude * np.sin(2 * np.pi * t / STEPS_PER_DAY)
            + params.weekly_amplitude * np.sin(2 * np.pi * t / STEPS_PER_WEEK))


def contamination_windows(scenario):
    """Map node -> list of (start, end, multiplier, location) in online steps."""
    topo, p = scenario.topology, scenario.params
    out = {}
    for ev in scenario.contamination:
        hops = topo.hops_from(ev.location)
        for node, h in hops.items():
            mult = 1.0 - ev.depletion * p.attenuation**h
            delay = p.delay_per_hop * h
            for s, e in ev.periods:
                out.setdefault(node, []).append(
                    (s + delay, min(e + delay, scenario.online_steps), mult, ev.location)
                )
    return out


def generate(scenario):
    """Simulate ``scenario`` and return a :class:`LabeledStream`."""
    scenario.validate()
    topo, p = scenario.topology, scenario.params
    n_pre, n = scenario.pretrain_steps, scenario.horizon
    t = np.arange(n)
    pattern = demand_pattern(t, p)
    depth = topo.hops_from(topo.reservoir)
    windows = contamination_windows(scenario)

    measured, true, labels = {}, {}, {}
    for sensor in topo.sensors:
        mult = np.ones(n)
        label = np.zeros(n, dtype=np.int8)
        for s, e, m, _ in windows.get(sensor, []):
            mult[n_pre + s : n_pre + e] *= m
            label[n_pre + s : n_pre + e] = 1
        rng = make_rng(scenario.seed, "noise", sensor)
        clean = p.base_chlorine * pattern * p.decay ** depth[sensor]
        series = clean * mult + rng.normal(0.0, scenario.noise_sigma, n)
        true[sensor] = series
        factor = np.ones(n)
        for ev in scenario.offsets:
            if ev.sensor == sensor:
                s, e = ev.period
                factor[n_pre + s : n_pre + e] = ev.factor
        measured[sensor] = series * factor
        labels[sensor] = label

    regions = [set() for _ in range(scenario.online_steps)]
    sources = [set() for _ in range(scenario.online_steps)]
    for node, spans in windows.items():
        for s, e, _, loc in spans:
            for k in range(s, e):
                regions[k].add(node)
                sources[k].add(loc)
    return LabeledStream(
        scenario=scenario.name,
        seed=scenario.seed,
        pretrain_steps=n_pre,
        sensors=topo.sensors,
        measured=measured,
        true=true,
        labels=labels,
        regions=[frozenset(r) for r in regions],
        sources=[frozenset(s) for s in sources],
    )


# -------------------------------------------------------------- reference scenarios

_TABLE1 = {
    # name: (network, contamination node, periods, offset sensors)
    "hanoi-sce1": ("hanoi", "N5", ((960, 1440), (5760, 6240)), ("N11", "N7")),
    "hanoi-sce2": ("hanoi", "N19", ((1440, 1920), (5280, 5760)), ("N18", "N30")),
    "hanoi-sce3": ("hanoi", "N8", ((1200, 1680), (5520, 6000)), ("N11", "N18")),
    "zj-sce1": ("zj", "N4", ((1440, 1920), (5280, 5760)), ("N11", "N26")),
    "zj-sce2": ("zj", "N21", ((1200, 1680), (5520, 6000)), ("N6", "N11")),
    "zj-sce3": ("zj", "N33", ((960, 1440), (5760, 6240)), ("N38", "N43")),
}

DRIFT_PERIOD = (4000, 8640)


def table1_scenarios(seed=0):
    """The six contamination-plus-offset scenarios of the Hanoi and ZJ networks."""
    return [table1_scenario(name, seed) for name in _TABLE1]


def table1_scenario(name, seed=0):
    try:
        network, loc, periods, offset_sensors = _TABLE1[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(_TABLE1)}") from None
    return Scenario(
        name=name,
        topology=shipped_topology(network),
        contamination=(ContaminationEvent(loc, periods),),
        offsets=tuple(OffsetEvent(s, DRIFT_PERIOD) for s in offset_sensors),
        seed=seed,
    )


def scenario_names():
    return list(_TABLE1)


# ---------------------------------------------------------------- CSV output


def _fmt(x):
    return f"{x:.9g}"


def stream_to_csv(stream, fh, header=None):
    """Write ``t, sensor_id, measured, true, label`` rows (t < 0 is pretraining)."""
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "sensor_id", "measured", "true", "label"])
    n_pre = stream.pretrain_steps
    for k in range(stream.horizon):
        for s in stream.sensors:
            w.writerow([k - n_pre, s, _fmt(stream.measured[s][k]), _fmt(stream.true[s][k]),
                        int(stream.labels[s][k])])


def regions_to_csv(stream, fh, header=None):
    """Ground-truth contaminated node set and active sources per online step."""
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "region_nodes", "sources"])
    for k, (r, s) in enumerate(zip(stream.regions, stream.sources)):
        w.writerow([k, ";".join(sorted(r, key=_node_key)), ";".join(sorted(s, key=_node_key))])


def _node_key(n):
    digits = "".join(ch for ch in n if ch.isdigit())
    return (n.rstrip("0123456789"), int(digits) if digits else -1, n)


def read_stream_csv(fh):
    """Inverse of :func:`stream_to_csv` (values at 9 significant digits)."""
    rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(io.StringIO("".join(rows)))
    data = {}
    for row in reader:
        data.setdefault(row["sensor_id"], []).append(
            (int(row["t"]), float(row["measured"]), float(row["true"]), int(row["label"]))
        )
    sensors = tuple(data)
    first = data[sensors[0]]
    n_pre = -first[0][0] if first[0][0] < 0 else 0
    measured = {s: np.array([r[1] for r in v]) for s, v in data.items()}
    true = {s: np.array([r[2] for r in v]) for s, v in data.items()}
    labels = {s: np.array([r[3] for r in v], dtype=np.int8) for s, v in data.items()}
    return LabeledStream("", 0, n_pre, sensors, measured, true, labels, [], [])


def read_regions_csv(fh):
    rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(io.StringIO("".join(rows)))
    regions, sources = [], []
    for row in reader:
        regions.append(frozenset(x for x in row["region_nodes"].split(";") if x))
        sources.append(frozenset(x for x in row["sources"].split(";") if x))
    return regions, sources
