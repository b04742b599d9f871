import io
from dataclasses import replace

import numpy as np
import pytest

from addd import sim
from addd.errors import TopologyError

CHAIN = """version 1
name chain
reservoir r
node r
node a
node b
edge r a
edge a b
sensors b
"""


@pytest.fixture(scope="module")
def sce1():
    return sim.table1_scenario("hanoi-sce1", seed=4)


@pytest.fixture(scope="module")
def stream(sce1):
    return sim.generate(sce1)


# -- topology --------------------------------------------------------


def test_chain_file(tmp_path):
    f = tmp_path / "chain.topo"
    f.write_text(CHAIN)
    t = sim.load_topology(f)
    assert t.nodes == ("r", "a", "b") and len(t.edges) == 2
    assert t.sensors == ("b",) and t.reservoir == "r"
    assert sim.parse_topology(t.to_text()) == t


@pytest.mark.parametrize(
    "text, fragment, line",
    [
        (CHAIN.replace("edge a b", "edge a zz"), "'zz'", 8),
        (CHAIN + "node lonely\n", "'lonely'", 10),
        (CHAIN.replace("sensors b", "sensors q"), "'q'", 9),
        (CHAIN.replace("version 1", "version 7"), "version", 1),
        (CHAIN + "pipe a b\n", "malformed", 10),
        (CHAIN + "node a\n", "duplicate", 10),
    ],
)
def test_parse_errors_name_the_problem_and_line(text, fragment, line):
    with pytest.raises(TopologyError) as e:
        sim.parse_topology(text, source="x.topo")
    assert fragment in str(e.value)
    assert f"x.topo:{line}:" in str(e.value)


def test_missing_records():
    with pytest.raises(TopologyError, match="version"):
        sim.parse_topology(CHAIN.replace("version 1\n", ""))
    with pytest.raises(TopologyError, match="reservoir"):
        sim.parse_topology(CHAIN.replace("reservoir r\n", ""))


def test_shipped_topology_sizes():
    h = sim.shipped_topology("hanoi")
    assert len(h.nodes) == 32 and len(h.edges) == 34
    z = sim.shipped_topology("zj")
    assert len(z.edges) == 164 and len(z.nodes) - 1 == 113


@pytest.mark.parametrize("name", ["hanoi", "zj"])
def test_shipped_topologies_are_rooted_dags(name):
    t = sim.shipped_topology(name)
    assert set(t.hops_from(t.reservoir)) == set(t.nodes)
    for n in t.nodes:  # no node reaches itself through an edge
        assert all(n not in t.hops_from(m) for m in t.successors(n))


# -- reference scenarios ---------------------------------------------


def test_table1_structure():
    scs = {s.name: s for s in sim.table1_scenarios()}
    assert len(scs) == 6
    assert scs["hanoi-sce1"].contamination[0].location == "N5"
    assert scs["hanoi-sce1"].contamination[0].periods == ((960, 1440), (5760, 6240))
    assert {o.sensor for o in scs["hanoi-sce1"].offsets} == {"N11", "N7"}
    assert scs["zj-sce3"].contamination[0].location == "N33"
    assert scs["zj-sce3"].contamination[0].periods == ((960, 1440), (5760, 6240))
    for s in scs.values():
        s.validate()
        assert all(o.period == (4000, 8640) and o.factor == 0.98 for o in s.offsets)
        assert s.pretrain_steps == s.online_steps == 8640
    with pytest.raises(KeyError):
        sim.table1_scenario("nope")


def test_horizon_arithmetic():
    assert sim.PHASE_STEPS == 48 * 180 == 8640


# -- generation ------------------------------------------------------


def test_demand_pattern_range():
    s = sim.demand_pattern(np.arange(sim.STEPS_PER_WEEK * 4))
    assert s.min() >= 0.85 and s.max() <= 1.15


def test_generation_is_deterministic(sce1, stream):
    again = sim.generate(sce1)
    for s in stream.sensors:
        assert np.array_equal(again.measured[s], stream.measured[s])
        assert np.array_equal(again.labels[s], stream.labels[s])
    assert again.regions == stream.regions
    other = sim.generate(sce1.with_seed(5))
    assert not np.array_equal(other.measured["N7"], stream.measured["N7"])


def test_shapes_and_positivity(stream):
    n = 2 * 8640
    for s in stream.sensors:
        assert len(stream.measured[s]) == len(stream.true[s]) == len(stream.labels[s]) == n
        assert np.all(stream.true[s] > 0)
    assert len(stream.regions) == len(stream.sources) == 8640


def test_no_events(sce1):
    st = sim.generate(sce1.with_events("none"))
    for s in st.sensors:
        assert not st.labels[s].any()
        assert np.array_equal(st.measured[s], st.true[s])
    assert not any(st.regions)


def test_offset_only_ratio(sce1):
    st = sim.generate(sce1.with_events("offsets"))
    n_pre = st.pretrain_steps
    for s in st.sensors:
        ratio = st.measured[s] / st.true[s]
        expect = np.ones_like(ratio)
        if s in ("N11", "N7"):
            expect[n_pre + 4000 : n_pre + 8640] = 0.98
        assert np.allclose(ratio, expect, rtol=1e-15, atol=0)


def test_closed_form_baseline(sce1):
    st = sim.generate(replace(sce1.with_events("none"), noise_sigma=0.0))
    t = np.arange(st.horizon)
    topo = sce1.topology
    depth = topo.hops_from(topo.reservoir)
    for s in st.sensors:
        expect = 0.7 * sim.demand_pattern(t) * 0.97 ** depth[s]
        assert np.allclose(st.true[s], expect, rtol=1e-14)


def brute_reachable(topo, src):
    seen, stack = {src}, [src]
    while stack:
        n = stack.pop()
        for a, b in topo.edges:
            if a == n and b not in seen:
                seen.add(b)
                stack.append(b)
    return seen


def test_labels_follow_reachability(sce1, stream):
    reach = brute_reachable(sce1.topology, "N5")
    for s in stream.sensors:
        if s not in reach:
            assert not stream.labels[s].any()
        else:
            assert stream.labels[s].any()


@pytest.mark.parametrize("name", sim.scenario_names())
def test_labels_follow_reachability_all_scenarios(name):
    sc = sim.table1_scenario(name)
    st = sim.generate(replace(sc, offsets=()))
    reach = brute_reachable(sc.topology, sc.contamination[0].location)
    for s in st.sensors:
        assert st.labels[s].any() == (s in reach)
    for r in st.regions:
        assert r <= reach


def test_label_windows_respect_delay(sce1, stream):
    hops = sce1.topology.hops_from("N5")["N7"]
    lab = stream.online_labels("N7")
    on = np.flatnonzero(lab)
    delay = 2 * hops
    assert on[0] == 960 + delay
    assert lab[960 + delay : 1440 + delay].all() and not lab[1440 + delay]


def test_downstream_mean_drops_during_event(sce1, stream):
    n_pre, w = stream.pretrain_steps, sim.STEPS_PER_WEEK
    x = stream.measured["N7"]
    for a, b in sce1.contamination[0].periods:
        during = x[n_pre + a : n_pre + b].mean()
        prior = x[n_pre + a - w : n_pre + b - w].mean()
        assert during < prior


def test_validation_errors(sce1):
    ev = sce1.contamination[0]
    with pytest.raises(ValueError):
        replace(sce1, contamination=(replace(ev, periods=((0, 100), (50, 150))),)).validate()
    with pytest.raises(ValueError):
        replace(sce1, contamination=(replace(ev, periods=((8000, 9000),)),)).validate()
    with pytest.raises(ValueError):
        replace(sce1, contamination=(replace(ev, location="nowhere"),)).validate()
    with pytest.raises(ValueError):
        replace(sce1, offsets=(sim.OffsetEvent("N5"),)).validate()
    with pytest.raises(ValueError):
        replace(sce1, offsets=(sim.OffsetEvent("N7", factor=0.0),)).validate()
    with pytest.raises(ValueError):
        sce1.with_events("some")


# -- CSV -------------------------------------------------------------


def test_stream_csv_round_trip(stream):
    fh = io.StringIO()
    sim.stream_to_csv(stream, fh, header="test")
    text = fh.getvalue()
    assert text.startswith("# test\nt,sensor_id,measured,true,label\n")
    assert text.splitlines()[2].startswith("-8640,N4,")
    back = sim.read_stream_csv(io.StringIO(text))
    assert back.pretrain_steps == 8640 and back.sensors == stream.sensors
    for s in stream.sensors:
        assert np.allclose(back.measured[s], stream.measured[s], rtol=1e-8, atol=0)
        assert np.array_equal(back.labels[s], stream.labels[s])


def test_regions_csv_round_trip(stream):
    fh = io.StringIO()
    sim.regions_to_csv(stream, fh)
    regions, sources = sim.read_regions_csv(io.StringIO(fh.getvalue()))
    assert regions == stream.regions and sources == stream.sources
