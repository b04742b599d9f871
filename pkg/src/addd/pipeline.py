"""Glue between the simulator, per-sensor detectors and the runtime."""

from dataclasses import dataclass, replace

from addd import detector as det
from addd import localization as loc
from addd import runtime
from addd.rng import make_rng

INPROCESS = "inprocess"
SOCKET = "socket"


@dataclass
class RunResult:
    snapshots: list
    reports: list
    outputs: dict  # sensor -> list of StepOutput

    def events(self):
        """``(t, sensor, event)`` rows for drift alarms and retraining."""
        rows = []
        for s, outs in self.outputs.items():
            for t, o in enumerate(outs):
                if o.drift_alarm:
                    rows.append((t, s, "drift_alarm"))
                if o.retrained:
                    rows.append((t, s, "retrained"))
        return sorted(rows, key=lambda r: (r[0], r[1]))


def sensor_seed(seed, sensor):
    """Model seed for one sensor's detector, independent across sensors."""
    return int(make_rng(seed, "detector", sensor).integers(2**31))


def build_detectors(stream, config=None, seed=0, sensors=None, thresholds=None):
    config = config or det.DetectorConfig()
    out = {}
    for s in sensors or stream.sensors:
        cfg = replace(config, vae=replace(config.vae, seed=sensor_seed(seed, s)))
        out[s] = det.init_offline(stream.pretrain(s), cfg, thresholds)
    return out


def run_stream(stream, topology, detectors, mode=INPROCESS, host="127.0.0.1", port=0, timeout=60.0):
    """Stream the online phase through agents and the center."""
    if set(detectors) != set(topology.sensors):
        raise ValueError("one detector per installed sensor is required")
    streams = {s: stream.online(s) for s in topology.sensors}
    if mode == INPROCESS:
        results, outputs = runtime.run_inprocess(topology, detectors, streams)
    elif mode == SOCKET:
        results, outputs = runtime.run_socket(topology, detectors, streams, host, port, timeout=timeout)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return RunResult([r[0] for r in results], [r[1] for r in results], outputs)


def localization_summary(result, stream, topology):
    return loc.localization_metrics(result.reports, stream.regions, stream.sources, topology.sensors)
