"""Decentralized runtime: per-sensor agents and a monitoring center.

Agents and the center only exchange newline-delimited JSON envelopes, so the
same center logic runs behind an in-memory queue or a TCP connection. The
center assembles one snapshot per step with a barrier, localizes, and emits
reports in step order regardless of arrival order.
"""

import json
import logging
import selectors
import socket
import threading
import time
from dataclasses import dataclass

from addd import localization as loc
from addd.errors import ProtocolError
from addd.sim import _node_key

log = logging.getLogger("addd.runtime")

READING = "READING"
PREDICTION = "PREDICTION"
REGION = "REGION"
END = "END"
_PAYLOAD_KEY = {READING: "value", PREDICTION: "y", REGION: "nodes", END: None}


@dataclass(frozen=True)
class Envelope:
    kind: str
    sensor: str
    t: int
    payload: object = None

    def encode(self):
        d = {"kind": self.kind, "sensor": self.sensor, "t": self.t}
        key = _PAYLOAD_KEY[self.kind]
        if key is not None:
            d[key] = list(self.payload) if self.kind == REGION else self.payload
        return json.dumps(d, separators=(",", ":"), ensure_ascii=False) + "\n"


def prediction(sensor, t, y):
    return Envelope(PREDICTION, sensor, int(t), int(y))


def region(report, sender="center"):
    """REGION envelope for a localization report, nodes in natural order."""
    return Envelope(REGION, sender, int(report.t), tuple(sorted(report.region, key=_node_key)))


def decode(line):
    """Parse one envelope line, raising :class:`ProtocolError` when malformed."""
    try:
        d = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed envelope {line!r}: {exc}") from None
    if not isinstance(d, dict) or d.get("kind") not in _PAYLOAD_KEY:
        raise ProtocolError(f"unknown envelope kind in {line!r}")
    kind = d["kind"]
    sensor, t = d.get("sensor"), d.get("t")
    if not isinstance(sensor, str) or not isinstance(t, int) or isinstance(t, bool) or t < 0:
        raise ProtocolError(f"bad sensor/t fields in {line!r}")
    key = _PAYLOAD_KEY[kind]
    payload = None
    if key is not None:
        if key not in d:
            raise ProtocolError(f"{kind} envelope without {key!r}: {line!r}")
        payload = d[key]
        if kind == PREDICTION and payload not in (0, 1):
            raise ProtocolError(f"prediction must be 0 or 1: {line!r}")
        if kind == REGION:
            payload = tuple(payload)
    return Envelope(kind, sensor, t, payload)


# ---------------------------------------------------------------- agent


def _send(sink, line, retries=5, backoff=0.01):
    for attempt in range(retries + 1):
        try:
            sink(line)
            return
        except OSError as exc:
            if attempt == retries:
                raise RuntimeError(f"sink failed after {retries} retries: {exc}") from exc
            time.sleep(backoff * 2**attempt)


def run_sensor_agent(sensor_id, values, detector, sink, start_t=0):
    """Stream ``values`` through ``detector``, sending one PREDICTION per step.

    ``sink`` receives encoded envelope lines. Returns the detector outputs.
    """
    outputs = []
    for t, x in enumerate(values, start_t):
        out = detector.step(x)
        outputs.append(out)
        _send(sink, prediction(sensor_id, t, out.y_hat).encode())
    n = start_t + len(outputs)
    _send(sink, Envelope(END, sensor_id, n).encode())
    return outputs


# ---------------------------------------------------------------- center


class MonitoringCenter:
    """Step barrier plus localization.

    ``receive`` returns the reports completed by an envelope; ``expire``
    force-completes the oldest pending step (missing sensors count as
    clean); ``finish`` flushes everything once all senders have ended.
    """

    def __init__(self, topology, sensors=None):
        self.topology = topology
        self.sensors = tuple(sensors or topology.sensors)
        loc._check_sensors(topology, self.sensors)
        self.pending = {}
        self.next_t = 0
        self.last_t = {s: -1 for s in self.sensors}
        self.ended = set()
        self.rejected = 0

    def _reject(self, msg):
        self.rejected += 1
        log.warning("rejected envelope: %s", msg)

    def receive(self, env):
        if env.sensor not in self.last_t:
            self._reject(f"unknown sensor {env.sensor!r}")
            return []
        if env.kind == END:
            self.ended.add(env.sensor)
            return self._drain()
        if env.kind != PREDICTION:
            self._reject(f"unexpected {env.kind} from {env.sensor}")
            return []
        if env.sensor in self.ended:
            self._reject(f"prediction from {env.sensor} after END")
            return []
        if env.t <= self.last_t[env.sensor]:
            self._reject(f"duplicate or out-of-order prediction ({env.sensor}, t={env.t})")
            return []
        self.last_t[env.sensor] = env.t
        if env.t < self.next_t:
            self._reject(f"late prediction ({env.sensor}, t={env.t}) after step was localized")
            return []
        self.pending.setdefault(env.t, {})[env.sensor] = env.payload
        return self._drain()

    def _complete(self, t):
        got = self.pending.get(t, {})
        return all(s in got or s in self.ended for s in self.sensors)

    def _emit(self, t):
        got = self.pending.pop(t, {})
        missing = [s for s in self.sensors if s not in got]
        if missing:
            log.warning("step %d: no prediction from %s; treated as clean", t, ",".join(missing))
        snap = loc.PredictionSnapshot(t, {s: got.get(s, 0) for s in self.sensors})
        self.next_t = t + 1
        return snap, loc.contamination_region(self.topology, snap)

    def _drain(self):
        out = []
        while self.pending and self.next_t in self.pending and self._complete(self.next_t):
            out.append(self._emit(self.next_t))
        return out

    def expire(self):
        """Force out the oldest pending step after a timeout."""
        if not self.pending:
            return []
        t = min(self.pending)
        for k in range(self.next_t, t):  # steps nobody reported
            self.pending.setdefault(k, {})
        return [self._emit(self.next_t)] + self._drain()

    def finish(self):
        out = []
        while self.pending:
            if self.next_t not in self.pending:
                self.pending[self.next_t] = {}
            out.append(self._emit(self.next_t))
        return out

    def close_sender(self, sensor):
        """A sender's stream ended without END; treat it as ended."""
        if sensor in self.last_t and sensor not in self.ended:
            log.warning("sensor %s disconnected without END", sensor)
            self.ended.add(sensor)
        return self._drain()

    @property
    def done(self):
        return len(self.ended) == len(self.sensors) and not self.pending


def run_monitoring_center(lines, topology, sensors=None):
    """Consume envelope lines and yield ``(snapshot, report)`` in step order."""
    center = MonitoringCenter(topology, sensors)
    for line in lines:
        try:
            env = decode(line)
        except ProtocolError as exc:
            center._reject(str(exc))
            continue
        yield from center.receive(env)
    yield from center.finish()


# ---------------------------------------------------------------- transports


def run_inprocess(topology, detectors, streams, start_t=0):
    """Run every agent and the center in this process.

    Agents run one after another and write envelope lines to a buffer the
    center then consumes; results do not depend on interleaving.
    Returns ``(results, agent_outputs)``.
    """
    lines = []
    outputs = {}
    for s in topology.sensors:
        outputs[s] = run_sensor_agent(s, streams[s], detectors[s], lines.append, start_t)
    return list(run_monitoring_center(lines, topology)), outputs


class _LineSocket:
    def __init__(self, sock):
        self.sock = sock

    def __call__(self, line):
        self.sock.sendall(line.encode("utf-8"))


def connect(host, port, attempts=20, backoff=0.05):
    for k in range(attempts):
        try:
            return socket.create_connection((host, port), timeout=30)
        except OSError:
            if k == attempts - 1:
                raise
            time.sleep(min(backoff * 2**k, 1.0))


def serve_center(topology, server_sock, timeout=60.0, accept_timeout=120.0):
    """Accept one connection per sensor on ``server_sock`` and run the center.

    A step still incomplete after ``timeout`` seconds without traffic is
    localized with the silent sensors counted as clean.
    """
    center = MonitoringCenter(topology)
    results = []
    sel = selectors.DefaultSelector()
    buffers, owner = {}, {}
    server_sock.setblocking(False)
    sel.register(server_sock, selectors.EVENT_READ, None)
    accepted = 0
    started = last_traffic = time.monotonic()
    while not center.done:
        events = sel.select(timeout=0.2)
        now = time.monotonic()
        for key, _ in events:
            if key.data is None:
                conn, _ = server_sock.accept()
                conn.setblocking(False)
                sel.register(conn, selectors.EVENT_READ, "conn")
                buffers[conn] = b""
                accepted += 1
                if accepted == len(center.sensors):
                    sel.unregister(server_sock)
                continue
            conn = key.fileobj
            chunk = conn.recv(65536)
            last_traffic = now
            if not chunk:
                sel.unregister(conn)
                conn.close()
                if buffers.pop(conn):
                    center._reject("connection closed mid-line")
                if conn in owner:
                    results.extend(center.close_sender(owner.pop(conn)))
                continue
            data = buffers[conn] + chunk
            *complete, buffers[conn] = data.split(b"\n")
            for raw in complete:
                try:
                    env = decode(raw.decode("utf-8"))
                except ProtocolError as exc:
                    center._reject(str(exc))
                    continue
                owner.setdefault(conn, env.sensor)
                results.extend(center.receive(env))
        if events or now - last_traffic <= timeout:
            continue
        last_traffic = now
        if center.pending:
            results.extend(center.expire())
        elif accepted < len(center.sensors) and now - started > accept_timeout:
            log.warning("only %d of %d sensors connected; ending run", accepted, len(center.sensors))
            for s in center.sensors:
                results.extend(center.close_sender(s))
    results.extend(center.finish())
    for key in list(sel.get_map().values()):
        if key.data is not None:
            key.fileobj.close()
    sel.close()
    return results


def run_socket(topology, detectors, streams, host="127.0.0.1", port=0, start_t=0, timeout=60.0):
    """Run the center on a TCP listener and each agent in its own thread.

    Agents and center share nothing but the byte streams. Returns the same
    ``(results, agent_outputs)`` pair as :func:`run_inprocess`.
    """
    server = socket.create_server((host, port))
    host, port = server.getsockname()[:2]
    outputs, errors = {}, []

    def agent(sensor):
        try:
            with connect(host, port) as sock:
                outputs[sensor] = run_sensor_agent(sensor, streams[sensor], detectors[sensor],
                                                   _LineSocket(sock), start_t)
                sock.shutdown(socket.SHUT_WR)
        except Exception as exc:  # reported after the center finishes
            errors.append((sensor, exc))

    threads = [threading.Thread(target=agent, args=(s,), daemon=True) for s in topology.sensors]
    for th in threads:
        th.start()
    try:
        results = serve_center(topology, server, timeout=timeout)
    finally:
        server.close()
    for th in threads:
        th.join()
    if errors:
        sensor, exc = errors[0]
        raise RuntimeError(f"agent {sensor} failed: {exc}") from exc
    return results, {s: outputs[s] for s in topology.sensors}
