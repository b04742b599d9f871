"""Prequential G-mean with per-class fading, run reports and repetition stats."""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from addd.errors import InvalidInputError


def gmean(r_pos, r_neg):
    for r in (r_pos, r_neg):
        if not 0.0 <= r <= 1.0:
            raise InvalidInputError(f"recall {r} outside [0, 1]")
    return math.sqrt(r_pos * r_neg)


@dataclass
class PrequentialState:
    """Faded correct and total counts per class; index 0 = negative, 1 = positive."""

    alpha: float = 0.99
    correct: list = field(default_factory=lambda: [0.0, 0.0])
    total: list = field(default_factory=lambda: [0.0, 0.0])

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise InvalidInputError(f"fading factor must lie in (0, 1], got {self.alpha}")

    def recall(self, cls):
        # a class not yet observed is neutral
        if self.total[cls] == 0.0:
            return 1.0
        return min(1.0, self.correct[cls] / self.total[cls])

    @property
    def gmean(self):
        return gmean(self.recall(1), self.recall(0))


def prequential_update(state, y_true, y_hat):
    """Fold one labelled prediction into ``state``; returns ``(state, gmean)``."""
    if y_true not in (0, 1) or y_hat not in (0, 1):
        raise InvalidInputError(f"labels must be 0 or 1, got {y_true!r}, {y_hat!r}")
    c = int(y_true)
    a = state.alpha
    state.total[c] = a * state.total[c] + 1.0
    state.correct[c] = a * state.correct[c] + (1.0 if y_hat == y_true else 0.0)
    return state, state.gmean


def prequential_series(y_true, y_hat, alpha=0.99):
    y_true = np.asarray(y_true)
    y_hat = np.asarray(y_hat)
    if y_true.shape != y_hat.shape:
        raise InvalidInputError(f"length mismatch: {y_true.shape} vs {y_hat.shape}")
    st = PrequentialState(alpha)
    out = np.empty(len(y_true))
    for k, (a, b) in enumerate(zip(y_true.tolist(), y_hat.tolist())):
        out[k] = prequential_update(st, a, b)[1]
    return out


@dataclass(frozen=True)
class Confusion:
    tp: int
    fn: int
    tn: int
    fp: int

    @classmethod
    def of(cls, y_true, y_hat):
        y_true = np.asarray(y_true, dtype=bool)
        y_hat = np.asarray(y_hat, dtype=bool)
        return cls(int(np.sum(y_true & y_hat)), int(np.sum(y_true & ~y_hat)),
                   int(np.sum(~y_true & ~y_hat)), int(np.sum(~y_true & y_hat)))

    @property
    def fp_rate(self):
        n = self.tn + self.fp
        return self.fp / n if n else 0.0


@dataclass
class RunReport:
    sensors: tuple
    gmean: dict  # sensor -> per-step prequential G-mean
    confusion: dict  # sensor -> Confusion
    alpha: float
    scenario: str = ""
    seed: int = 0
    localization: object = None
    config: dict = field(default_factory=dict)

    def final_gmean(self, sensor):
        return float(self.gmean[sensor][-1])


# ---------------------------------------------------------------- CSV


def _rows(fh):
    return csv.DictReader(io.StringIO("".join(line for line in fh if not line.startswith("#"))))


def write_predictions_csv(snapshots, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "sensor_id", "y_hat"])
    for snap in snapshots:
        for s, y in snap.y_hat.items():
            w.writerow([snap.t, s, int(y)])


def read_predictions_csv(fh):
    """Return ``{sensor: {t: y_hat}}``."""
    out = {}
    for row in _rows(fh):
        out.setdefault(row["sensor_id"], {})[int(row["t"])] = int(row["y_hat"])
    return out


def read_labels_csv(fh):
    """Online labels ``{sensor: {t: label}}`` from a stream CSV (t >= 0 only)."""
    out = {}
    for row in _rows(fh):
        t = int(row["t"])
        if t >= 0:
            out.setdefault(row["sensor_id"], {})[t] = int(row["label"])
    return out


def align(predictions, labels):
    """Arrays ``(sensors, y_true, y_hat)`` after checking both cover the same steps."""
    if set(predictions) != set(labels):
        raise InvalidInputError(
            f"sensor sets differ: predictions {sorted(predictions)} vs labels {sorted(labels)}"
        )
    sensors = tuple(labels)
    y_true, y_hat = {}, {}
    for s in sensors:
        p, l = predictions[s], labels[s]
        if p.keys() != l.keys():
            bad = min(set(p) ^ set(l))
            raise InvalidInputError(f"misaligned step t={bad} for sensor {s}")
        ts = sorted(l)
        if ts != list(range(len(ts))):
            bad = next(k for k, t in enumerate(ts) if t != k)
            raise InvalidInputError(f"missing step t={bad} for sensor {s}")
        y_true[s] = np.array([l[t] for t in ts], dtype=np.int8)
        y_hat[s] = np.array([p[t] for t in ts], dtype=np.int8)
    return sensors, y_true, y_hat


def evaluate_run(predictions, labels, alpha=0.99, scenario="", seed=0):
    """Build a :class:`RunReport` from prediction and label maps (see :func:`align`)."""
    sensors, y_true, y_hat = align(predictions, labels)
    return RunReport(
        sensors=sensors,
        gmean={s: prequential_series(y_true[s], y_hat[s], alpha) for s in sensors},
        confusion={s: Confusion.of(y_true[s], y_hat[s]) for s in sensors},
        alpha=alpha,
        scenario=scenario,
        seed=seed,
    )


def _fmt(x):
    return f"{x:.9g}"


def write_gmean_csv(report, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "sensor_id", "gmean"])
    n = len(next(iter(report.gmean.values())))
    for t in range(n):
        for s in report.sensors:
            w.writerow([t, s, _fmt(report.gmean[s][t])])


def write_summary_csv(report, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["sensor_id", "tp", "fn", "tn", "fp", "final_gmean"])
    for s in report.sensors:
        c = report.confusion[s]
        w.writerow([s, c.tp, c.fn, c.tn, c.fp, _fmt(report.final_gmean(s))])


# ---------------------------------------------------------------- repetitions


def mean_stderr(series):
    """Per-step mean and sample standard error over stacked runs ``(R, T)``."""
    a = np.asarray(series, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0:
        raise InvalidInputError("expected a non-empty (runs, steps) array")
    mean = a.mean(axis=0)
    if a.shape[0] == 1:
        return mean, np.zeros_like(mean)
    return mean, a.std(axis=0, ddof=1) / math.sqrt(a.shape[0])


def aggregate(reports):
    """``{sensor: (mean, stderr)}`` over repetition reports."""
    sensors = reports[0].sensors
    for r in reports:
        if r.sensors != sensors:
            raise InvalidInputError("repetitions cover different sensors")
    return {s: mean_stderr([r.gmean[s] for r in reports]) for s in sensors}


def write_repeat_csv(agg, fh, header=None):
    if header:
        fh.write(f"# {header}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "sensor_id", "gmean_mean", "gmean_stderr"])
    sensors = list(agg)
    n = len(agg[sensors[0]][0])
    for t in range(n):
        for s in sensors:
            m, e = agg[s]
            w.writerow([t, s, _fmt(m[t]), _fmt(e[t])])


def read_repeat_csv(fh):
    out = {}
    for row in _rows(fh):
        m, e = out.setdefault(row["sensor_id"], ([], []))
        m.append(float(row["gmean_mean"]))
        e.append(float(row["gmean_stderr"]))
    return {s: (np.array(m), np.array(e)) for s, (m, e) in out.items()}
