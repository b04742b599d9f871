"""Per-sensor anomaly and drift detector.

Each detector owns an LSTM-VAE and three windows: ``ref`` (encodings of
known-normal sequences), ``mov_all`` (encodings of the most recent
sequences) and ``mov_retrain`` (adjusted values collected after a drift
alarm). A step is anomalous when its sequence loss exceeds the adaptive
threshold; drift is signalled when the distance between ``ref`` and
``mov_all`` stays strictly between the two drift thresholds.
"""

import enum
import io
import json
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from addd import preprocessing as pp
from addd import vae
from addd.vae import VaeConfig
from addd.errors import ContractError, InvalidInputError
from addd.sim import STEPS_PER_WEEK

CHECKPOINT_FORMAT = "addd-detector/1"


class Mode(str, enum.Enum):
    MONITORING = "MONITORING"
    COLLECTING_RETRAIN = "COLLECTING_RETRAIN"


@dataclass(frozen=True)
class DriftThresholds:
    low: float
    upp: float

    def __post_init__(self):
        if not 0 <= self.low < self.upp:
            raise ValueError(f"drift thresholds must satisfy 0 <= low < upp, got {self.low}, {self.upp}")


@dataclass(frozen=True)
class DetectorConfig:
    vae: VaeConfig = field(default_factory=VaeConfig)
    w_drift: int = 200
    w_retrain: int = 500
    period: int = STEPS_PER_WEEK
    adjust_mode: str = pp.DESEASONALIZED
    # consecutive in-band checks needed before a drift alarm; 1 = bare band test
    drift_patience: int = 96
    # largest share of anomalous steps within the in-band run that still
    # counts as drift; a run dominated by anomalies is contamination passing
    # through the band on its way above thre_upp
    max_anomaly_share: float = 0.5
    # drift band in units of encoding_scale, used unless absolute thresholds
    # are given; rescaled after every retraining
    drift_band: tuple = (1.5, 4.5)
    warm_start: bool = True

    def __post_init__(self):
        if self.w_drift < 1 or self.w_retrain < self.vae.time_step + self.w_drift - 1:
            raise ValueError("w_retrain must hold at least w_drift sequences")
        if self.drift_patience < 1:
            raise ValueError("drift_patience must be >= 1")
        if not 0 <= self.max_anomaly_share <= 1:
            raise ValueError("max_anomaly_share must lie in [0, 1]")
        object.__setattr__(self, "drift_band", tuple(float(v) for v in self.drift_band))
        DriftThresholds(*self.drift_band)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["vae"] = VaeConfig(**d.get("vae", {}))
        return cls(**d)


@dataclass(frozen=True)
class StepOutput:
    y_hat: int
    loss: float
    drift_alarm: bool = False
    distance: float = None
    retrained: bool = False


# ---------------------------------------------------------------- equations


def compute_threshold(losses):
    """Maximum loss plus the population standard deviation of the losses."""
    L = np.asarray(losses, dtype=np.float64).ravel()
    if L.size == 0:
        raise InvalidInputError("cannot compute a threshold from an empty loss set")
    # shifting keeps the std of equal losses exactly zero
    return float(L.max() + (L - L[0]).std())


def window_distance(ref, mov, capacity=None):
    """Frobenius distance between two index-aligned encoding windows."""
    ref = np.asarray(ref, dtype=np.float64)
    mov = np.asarray(mov, dtype=np.float64)
    if ref.shape != mov.shape or ref.ndim != 2:
        raise ContractError(f"window shapes differ: {ref.shape} vs {mov.shape}")
    if capacity is not None and ref.shape[0] != capacity:
        raise ContractError(f"windows hold {ref.shape[0]} of {capacity} encodings")
    d = ref - mov
    return float(np.sqrt(np.sum(d * d)))


def drift_alarm(distance, thresholds):
    return thresholds.low < distance < thresholds.upp


def calibrate_thresholds(encodings, w_drift, quantile=99.0, ratio=3.0):
    """Candidate drift thresholds from offline encodings.

    Distances are taken between the final ``w_drift`` encodings and every
    earlier non-overlapping-with-it window; returns ``(q, q * ratio)`` where
    ``q`` is the given percentile of those distances.
    """
    E = np.asarray(encodings, dtype=np.float64)
    n = E.shape[0]
    if n < 2 * w_drift:
        raise InvalidInputError(f"need at least {2 * w_drift} encodings to calibrate")
    ref = E[-w_drift:]
    dists = np.array([window_distance(ref, E[i : i + w_drift]) for i in range(n - 2 * w_drift + 1)])
    q = float(np.percentile(dists, quantile))
    return DriftThresholds(q, q * ratio)


def encoding_scale(encodings, w_drift):
    """Expected window distance between two independent windows of ``encodings``.

    For i.i.d. rows this is ``sqrt(2 * w_drift * trace(Cov))``.
    """
    E = np.asarray(encodings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise InvalidInputError("need at least two encodings to estimate their spread")
    return float(np.sqrt(2.0 * w_drift * np.sum(np.var(E, axis=0))))


def relative_thresholds(encodings, w_drift, band):
    scale = encoding_scale(encodings, w_drift)
    if not scale > 0:
        raise InvalidInputError("encodings have zero spread; drift band is undefined")
    return DriftThresholds(band[0] * scale, band[1] * scale)


def sliding_sequences(values, time_step):
    x = np.asarray(values, dtype=np.float64)
    if len(x) < time_step:
        return np.empty((0, time_step))
    return np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(x, time_step))


# ---------------------------------------------------------------- state


class DetectorState:
    """Mutable state of one sensor's detector; see :func:`init_offline`."""

    def __init__(self, config, model, adjuster, normalizer, theta, thresholds, ref, t_next,
                 fixed_thresholds=False):
        self.config = config
        self.fixed_thresholds = bool(fixed_thresholds)
        self.model = model
        self.adjuster = adjuster
        self.normalizer = normalizer
        self.theta = float(theta)
        self.thresholds = thresholds
        self.ref = np.array(ref, dtype=np.float64)
        self.mov_all = deque(maxlen=config.w_drift)
        self.mov_retrain = []
        self.recent = deque(maxlen=config.vae.time_step)
        self.mode = Mode.MONITORING
        self.t_next = int(t_next)  # global index of the next sample (seasonal phase)
        self.in_band_run = 0
        self.in_band_anomalies = 0
        self.retrain_count = 0

    # -- streaming -----------------------------------------------------
    def step(self, x_t):
        cfg = self.config
        adjusted = self.adjuster.transform(x_t, self.t_next)
        self.t_next += 1
        self.recent.append(self.normalizer.apply(adjusted))
        if len(self.recent) < cfg.vae.time_step:
            return StepOutput(0, 0.0)

        loss, encoding = vae.infer(self.model, np.fromiter(self.recent, float))
        y_hat = int(loss > self.theta)
        self.mov_all.append(encoding)

        alarm = False
        distance = None
        if self.mode is Mode.MONITORING and len(self.mov_all) == cfg.w_drift:
            distance = window_distance(self.ref, np.array(self.mov_all), cfg.w_drift)
            if drift_alarm(distance, self.thresholds):
                self.in_band_run += 1
                self.in_band_anomalies += y_hat
            else:
                self.in_band_run = self.in_band_anomalies = 0
            if (self.in_band_run >= cfg.drift_patience
                    and self.in_band_anomalies <= cfg.max_anomaly_share * self.in_band_run):
                alarm = True
                self.in_band_run = self.in_band_anomalies = 0
                self.mode = Mode.COLLECTING_RETRAIN
                self.mov_retrain = []

        retrained = False
        if self.mode is Mode.COLLECTING_RETRAIN:
            self.mov_retrain.append(adjusted)
            if len(self.mov_retrain) == cfg.w_retrain:
                self.retrain()
                retrained = True
        return StepOutput(y_hat, float(loss), alarm, distance, retrained)

    def retrain(self):
        cfg = self.config
        if len(self.mov_retrain) != cfg.w_retrain:
            raise ContractError(
                f"retrain needs {cfg.w_retrain} collected values, have {len(self.mov_retrain)}"
            )
        seqs = sliding_sequences(self.normalizer.apply(np.array(self.mov_retrain)), cfg.vae.time_step)
        self.retrain_count += 1
        stream_seed = cfg.vae.seed * 1000 + self.retrain_count
        if cfg.warm_start:
            start = self.model
        else:
            start = vae.VaeModel.init(VaeConfig(**{**asdict(cfg.vae), "seed": stream_seed}))
        self.model, _ = vae.train(start, seqs, cfg.vae, seed=stream_seed)
        losses, enc = vae.infer(self.model, seqs)
        self.theta = compute_threshold(losses)
        if not self.fixed_thresholds:
            self.thresholds = relative_thresholds(enc, cfg.w_drift, cfg.drift_band)
        self.ref = enc[-cfg.w_drift :].copy()
        self.mov_all.clear()
        self.mov_retrain = []
        self.in_band_run = self.in_band_anomalies = 0
        self.mode = Mode.MONITORING
        return self

    # -- checkpoints ---------------------------------------------------
    def to_bytes(self):
        cfg = self.config
        H = cfg.vae.latent_dim
        buf = io.BytesIO()
        meta = {
            "config": cfg.to_dict(),
            "theta": self.theta.hex(),
            "thresholds": [self.thresholds.low.hex(), self.thresholds.upp.hex()],
            "normalizer": [self.normalizer.min.hex(), self.normalizer.max.hex()],
            "adjust_mode": self.adjuster.mode,
            "mode": self.mode.value,
            "t_next": self.t_next,
            "in_band_run": self.in_band_run,
            "in_band_anomalies": self.in_band_anomalies,
            "retrain_count": self.retrain_count,
            "fixed_thresholds": self.fixed_thresholds,
        }
        np.savez(
            buf,
            format=np.array(CHECKPOINT_FORMAT),
            meta=np.array(json.dumps(meta, sort_keys=True)),
            model=np.frombuffer(self.model.to_bytes(), dtype=np.uint8),
            template=self.adjuster.template,
            ref=self.ref,
            mov_all=np.array(self.mov_all).reshape(-1, H),
            mov_retrain=np.array(self.mov_retrain, dtype=np.float64),
            recent=np.array(self.recent, dtype=np.float64),
        )
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            if str(z["format"]) != CHECKPOINT_FORMAT:
                raise InvalidInputError(f"unsupported checkpoint format {str(z['format'])!r}")
            meta = json.loads(str(z["meta"]))
            cfg = DetectorConfig.from_dict(meta["config"])
            state = cls(
                cfg,
                vae.VaeModel.from_bytes(z["model"].tobytes()),
                pp.StreamAdjuster(z["template"].copy(), cfg.period, meta["adjust_mode"]),
                pp.Normalizer(*(float.fromhex(v) for v in meta["normalizer"])),
                float.fromhex(meta["theta"]),
                DriftThresholds(*(float.fromhex(v) for v in meta["thresholds"])),
                z["ref"],
                meta["t_next"],
                meta["fixed_thresholds"],
            )
            state.mov_all.extend(row.copy() for row in z["mov_all"])
            state.mov_retrain = [float(v) for v in z["mov_retrain"]]
            state.recent.extend(float(v) for v in z["recent"])
            state.mode = Mode(meta["mode"])
            state.in_band_run = meta["in_band_run"]
            state.in_band_anomalies = meta["in_band_anomalies"]
            state.retrain_count = meta["retrain_count"]
        return state


def init_offline(pretrain_values, config=None, drift_thresholds=None):
    """Fit preprocessing, train the VAE and fill the windows from offline data.

    With ``drift_thresholds`` given, the band is absolute and kept across
    retraining. Otherwise it is ``config.drift_band`` times the spread of
    the offline encodings and is re-derived at each retraining.
    """
    cfg = config or DetectorConfig()
    x = np.asarray(pretrain_values, dtype=np.float64)
    T = cfg.vae.time_step
    if len(x) < max(2 * cfg.period, cfg.w_drift + cfg.vae.batch_size + T - 1):
        raise InvalidInputError(f"pretraining series of length {len(x)} is too short")
    adjuster = pp.StreamAdjuster.fit(x, cfg.period, cfg.adjust_mode)
    adjusted = adjuster.transform_series(x, 0)
    normalizer = pp.fit_normalizer(adjusted)
    normed = normalizer.apply(adjusted)
    seqs = sliding_sequences(normed, T)
    model, _ = vae.train(vae.VaeModel.init(cfg.vae), seqs, cfg.vae)
    losses, enc = vae.infer(model, seqs)
    fixed = drift_thresholds is not None
    if not fixed:
        drift_thresholds = relative_thresholds(enc, cfg.w_drift, cfg.drift_band)
    state = DetectorState(cfg, model, adjuster, normalizer, compute_threshold(losses),
                          drift_thresholds, enc[-cfg.w_drift :], len(x), fixed)
    state.mov_all.extend(enc[-cfg.w_drift :])
    # the online stream continues the offline one
    state.recent.extend(normed[-(T - 1) :])
    state.offline_losses = losses
    state.offline_encodings = enc
    return state


def step(state, x_t):
    return state.step(x_t)


def retrain(state):
    return state.retrain()


class StreamDetector:
    """Interface for pluggable per-sensor detectors (baselines plug in here)."""

    def step(self, x_t):  # pragma: no cover - interface
        raise NotImplementedError
