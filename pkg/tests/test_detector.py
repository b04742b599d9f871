import copy
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from addd import detector as det
from addd.errors import ContractError, InvalidInputError
from addd.vae import VaeConfig

PERIOD = 48
CFG = det.DetectorConfig(vae=VaeConfig(epochs=15, seed=3), period=PERIOD)


def signal(n, start=0, seed=0, sigma=0.01):
    t = np.arange(start, start + n)
    rng = np.random.default_rng(seed)
    return 0.7 * (1 + 0.1 * np.sin(2 * np.pi * t / PERIOD)) + rng.normal(0, sigma, n)


@pytest.fixture(scope="module")
def series():
    return signal(4000, seed=1)


@pytest.fixture(scope="module")
def trained(series):
    return det.init_offline(series[:2000], CFG)


def fresh(state):
    return det.DetectorState.from_bytes(state.to_bytes())


# -- equations -------------------------------------------------------


def test_threshold_examples():
    assert det.compute_threshold([0.3]) == 0.3
    assert det.compute_threshold([0.2, 0.2, 0.2]) == 0.2
    assert det.compute_threshold([0.1, 0.2, 0.3]) == pytest.approx(0.3816497, abs=1e-7)
    with pytest.raises(InvalidInputError):
        det.compute_threshold([])


@given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 1e3)))
def test_threshold_matches_arithmetic_oracle(L):
    vals = L.tolist()
    mean = math.fsum(vals) / len(vals)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
    assert det.compute_threshold(L) == pytest.approx(max(vals) + std, abs=1e-9)
    assert det.compute_threshold(L) >= max(vals)


def test_distance_examples():
    assert det.window_distance([[0.0]], [[3.0]]) == 3.0
    assert det.window_distance([[0, 0], [0, 0]], [[1, 2], [2, 0]]) == 3.0
    w = np.random.default_rng(0).normal(size=(5, 2))
    assert det.window_distance(w, w) == 0.0


@given(st.data())
def test_distance_matches_double_loop(data):
    r, c = data.draw(st.integers(1, 30)), data.draw(st.integers(1, 4))
    el = st.floats(-10, 10)
    a = data.draw(hnp.arrays(np.float64, (r, c), elements=el))
    b = data.draw(hnp.arrays(np.float64, (r, c), elements=el))
    total = 0.0
    for i in range(r):
        for j in range(c):
            total += (a[i][j] - b[i][j]) ** 2
    assert det.window_distance(a, b) == pytest.approx(math.sqrt(total), abs=1e-9)


def test_distance_contract():
    with pytest.raises(ContractError):
        det.window_distance(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(ContractError):
        det.window_distance(np.zeros(3), np.zeros(3))
    with pytest.raises(ContractError):
        det.window_distance(np.zeros((3, 2)), np.zeros((3, 2)), capacity=200)


def test_drift_alarm_boundaries():
    th = det.DriftThresholds(1.0, 3.0)
    assert not det.drift_alarm(1.0, th)
    assert not det.drift_alarm(3.0, th)
    assert det.drift_alarm(np.nextafter(1.0, 2), th)
    assert det.drift_alarm(np.nextafter(3.0, 0), th)
    assert det.drift_alarm(2.0, th)
    for d in (0.0, 0.5, np.nextafter(1.0, 0), np.nextafter(3.0, 4), 3.5, 1e300, np.inf):
        assert not det.drift_alarm(d, th)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 200))
def test_drift_alarm_iff_strictly_inside(a, b, d):
    if a == b:
        return
    th = det.DriftThresholds(min(a, b), max(a, b))
    assert det.drift_alarm(d, th) == (th.low < d < th.upp)


def test_threshold_validation():
    with pytest.raises(ValueError):
        det.DriftThresholds(2.0, 1.0)
    with pytest.raises(ValueError):
        det.DriftThresholds(-1.0, 1.0)
    with pytest.raises(ValueError):
        det.DetectorConfig(drift_band=(3.0, 3.0))
    with pytest.raises(ValueError):
        det.DetectorConfig(w_retrain=100)


def test_encoding_scale_matches_independent_windows():
    rng = np.random.default_rng(0)
    E = rng.normal(0, [0.3, 0.1], size=(20000, 2))
    s = det.encoding_scale(E, 200)
    d = [det.window_distance(E[i : i + 200], E[i + 10000 : i + 10200]) for i in range(0, 9800, 200)]
    assert np.mean(d) == pytest.approx(s, rel=0.03)
    th = det.relative_thresholds(E, 200, (1.5, 4.5))
    assert (th.low, th.upp) == pytest.approx((1.5 * s, 4.5 * s))


def test_calibrate_thresholds_ratio():
    E = np.random.default_rng(1).normal(size=(1000, 2))
    th = det.calibrate_thresholds(E, 200)
    assert th.upp == pytest.approx(3 * th.low) and th.low > 0
    with pytest.raises(InvalidInputError):
        det.calibrate_thresholds(E[:300], 200)


# -- offline initialization ------------------------------------------


def test_init_offline_postconditions(trained):
    s = trained
    assert s.mode is det.Mode.MONITORING
    assert s.theta > 0
    losses = s.offline_losses
    assert s.theta == det.compute_threshold(losses)
    assert s.theta >= losses.max()
    assert s.ref.shape == (200, 2) and len(s.mov_all) == 200
    assert np.array_equal(s.ref, s.offline_encodings[-200:])
    assert len(s.recent) == CFG.vae.time_step - 1
    assert s.t_next == 2000


def test_init_offline_is_deterministic(series, trained):
    again = det.init_offline(series[:2000], CFG)
    assert again.theta == trained.theta
    assert np.array_equal(again.ref, trained.ref)
    assert again.thresholds == trained.thresholds


def test_init_offline_rejects_short_series():
    with pytest.raises(InvalidInputError):
        det.init_offline(signal(200), CFG)


def test_clean_continuation_has_few_anomalies(series, trained):
    s = fresh(trained)
    outs = [s.step(x) for x in series[2000:3000]]
    assert np.mean([o.y_hat for o in outs]) < 0.05
    assert not any(o.drift_alarm for o in outs)


def test_y_hat_follows_threshold(series, trained):
    s = fresh(trained)
    for x in series[2000:2100]:
        theta = s.theta
        out = s.step(x)
        assert out.y_hat == int(out.loss > theta)
    # a deep dip forces a high reconstruction loss
    outs = [s.step(0.2) for _ in range(10)]
    assert outs[-1].y_hat == 1 and outs[-1].loss > s.theta


def test_first_steps_without_history_emit_zero(trained):
    s = det.DetectorState(CFG, trained.model, trained.adjuster, trained.normalizer,
                          trained.theta, trained.thresholds, trained.ref, 0)
    outs = [s.step(0.7) for _ in range(CFG.vae.time_step)]
    assert all(o.y_hat == 0 and o.loss == 0.0 for o in outs[:-1])
    assert outs[-1].loss > 0


# -- drift and retraining --------------------------------------------


def forced_alarm_state(trained, **kw):
    cfg = det.DetectorConfig(**{**CFG.to_dict(), "vae": CFG.vae, "drift_patience": 1,
                                "max_anomaly_share": 1.0, **kw})
    s = fresh(trained)
    s.config = cfg
    s.thresholds = det.DriftThresholds(0.0, 1e9)
    s.fixed_thresholds = True
    return s


def test_mode_cycle_and_retrain_postconditions(series, trained):
    s = forced_alarm_state(trained)
    outs = [s.step(x) for x in series[2000:2500]]
    assert outs[0].drift_alarm and s.mode is det.Mode.MONITORING
    assert [o.retrained for o in outs].index(True) == 499
    assert sum(o.drift_alarm for o in outs) == 1
    # no drift checks while collecting
    assert all(o.distance is None for o in outs[1:])
    assert s.ref.shape == (200, 2) and len(s.mov_all) == 0 and s.mov_retrain == []
    assert s.retrain_count == 1


def test_retrain_threshold_is_eq2_of_window_losses(series, trained):
    from addd import vae

    s = forced_alarm_state(trained)
    for x in series[2000:2499]:
        s.step(x)
    window = list(s.mov_retrain) + [s.adjuster.transform(series[2499], s.t_next)]
    s.step(series[2499])
    seqs = det.sliding_sequences(s.normalizer.apply(np.array(window)), 10)
    losses, enc = vae.infer(s.model, seqs)
    vals = losses.tolist()
    m = math.fsum(vals) / len(vals)
    oracle = max(vals) + math.sqrt(math.fsum((v - m) ** 2 for v in vals) / len(vals))
    assert s.theta == pytest.approx(oracle, abs=1e-12)
    assert np.array_equal(s.ref, enc[-200:])


def test_retrain_on_pretraining_data_keeps_theta_stable(series, trained):
    s = fresh(trained)
    s.mode = det.Mode.COLLECTING_RETRAIN
    s.mov_retrain = list(s.adjuster.transform_series(series[1500:2000], 1500))
    s.retrain()
    assert abs(s.theta - trained.theta) / trained.theta < 0.2


def test_retrain_requires_full_window(trained):
    s = fresh(trained)
    s.mov_retrain = [0.7] * 10
    with pytest.raises(ContractError):
        s.retrain()


def test_no_retrain_above_upper_threshold(series, trained):
    s = fresh(trained)
    s.config = det.DetectorConfig(**{**CFG.to_dict(), "vae": CFG.vae, "drift_patience": 1,
                                     "max_anomaly_share": 1.0})
    s.thresholds = det.DriftThresholds(0.0, 1e-9)  # every distance is at or above upp
    s.fixed_thresholds = True
    x = series[2000:3000].copy()
    x[300:700] *= 0.5
    outs = [s.step(v) for v in x]
    assert not any(o.drift_alarm or o.retrained for o in outs)


def test_patience_and_anomaly_share_guard(trained):
    s = forced_alarm_state(trained, drift_patience=5, max_anomaly_share=0.0)
    s.in_band_run, s.in_band_anomalies = 3, 0
    out = s.step(0.7)
    assert not out.drift_alarm and s.in_band_run == 4
    out = s.step(0.7)
    assert out.drift_alarm == (s.mode is det.Mode.COLLECTING_RETRAIN)


# -- checkpoints -----------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(series, trained):
    s = fresh(trained)
    for x in series[2000:2300]:
        s.step(x)
    blob = s.to_bytes()
    back = det.DetectorState.from_bytes(blob)
    assert back.to_bytes() == blob
    a = [s.step(x) for x in series[2300:2600]]
    b = [back.step(x) for x in series[2300:2600]]
    assert a == b


def test_checkpoint_mid_collection(series, trained):
    s = forced_alarm_state(trained)
    for x in series[2000:2200]:
        s.step(x)
    back = det.DetectorState.from_bytes(s.to_bytes())
    assert back.mode is det.Mode.COLLECTING_RETRAIN and len(back.mov_retrain) == 200
    a = [s.step(x) for x in series[2200:2500]]
    b = [back.step(x) for x in series[2200:2500]]
    assert a == b and a[299].retrained


def test_checkpoint_rejects_foreign_blob(trained):
    import io

    buf = io.BytesIO()
    np.savez(buf, format=np.array("nope"))
    with pytest.raises(InvalidInputError):
        det.DetectorState.from_bytes(buf.getvalue())


def test_config_dict_round_trip():
    assert det.DetectorConfig.from_dict(CFG.to_dict()) == CFG


def test_step_takes_only_raw_values():
    import inspect

    assert list(inspect.signature(det.DetectorState.step).parameters) == ["self", "x_t"]
    assert list(inspect.signature(det.step).parameters) == ["state", "x_t"]
