import math
import sys
import time

import pytest

from lesionmine.dataset import Annotation, SliceKey, SliceRecord, write_manifest
from lesionmine.detector import (
    DetectorBackend,
    ExternalBackend,
    ModelHandle,
    SyntheticBackend,
    SyntheticBackendConfig,
    SyntheticModel,
    learned_sensitivity,
    make_synthetic_world,
    synthetic_predict,
    synthetic_train,
)
from lesionmine.errors import BackendError, BackendExitError, BackendTimeout, ConfigError, DataError, ProtocolError
from lesionmine.geometry import BBox
from lesionmine.tags import TAGGED_CLASSES, LesionTag

LUNG = LesionTag.LUNG


def stub(*args):
    return [sys.executable, "-m", "lesionmine.detector.stub", *args]


def lesion_slices(n, tag=LUNG, per_slice=1):
    truth = {}
    for i in range(n):
        key = SliceKey(f"{i:06d}", "01", "01", 1)
        truth[key] = tuple(Annotation(BBox(20.0 * j, 10, 20.0 * j + 15, 30), tag) for j in range(per_slice))
    return truth


def model_with(p: float) -> SyntheticModel:
    return SyntheticModel(counts={t: 0 for t in TAGGED_CLASSES}, sensitivity={t: p for t in TAGGED_CLASSES})


# -- synthetic training ----------------------------------------------------------------


def test_learned_sensitivity_examples():
    assert learned_sensitivity(0.3, 0, 50) == 0.3
    assert learned_sensitivity(0.5, 100, 100) == pytest.approx(0.5 + 0.5 * (1 - math.exp(-1)))
    assert round(learned_sensitivity(0.5, 100, 100), 4) == 0.8161


def test_repeats_raise_sensitivity():
    cfg = SyntheticBackendConfig()
    recs = [SliceRecord(k, None, v) for k, v in lesion_slices(10).items()]
    doubled = [SliceRecord(r.key, None, r.annotations, 2) for r in recs]
    a = synthetic_train(recs, cfg).sensitivity[LUNG]
    b = synthetic_train(doubled, cfg).sensitivity[LUNG]
    assert synthetic_train(doubled, cfg).counts[LUNG] == 20
    assert b > a


def test_train_rejects_empty_manifest():
    with pytest.raises(DataError):
        synthetic_train([], SyntheticBackendConfig())


@pytest.mark.parametrize(
    "kwargs",
    [{"kappa": 0}, {"sigma": -1}, {"fp_rate": -0.1}, {"n_epochs": 6}, {"base_sensitivity": {"lung": 1.2}}],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SyntheticBackendConfig(**kwargs)


def test_config_json_round_trip():
    cfg = SyntheticBackendConfig(kappa=12.0, seed=4, base_sensitivity={"bone": 0.2})
    assert SyntheticBackendConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        SyntheticBackendConfig.from_json({"kapa": 1})


# -- synthetic prediction --------------------------------------------------------------------


def test_noise_free_limit_returns_ground_truth():
    cfg = SyntheticBackendConfig(sigma=0, fp_rate=0, jitter=0)
    truth = lesion_slices(20, per_slice=2)
    out = synthetic_predict(model_with(1.0), cfg, truth, list(truth))
    for key, anns in truth.items():
        assert sorted(d.box.as_list() for d in out[key]) == sorted(a.box.as_list() for a in anns)
        assert {d.score for d in out[key]} == {1.0}
        assert {d.tag for d in out[key]} == {LUNG}


def test_zero_sensitivity_and_no_fps_is_empty():
    cfg = SyntheticBackendConfig(fp_rate=0)
    truth = lesion_slices(30)
    out = synthetic_predict(model_with(0.0), cfg, truth, list(truth))
    assert all(v == [] for v in out.values())


def test_prediction_is_deterministic_and_scoped():
    cfg = SyntheticBackendConfig(seed=9)
    truth = lesion_slices(50)
    keys = list(truth)[:30]
    a = synthetic_predict(model_with(0.7), cfg, truth, keys)
    b = synthetic_predict(model_with(0.7), cfg, truth, keys)
    assert a == b
    assert set(a) == set(keys)
    for dets in a.values():
        assert all(0.0 <= d.score <= 1.0 for d in dets)


def test_better_model_finds_a_superset():
    cfg = SyntheticBackendConfig(fp_rate=0, sigma=0)
    truth = lesion_slices(300)
    weak = synthetic_predict(model_with(0.4), cfg, truth, list(truth))
    strong = synthetic_predict(model_with(0.8), cfg, truth, list(truth))
    found = lambda out: {k for k, v in out.items() if v}
    assert found(weak) <= found(strong)


def test_recall_converges_to_sensitivity():
    cfg = SyntheticBackendConfig(seed=1, fp_rate=0, jitter=0)
    truth = lesion_slices(12000)
    for p in (0.35, 0.8):
        out = synthetic_predict(model_with(p), cfg, truth, list(truth))
        recall = sum(len(v) for v in out.values()) / len(truth)
        assert abs(recall - p) < 0.02


def test_false_positive_rate_and_score_range():
    cfg = SyntheticBackendConfig(seed=2, fp_rate=1.5)
    truth = {SliceKey(f"{i}", "1", "1", 1): () for i in range(4000)}
    out = synthetic_predict(model_with(0.5), cfg, truth, list(truth))
    fps = [d for v in out.values() for d in v]
    assert abs(len(fps) / len(truth) - 1.5) < 0.1
    assert all(d.score <= 0.6 for d in fps)


def test_backend_files_and_epoch_ensemble(tmp_path):
    truth = lesion_slices(5)
    backend = SyntheticBackend(SyntheticBackendConfig(), truth)
    assert isinstance(backend, DetectorBackend)
    manifest = tmp_path / "m.jsonl"
    write_manifest(manifest, [SliceRecord(k, None, v) for k, v in truth.items()])
    handle = backend.train(manifest, 0, tmp_path / "model")
    assert (tmp_path / "model" / "model.json").exists()
    epochs = backend.epoch_ensemble(handle)
    assert len(epochs) == 5 and epochs[0].epoch == 0
    preds = backend.predict(epochs[1], list(truth))
    assert set(preds) == set(truth)
    with pytest.raises(DataError):
        backend.predict(ModelHandle(str(tmp_path / "nowhere")), list(truth))


def test_synthetic_world_shape():
    idx, test = make_synthetic_world(300, seed=3)
    assert len(idx.records) == 300
    assert test and test <= {r.key for r in idx.records}
    again, test2 = make_synthetic_world(300, seed=3)
    assert again == idx and test2 == test


# -- external backend ------------------------------------------------------------------------

KEYS = [SliceKey("000001", "01", "01", 10), SliceKey("000002", "01", "01", 20), SliceKey("000003", "01", "01", 30)]


def test_stub_handshake_train_predict(tmp_path):
    with ExternalBackend(stub("--mode", "fixed", "--score", "0.95"), timeout=20) as be:
        assert be.hello()["ok"] is True
        manifest = tmp_path / "m.jsonl"
        write_manifest(manifest, [])
        handle = be.train(manifest, 1, tmp_path / "model")
        assert (tmp_path / "model" / "stub-model.json").exists()
        out = be.predict(handle, KEYS)
        assert list(out) == KEYS
        assert all(len(v) == 1 and v[0].score == 0.95 for v in out.values())
        assert be.epoch_ensemble(handle) == [handle]


def test_stub_zero_detections(tmp_path):
    with ExternalBackend(stub("--mode", "zero"), timeout=20) as be:
        out = be.predict(ModelHandle(str(tmp_path)), KEYS)
        assert out == {k: [] for k in KEYS}


def test_stub_reports_epochs(tmp_path):
    with ExternalBackend(stub("--epochs", "7"), timeout=20) as be:
        manifest = tmp_path / "m.jsonl"
        write_manifest(manifest, [])
        handle = be.train(manifest, 0, tmp_path / "model")
        epochs = be.epoch_ensemble(handle)
        assert len(epochs) == 5
        assert [h.epoch for h in epochs] == [0, 1, 2, 3, 4]


def test_malformed_line_names_line_number(tmp_path):
    with ExternalBackend(stub("--mode", "malformed"), timeout=20) as be:
        with pytest.raises(ProtocolError) as err:
            be.predict(ModelHandle(str(tmp_path)), KEYS)
        assert err.value.line_number == 2
        assert "{not json" in str(err.value)


def test_timeout_is_distinct(tmp_path):
    with ExternalBackend(stub("--mode", "hang"), timeout=0.5) as be:
        start = time.monotonic()
        with pytest.raises(BackendTimeout):
            be.predict(ModelHandle(str(tmp_path)), KEYS)
        assert time.monotonic() - start < 5


def test_crash_mid_predict_is_an_exit_error(tmp_path):
    with ExternalBackend(stub("--mode", "crash"), timeout=20) as be:
        with pytest.raises(BackendExitError, match="code 3"):
            be.predict(ModelHandle(str(tmp_path)), KEYS)


def test_unrequested_key_rejected(tmp_path):
    with ExternalBackend(stub("--mode", "wrong-key"), timeout=20) as be:
        with pytest.raises(ProtocolError, match="unrequested"):
            be.predict(ModelHandle(str(tmp_path)), KEYS)


def test_oversized_line_rejected(tmp_path):
    with ExternalBackend(stub("--mode", "oversize"), timeout=20, max_line_length=1000) as be:
        with pytest.raises(ProtocolError, match="max line length"):
            be.predict(ModelHandle(str(tmp_path)), KEYS)


def test_refusal_and_missing_program(tmp_path):
    with ExternalBackend(stub(), timeout=20) as be:
        with pytest.raises(BackendError, match="refused"):
            be._request({"cmd": "dance"})
    with pytest.raises(BackendExitError):
        ExternalBackend(["/nonexistent/detector"]).hello()


def test_backend_restarts_after_failure(tmp_path):
    be = ExternalBackend(stub("--mode", "crash"), timeout=20)
    with pytest.raises(BackendExitError):
        be.predict(ModelHandle(str(tmp_path)), KEYS)
    # a fresh child is started for the next request
    assert be.predict(ModelHandle(str(tmp_path)), KEYS[:1])[KEYS[0]][0].score == 0.95
    be.close()
