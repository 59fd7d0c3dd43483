"""Checkpoint round-trips, byte determinism, and corruption handling."""

import numpy as np
import pytest

from lrdetect import checkpoint as ckpt
from lrdetect import detector as det
from lrdetect import models


# -------------------------------------------------------------- classifiers

def test_classifier_round_trip_exact(mlp_model, test_set, tmp_path):
    p = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(p, mlp_model)
    back = ckpt.load_checkpoint(p)
    assert isinstance(back, models.Classifier)
    assert back.config == mlp_model.config
    for name, param in mlp_model.params.items():
        np.testing.assert_array_equal(back.params[name].data, param.data)
    x, _ = test_set
    np.testing.assert_array_equal(back.logits(x[:16]), mlp_model.logits(x[:16]))


def test_classifier_cnn_round_trip(cnn_model, tmp_path):
    p = tmp_path / "c.ckpt"
    ckpt.save_checkpoint(p, cnn_model)
    back = ckpt.load_checkpoint(p)
    assert back.config.arch == "small_cnn"
    for name, param in cnn_model.params.items():
        np.testing.assert_array_equal(back.params[name].data, param.data)


def test_classifier_save_is_byte_deterministic(mlp_model, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ckpt.save_checkpoint(a, mlp_model)
    ckpt.save_checkpoint(b, mlp_model)
    assert a.read_bytes() == b.read_bytes()
    # and a loaded copy re-saves to the same bytes
    c = tmp_path / "c.ckpt"
    ckpt.save_checkpoint(c, ckpt.load_checkpoint(a))
    assert c.read_bytes() == a.read_bytes()


# ----------------------------------------------------------------- detectors

def test_detector_round_trip_scores_match(mlp_model, mlp_detector, test_set, tmp_path):
    p = tmp_path / "d.ckpt"
    ckpt.save_checkpoint(p, mlp_detector)
    back = ckpt.load_checkpoint(p)
    assert isinstance(back, det.Detector)
    assert back.tap_spec == mlp_detector.tap_spec
    assert back.target_layer == mlp_detector.target_layer
    x, _ = test_set
    np.testing.assert_array_equal(
        det.score(back, mlp_model, x[:32]), det.score(mlp_detector, mlp_model, x[:32]))


def test_detector_randomized_round_trip(mlp_model, mlp_detector_randomized, tmp_path):
    p = tmp_path / "dr.ckpt"
    ckpt.save_checkpoint(p, mlp_detector_randomized)
    back = ckpt.load_checkpoint(p)
    assert back.tap_spec.order_policy == "randomized"
    assert back.tap_spec.order_seed == mlp_detector_randomized.tap_spec.order_seed
    assert back.seg_stats is not None
    for (mu_a, sd_a), (mu_b, sd_b) in zip(back.seg_stats,
                                          mlp_detector_randomized.seg_stats):
        np.testing.assert_array_equal(mu_a, mu_b)
        np.testing.assert_array_equal(sd_a, sd_b)


def test_detector_save_is_byte_deterministic(mlp_detector, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ckpt.save_checkpoint(a, mlp_detector)
    ckpt.save_checkpoint(b, mlp_detector)
    assert a.read_bytes() == b.read_bytes()


def test_save_rejects_unknown_artifact(tmp_path):
    with pytest.raises(TypeError, match="cannot checkpoint"):
        ckpt.save_checkpoint(tmp_path / "x.ckpt", {"weights": 1})


# ------------------------------------------------------------- corrupt files

def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_checkpoint(p)


def test_load_rejects_truncation(mlp_model, tmp_path):
    p = tmp_path / "t.ckpt"
    ckpt.save_checkpoint(p, mlp_model)
    whole = p.read_bytes()
    p.write_bytes(whole[: len(whole) // 2])
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.load_checkpoint(p)


def test_load_rejects_trailing_garbage(mlp_detector, tmp_path):
    p = tmp_path / "g.ckpt"
    ckpt.save_checkpoint(p, mlp_detector)
    p.write_bytes(p.read_bytes() + b"\x01")
    with pytest.raises(ckpt.CheckpointError, match="trailing"):
        ckpt.load_checkpoint(p)


def test_load_rejects_bad_metadata_json(mlp_detector, tmp_path):
    import struct

    p = tmp_path / "j.ckpt"
    ckpt.save_checkpoint(p, mlp_detector)
    raw = p.read_bytes()
    # find the metadata block (length-prefixed JSON at the tail) and break it
    blob = b'{"broken'
    body_end = raw.rindex(b'{"kind"') - 4
    p.write_bytes(raw[:body_end] + struct.pack("<I", len(blob)) + blob)
    with pytest.raises(ckpt.CheckpointError, match="JSON"):
        ckpt.load_checkpoint(p)


def test_classifier_missing_config_entries(tmp_path, mlp_model):
    import io

    entries = {name: p.data for name, p in mlp_model.params.items()}
    buf = io.BytesIO()
    ckpt._write_container(buf, entries)
    p = tmp_path / "nocfg.ckpt"
    p.write_bytes(buf.getvalue())
    with pytest.raises(ckpt.CheckpointError, match="config"):
        ckpt.load_checkpoint(p)


def test_checkpoint_error_is_oserror(tmp_path):
    assert issubclass(ckpt.CheckpointError, OSError)
    with pytest.raises(OSError):
        ckpt.load_checkpoint(tmp_path / "nope.ckpt")


# -------------------------------------------------------- adversarial batches

def test_adversarial_round_trip_exact(test_set, tmp_path):
    x, y = test_set
    x = x[:12]
    x_adv = np.clip(x + 0.03, 0, 1).astype(np.float32)
    preds = (y[:12] + 1) % 10
    p = tmp_path / "adv.bin"
    ckpt.save_adversarial(p, x, x_adv, y[:12], preds)
    bx, badv, by, bp = ckpt.load_adversarial(p)
    np.testing.assert_array_equal(bx, x)
    np.testing.assert_array_equal(badv, x_adv)
    np.testing.assert_array_equal(by, y[:12])
    np.testing.assert_array_equal(bp, preds)
    assert bx.dtype == np.float32 and by.dtype == np.int64


def test_adversarial_batch_size_mismatch(test_set, tmp_path):
    x, y = test_set
    with pytest.raises(ValueError, match="mismatched batch"):
        ckpt.save_adversarial(tmp_path / "a.bin", x[:4], x[:3], y[:4], y[:4])


def test_adversarial_bad_magic(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"LRCKPT1\0" + b"\x00" * 16)
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_adversarial(p)


def test_adversarial_truncation(test_set, tmp_path):
    x, y = test_set
    p = tmp_path / "t.bin"
    ckpt.save_adversarial(p, x[:4], x[:4], y[:4], y[:4])
    whole = p.read_bytes()
    p.write_bytes(whole[:-50])
    with pytest.raises(ckpt.CheckpointError, match="truncated"):
        ckpt.load_adversarial(p)


def test_adversarial_empty_batch_rejected(tmp_path):
    import struct

    p = tmp_path / "e.bin"
    p.write_bytes(ckpt.MAGIC_ADV + struct.pack("<I", 0))
    with pytest.raises(ckpt.CheckpointError, match="empty"):
        ckpt.load_adversarial(p)
