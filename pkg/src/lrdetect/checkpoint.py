"""Binary persistence for classifiers, detectors, and adversarial batches.

Weight container layout (magic ``LRCKPT1\\0``):

    u32 entry count, then per entry:
        u32 name length, name bytes (UTF-8),
        u32 rank, u32 dims[rank], f32 data (little-endian, C order)

A classifier checkpoint is a bare container holding the weights plus
small ``config.*`` entries encoding the architecture.  A detector
checkpoint is the same container (regressor weights and per-segment
standardization constants) followed by a length-prefixed UTF-8 JSON
metadata block (tap indices, slice bounds, order policy/seed, target
layer).  The loader distinguishes the two by the presence of the
trailing metadata block.

Adversarial batches use magic ``LRADV1\\0``: u32 count, then per sample
u32 label, u32 predicted class, and the x / x_adv tensors in the same
rank/dims/f32 encoding as container entries.

Entries are written in sorted-name order and JSON with sorted keys, so
identical artifacts serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .detector import Detector, Regressor, TapSpec
from .models import ARCHITECTURES, Classifier, ModelConfig

MAGIC_CKPT = b"LRCKPT1\0"
MAGIC_ADV = b"LRADV1\0"


class CheckpointError(OSError):
    """Raised on bad magic, truncation, or inconsistent contents."""


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise CheckpointError(
            f"truncated checkpoint reading {what}: wanted {count} bytes, got {len(buf)}"
        )
    return buf


def _read_u32(f, what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def _write_u32(f, value: int) -> None:
    f.write(struct.pack("<I", value))


def _write_tensor(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    _write_u32(f, arr.ndim)
    for dim in arr.shape:
        _write_u32(f, dim)
    f.write(arr.tobytes())


def _read_tensor(f, what: str) -> np.ndarray:
    rank = _read_u32(f, f"{what} rank")
    if rank > 8:
        raise CheckpointError(f"implausible tensor rank {rank} for {what}")
    shape = tuple(_read_u32(f, f"{what} dim {i}") for i in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(f, 4 * count, f"{what} data")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _write_container(f, entries: dict) -> None:
    f.write(MAGIC_CKPT)
    _write_u32(f, len(entries))
    for name in sorted(entries):
        encoded = name.encode("utf-8")
        _write_u32(f, len(encoded))
        f.write(encoded)
        _write_tensor(f, entries[name])


def _read_container(f) -> dict:
    magic = _read_exact(f, len(MAGIC_CKPT), "magic")
    if magic != MAGIC_CKPT:
        raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {MAGIC_CKPT!r}")
    count = _read_u32(f, "entry count")
    entries = {}
    for i in range(count):
        name_len = _read_u32(f, f"entry {i} name length")
        if name_len > 4096:
            raise CheckpointError(f"implausible entry name length {name_len}")
        name = _read_exact(f, name_len, f"entry {i} name").decode("utf-8")
        if name in entries:
            raise CheckpointError(f"duplicate entry {name!r}")
        entries[name] = _read_tensor(f, f"entry {name!r}")
    return entries


def _classifier_entries(model: Classifier) -> dict:
    cfg = model.config
    entries = {name: p.data for name, p in model.params.items()}
    # architecture is recorded as small numeric config entries so the
    # container format stays weights-only
    entries["config.arch_id"] = np.array([ARCHITECTURES.index(cfg.arch)], dtype=np.float32)
    entries["config.input_shape"] = np.array(cfg.input_shape, dtype=np.float32)
    entries["config.num_classes"] = np.array([cfg.num_classes], dtype=np.float32)
    entries["config.mlp_widths"] = np.array(cfg.mlp_widths, dtype=np.float32)
    entries["config.cnn_channels"] = np.array(cfg.cnn_channels, dtype=np.float32)
    entries["config.cnn_fc_width"] = np.array([cfg.cnn_fc_width], dtype=np.float32)
    return entries


def _ints(arr: np.ndarray) -> list:
    return [int(round(float(v))) for v in np.ravel(arr)]


def _classifier_from_entries(entries: dict) -> Classifier:
    try:
        arch_id = _ints(entries["config.arch_id"])[0]
        cfg = ModelConfig(
            arch=ARCHITECTURES[arch_id],
            input_shape=tuple(_ints(entries["config.input_shape"])),
            num_classes=_ints(entries["config.num_classes"])[0],
            mlp_widths=tuple(_ints(entries["config.mlp_widths"])),
            cnn_channels=tuple(_ints(entries["config.cnn_channels"])),
            cnn_fc_width=_ints(entries["config.cnn_fc_width"])[0],
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointError(f"missing or invalid config entries: {exc}") from exc
    model = Classifier.build(cfg, seed=0)
    weights = {k: v for k, v in entries.items() if not k.startswith("config.")}
    if set(weights) != set(model.params):
        raise CheckpointError(
            f"weight names {sorted(weights)} do not match architecture "
            f"{cfg.arch!r} parameters {sorted(model.params)}"
        )
    for name, arr in weights.items():
        param = model.params[name]
        if param.data.shape != arr.shape:
            raise CheckpointError(
                f"weight {name!r} has shape {arr.shape}, architecture "
                f"expects {param.data.shape}"
            )
        param.data[...] = arr
    return model


def _detector_entries(detector: Detector) -> dict:
    entries = {f"reg.{k}": p.data for k, p in detector.regressor.params.items()}
    if detector.seg_stats is not None:
        for i, (mu, sd) in enumerate(detector.seg_stats):
            entries[f"seg{i}.mu"] = mu
            entries[f"seg{i}.sd"] = sd
    return entries


def _detector_metadata(detector: Detector) -> dict:
    spec = detector.tap_spec
    return {
        "kind": "detector",
        "layer_indices": list(spec.layer_indices),
        "slice_bounds": [list(b) for b in spec.slice_bounds],
        "order_policy": spec.order_policy,
        "order_seed": spec.order_seed,
        "target_layer": detector.target_layer,
    }


def _detector_from_parts(entries: dict, meta: dict) -> Detector:
    if meta.get("kind") != "detector":
        raise CheckpointError(f"unknown metadata kind {meta.get('kind')!r}")
    try:
        spec = TapSpec(
            layer_indices=tuple(int(i) for i in meta["layer_indices"]),
            slice_bounds=tuple(tuple(int(v) for v in b) for b in meta["slice_bounds"]),
            order_policy=meta["order_policy"],
            order_seed=int(meta["order_seed"]),
        )
        target_layer = int(meta["target_layer"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid detector metadata: {exc}") from exc
    try:
        w1, w3 = entries["reg.w1"], entries["reg.w3"]
    except KeyError as exc:
        raise CheckpointError(f"missing regressor weight {exc}") from exc
    reg = Regressor(w1.shape[0], w3.shape[1], hidden=w1.shape[1], seed=0)
    for key, param in reg.params.items():
        arr = entries.get(f"reg.{key}")
        if arr is None:
            raise CheckpointError(f"missing regressor weight reg.{key}")
        if arr.shape != param.data.shape:
            raise CheckpointError(
                f"regressor weight {key!r} has shape {arr.shape}, expected "
                f"{param.data.shape}"
            )
        param.data[...] = arr
    if spec.input_dim != reg.input_dim:
        raise CheckpointError(
            f"tap spec input dim {spec.input_dim} does not match regressor "
            f"input dim {reg.input_dim}"
        )
    n_seg = len(spec.layer_indices)
    seg_stats = None
    if "seg0.mu" in entries:
        seg_stats = tuple(
            (entries[f"seg{i}.mu"], entries[f"seg{i}.sd"]) for i in range(n_seg)
        )
    return Detector(spec, reg, target_layer, seg_stats)


def save_checkpoint(path, artifact) -> None:
    """Persist a Classifier or Detector; same-artifact saves are byte-identical."""
    if isinstance(artifact, Classifier):
        entries, meta = _classifier_entries(artifact), None
    elif isinstance(artifact, Detector):
        entries, meta = _detector_entries(artifact), _detector_metadata(artifact)
    else:
        raise TypeError(f"cannot checkpoint {type(artifact).__name__}")
    with open(path, "wb") as f:
        _write_container(f, entries)
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
            _write_u32(f, len(blob))
            f.write(blob)


def load_checkpoint(path):
    """Load whatever save_checkpoint wrote: a Classifier or a Detector."""
    with open(path, "rb") as f:
        entries = _read_container(f)
        tail = f.read(4)
        if not tail:
            return _classifier_from_entries(entries)
        if len(tail) != 4:
            raise CheckpointError("truncated metadata length")
        (meta_len,) = struct.unpack("<I", tail)
        raw = _read_exact(f, meta_len, "metadata")
        if f.read(1):
            raise CheckpointError("trailing bytes after metadata")
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"invalid metadata JSON: {exc}") from exc
    return _detector_from_parts(entries, meta)


def save_adversarial(path, x, x_adv, labels, preds) -> None:
    """Write a batch of (label, prediction, x, x_adv) records."""
    x = np.asarray(x, dtype=np.float32)
    x_adv = np.asarray(x_adv, dtype=np.float32)
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    n = x.shape[0]
    if not (x_adv.shape[0] == labels.shape[0] == preds.shape[0] == n):
        raise ValueError(
            f"mismatched batch sizes: x={n} x_adv={x_adv.shape[0]} "
            f"labels={labels.shape[0]} preds={preds.shape[0]}"
        )
    if x.shape != x_adv.shape:
        raise ValueError(f"x shape {x.shape} != x_adv shape {x_adv.shape}")
    with open(path, "wb") as f:
        f.write(MAGIC_ADV)
        _write_u32(f, n)
        for i in range(n):
            _write_u32(f, int(labels[i]))
            _write_u32(f, int(preds[i]))
            _write_tensor(f, x[i])
            _write_tensor(f, x_adv[i])


def load_adversarial(path):
    """Read a batch written by save_adversarial.

    Returns (x, x_adv, labels, preds) stacked as arrays.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, len(MAGIC_ADV), "magic")
        if magic != MAGIC_ADV:
            raise CheckpointError(f"bad adversarial-batch magic {magic!r}")
        n = _read_u32(f, "sample count")
        labels = np.zeros(n, dtype=np.int64)
        preds = np.zeros(n, dtype=np.int64)
        xs, advs = [], []
        for i in range(n):
            labels[i] = _read_u32(f, f"sample {i} label")
            preds[i] = _read_u32(f, f"sample {i} prediction")
            xs.append(_read_tensor(f, f"sample {i} x"))
            advs.append(_read_tensor(f, f"sample {i} x_adv"))
        if f.read(1):
            raise CheckpointError("trailing bytes after last sample")
    if n == 0:
        raise CheckpointError("empty adversarial batch")
    x = np.stack(xs)
    x_adv = np.stack(advs)
    if x.shape != x_adv.shape:
        raise CheckpointError(f"inconsistent shapes {x.shape} vs {x_adv.shape}")
    return x, x_adv, labels, preds
