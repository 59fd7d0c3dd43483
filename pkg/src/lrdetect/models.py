"""Target classifiers with named activation taps at every layer boundary.

Both desk architectures expose five layer outputs a1..a5: three hidden
blocks, the logits, and the softmax probabilities. a4 (the logits) is the
penultimate layer and serves as the detector's regression target; a5 is
the class probability vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .optim import SGD
from .seeds import substream

ARCHITECTURES = ("mlp", "small_cnn")


@dataclass
class ModelConfig:
    arch: str = "small_cnn"
    input_shape: tuple = (1, 28, 28)
    num_classes: int = 10
    # mlp: fully-connected widths; small_cnn: (conv1 ch, conv2 ch, fc width)
    mlp_widths: tuple = (256, 128, 64)
    cnn_channels: tuple = (8, 16)
    cnn_fc_width: int = 64

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}, expected {ARCHITECTURES}")


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0


class Classifier:
    """Sequential classifier a1..an with taps at each layer boundary."""

    N_LAYERS = 5
    LAYER_NAMES = ("block1", "block2", "block3", "logits", "probs")

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params  # name -> leaf Tensor, insertion-ordered
        self._layer_dims = None

    @property
    def n_layers(self) -> int:
        return self.N_LAYERS

    @property
    def feature_layer(self) -> int:
        """Index of a_{n-1}, the regression target."""
        return self.N_LAYERS - 1

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "Classifier":
        rng = substream(seed, "model-init", config.arch)

        def he(shape, fan_in):
            scale = np.sqrt(2.0 / fan_in)
            return ad.Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32))

        def zeros(shape):
            return ad.Tensor(np.zeros(shape, dtype=np.float32))

        c, h, w = config.input_shape
        k = config.num_classes
        params = {}
        if config.arch == "mlp":
            w1, w2, w3 = config.mlp_widths
            d = c * h * w
            for name, (din, dout) in (
                ("fc1", (d, w1)),
                ("fc2", (w1, w2)),
                ("fc3", (w2, w3)),
                ("out", (w3, k)),
            ):
                params[f"{name}.w"] = he((din, dout), din)
                params[f"{name}.b"] = zeros((dout,))
        else:
            c1, c2 = config.cnn_channels
            params["conv1.w"] = he((c1, c, 3, 3), c * 9)
            params["conv1.b"] = zeros((c1,))
            params["conv2.w"] = he((c2, c1, 3, 3), c1 * 9)
            params["conv2.b"] = zeros((c2,))
            h1, w1 = (h - 2) // 2, (w - 2) // 2
            h2, w2 = (h1 - 2) // 2, (w1 - 2) // 2
            flat = c2 * h2 * w2
            params["fc1.w"] = he((flat, config.cnn_fc_width), flat)
            params["fc1.b"] = zeros((config.cnn_fc_width,))
            params["out.w"] = he((config.cnn_fc_width, k), config.cnn_fc_width)
            params["out.b"] = zeros((k,))
        return cls(config, params)

    def parameters(self):
        return list(self.params.values())

    def _linear(self, x, name):
        return ad.bias_add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def forward_with_taps(self, x, taps=(), tap_gradients: bool = False):
        """Run the model, recording the requested layer activations.

        x: Tensor or array shaped (N,) + input_shape. taps: iterable of
        1-based layer indices. Returns (logits, trace) where trace maps
        each requested index to its activation, detached from any active
        tape unless tap_gradients is set. Tapping never changes logits.
        """
        taps = frozenset(taps)
        bad = [t for t in taps if not 1 <= t <= self.N_LAYERS]
        if bad:
            raise ValueError(f"unknown tap indices {sorted(bad)}, model has layers 1..{self.N_LAYERS}")
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        expected = self.config.input_shape
        if x.shape[1:] != expected or x.ndim != len(expected) + 1:
            raise ValueError(f"input shape {x.shape} does not match (N,) + {expected}")

        trace = {}

        def tap(idx, tensor):
            if idx in taps:
                trace[idx] = tensor if tap_gradients else tensor.detach()

        if self.config.arch == "mlp":
            h = ad.flatten(x)
            a1 = ad.relu(self._linear(h, "fc1"))
            tap(1, a1)
            a2 = ad.relu(self._linear(a1, "fc2"))
            tap(2, a2)
            a3 = ad.relu(self._linear(a2, "fc3"))
            tap(3, a3)
            logits = self._linear(a3, "out")
        else:
            a1 = ad.maxpool2(ad.relu(ad.conv2d(x, self.params["conv1.w"], self.params["conv1.b"])))
            tap(1, a1)
            a2 = ad.maxpool2(ad.relu(ad.conv2d(a1, self.params["conv2.w"], self.params["conv2.b"])))
            tap(2, a2)
            a3 = ad.relu(self._linear(ad.flatten(a2), "fc1"))
            tap(3, a3)
            logits = self._linear(a3, "out")
        tap(4, logits)
        if 5 in taps:
            tap(5, ad.softmax(logits, axis=-1))
        return logits, trace

    def logits(self, x) -> np.ndarray:
        return self.forward_with_taps(x)[0].data

    def layer_dims(self) -> dict:
        """Flattened per-sample length of each layer output, 1-based."""
        if self._layer_dims is None:
            probe = np.zeros((1,) + self.config.input_shape, dtype=np.float32)
            _, trace = self.forward_with_taps(probe, taps=range(1, self.N_LAYERS + 1))
            self._layer_dims = {i: int(t.data[0].size) for i, t in trace.items()}
        return self._layer_dims


def cross_entropy(logits: ad.Tensor, labels) -> ad.Tensor:
    """Mean cross-entropy of logits (N, K) or (K,) against integer labels.

    Computed as logsumexp(z) - z[label] with a detached max shift, so the
    value is stable and the gradient is exactly softmax minus one-hot.
    """
    squeeze = logits.ndim == 1
    if squeeze:
        logits = ad.reshape(logits, (1, -1))
        labels = np.asarray([labels])
    else:
        labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    # the max shift is a detached constant; it cancels analytically in the grad
    shift = np.broadcast_to(logits.data.max(axis=1, keepdims=True), logits.shape)
    z = ad.sub(logits, ad.Tensor(shift.copy()))
    lse = ad.log(ad.reduce_sum(ad.exp(z), axis=1))
    onehot = np.zeros((n, k), dtype=np.float32)
    onehot[np.arange(n), labels] = 1.0
    picked = ad.reduce_sum(ad.mul(z, ad.Tensor(onehot)), axis=1)
    return ad.reduce_mean(ad.sub(lse, picked))


def predict(model: Classifier, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class per sample, evaluated in batches without a tape."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], batch_size):
        stop = min(start + batch_size, x.shape[0])
        out[start:stop] = model.logits(x[start:stop]).argmax(axis=1)
    return out


def accuracy(model: Classifier, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(model, x) == np.asarray(y)).mean())


def train_classifier(model, images, labels, cfg: TrainConfig, val_images=None, val_labels=None):
    """SGD training. Returns a per-epoch log; raises on divergence.

    Deterministic for a fixed cfg.seed: shuffling is the only randomness.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("train_classifier: empty dataset")
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError(
            f"train_classifier: pixels must lie in [0, 1], got "
            f"[{images.min():.4f}, {images.max():.4f}]"
        )
    rng = substream(cfg.seed, "train-classifier")
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    log = {"epochs": [], "config": cfg.__dict__.copy()}
    n = images.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            with ad.Tape() as tape:
                params = model.parameters()
                for p in params:
                    tape.watch(p)
                logits, _ = model.forward_with_taps(xb)
                loss = cross_entropy(logits, yb)
                grads = ad.gradients(tape, loss, params)
            step_loss = loss.item()
            if not np.isfinite(step_loss):
                raise RuntimeError(
                    f"train_classifier: loss diverged to {step_loss} at epoch "
                    f"{epoch} step {start // cfg.batch_size}"
                )
            opt.step(grads)
            total_loss += step_loss * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        entry = {"epoch": epoch, "loss": total_loss / n, "train_accuracy": correct / n}
        if val_images is not None:
            entry["val_accuracy"] = accuracy(model, val_images, val_labels)
        log["epochs"].append(entry)
    for name, p in model.params.items():
        if not np.isfinite(p.data).all():
            raise RuntimeError(f"train_classifier: non-finite weights in {name}")
    return log
