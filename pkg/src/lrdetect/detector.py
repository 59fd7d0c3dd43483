"""Layer-regression detector for adversarial inputs.

A small MLP regressor is trained, on clean data only, to predict a
frozen classifier's feature vector (the logits, layer n-1) from slices
of earlier layer activations.  Adversarial perturbations disturb early
layers far less than they disturb the feature vector, so the regressor
keeps predicting the clean-looking feature vector and its squared error
becomes the detection score: low on clean inputs, high on attacked
ones.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import Classifier
from .optim import Adam
from .seeds import substream

_POLICIES = ("fixed", "randomized")


@dataclass(frozen=True)
class TapSpec:
    """Which layers feed the regressor and how their slices are joined.

    slice_bounds are (start, end) index pairs over each tapped layer's
    flattened activation.  In randomized mode the segment concatenation
    order is permuted at use time; the segments themselves are fixed.
    """

    layer_indices: tuple
    slice_bounds: tuple
    order_policy: str = "fixed"
    order_seed: int = 0

    def __post_init__(self):
        if self.order_policy not in _POLICIES:
            raise ValueError(f"unknown order policy {self.order_policy!r}")
        if len(self.layer_indices) != len(self.slice_bounds):
            raise ValueError("one slice bound required per tapped layer")
        if not self.layer_indices:
            raise ValueError("at least one tapped layer required")
        idx = list(self.layer_indices)
        if sorted(set(idx)) != idx:
            raise ValueError("layer indices must be distinct and sorted")
        for start, end in self.slice_bounds:
            if not 0 <= start < end:
                raise ValueError(f"bad slice bounds ({start}, {end})")

    @property
    def slice_lengths(self) -> tuple:
        return tuple(end - start for start, end in self.slice_bounds)

    @property
    def input_dim(self) -> int:
        return sum(self.slice_lengths)


def select_layers(n_layers: int, m: int = 3, rng=None) -> list:
    """Pick m distinct tap layers uniformly from the early-middle band.

    Candidates are the 1-based indices in [n/5, 4n/5) (floor bounds),
    which excludes both the raw-input end and the feature/output end.
    """
    if n_layers < 5:
        raise ValueError("need at least 5 layers to pick taps from")
    lo, hi = n_layers // 5, (4 * n_layers) // 5
    if m > hi - lo:
        raise ValueError(f"cannot pick {m} distinct layers from [{lo}, {hi})")
    if rng is None:
        rng = substream(0, "layer-select")
    picked = rng.choice(np.arange(lo, hi), size=m, replace=False)
    return sorted(int(i) for i in picked)


def middle_slice_bounds(length: int, fraction: float = 0.6) -> tuple:
    """(start, end) of the centered fraction of a length-L vector."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    span = int(np.floor(fraction * length))
    if span < 1:
        raise ValueError(f"slice of fraction {fraction} of length {length} is empty")
    start = int(np.floor((1 - fraction) / 2 * length))
    return start, start + span


def slice_middle(activation, fraction: float = 0.6) -> np.ndarray:
    """Centered fraction of one activation, flattened row-major."""
    data = activation.data if isinstance(activation, ad.Tensor) else np.asarray(activation)
    flat = data.reshape(-1)
    start, end = middle_slice_bounds(flat.size, fraction)
    return flat[start:end]


def make_tap_spec(model: Classifier, m: int = 3, fraction: float = 0.6,
                  order_policy: str = "fixed", order_seed: int = 0, seed: int = 0) -> TapSpec:
    """Select tap layers for a model and compute their slice bounds."""
    rng = substream(seed, "layer-select")
    indices = select_layers(model.n_layers, m, rng)
    dims = model.layer_dims()
    bounds = tuple(middle_slice_bounds(dims[i], fraction) for i in indices)
    return TapSpec(tuple(indices), bounds, order_policy, order_seed)


class Regressor:
    """Two-hidden-layer ReLU MLP from the tap vector to the feature vector."""

    def __init__(self, input_dim: int, output_dim: int, hidden: int | None = None, seed: int = 0):
        if hidden is None:
            hidden = max(256, output_dim)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = hidden
        rng = substream(seed, "regressor-init")

        def he(shape, fan_in):
            scale = np.sqrt(2.0 / fan_in)
            return ad.Tensor((rng.normal(size=shape) * scale).astype(np.float32))

        self.params = {
            "w1": he((input_dim, hidden), input_dim),
            "b1": ad.Tensor(np.zeros(hidden, dtype=np.float32)),
            "w2": he((hidden, hidden), hidden),
            "b2": ad.Tensor(np.zeros(hidden, dtype=np.float32)),
            "w3": he((hidden, output_dim), hidden),
            "b3": ad.Tensor(np.zeros(output_dim, dtype=np.float32)),
        }

    def parameters(self):
        return [self.params[k] for k in sorted(self.params)]

    def forward(self, v) -> ad.Tensor:
        if not isinstance(v, ad.Tensor):
            v = ad.Tensor(v)
        h = ad.relu(ad.bias_add(ad.matmul(v, self.params["w1"]), self.params["b1"]))
        h = ad.relu(ad.bias_add(ad.matmul(h, self.params["w2"]), self.params["b2"]))
        return ad.bias_add(ad.matmul(h, self.params["w3"]), self.params["b3"])

    def forward_np(self, v: np.ndarray) -> np.ndarray:
        p = self.params
        h = np.maximum(v @ p["w1"].data + p["b1"].data, 0.0)
        h = np.maximum(h @ p["w2"].data + p["b2"].data, 0.0)
        return h @ p["w3"].data + p["b3"].data


@dataclass
class Detector:
    """A trained tap spec + regressor pair bound to one classifier.

    seg_stats holds one (mean, std) pair per tapped layer, computed on
    clean training activations; segments are standardized with them
    before concatenation (in sorted-layer association, independent of
    concatenation order).  This conditions the regression problem,
    whose raw segments differ in scale by orders of magnitude across
    layers.
    """

    tap_spec: TapSpec
    regressor: Regressor
    target_layer: int
    seg_stats: tuple | None = None

    def __post_init__(self):
        if any(i >= self.target_layer for i in self.tap_spec.layer_indices):
            raise ValueError("tap layers must precede the regression target layer")


@dataclass
class RegressorTrainConfig:
    """Regressor fit settings.

    input_dropout randomly zeroes input dimensions during training
    (inverted scaling, inference unaffected).  It stops the regressor
    from leaning only on the tap nearest the feature layer, which would
    let it track attacked activations; forced redundancy across taps is
    what makes attacked inputs stand out.
    """

    epochs: int = 120
    batch_size: int = 128
    lr: float = 3e-4
    input_dropout: float = 0.6
    hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.input_dropout < 1:
            raise ValueError("input_dropout must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.hidden is not None and self.hidden < 1:
            raise ValueError("hidden width must be positive")


def _segment_stats(segs: list) -> tuple:
    """Per-dimension standardization constants for each segment.

    The std floor (relative to the median spread) keeps rarely active
    dimensions from exploding after division.
    """
    stats = []
    for seg in segs:
        mu = seg.mean(axis=0, dtype=np.float64).astype(np.float32)
        sd = seg.std(axis=0, dtype=np.float64).astype(np.float32)
        positive = sd[sd > 0]
        floor = 0.05 * float(np.median(positive)) if positive.size else 1.0
        stats.append((mu, np.maximum(sd, np.float32(floor))))
    return tuple(stats)


def _segments_np(trace: dict, spec: TapSpec, stats: tuple | None = None) -> list:
    segs = []
    for idx, (start, end) in zip(spec.layer_indices, spec.slice_bounds):
        if idx not in trace:
            raise ValueError(f"trace is missing tapped layer {idx}")
        a = trace[idx]
        data = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
        segs.append(data.reshape(len(data), -1)[:, start:end])
    if stats is not None:
        segs = [((seg - mu) / sd).astype(np.float32) for seg, (mu, sd) in zip(segs, stats)]
    return segs


def _concat_with_orders(segs: list, orders: np.ndarray) -> np.ndarray:
    """Concatenate segments with a per-sample segment order."""
    n = len(segs[0])
    out = np.empty((n, sum(s.shape[1] for s in segs)), dtype=np.float32)
    unique, inverse = np.unique(orders, axis=0, return_inverse=True)
    for u, order in enumerate(unique):
        rows = inverse == u
        out[rows] = np.concatenate([segs[t][rows] for t in order], axis=1)
    return out


def build_input_vector(trace: dict, spec: TapSpec, rng=None) -> np.ndarray:
    """Concatenate tap slices into the regressor input, batched (n, D).

    Fixed policy joins segments in sorted layer order; randomized policy
    draws one segment permutation from rng for the whole call.
    """
    segs = _segments_np(trace, spec)
    if spec.order_policy == "randomized":
        if rng is None:
            rng = substream(spec.order_seed, "order")
        order = rng.permutation(len(segs))
        segs = [segs[t] for t in order]
    return np.concatenate(segs, axis=1)


def _feature_target(trace: dict, layer: int) -> np.ndarray:
    a = trace[layer]
    data = a.data if isinstance(a, ad.Tensor) else np.asarray(a)
    return data.reshape(len(data), -1)


def train_regressor(model: Classifier, spec: TapSpec, clean_images: np.ndarray,
                    hyper: RegressorTrainConfig) -> Detector:
    """Fit the regressor to the frozen model's feature vector on clean data.

    Activations are precomputed once and treated as constants; only the
    regressor trains.  Segments are standardized per dimension before
    use and the constants ship with the detector.  Under the randomized
    order policy a fresh segment permutation is drawn per training
    batch so that inference permutations are in-distribution.
    Deterministic given hyper.seed.
    """
    if len(clean_images) == 0:
        raise ValueError("empty training set")
    taps = spec.layer_indices + (model.feature_layer,)
    seg_parts, tgt_parts = [], []
    for s in range(0, len(clean_images), 512):
        _, trace = model.forward_with_taps(clean_images[s:s + 512], taps=taps)
        seg_parts.append(_segments_np(trace, spec))
        tgt_parts.append(_feature_target(trace, model.feature_layer))
    raw_segs = [np.concatenate([p[i] for p in seg_parts]) for i in range(len(spec.layer_indices))]
    targets = np.concatenate(tgt_parts)
    stats = _segment_stats(raw_segs)
    segs = [((seg - mu) / sd).astype(np.float32) for seg, (mu, sd) in zip(raw_segs, stats)]

    reg = Regressor(spec.input_dim, targets.shape[1], hidden=hyper.hidden, seed=hyper.seed)
    params = reg.parameters()
    opt = Adam(params, lr=hyper.lr)
    shuffle_rng = substream(hyper.seed, "regressor-shuffle")
    order_rng = substream(hyper.seed, "regressor-order")
    drop_rng = substream(hyper.seed, "regressor-dropout")
    n = len(clean_images)
    k = len(segs)
    keep = 1.0 - hyper.input_dropout

    for epoch in range(hyper.epochs):
        perm = shuffle_rng.permutation(n)
        for s in range(0, n, hyper.batch_size):
            rows = perm[s:s + hyper.batch_size]
            batch_segs = [seg[rows] for seg in segs]
            if spec.order_policy == "randomized":
                order = order_rng.permutation(k)
                batch_segs = [batch_segs[t] for t in order]
            v = np.concatenate(batch_segs, axis=1)
            if hyper.input_dropout > 0:
                mask = drop_rng.uniform(size=v.shape[1]) < keep
                v = v * (mask.astype(np.float32) / np.float32(keep))
            with ad.Tape() as tape:
                for p in params:
                    tape.watch(p)
                diff = ad.sub(reg.forward(ad.Tensor(v)), ad.Tensor(targets[rows]))
                loss = ad.reduce_mean(ad.mul(diff, diff))
                grads = ad.gradients(tape, loss, params)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"regressor loss diverged at epoch {epoch} step {s // hyper.batch_size}")
            opt.step(grads)
    return Detector(spec, reg, model.feature_layer, stats)


def _order_pool(k: int, rng) -> np.ndarray:
    """Orders the randomized score averages over: all k! when feasible.

    With the usual three tapped layers there are only six orders, so the
    expectation over the inference-time permutation is computed exactly;
    past k = 4 it falls back to 24 sampled orders.
    """
    if k <= 4:
        return np.array(list(itertools.permutations(range(k))), dtype=np.intp)
    return np.stack([rng.permutation(k) for _ in range(24)])


def score(detector: Detector, model: Classifier, x: np.ndarray, rng=None,
          batch_size: int = 512) -> np.ndarray:
    """Per-sample detection score: MSE of the regressed feature vector.

    Higher means more suspicious.  Randomized order policy scores under
    the expectation over inference-time segment permutations (exact for
    up to four segments, else 24 orders sampled from rng, defaulting to
    a fixed derivation of the spec's order seed).  Averaging is what
    gives the randomized policy its bite: an attacker who tuned the
    input against one guessed order still stands out under the rest.
    """
    spec = detector.tap_spec
    k = len(spec.layer_indices)
    orders = None
    if spec.order_policy == "randomized":
        if rng is None:
            rng = substream(spec.order_seed, "score-order")
        orders = _order_pool(k, rng)
    taps = spec.layer_indices + (detector.target_layer,)
    out = np.empty(len(x), dtype=np.float32)
    for s in range(0, len(x), batch_size):
        _, trace = model.forward_with_taps(x[s:s + batch_size], taps=taps)
        segs = _segments_np(trace, spec, detector.seg_stats)
        target = _feature_target(trace, detector.target_layer)
        if orders is None:
            vs = [np.concatenate(segs, axis=1)]
        else:
            vs = [np.concatenate([segs[t] for t in order], axis=1) for order in orders]
        acc = np.zeros(len(segs[0]), dtype=np.float64)
        for v in vs:
            pred = detector.regressor.forward_np(v)
            if pred.shape != target.shape:
                raise ValueError(f"regressor output {pred.shape} does not match feature vector {target.shape}")
            acc += ((pred - target) ** 2).mean(axis=1)
        out[s:s + batch_size] = (acc / len(vs)).astype(np.float32)
    return out


def score_samples_tensor(detector: Detector, trace: dict, order=None) -> ad.Tensor:
    """Per-sample detection scores as a differentiable (n,) tensor.

    trace must hold taped activations (tap_gradients=True) for the
    spec's layers and the target layer; gradients then flow into the
    input through both the taps and the regressor.  order optionally
    permutes segment order (randomized policy).
    """
    spec = detector.tap_spec
    segs = []
    for pos, (idx, (start, end)) in enumerate(zip(spec.layer_indices, spec.slice_bounds)):
        if idx not in trace:
            raise ValueError(f"trace is missing tapped layer {idx}")
        seg = ad.narrow(ad.flatten(trace[idx]), 1, start, end - start)
        if detector.seg_stats is not None:
            mu, sd = detector.seg_stats[pos]
            seg = ad.scale_columns(ad.bias_add(seg, ad.Tensor(-mu)), ad.Tensor(1.0 / sd))
        segs.append(seg)
    if order is not None:
        segs = [segs[t] for t in order]
    v = ad.concat(segs, axis=1)
    pred = detector.regressor.forward(v)
    target = ad.flatten(trace[detector.target_layer])
    diff = ad.sub(pred, target)
    return ad.reduce_mean(ad.mul(diff, diff), axis=1)


def score_tensor(detector: Detector, trace: dict, order=None) -> ad.Tensor:
    """Mean detection score over the batch as a differentiable scalar."""
    return ad.reduce_mean(score_samples_tensor(detector, trace, order=order))


def threshold_at_quantile(scores, q: float) -> float:
    """Score threshold at a quantile of a clean-score sample."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("empty score set")
    if not 0 <= q <= 1:
        raise ValueError("quantile must be in [0, 1]")
    return float(np.quantile(scores, q))


def conjecture_stats(detector: Detector, model: Classifier, x: np.ndarray,
                     x_adv: np.ndarray, batch_size: int = 512) -> dict:
    """Layer-change and regression-error statistics over aligned pairs.

    For each (clean, attacked) pair this measures the normalized l2
    change of the first layer and of the feature layer,
    |a(x') - a(x)| / (|a(x')| + |a(x)|), plus the regressor's l2 error
    on the clean and on the attacked input.  Pairs whose change
    denominator is zero are skipped and counted.  The detector's claim
    is that attacks barely move early layers but move the feature layer
    and inflate the regression error.
    """
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_adv.shape}")
    spec = detector.tap_spec
    taps = tuple(sorted(set(spec.layer_indices) | {1, detector.target_layer}))
    d_first, d_feat, e_clean, e_adv = [], [], [], []
    skipped = 0

    def norms(a):
        flat = a.reshape(len(a), -1).astype(np.float64)
        return np.sqrt((flat * flat).sum(axis=1))

    for s in range(0, len(x), batch_size):
        _, tr_c = model.forward_with_taps(x[s:s + batch_size], taps=taps)
        _, tr_a = model.forward_with_taps(x_adv[s:s + batch_size], taps=taps)
        stats = {}
        for layer in (1, detector.target_layer):
            ac, aa = tr_c[layer].data, tr_a[layer].data
            denom = norms(ac) + norms(aa)
            stats[layer] = (norms(aa - ac), denom)
        num1, den1 = stats[1]
        numf, denf = stats[detector.target_layer]
        ok = (den1 > 0) & (denf > 0)
        skipped += int((~ok).sum())
        d_first.append(num1[ok] / den1[ok])
        d_feat.append(numf[ok] / denf[ok])
        for trace, sink in ((tr_c, e_clean), (tr_a, e_adv)):
            segs = _segments_np(trace, spec, detector.seg_stats)
            if spec.order_policy == "randomized":
                rng = substream(spec.order_seed, "stats-order")
                orders = np.stack([rng.permutation(len(segs)) for _ in range(len(segs[0]))])
                v = _concat_with_orders(segs, orders)
            else:
                v = np.concatenate(segs, axis=1)
            err = detector.regressor.forward_np(v) - _feature_target(trace, detector.target_layer)
            sink.append(np.sqrt((err.astype(np.float64) ** 2).sum(axis=1))[ok])

    d_first = np.concatenate(d_first)
    d_feat = np.concatenate(d_feat)
    e_clean = np.concatenate(e_clean)
    e_adv = np.concatenate(e_adv)
    n = len(d_first)
    if n == 0:
        raise ValueError(f"all {skipped} pairs had zero-activation denominators")

    def paired_gap(hi, lo):
        gap = hi - lo
        se = float(gap.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        return float(gap.mean()), se

    d_gap_mean, d_gap_se = paired_gap(d_feat, d_first)
    e_gap_mean, e_gap_se = paired_gap(e_adv, e_clean)
    return {
        "n_pairs": n,
        "n_skipped": skipped,
        "d_first_mean": float(d_first.mean()), "d_first_std": float(d_first.std(ddof=1)),
        "d_feature_mean": float(d_feat.mean()), "d_feature_std": float(d_feat.std(ddof=1)),
        "err_clean_mean": float(e_clean.mean()), "err_clean_std": float(e_clean.std(ddof=1)),
        "err_adv_mean": float(e_adv.mean()), "err_adv_std": float(e_adv.std(ddof=1)),
        "d_gap_mean": d_gap_mean, "d_gap_se": d_gap_se,
        "err_gap_mean": e_gap_mean, "err_gap_se": e_gap_se,
    }


def permutation_spread(detector: Detector, model: Classifier, x: np.ndarray,
                       n_draws: int = 20, seed: int = 0) -> dict:
    """Score variability over inference-time segment permutations.

    Scores the same inputs n_draws times with independent permutation
    streams and reports the mean score and the per-sample coefficient
    of variation.  A fixed-order detector reports zero spread.
    """
    draws = np.stack([
        score(detector, model, x, rng=substream(seed, "perm-spread", i))
        for i in range(n_draws)
    ])
    mean = draws.mean(axis=0)
    std = draws.std(axis=0, ddof=1) if n_draws > 1 else np.zeros_like(mean)
    cv = std / np.maximum(mean, 1e-12)
    return {
        "n_draws": n_draws,
        "score_mean": float(mean.mean()),
        "score_std_over_draws": float(std.mean()),
        "cv_mean": float(cv.mean()),
        "cv_max": float(cv.max()),
    }
