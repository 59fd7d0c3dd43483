"""Gradient-based adversarial attacks under l-inf and l2 pixel budgets.

All attacks operate on batched image arrays of shape (n, c, h, w) with
pixels in [0, 1] and return perturbed inputs that satisfy the norm
budget within 1e-5 and the pixel range exactly.  Untargeted attacks
ascend the classification loss of the true label; targeted attacks
descend the loss of the target label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import detector as _det
from .models import Classifier, cross_entropy, predict
from .seeds import substream

_KINDS = ("fgsm", "bim", "pgd", "apgd_s", "adaptive_pgd")
_NORMS = ("linf", "l2")


@dataclass
class AttackConfig:
    """Attack hyperparameters.

    epsilon and step_size are on the [0, 1] pixel scale; budgets quoted
    on the 0-255 integer scale must be divided by 255 before use.
    lam weights the detector-score term of the detector-aware attack
    and is ignored by the plain attacks.
    """

    kind: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float | None = None
    steps: int = 10
    norm: str = "linf"
    targeted: bool = False
    target: int | np.ndarray | None = None
    lam: float = 1.0
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.norm not in _NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.targeted and self.target is None:
            raise ValueError("targeted attack needs a target class")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        # conventional defaults: eps/4 for pgd-family, eps/steps for bim
        if self.kind == "bim":
            return self.epsilon / self.steps
        return self.epsilon / 4


@dataclass
class AdvResult:
    """Per-sample attack outcome for one batch."""

    x_adv: np.ndarray
    success: np.ndarray
    final_loss: np.ndarray


def project(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float, norm: str = "linf") -> np.ndarray:
    """Project x_adv onto the epsilon-ball around x_orig, then into [0, 1].

    The [0, 1] clamp moves every entry toward x_orig (which lies in
    [0, 1] itself), so it never re-violates the norm budget and the
    projection is idempotent.
    """
    if x_adv.shape != x_orig.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x_orig.shape}")
    if norm == "linf":
        out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    elif norm == "l2":
        delta = (x_adv - x_orig).astype(np.float64)
        flat = delta.reshape(len(delta), -1)
        norms = np.sqrt((flat * flat).sum(axis=1))
        # tolerate one-ulp overshoot so re-projection is a no-op
        over = norms > epsilon * (1 + 1e-7)
        scale = np.ones_like(norms)
        scale[over] = epsilon / norms[over]
        out = x_orig + (delta * scale.reshape(-1, *([1] * (delta.ndim - 1)))).astype(np.float32)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _per_sample_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return (lse - z[np.arange(len(labels)), labels]).astype(np.float32)


def _input_grad(model: Classifier, x: np.ndarray, labels: np.ndarray):
    """Gradient of mean cross-entropy w.r.t. the input batch."""
    with ad.Tape() as tape:
        xt = tape.watch(ad.Tensor(x))
        logits, _ = model.forward_with_taps(xt)
        loss = cross_entropy(logits, labels)
        (grad,) = ad.gradients(tape, loss, [xt])
    return grad, logits.data


def _step_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return ad.sign(grad)
    flat = grad.reshape(len(grad), -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    norms = np.maximum(norms, 1e-12)
    return (grad / norms.reshape(-1, *([1] * (grad.ndim - 1)))).astype(np.float32)


def _random_start(x: np.ndarray, epsilon: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    if norm == "linf":
        noise = rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32)
        return np.clip(x + noise, 0.0, 1.0).astype(np.float32)
    d = int(np.prod(x.shape[1:]))
    direction = rng.normal(size=x.shape).astype(np.float32)
    flat = direction.reshape(len(x), -1)
    flat /= np.maximum(np.sqrt((flat * flat).sum(axis=1, keepdims=True)), 1e-12)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(len(x), 1)) ** (1.0 / d)
    noise = (flat * radius).astype(np.float32).reshape(x.shape)
    return project(x + noise, x, epsilon, norm)


def _attack_labels(cfg: AttackConfig, labels: np.ndarray) -> np.ndarray:
    """Labels whose loss the attack optimizes; targets when targeted."""
    if not cfg.targeted:
        return labels
    target = cfg.target
    if np.isscalar(target):
        return np.full_like(labels, int(target))
    target = np.asarray(target)
    if target.shape != labels.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {labels.shape}")
    return target.astype(labels.dtype)


def _finish(model: Classifier, x_adv: np.ndarray, labels: np.ndarray, cfg: AttackConfig) -> AdvResult:
    opt_labels = _attack_labels(cfg, labels)
    logits = model.logits(x_adv)
    pred = logits.argmax(axis=1)
    if cfg.targeted:
        success = pred == opt_labels
    else:
        success = pred != labels
    return AdvResult(x_adv=x_adv, success=success, final_loss=_per_sample_ce(logits, opt_labels))


def fgsm(model: Classifier, x: np.ndarray, label: np.ndarray, epsilon: float) -> AdvResult:
    """Single signed-gradient step of size epsilon, clipped to [0, 1]."""
    label = np.asarray(label)
    if epsilon == 0:
        return _finish(model, x.astype(np.float32).copy(), label, AttackConfig(kind="fgsm"))
    grad, _ = _input_grad(model, x, label)
    x_adv = np.clip(x + np.float32(epsilon) * ad.sign(grad), 0.0, 1.0).astype(np.float32)
    return _finish(model, x_adv, label, AttackConfig(kind="fgsm", epsilon=epsilon))


def _iterate(model: Classifier, x: np.ndarray, label: np.ndarray, cfg: AttackConfig, random_start: bool) -> np.ndarray:
    """Shared PGD/BIM loop; returns the final iterate."""
    opt_labels = _attack_labels(cfg, label)
    sign_dir = np.float32(-1.0 if cfg.targeted else 1.0)
    alpha = np.float32(cfg.resolved_step_size())
    if random_start:
        rng = substream(cfg.seed, "attack-start")
        x_adv = _random_start(x, cfg.epsilon, cfg.norm, rng)
    else:
        x_adv = x.astype(np.float32).copy()
    for _ in range(cfg.steps):
        grad, _ = _input_grad(model, x_adv, opt_labels)
        x_adv = project(x_adv + alpha * sign_dir * _step_direction(grad, cfg.norm), x, cfg.epsilon, cfg.norm)
    return x_adv


def pgd(model: Classifier, x: np.ndarray, label: np.ndarray, cfg: AttackConfig) -> AdvResult:
    """Projected gradient descent with optional seeded random start."""
    label = np.asarray(label)
    x_adv = _iterate(model, x, label, cfg, random_start=cfg.random_start)
    return _finish(model, x_adv, label, cfg)


def bim(model: Classifier, x: np.ndarray, label: np.ndarray, cfg: AttackConfig) -> AdvResult:
    """Basic iterative method: PGD from the clean input, no random start."""
    label = np.asarray(label)
    x_adv = _iterate(model, x, label, cfg, random_start=False)
    return _finish(model, x_adv, label, cfg)


def apgd_s(model: Classifier, x: np.ndarray, label: np.ndarray, cfg: AttackConfig) -> AdvResult:
    """Simplified auto-PGD: momentum steps, per-sample step halving.

    Keeps the best-objective iterate per sample.  At evenly spaced
    checkpoints any sample whose best objective has not improved since
    the previous checkpoint has its step size halved and its iterate
    reset to the best one found so far.  This is a deliberately small
    stand-in for the full adaptive schedule, not a reimplementation.
    """
    label = np.asarray(label)
    opt_labels = _attack_labels(cfg, label)
    sign_dir = np.float32(-1.0 if cfg.targeted else 1.0)
    n = len(x)
    shape1 = (n,) + (1,) * (x.ndim - 1)
    alpha = np.full(shape1, cfg.resolved_step_size(), dtype=np.float32)

    if cfg.random_start:
        rng = substream(cfg.seed, "attack-start")
        x_adv = _random_start(x, cfg.epsilon, cfg.norm, rng)
    else:
        x_adv = x.astype(np.float32).copy()
    x_prev = x_adv.copy()

    def objective(logits):
        return sign_dir * _per_sample_ce(logits, opt_labels)

    grad, logits = _input_grad(model, x_adv, opt_labels)
    best_obj = objective(logits)
    best_x = x_adv.copy()
    ckpt_best = best_obj.copy()
    window = max(1, cfg.steps // 5)

    for step in range(1, cfg.steps + 1):
        z = project(x_adv + alpha * sign_dir * _step_direction(grad, cfg.norm), x, cfg.epsilon, cfg.norm)
        momentum = np.float32(0.75)
        x_next = project(x_adv + momentum * (z - x_adv) + (1 - momentum) * (x_adv - x_prev), x, cfg.epsilon, cfg.norm)
        x_prev, x_adv = x_adv, x_next
        grad, logits = _input_grad(model, x_adv, opt_labels)
        obj = objective(logits)
        improved = obj > best_obj
        best_obj = np.where(improved, obj, best_obj)
        best_x[improved] = x_adv[improved]
        if step % window == 0 and step < cfg.steps:
            stalled = best_obj <= ckpt_best
            alpha[stalled.reshape(shape1)] *= 0.5
            x_adv[stalled] = best_x[stalled]
            x_prev[stalled] = best_x[stalled]
            ckpt_best = best_obj.copy()
    return _finish(model, best_x, label, cfg)


def adaptive_pgd(model: Classifier, detector, x: np.ndarray, label: np.ndarray, cfg: AttackConfig,
                 order_mode: str = "resample") -> AdvResult:
    """Detector-aware PGD on the combined objective loss - lam * score.

    Raising the classification loss flips the prediction while lowering
    the detector score keeps the input looking clean; the gradient of
    the score flows through the activation taps and the regressor.  For
    a randomized-order detector, order_mode picks whether segment
    permutations are resampled every iteration or frozen at the start.

    The score term is rescaled once per batch so that its input
    gradient matches the classification term's at the starting iterate
    (both norms are attacker-observable).  lam then sets the relative
    pull of the two terms, with lam = 1 weighting them equally.  Raw
    detector-score gradients sit two orders of magnitude above
    cross-entropy gradients on these models; unnormalized, lam = 1
    would silently mean lam ~ 100 and the attack would stop flipping
    predictions at all.

    With lam > 0 the returned sample is, per input, the misclassified
    iterate with the lowest detector score seen along the trajectory
    (the final iterate when nothing flipped): the score term usually
    dominates late iterations, so the strongest evading flip happens
    mid-trajectory.  With lam == 0 the objective and the result collapse
    to plain pgd.
    """
    if order_mode not in ("resample", "fixed"):
        raise ValueError(f"unknown order_mode {order_mode!r}")
    label = np.asarray(label)
    opt_labels = _attack_labels(cfg, label)
    sign_dir = np.float32(-1.0 if cfg.targeted else 1.0)
    alpha = np.float32(cfg.resolved_step_size())
    lam = np.float32(cfg.lam)

    if cfg.random_start:
        rng = substream(cfg.seed, "attack-start")
        x_adv = _random_start(x, cfg.epsilon, cfg.norm, rng)
    else:
        x_adv = x.astype(np.float32).copy()

    order_rng = substream(cfg.seed, "adaptive-order")
    randomized = detector.tap_spec.order_policy == "randomized"
    frozen_order = None
    if randomized and order_mode == "fixed":
        frozen_order = order_rng.permutation(len(detector.tap_spec.layer_indices))

    track = cfg.lam > 0
    best_x = x_adv.copy() if track else None
    best_score = np.full(len(x), np.inf) if track else None
    if track:
        g_ce, _ = _input_grad(model, x_adv, opt_labels)
        with ad.Tape() as tape:
            xt = tape.watch(ad.Tensor(x_adv))
            _, trace = model.forward_with_taps(
                xt, taps=detector.tap_spec.layer_indices + (detector.target_layer,),
                tap_gradients=True)
            (g_sc,) = ad.gradients(tape, _det.score_tensor(detector, trace), [xt])
        lam_eff = np.float32(lam * np.linalg.norm(g_ce)
                             / max(np.linalg.norm(g_sc), 1e-12))

    def note(candidate, preds, scores):
        hit = (preds == opt_labels) if cfg.targeted else (preds != label)
        better = hit & (scores < best_score)
        if better.any():
            best_x[better] = candidate[better]
            best_score[better] = scores[better]

    def draw_order():
        if not randomized:
            return None
        if frozen_order is not None:
            return frozen_order
        return order_rng.permutation(len(detector.tap_spec.layer_indices))

    for _ in range(cfg.steps):
        if cfg.lam == 0:
            grad, _ = _input_grad(model, x_adv, opt_labels)
        else:
            order = draw_order()
            with ad.Tape() as tape:
                xt = tape.watch(ad.Tensor(x_adv))
                logits, trace = model.forward_with_taps(
                    xt, taps=detector.tap_spec.layer_indices + (detector.target_layer,),
                    tap_gradients=True)
                samples = _det.score_samples_tensor(detector, trace, order=order)
                loss = ad.sub(cross_entropy(logits, opt_labels),
                              ad.mul(ad.reduce_mean(samples), ad.Tensor(lam_eff)))
                (grad,) = ad.gradients(tape, loss, [xt])
            note(x_adv, logits.data.argmax(axis=1), samples.data)
        x_adv = project(x_adv + alpha * sign_dir * _step_direction(grad, cfg.norm), x, cfg.epsilon, cfg.norm)
    if track:
        # score the last iterate the same way the loop scored the others:
        # with the attacker's own order model, not the deployed average
        logits, trace = model.forward_with_taps(
            x_adv, taps=detector.tap_spec.layer_indices + (detector.target_layer,),
            tap_gradients=True)
        samples = _det.score_samples_tensor(detector, trace, order=draw_order())
        note(x_adv, logits.data.argmax(axis=1), samples.data)
        flipped = np.isfinite(best_score)
        x_adv = x_adv.copy()
        x_adv[flipped] = best_x[flipped]
    return _finish(model, x_adv, label, cfg)
