"""Evaluation protocol for attack detectors.

Builds matched clean/adversarial sets (clean = correctly classified,
adversarial = successful attacks on those same samples), scores them,
and summarizes separation as AUROC.  Also provides the attack-strength
sweep and the per-sample timing benchmark.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from . import baselines as bl
from . import detector as det
from .models import Classifier, predict
from .seeds import substream

_CHUNK = 512


@dataclass
class EvalSets:
    """Clean samples the model gets right and successful attacks on them.

    success_mask marks which clean samples produced a successful
    attack; adv_x[i] was generated from clean_x[success_mask][i].
    """

    clean_x: np.ndarray
    clean_y: np.ndarray
    adv_x: np.ndarray
    adv_y: np.ndarray
    success_mask: np.ndarray
    n_test: int
    n_correct: int
    success_rate: float


@dataclass
class EvalReport:
    auroc: float
    n_clean: int
    n_adv: int
    clean_score_mean: float
    clean_score_std: float
    adv_score_mean: float
    adv_score_std: float
    success_rate: float
    config: dict = field(default_factory=dict)
    conjecture: dict | None = None
    pts_seconds: float | None = None


def random_targets(labels: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """A uniformly random wrong class per sample, for targeted attacks."""
    rng = substream(seed, "attack-targets")
    offsets = rng.integers(1, num_classes, size=len(labels))
    return ((labels + offsets) % num_classes).astype(labels.dtype)


def run_attack(model: Classifier, x: np.ndarray, y: np.ndarray, cfg: atk.AttackConfig,
               detector=None, order_mode: str = "resample") -> atk.AdvResult:
    """Dispatch one attack over a batch, chunked to bound tape memory."""
    outs = []
    for s in range(0, len(x), _CHUNK):
        xc, yc = x[s:s + _CHUNK], y[s:s + _CHUNK]
        ccfg = cfg
        if cfg.targeted and not np.isscalar(cfg.target):
            ccfg = replace(cfg, target=np.asarray(cfg.target)[s:s + _CHUNK])
        if cfg.kind == "fgsm":
            outs.append(atk.fgsm(model, xc, yc, ccfg.epsilon))
        elif cfg.kind == "bim":
            outs.append(atk.bim(model, xc, yc, ccfg))
        elif cfg.kind == "pgd":
            outs.append(atk.pgd(model, xc, yc, ccfg))
        elif cfg.kind == "apgd_s":
            outs.append(atk.apgd_s(model, xc, yc, ccfg))
        elif cfg.kind == "adaptive_pgd":
            if detector is None:
                raise ValueError("adaptive attack needs a detector")
            outs.append(atk.adaptive_pgd(model, detector, xc, yc, ccfg, order_mode=order_mode))
        else:
            raise ValueError(f"unknown attack kind {cfg.kind!r}")
    return atk.AdvResult(
        x_adv=np.concatenate([o.x_adv for o in outs]),
        success=np.concatenate([o.success for o in outs]),
        final_loss=np.concatenate([o.final_loss for o in outs]),
    )


def build_eval_sets(model: Classifier, cfg: atk.AttackConfig, images: np.ndarray,
                    labels: np.ndarray, detector=None, order_mode: str = "resample") -> EvalSets:
    """Filter to correctly classified samples, attack them, keep successes."""
    pred = predict(model, images)
    correct = pred == labels
    if not correct.any():
        raise ValueError("model classifies no sample correctly; nothing to evaluate")
    clean_x, clean_y = images[correct], labels[correct]
    if cfg.targeted and not np.isscalar(cfg.target):
        # per-sample targets align with the full input set; keep the
        # entries of the correctly classified survivors
        cfg = replace(cfg, target=np.asarray(cfg.target)[correct])
    result = run_attack(model, clean_x, clean_y, cfg, detector=detector, order_mode=order_mode)
    ok = result.success
    return EvalSets(
        clean_x=clean_x, clean_y=clean_y,
        adv_x=result.x_adv[ok], adv_y=clean_y[ok],
        success_mask=ok,
        n_test=len(images), n_correct=int(correct.sum()),
        success_rate=float(ok.mean()),
    )


def auroc(scores_clean, scores_adv) -> float:
    """Probability a random adversarial score exceeds a random clean one.

    Ties count one half.  Computed by exact pair counting (rank form),
    identical to the quadratic two-loop definition.
    """
    clean = np.asarray(scores_clean, dtype=np.float64)
    adv = np.asarray(scores_adv, dtype=np.float64)
    if clean.size == 0 or adv.size == 0:
        raise ValueError("auroc needs nonempty score sets")
    clean = np.sort(clean)
    below = np.searchsorted(clean, adv, side="left")
    below_or_equal = np.searchsorted(clean, adv, side="right")
    wins = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(wins / (clean.size * adv.size))


def evaluate_detector(model: Classifier, detector: det.Detector, sets: EvalSets,
                      config: dict | None = None, with_conjecture: bool = False) -> EvalReport:
    """Score both sets with the regression detector and summarize."""
    s_clean = det.score(detector, model, sets.clean_x)
    s_adv = det.score(detector, model, sets.adv_x)
    report = EvalReport(
        auroc=auroc(s_clean, s_adv),
        n_clean=len(s_clean), n_adv=len(s_adv),
        clean_score_mean=float(s_clean.mean()), clean_score_std=float(s_clean.std(ddof=1)),
        adv_score_mean=float(s_adv.mean()), adv_score_std=float(s_adv.std(ddof=1)),
        success_rate=sets.success_rate,
        config=dict(config or {}),
    )
    if with_conjecture:
        report.conjecture = det.conjecture_stats(
            detector, model, sets.clean_x[sets.success_mask], sets.adv_x)
    return report


def baseline_auroc(model: Classifier, transform: bl.TransformSpec, sets: EvalSets) -> float:
    s_clean = bl.mismatch_score(model, sets.clean_x, transform)
    s_adv = bl.mismatch_score(model, sets.adv_x, transform)
    return auroc(s_clean, s_adv)


def epsilon_sweep(model: Classifier, detector: det.Detector, images: np.ndarray,
                  labels: np.ndarray, eps_list, attack_kind: str = "pgd", seed: int = 0,
                  transforms: tuple = ()) -> list:
    """Detector (and optional baseline) AUROC per attack budget.

    Returns one row per epsilon with the detector's AUROC, each
    baseline's AUROC, and the attack success rate.
    """
    if len(list(eps_list)) == 0:
        raise ValueError("eps_list must be nonempty")
    rows = []
    for eps in eps_list:
        cfg = atk.AttackConfig(kind=attack_kind, epsilon=float(eps), seed=seed)
        sets = build_eval_sets(model, cfg, images, labels)
        row = {
            "epsilon": float(eps),
            "success_rate": sets.success_rate,
            "n_adv": len(sets.adv_x),
            "auroc": evaluate_detector(model, detector, sets).auroc,
        }
        for tf in transforms:
            row[f"auroc_{tf.kind}"] = baseline_auroc(model, tf, sets)
        rows.append(row)
    return rows


def timing_bench(score_fn, samples: np.ndarray, repetitions: int = 3) -> dict:
    """Mean per-sample scoring time over full passes of the sample set.

    One untimed warm-up pass precedes the timed repetitions.
    """
    if len(samples) < 100:
        raise ValueError("timing benchmark needs at least 100 samples")
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    score_fn(samples)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        score_fn(samples)
        times.append((time.perf_counter() - start) / len(samples))
    times = np.asarray(times)
    return {
        "pts_mean": float(times.mean()),
        "pts_std": float(times.std(ddof=1)) if repetitions > 1 else 0.0,
        "n_samples": int(len(samples)),
        "repetitions": int(repetitions),
    }
