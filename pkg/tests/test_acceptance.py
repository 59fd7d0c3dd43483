"""Full-pipeline gate: nine end-to-end properties, one pass/fail line each.

Runs the complete pipeline (synthesize data, train both classifiers, fit
detectors, attack, evaluate) at fixed seeds and asserts the detection
properties the toolkit is built around.  Expect roughly twenty minutes on
a laptop core; run with ``pytest tests/test_acceptance.py -s -v`` to see
the verdict lines as they complete.
"""

import io
import json
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from lrdetect import attacks as atk
from lrdetect import baselines as bl
from lrdetect import checkpoint as ckpt
from lrdetect import data
from lrdetect import detector as det
from lrdetect import evaluate as ev
from lrdetect import models
from lrdetect.cli import dispatch
from lrdetect.seeds import substream

EPS8 = 8 / 255

# one seed per pipeline stage; every number below is reproducible from these
SEED_TRAIN_DATA = 11
SEED_TEST_DATA = 12
SEED_MLP_DET_DATA = 13
SEED_CNN_DET_DATA = 14
SEED_MODEL_INIT = 0
SEED_MODEL_TRAIN = 1
SEED_TAP = 2
SEED_ORDER = 7
SEED_REGRESSOR = 5
SEED_ATTACK = 3
SEED_ATTACK_EPS4 = 4

MLP_EPOCHS = 3
CNN_EPOCHS = 8
MLP_DET = det.RegressorTrainConfig(epochs=120, lr=3e-4, input_dropout=0.15,
                                   seed=SEED_REGRESSOR)
CNN_DET = det.RegressorTrainConfig(epochs=240, lr=3e-4, input_dropout=0.5,
                                   seed=SEED_REGRESSOR)
CNN_DET_POOL = 36000
MLP_DET_POOL = 12000
EVAL_POOL = 1500  # per-cell test slice; ~97%+ classified right -> >=1000 clean

BIT4 = bl.TransformSpec("bit_reduce", bits=4)
MED3 = bl.TransformSpec("median_smooth", window=3)


def _verdict(tag: str, ok: bool, detail: str) -> None:
    line = f"[{tag}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line, flush=True)
    assert ok, line


# --------------------------------------------------------------- pipeline


@pytest.fixture(scope="session")
def pipeline():
    """Everything the criteria share: data, models, detectors, eval pools."""
    t0 = time.time()
    xtr, ytr = data.make_dataset(12000, seed=SEED_TRAIN_DATA)
    xte, yte = data.make_dataset(4000, seed=SEED_TEST_DATA)

    built = {"xte": xte, "yte": yte}
    for arch, epochs in (("mlp", MLP_EPOCHS), ("small_cnn", CNN_EPOCHS)):
        model = models.Classifier.build(models.ModelConfig(arch=arch),
                                        seed=SEED_MODEL_INIT)
        models.train_classifier(model, xtr, ytr,
                                models.TrainConfig(epochs=epochs, seed=SEED_MODEL_TRAIN))
        built[arch] = model

    xd_mlp, _ = data.make_dataset(MLP_DET_POOL, seed=SEED_MLP_DET_DATA)
    spec = det.make_tap_spec(built["mlp"], order_policy="fixed",
                             order_seed=SEED_ORDER, seed=SEED_TAP)
    built["det_mlp"] = det.train_regressor(built["mlp"], spec, xd_mlp, MLP_DET)

    xd_cnn, _ = data.make_dataset(CNN_DET_POOL, seed=SEED_CNN_DET_DATA)
    spec = det.make_tap_spec(built["small_cnn"], order_policy="fixed",
                             order_seed=SEED_ORDER, seed=SEED_TAP)
    built["det_cnn"] = det.train_regressor(built["small_cnn"], spec, xd_cnn, CNN_DET)
    spec = det.make_tap_spec(built["small_cnn"], order_policy="randomized",
                             order_seed=SEED_ORDER, seed=SEED_TAP)
    built["det_cnn_rand"] = det.train_regressor(built["small_cnn"], spec, xd_cnn,
                                                CNN_DET)
    built["setup_seconds"] = time.time() - t0
    return built


@pytest.fixture(scope="session")
def cells(pipeline):
    """Static eps=8/255 eval sets and detector reports per (arch, attack)."""
    out = {}
    xte, yte = pipeline["xte"], pipeline["yte"]
    for arch, dkey in (("mlp", "det_mlp"), ("small_cnn", "det_cnn")):
        model = pipeline[arch]
        for kind in ("fgsm", "bim", "pgd", "apgd_s"):
            t0 = time.time()
            cfg = atk.AttackConfig(kind=kind, epsilon=EPS8, seed=SEED_ATTACK)
            sets = ev.build_eval_sets(model, cfg, xte[:EVAL_POOL], yte[:EVAL_POOL])
            report = ev.evaluate_detector(model, pipeline[dkey], sets)
            out[arch, kind] = {
                "sets": sets,
                "report": report,
                "auroc_bit": ev.baseline_auroc(model, BIT4, sets),
                "auroc_med": ev.baseline_auroc(model, MED3, sets),
                "seconds": time.time() - t0,
            }
    return out


# --------------------------------------------------------------- criteria


def test_c1_layer_shift_and_regression_error(pipeline):
    """Attacks move late layers more than early ones and break the regression."""
    t0 = time.time()
    model = pipeline["small_cnn"]
    cfg = atk.AttackConfig(kind="pgd", epsilon=EPS8, seed=SEED_ATTACK)
    sets = ev.build_eval_sets(model, cfg, pipeline["xte"][:EVAL_POOL],
                              pipeline["yte"][:EVAL_POOL])
    stats = det.conjecture_stats(pipeline["det_cnn"], model,
                                 sets.clean_x[sets.success_mask], sets.adv_x)
    elapsed = time.time() - t0
    d_sep = (stats["d_feature_mean"] - stats["d_first_mean"]) / stats["d_gap_se"]
    e_sep = (stats["err_adv_mean"] - stats["err_clean_mean"]) / stats["err_gap_se"]
    ok = (stats["n_pairs"] >= 500 and d_sep >= 2.0 and e_sep >= 2.0
          and elapsed <= 300)
    _verdict("c1", ok,
             f"pairs={stats['n_pairs']} depth_gap={d_sep:.1f}se "
             f"err_gap={e_sep:.1f}se time={elapsed:.0f}s")


def test_c2_static_detection_all_cells(cells):
    """AUROC >= 0.90 for every model x attack cell at eps=8/255."""
    lines = []
    ok = True
    for (arch, kind), cell in cells.items():
        r = cell["report"]
        cell_ok = (r.auroc >= 0.90 and r.n_clean >= 1000 and r.n_adv >= 500
                   and cell["seconds"] <= 900)
        ok = ok and cell_ok
        lines.append(f"{arch}/{kind}={r.auroc:.3f}(n={r.n_adv})")
    _verdict("c2", ok, " ".join(lines))


def test_c3_beats_both_baselines_everywhere(cells):
    """LR leads bit-reduce and median-smooth by >= 0.05 on every cell."""
    worst = None
    ok = True
    for (arch, kind), cell in cells.items():
        margin = cell["report"].auroc - max(cell["auroc_bit"], cell["auroc_med"])
        ok = ok and margin >= 0.05
        if worst is None or margin < worst[1]:
            worst = (f"{arch}/{kind}", margin)
    _verdict("c3", ok, f"worst_margin={worst[1]:.3f} at {worst[0]}")


def test_c4_stable_across_attack_strength(pipeline):
    """Detector AUROC barely moves across eps; baselines swing wildly."""
    model = pipeline["small_cnn"]
    rows = ev.epsilon_sweep(model, pipeline["det_cnn"],
                            pipeline["xte"][:EVAL_POOL], pipeline["yte"][:EVAL_POOL],
                            eps_list=[e / 255 for e in (4, 8, 16, 32, 64, 128)],
                            attack_kind="pgd", seed=SEED_ATTACK,
                            transforms=(BIT4, MED3))
    lr = [r["auroc"] for r in rows]
    bit = [r["auroc_bit_reduce"] for r in rows]
    med = [r["auroc_median_smooth"] for r in rows]
    lr_range = max(lr) - min(lr)
    base_range = max(max(bit) - min(bit), max(med) - min(med))
    ok = lr_range <= 0.05 and base_range > 0.10
    _verdict("c4", ok,
             f"lr_range={lr_range:.4f} (min={min(lr):.3f}) "
             f"baseline_range={base_range:.3f}")


def test_c5_targeted_and_l2(pipeline):
    """Detection carries over to targeted and l2 projected attacks."""
    model = pipeline["small_cnn"]
    xte, yte = pipeline["xte"][:EVAL_POOL], pipeline["yte"][:EVAL_POOL]
    targets = ev.random_targets(yte, 10, seed=SEED_ATTACK)
    cfg_t = atk.AttackConfig(kind="pgd", epsilon=EPS8, targeted=True,
                             target=targets, seed=SEED_ATTACK)
    sets_t = ev.build_eval_sets(model, cfg_t, xte, yte)
    a_t = ev.evaluate_detector(model, pipeline["det_cnn"], sets_t).auroc
    cfg_2 = atk.AttackConfig(kind="pgd", epsilon=1.5, norm="l2", seed=SEED_ATTACK)
    sets_2 = ev.build_eval_sets(model, cfg_2, xte, yte)
    a_2 = ev.evaluate_detector(model, pipeline["det_cnn"], sets_2).auroc
    ok = a_t >= 0.85 and a_2 >= 0.85
    _verdict("c5", ok, f"targeted={a_t:.3f} l2={a_2:.3f}")


def test_c6_adaptive_attacker(pipeline, cells):
    """A detector-aware attacker beats the fixed order, not the randomized one."""
    model = pipeline["small_cnn"]
    xte, yte = pipeline["xte"][:800], pipeline["yte"][:800]
    static = cells["small_cnn", "pgd"]["report"].auroc
    cfg = atk.AttackConfig(kind="adaptive_pgd", epsilon=EPS8, steps=200,
                           lam=1.0, seed=SEED_ATTACK)
    sets_f = ev.build_eval_sets(model, cfg, xte, yte,
                                detector=pipeline["det_cnn"], order_mode="fixed")
    a_fixed = ev.evaluate_detector(model, pipeline["det_cnn"], sets_f).auroc
    sets_r = ev.build_eval_sets(model, cfg, xte, yte,
                                detector=pipeline["det_cnn_rand"],
                                order_mode="resample")
    a_rand = ev.evaluate_detector(model, pipeline["det_cnn_rand"], sets_r).auroc
    ok = a_fixed < static and a_rand >= a_fixed + 0.05 and a_rand >= 0.65
    _verdict("c6", ok,
             f"static={static:.3f} adaptive_fixed={a_fixed:.3f} "
             f"adaptive_randomized={a_rand:.3f}")


def test_c7_scoring_cost(pipeline):
    """Detector scoring within 3x a bare forward and cheaper than median smoothing."""
    model = pipeline["small_cnn"]
    x = pipeline["xte"][:1000]
    t_fwd = ev.timing_bench(lambda s: models.predict(model, s), x)["pts_mean"]
    t_lr = ev.timing_bench(
        lambda s: det.score(pipeline["det_cnn"], model, s), x)["pts_mean"]
    t_med = ev.timing_bench(
        lambda s: bl.mismatch_score(model, s, MED3), x)["pts_mean"]
    ok = t_lr <= 3 * t_fwd and t_lr < t_med
    _verdict("c7", ok,
             f"pts: forward={t_fwd*1e6:.0f}us lr={t_lr*1e6:.0f}us "
             f"median={t_med*1e6:.0f}us ratio={t_lr/t_fwd:.2f}")


def test_c8_numerics(pipeline):
    """Gradients vs finite differences, fast AUROC vs quadratic oracle, budgets."""
    import test_attacks
    import test_autodiff
    import test_evaluate

    worst = 0.0
    for name, builder in sorted(test_autodiff.BUILDERS.items()):
        for seed in range(test_autodiff.N_INSTANCES):
            worst = max(worst, test_autodiff._gradcheck(name, builder, seed))
    grad_ok = worst <= test_autodiff.REL_TOL

    rng = np.random.default_rng(123)
    auroc_ok = True
    for _ in range(100):
        clean = rng.integers(0, 8, size=int(rng.integers(1, 50))).astype(float)
        adv = rng.normal(size=int(rng.integers(1, 50))).round(1)
        auroc_ok = auroc_ok and (
            ev.auroc(clean, adv) == test_evaluate._auroc_quadratic(clean, adv))

    x, y = pipeline["xte"], pipeline["yte"]
    run_rng = substream(4, "acceptance-budget-runs")
    for _ in range(250):  # 4 samples per run -> 1000 attacked samples
        idx = run_rng.integers(0, len(x), size=4)
        test_attacks._budget_case(pipeline["mlp"], x[idx], y[idx], run_rng)

    ok = grad_ok and auroc_ok
    _verdict("c8", ok,
             f"gradcheck_worst={worst:.2e} auroc_oracle={'ok' if auroc_ok else 'MISMATCH'} "
             f"budget_runs=1000")


def test_c9_rerun_byte_identical(tmp_path):
    """The same seeded pipeline twice: identical artifacts and reports."""
    outputs = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        root.mkdir()
        model = str(root / "model.ckpt")
        detector = str(root / "det.ckpt")
        batch = str(root / "adv.bin")
        reports = []
        for argv in (
            ["train-model", "--arch", "mlp", "--out", model,
             "--synthetic", "2000", "--epochs", "2", "--seed", "21"],
            ["train-detector", "--model", model, "--out", detector,
             "--synthetic", "2000", "--epochs", "10", "--dropout", "0.15",
             "--seed", "22"],
            ["gen-adv", "--model", model, "--out", batch,
             "--synthetic", "400", "--n", "300", "--attack", "pgd",
             "--seed", "23"],
            ["eval", "--model", model, "--detector", detector,
             "--adv", batch, "--baselines", "bit_reduce:4", "--seed", "24"],
        ):
            buf = io.StringIO()
            with redirect_stdout(buf):
                code = dispatch(argv)
            assert code == 0, f"{argv[0]} failed on run {tag}"
            reports.append(json.loads(buf.getvalue()))
        outputs.append({
            "model": (root / "model.ckpt").read_bytes(),
            "detector": (root / "det.ckpt").read_bytes(),
            "batch": (root / "adv.bin").read_bytes(),
            "reports": reports,
        })
    same_model = outputs[0]["model"] == outputs[1]["model"]
    same_det = outputs[0]["detector"] == outputs[1]["detector"]
    same_batch = outputs[0]["batch"] == outputs[1]["batch"]
    same_reports = outputs[0]["reports"] == outputs[1]["reports"]
    ok = same_model and same_det and same_batch and same_reports
    _verdict("c9", ok,
             f"model={same_model} detector={same_det} batch={same_batch} "
             f"reports={same_reports}")
