"""End-to-end acceptance gate; prints one PASS/FAIL line per criterion at the end of the run."""
import contextlib
import functools
import operator
import time

import numpy as np
import pytest

import oracles
from hse import tensor as T
from hse.data import SyntheticSpec, generate_synthetic, load_dataset_dir
from hse.estimator import HSEClassifier
from hse.experiment import AblationResult, run_variant
from hse.gradcheck import gradient_suite
from hse.losses import cross_entropy, default_gamma, kl_regularizer, tempered_softmax
from hse.metrics import consistency_rate
from hse.model import HSENetwork, ModelConfig, attend_aggregate
from hse.taxonomy import extend_scores, load_fixture
from hse.tensor import Tensor
from hse.training import augment_batch, level_objective

RESULTS: dict[int, tuple[bool, str]] = {}
VARIANTS = ("baseline", "no-serl", "no-sglr", "full")
SEEDS = (0, 1, 2)


@contextlib.contextmanager
def criterion(number: int, detail: str = ""):
    try:
        yield
    except BaseException as exc:
        detail = RESULTS.get(number, (None, detail))[1]
        RESULTS[number] = (False, f"{detail} [{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]")
        raise
    RESULTS[number] = (True, RESULTS.get(number, (None, detail))[1])


# -- 1. gradient suite ---------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    with criterion(1, "gradient suite at float64, tol 1e-4, < 2 min"):
        t0 = time.perf_counter()
        results = gradient_suite(seed=0, tol=1e-4)
        seconds = time.perf_counter() - t0
        failed = [name for name, rep in results if not rep.passed]
        worst = max(rep.max_rel_err for _, rep in results)
        RESULTS[1] = (False, f"{len(results)} checks, worst {worst:.2e}, {seconds:.0f}s")
        assert "toy_hse" in dict(results)
        assert not failed, failed
        assert worst < 1e-4 and seconds < 120
        toy = dict(results)["toy_hse"]
        print(f"criterion 1: {len(results)} checks, worst rel err {worst:.2e}, toy {toy.max_rel_err:.2e}, {seconds:.1f}s")


# -- 2. oracle equivalence -----------------------------------------------------------------

N_CASES = 1000


def test_criterion_2_oracles():
    with criterion(2, f"5 operations x {N_CASES} cases within 1e-12"):
        rng = np.random.default_rng(2024)
        worst = dict.fromkeys(("tempered_softmax", "kl_regularizer", "cross_entropy", "conv2d",
                               "attend_aggregate"), 0.0)
        for _ in range(N_CASES):
            n = int(rng.integers(2, 12))
            temp = float(rng.uniform(0.25, 10))
            a, b = rng.normal(0, 4, (2, n))
            err = np.max(np.abs(tempered_softmax(a, temp).p - oracles.softmax(a, temp)))
            worst["tempered_softmax"] = max(worst["tempered_softmax"], err)
            err = abs(kl_regularizer(a, b, temp).item() - oracles.kl(a, b, temp))
            worst["kl_regularizer"] = max(worst["kl_regularizer"], err)
            c = int(rng.integers(0, n))
            err = abs(cross_entropy(a, c).item() - oracles.cross_entropy(a, c))
            worst["cross_entropy"] = max(worst["cross_entropy"], err)

            k = int(rng.integers(1, 4))
            stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            h, w = (int(v) for v in rng.integers(k, 7, size=2))
            x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), h, w))
            wt = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k))
            bias = rng.standard_normal(wt.shape[0])
            out = T.conv2d(Tensor(x), Tensor(wt), Tensor(bias), stride=stride, pad=pad).data
            worst["conv2d"] = max(worst["conv2d"], np.max(np.abs(out - oracles.conv2d(x, wt, bias, stride, pad))))

            C, H, W = (int(v) for v in rng.integers(1, 6, size=3))
            fmap = rng.standard_normal((C, H, W))
            weights = rng.random((C, H, W))
            weights /= weights.sum(axis=(1, 2), keepdims=True)
            got = attend_aggregate(Tensor(fmap[None]), Tensor(weights[None])).data[0]
            worst["attend_aggregate"] = max(worst["attend_aggregate"],
                                            np.max(np.abs(got - oracles.attend_aggregate(fmap, weights))))
        RESULTS[2] = (False, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
        assert all(v <= 1e-12 for v in worst.values()), worst
        RESULTS[2] = (True, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 3. taxonomy fixtures ------------------------------------------------------------------

def test_criterion_3_fixtures():
    with criterion(3, "cub (13,37,122,200), butterfly200 (5,23,116,200), extend 122 -> 200"):
        cub = load_fixture("cub")
        assert cub.level_sizes == (13, 37, 122, 200)
        assert load_fixture("butterfly200").level_sizes == (5, 23, 116, 200)
        s = np.arange(122, dtype=np.float64)
        ext = extend_scores(cub, 4, s)
        assert ext.shape == (200,)
        assert np.array_equal(ext, s[cub.parent_map(4)])


# -- 4. loss wiring ------------------------------------------------------------------------

def _toy(gamma=None):
    tax = load_fixture("cub")
    cfg = ModelConfig(level_sizes=tax.level_sizes, trunk_widths=(4, 6), feature_dim=8, semantic_dim=5,
                      attention_hidden=6, gamma=gamma, dtype="float64")
    net = HSENetwork(cfg, tax, seed=0)
    rng = np.random.default_rng(4)
    x = Tensor(rng.random((3, 3, 16, 16)))
    leaves = rng.integers(0, 200, 3)
    Y = tax.leaf_paths()[leaves]
    return net, net.forward(x), Y


def test_criterion_4_loss_wiring():
    with criterion(4, "T=4, gamma=16, L_i(gamma=0) == classification sum, no level-1 regularizer"):
        net, _, _ = _toy()
        assert net.config.temperature == 4.0 and net.config.balance == 16.0 == default_gamma(4.0)
        net, scores, Y = _toy(gamma=0.0)
        for level in range(1, 5):
            loss, cls_value, reg = level_objective(net, scores, Y, level)
            s = scores[level - 1]
            outputs = s.classifier_outputs + ([s.s_final] if len(s.classifier_outputs) > 1 else [])
            terms = [cross_entropy(o, Y[:, level - 1]).item() for o in outputs]
            assert loss.item() == functools.reduce(operator.add, terms)
            if level == 1:
                assert reg is None and len(terms) == 1
            else:
                assert reg is not None and reg > 0 and len(terms) == 4
        net, scores, Y = _toy()
        loss, cls_value, reg = level_objective(net, scores, Y, 3)
        assert loss.item() == pytest.approx(cls_value + 16.0 * reg, rel=1e-12)


# -- 5. temperature compensation -----------------------------------------------------------

def test_criterion_5_temperature_ratio():
    with criterion(5, "median gradient-norm ratio T=8 vs 16 in [3, 5] over 200 trials"):
        rng = np.random.default_rng(5)
        ratios = []
        for _ in range(200):
            a, b = rng.standard_normal((2, 16))
            a, b = a - a.mean(), b - b.mean()
            norms = []
            for temp in (8.0, 16.0):
                s = Tensor(b, requires_grad=True)
                T.backward(kl_regularizer(a, s, temp))
                norms.append(np.linalg.norm(s.grad))
            ratios.append(norms[0] / norms[1])
        med = float(np.median(ratios))
        RESULTS[5] = (False, f"median ratio {med:.3f}")
        assert 3.0 <= med <= 5.0
        RESULTS[5] = (True, f"median ratio {med:.3f}")


# -- 6-9. desk-scale ablation --------------------------------------------------------------

@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    spec = SyntheticSpec(branching=(4, 2, 2), image_size=64, counts=(40, 10, 30), seed=0)
    data_dir = generate_synthetic(spec, root / "data")
    _, splits = load_dataset_dir(data_dir)
    result, models = AblationResult(), {}
    for variant in VARIANTS:
        for seed in SEEDS:
            run, est = run_variant(variant, seed, splits["train"], splits["val"], splits["test"])
            result.runs.append(run)
            models[variant, seed] = est
            print(f"{variant:9s} seed {seed}: acc {[round(a, 3) for a in run.report['accuracy']]} "
                  f"inter {run.report['inter_superclass_errors']} "
                  f"consistency {run.report['consistency_rate']:.3f} {run.seconds:.0f}s")
    return result, models, splits, root


@pytest.mark.slow
def test_criterion_6_ablation(ablation):
    result, models, _, _ = ablation
    with criterion(6, "median finest acc full >= baseline; median inter errors with SGLR <= without"):
        acc = {v: result.median(v, "finest_accuracy") for v in VARIANTS}
        inter = {v: result.median(v, "finest_inter_errors") for v in VARIANTS}
        minutes = {v: sum(r.seconds for r in result.by_variant(v)) / 60 for v in VARIANTS}
        detail = (f"acc full {acc['full']:.3f} vs baseline {acc['baseline']:.3f}; "
                  f"inter full {inter['full']:.0f} vs no-sglr {inter['no-sglr']:.0f}; "
                  f"max {max(minutes.values()):.1f} min/variant")
        RESULTS[6] = (False, detail)
        for v in VARIANTS:
            print(f"{v:9s} median acc {acc[v]:.4f} median inter {inter[v]:.0f} {minutes[v]:.1f} min")
        budget = models["full", 0]
        assert budget.stage1_epochs * 3 <= 30 and budget.stage2_epochs <= 10
        assert all(m <= 45 for m in minutes.values())
        assert acc["full"] >= acc["baseline"]
        assert inter["full"] <= inter["no-sglr"]
        RESULTS[6] = (True, detail)


@pytest.mark.slow
def test_criterion_7_determinism(ablation):
    result, _, splits, _ = ablation
    with criterion(7, "rerun of every variant at seed 0 gives bitwise-identical metrics logs"):
        for variant in VARIANTS:
            first = next(r for r in result.by_variant(variant) if r.seed == 0)
            again, _ = run_variant(variant, 0, splits["train"], splits["val"], splits["test"])
            assert again.metrics_log == first.metrics_log, variant
            assert again.report == first.report, variant


@pytest.mark.slow
def test_criterion_8_backtrack(ablation):
    result, models, splits, _ = ablation
    X, _ = splits["test"].arrays()
    with criterion(8, "backtrack consistency 1.0; median full consistency >= baseline"):
        for seed in SEEDS:
            est = models["baseline", seed]
            assert consistency_rate(est.taxonomy_, est.predict_levels(X, mode="backtrack")) == 1.0
        med = {v: float(np.median([r.report["consistency_rate"] for r in result.by_variant(v)]))
               for v in ("full", "baseline")}
        RESULTS[8] = (False, f"full {med['full']:.3f} vs baseline {med['baseline']:.3f}")
        assert med["full"] >= med["baseline"]
        RESULTS[8] = (True, f"backtrack 1.0; full {med['full']:.3f} vs baseline {med['baseline']:.3f}")


@pytest.mark.slow
def test_criterion_9_checkpoint_round_trip(ablation):
    _, models, splits, root = ablation
    X, _ = splits["test"].arrays()
    with criterion(9, "save -> load -> scores identical to 0 ulps"):
        for variant in VARIANTS:
            est = models[variant, 0]
            back = HSEClassifier.load(est.save(root / "models" / variant))
            for a, b in zip(est.level_scores(X), back.level_scores(X)):
                assert a.dtype == b.dtype and np.array_equal(a, b)


@pytest.mark.slow
def test_level1_training_accuracy_regression(ablation):
    _, models, splits, _ = ablation
    X, Y = splits["train"].arrays()
    acc = float(np.mean(models["full", 0].predict_levels(X)[:, 0] == Y[:, 0]))
    print(f"level-1 training accuracy of full seed 0: {acc:.3f}")
    assert acc > 0.9
