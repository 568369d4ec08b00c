import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osrk.asc import KernelBank
from osrk.data import SarSample, make_soc_split, to_arrays
from osrk.errors import ArgumentError, ConfigError
from osrk.evaluation import (
    ACCOUNTING_NOTE,
    OpenSetConfusion,
    assemble_confusion,
    closed_set_predictions,
    embed,
    evaluate_open_set,
    macro_metrics,
    openness,
    openset_accuracy,
    paired_networks,
    rows_to_csv,
    run_limited_sample_protocol,
    run_openness_sweep,
    subsample_per_class,
    train_model,
)
from osrk.network import LayerSpec, NetworkConfig
from osrk.rpl import UNKNOWN
from osrk.training import TrainConfig


def tally(preds, truths, n):
    """Brute-force per-sample accounting, written independently of the package."""
    tp, fp, fn, tn = [0] * n, [0] * n, [0] * n, [0] * n
    tu = fu = 0
    for p, t in zip(preds, truths):
        if t >= 0 and p == t:
            tp[t] += 1
        elif t >= 0 and p >= 0:
            fn[t] += 1
            fp[p] += 1
        elif t >= 0:
            fn[t] += 1
            fu += 1
        elif p < 0:
            tu += 1
        else:
            fp[p] += 1
        for i in range(n):
            if p != i and t != i:
                tn[i] += 1
    return tp, fp, fn, tn, tu, fu


def conf_of(tp, fp, fn, tn=None, tu=0, fu=0):
    tn = [0] * len(tp) if tn is None else tn
    return OpenSetConfusion(*(np.array(v) for v in (tp, fp, fn, tn)), tu=tu, fu=fu)


# ---------------------------------------------------------------------------
# confusion


@pytest.mark.parametrize("seed", range(100))
def test_confusion_matches_tally(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    size = 50 if seed == 0 else int(rng.integers(1, 80))
    truths = rng.integers(-1, n, size)
    preds = rng.integers(-1, n, size)
    conf = assemble_confusion(list(preds), list(truths), n)
    tp, fp, fn, tn, tu, fu = tally(preds, truths, n)
    assert conf.tp.tolist() == tp and conf.fp.tolist() == fp
    assert conf.fn.tolist() == fn and conf.tn.tolist() == tn
    assert (conf.tu, conf.fu) == (tu, fu)
    # every sample takes exactly one accounting path
    n_known = int(np.sum(truths >= 0))
    assert int(conf.tp.sum() + conf.fn.sum()) + conf.tu + int(np.sum((truths < 0) & (preds >= 0))) == size
    assert int(conf.tp.sum() + conf.fn.sum()) == n_known
    # metrics stay in range
    r, p, f = macro_metrics(conf)
    assert all(0.0 <= v <= 1.0 for v in (r, p, f, openset_accuracy(conf)))
    want = (sum(tp) + sum(tn) + tu) / (sum(tp) + sum(tn) + sum(fp) + sum(fn) + fu + tu)
    assert openset_accuracy(conf) == want


def test_all_correct_no_unknowns():
    truths = [0, 0, 1, 2, 2, 2]
    conf = assemble_confusion(truths, truths, 3)
    assert conf.tp.tolist() == [2, 1, 3]
    assert conf.fp.sum() == conf.fn.sum() == conf.tu == conf.fu == 0
    assert macro_metrics(conf) == (1.0, 1.0, 1.0)
    assert openset_accuracy(conf) == 1.0


def test_all_unknowns_rejected():
    conf = assemble_confusion([UNKNOWN] * 4, [-1] * 4, 2)
    assert conf.tu == 4 and openset_accuracy(conf) == 1.0


def test_confusion_errors():
    with pytest.raises(ArgumentError):
        assemble_confusion([0, 1], [0], 2)
    with pytest.raises(ArgumentError):
        assemble_confusion([5], [0], 2)


# ---------------------------------------------------------------------------
# metrics


def test_macro_hand_tally():
    r, p, f = macro_metrics(conf_of([8, 9], [1, 2], [2, 1]))
    assert r == pytest.approx(0.85, abs=1e-15)
    p1, p2 = 8 / 9, 9 / 11
    assert p == pytest.approx((p1 + p2) / 2, abs=1e-15)
    f1 = 2 * p1 * 0.8 / (p1 + 0.8)
    f2 = 2 * p2 * 0.9 / (p2 + 0.9)
    assert f == pytest.approx((f1 + f2) / 2, abs=1e-15)


def test_zero_denominator_convention():
    r, p, f = macro_metrics(conf_of([0, 5], [0, 0], [0, 0]))
    assert (r, p, f) == (0.5, 0.5, 0.5)


def test_accuracy_zero_denominator():
    with pytest.raises(ArgumentError):
        openset_accuracy(conf_of([0], [0], [0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.integers(0, 30)] * 4), min_size=1, max_size=5), st.integers(0, 20), st.integers(0, 20))
def test_metrics_in_unit_interval(rows, tu, fu):
    tp, fp, fn, tn = (list(c) for c in zip(*rows))
    conf = conf_of(tp, fp, fn, tn, tu, fu)
    assert all(0.0 <= v <= 1.0 for v in macro_metrics(conf))
    if sum(map(sum, rows)) + tu + fu:
        assert 0.0 <= openset_accuracy(conf) <= 1.0


def test_openness_values():
    assert openness(10, 10) == 0.0
    assert openness(7, 10) == pytest.approx(0.0925, abs=1e-4)
    assert openness(3, 10) == pytest.approx(0.3206, abs=1e-4)
    assert openness(7, 10) == pytest.approx(1 - (14 / 17) ** 0.5, abs=1e-15)


def test_openness_strictly_decreasing():
    vals = [openness(k, 10) for k in range(1, 11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_openness_errors():
    with pytest.raises(ArgumentError):
        openness(5, 4)
    with pytest.raises(ArgumentError):
        openness(0, 4)


def test_csv_six_significant_digits():
    text = rows_to_csv([{"a": 1 / 3, "b": 2, "c": "x"}], header_comment=ACCOUNTING_NOTE)
    lines = text.splitlines()
    assert lines[0].startswith("# ") and lines[1] == "a,b,c" and lines[2] == "0.333333,2,x"


# ---------------------------------------------------------------------------
# model-level


def tiny_net(dim=3):
    layers = (
        LayerSpec("conv", 3, 4, 1, 1),
        LayerSpec("pool", 2, 0, 2),
        LayerSpec("dense", count=8),
        LayerSpec("dense", count=dim),
    )
    return NetworkConfig(9, layers, dim)


def pattern_samples(n_classes, per_class, seed=0):
    """Each class lights up its own 3x3 block of a 9x9 image."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_classes):
        r, c = divmod(k % 9, 3)
        for i in range(per_class):
            img = rng.random((9, 9)) * 0.3
            img[3 * r : 3 * r + 3, 3 * c : 3 * c + 3] += 1.0
            out.append(SarSample(img, f"K{k}", metadata={"azimuth_deg": float(i)}))
    return out


FAST = TrainConfig(epochs=3, learning_rate=0.05, batch_size=8)


def test_evaluate_with_gate_disabled_is_closed_set():
    samples = pattern_samples(3, 10)
    x, y = to_arrays(samples, ["K0", "K1", "K2"], 9)
    res = train_model(tiny_net(), FAST, x, y, 3)
    rep = evaluate_open_set(res.net, res.head, x, y, threshold=-np.inf)
    assert rep.confusion.fu == 0 and rep.confusion.tu == 0
    closed = closed_set_predictions(embed(res.net, x), res.head)
    assert rep.closed_set_accuracy == float(np.mean(closed == y))
    assert rep.recall == pytest.approx(np.mean([np.mean(closed[y == k] == k) for k in range(3)]))


def test_evaluate_rejects_everything_with_huge_threshold():
    samples = pattern_samples(3, 5)
    x, y = to_arrays(samples, ["K0", "K1"], 9)
    res = train_model(tiny_net(), FAST, x[y >= 0], y[y >= 0], 2)
    rep = evaluate_open_set(res.net, res.head, x, y, threshold=np.inf)
    assert rep.confusion.tu == 5 and rep.confusion.fu == 10
    assert rep.recall == 0.0


def test_embed_batches_consistent():
    samples = pattern_samples(2, 5)
    x, _ = to_arrays(samples, ["K0", "K1"], 9)
    res = train_model(tiny_net(), FAST, x[:4], np.array([0, 0, 1, 1]), 2)
    a = embed(res.net, x, batch_size=3)
    b = res.net.forward(x)
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    assert embed(res.net, x[:0]).shape == (0, 3)


# ---------------------------------------------------------------------------
# protocols


def test_openness_sweep_rows():
    samples = pattern_samples(10, 6)
    order = [f"K{k}" for k in range(10)]
    rows = run_openness_sweep(samples, order, 3, 7, tiny_net(), FAST, repetitions=1)
    assert [r["k_known"] for r in rows] == [3, 4, 5, 6, 7]
    for r in rows:
        assert r["openness"] == 1 - np.sqrt(2 * r["k_known"] / (r["k_known"] + 10))
        assert 0 <= r["f1"] <= 1 and 0 <= r["accuracy"] <= 1


def test_openness_sweep_closed_and_repetitions():
    samples = pattern_samples(3, 6)
    order = ["K0", "K1", "K2"]
    rows = run_openness_sweep(samples, order, 3, 3, tiny_net(), FAST, repetitions=3)
    assert len(rows) == 1 and rows[0]["openness"] == 0.0
    r = rows[0]
    assert r["repetitions"] == 3
    assert r["f1_min"] <= r["f1"] <= r["f1_max"]
    assert r["accuracy_min"] <= r["accuracy"] <= r["accuracy_max"]


def test_openness_sweep_reproducible():
    samples = pattern_samples(4, 6)
    order = ["K0", "K1", "K2", "K3"]
    a = rows_to_csv(run_openness_sweep(samples, order, 2, 3, tiny_net(), FAST, repetitions=1))
    b = rows_to_csv(run_openness_sweep(samples, order, 2, 3, tiny_net(), FAST, repetitions=1))
    assert a == b


def test_openness_sweep_errors():
    samples = pattern_samples(3, 4)
    with pytest.raises(ConfigError):
        run_openness_sweep(samples, ["K0", "K1", "K2"], 3, 4, tiny_net(), FAST)
    with pytest.raises(ConfigError):
        run_openness_sweep(samples, ["K0", "K1", "K2"], 2, 3, tiny_net(), FAST, repetitions=0)


def limited_split(per_class=100):
    samples = pattern_samples(3, per_class)
    for s in samples:
        s.metadata["split"] = "train" if s.metadata["azimuth_deg"] < per_class - 10 else "test"
    return make_soc_split(samples, ["K0", "K1", "K2"])


def test_limited_sample_four_rows():
    split = limited_split()
    cfg = TrainConfig(epochs=1, learning_rate=0.05, batch_size=16)
    rows = run_limited_sample_protocol(split, [20, 40, 60, 80], tiny_net(), cfg)
    assert [r["per_class"] for r in rows] == [20, 40, 60, 80]
    assert all(r["init"] == "base" for r in rows)


def test_limited_sample_full_set_equals_plain_training():
    split = limited_split(20)
    cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=8, lam=0.0)
    rows = run_limited_sample_protocol(split, [10], tiny_net(), cfg)
    x_tr, y_tr = to_arrays(split.train, split.known, 9)
    x_te, y_te = to_arrays(split.test, split.known, 9)
    res = train_model(tiny_net(), cfg, x_tr, y_tr, 3)
    acc = float(np.mean(closed_set_predictions(embed(res.net, x_te), res.head) == y_te))
    assert rows[0]["accuracy"] == acc


def test_limited_sample_paired_and_errors():
    split = limited_split(20)
    bank = KernelBank(3, np.random.default_rng(0).standard_normal((4, 3, 3)))
    cfg = TrainConfig(epochs=1, learning_rate=0.05, batch_size=8)
    rows = run_limited_sample_protocol(split, [5], tiny_net(), cfg, bank=bank)
    assert [r["init"] for r in rows] == ["base", "asc"]
    with pytest.raises(ArgumentError, match="11"):
        run_limited_sample_protocol(split, [11], tiny_net(), cfg)


def test_paired_networks_differ_only_in_conv1():
    bank = KernelBank(3, np.random.default_rng(0).standard_normal((4, 3, 3)))
    base, asc = paired_networks(tiny_net(), bank, seed=5)
    sb, sa = base.state_dict(), asc.state_dict()
    differ = [k for k in sb if sb[k].tobytes() != sa[k].tobytes()]
    assert differ == ["conv1.weight"]


def test_subsample_deterministic_and_contiguous():
    samples = pattern_samples(2, 30)
    a = subsample_per_class(samples, 5, seed=1)
    b = subsample_per_class(samples, 5, seed=1)
    assert [id(s) for s in a] == [id(s) for s in b]
    assert [s.label for s in a].count("K0") == 5
    c = subsample_per_class(samples, 5, seed=1, contiguous_azimuth=True)
    for label in ("K0", "K1"):
        az = sorted(s.metadata["azimuth_deg"] for s in c if s.label == label)
        steps = np.diff(az) % 30
        assert np.all((steps == 1) | (steps == 30 - 4))  # one block, possibly wrapped
