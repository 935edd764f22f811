import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aupipe.core import AU_NAMES, INVALID, N_AUS, LabelledDataset, PredictionRun, au_index
from aupipe.errors import AlignmentError, DataError
from aupipe.evaluate import (
    ConfusionCounts,
    EnsembleSpec,
    apply_ensemble,
    confusion,
    confusion_from_arrays,
    evaluate_run,
    f1,
    select_ensemble,
)
from aupipe.postprocess import binarize

from conftest import make_ds


def as_run(ds, logits):
    return PredictionRun(ds.video_ids, ds.frames, logits)


def perfect_logits(labels):
    return np.where(np.asarray(labels) == 1, 1.0, -1.0)


def counts_for(tp, fp, fn):
    z = np.zeros(N_AUS, dtype=int)
    c = [z.copy() for _ in range(4)]
    c[0][0], c[1][0], c[2][0] = tp, fp, fn
    return ConfusionCounts(*c)


def test_f1_hand_value():
    assert f1(counts_for(2, 1, 1)).per_au_f1[0] == pytest.approx(4 / 6, abs=1e-15)


def test_f1_degenerate_flagged():
    rep = f1(counts_for(0, 0, 0))
    assert rep.per_au_f1[0] == 0.0
    assert set(rep.degenerate) == set(AU_NAMES)
    assert "undefined" in rep.table()


def test_perfect_predictions(balanced_ds):
    rep = evaluate_run(as_run(balanced_ds, perfect_logits(balanced_ds.labels)), balanced_ds)
    assert rep.macro_f1 == 1.0 and np.all(rep.per_au_f1 == 1.0)
    c = confusion(as_run(balanced_ds, perfect_logits(balanced_ds.labels)), balanced_ds)
    assert not c.fp.any() and not c.fn.any()


def test_confusion_mask_and_single_fp():
    labels = np.zeros((4, N_AUS), dtype=np.int8)
    labels[:, au_index("AU15")] = INVALID
    ds = make_ds(labels)
    logits = -np.ones((4, N_AUS))
    logits[2, 0] = 1.0
    logits[:, au_index("AU15")] = 5.0
    c = confusion(as_run(ds, logits), ds)
    k = au_index("AU15")
    assert (c.tp[k], c.fp[k], c.fn[k], c.tn[k]) == (0, 0, 0, 0)
    assert c.fp[0] == 1 and c.tn[0] == 3
    total = c.tp + c.fp + c.fn + c.tn
    np.testing.assert_array_equal(total, (labels != INVALID).sum(axis=0))


def test_confusion_requires_alignment(balanced_ds):
    run = as_run(balanced_ds, perfect_logits(balanced_ds.labels))
    short = PredictionRun(run.video_ids[:-3], run.frames[:-3], run.logits[:-3])
    with pytest.raises(AlignmentError, match="v09"):
        confusion(short, balanced_ds)


label_and_pred = st.integers(1, 100).flatmap(
    lambda n: st.tuples(
        st.lists(st.lists(st.sampled_from([INVALID, 0, 1]), min_size=N_AUS, max_size=N_AUS), min_size=n, max_size=n),
        st.lists(st.lists(st.sampled_from([0, 1]), min_size=N_AUS, max_size=N_AUS), min_size=n, max_size=n),
    )
)


def brute_force_f1(labels, preds):
    scores = []
    for k in range(N_AUS):
        tp = fp = fn = 0
        for row_l, row_p in zip(labels, preds):
            if row_l[k] == INVALID:
                continue
            tp += row_l[k] == 1 and row_p[k] == 1
            fp += row_l[k] == 0 and row_p[k] == 1
            fn += row_l[k] == 1 and row_p[k] == 0
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return scores


@settings(max_examples=100, deadline=None)
@given(label_and_pred, st.integers(0, 2**31))
def test_matches_bruteforce_and_permutation(pair, seed):
    labels, preds = map(np.asarray, pair)
    rep = f1(confusion_from_arrays(preds, labels))
    np.testing.assert_allclose(rep.per_au_f1, brute_force_f1(labels.tolist(), preds.tolist()), rtol=0, atol=1e-15)
    assert rep.macro_f1 == pytest.approx(rep.per_au_f1.mean(), abs=1e-15)
    perm = np.random.default_rng(seed).permutation(len(labels))
    np.testing.assert_array_equal(f1(confusion_from_arrays(preds[perm], labels[perm])).per_au_f1, rep.per_au_f1)


# -- ensemble ------------------------------------------------------------------


def noisy_runs(ds, n_runs, seed, noise=0.4):
    rng = np.random.default_rng(seed)
    base = perfect_logits(ds.labels)
    runs = {}
    for i in range(n_runs):
        flip = rng.random(base.shape) < rng.uniform(0.05, noise)
        runs[f"m{i + 1}"] = as_run(ds, np.where(flip, -base, base) * rng.uniform(0.5, 2, size=base.shape))
    return runs


def test_single_run_chosen_everywhere(balanced_ds):
    runs = noisy_runs(balanced_ds, 1, seed=0)
    spec = select_ensemble(runs, balanced_ds)
    assert set(spec.choices.values()) == {"m1"}
    combined = apply_ensemble(spec, runs)
    np.testing.assert_array_equal(combined.logits, runs["m1"].logits)


def test_argmax_and_tie_rule(balanced_ds):
    perfect = as_run(balanced_ds, perfect_logits(balanced_ds.labels))
    worse = perfect.logits.copy()
    worse[:, 0] *= -1  # AU1 always wrong in run "a"
    runs = {"b": perfect, "a": as_run(balanced_ds, worse), "c": perfect}
    spec = select_ensemble(runs, balanced_ds)
    assert spec.choices["AU1"] == "b"  # argmax
    assert spec.choices["AU4"] == "a"  # three-way tie at 1.0 goes to the smallest name
    runs = {"m2": perfect, "m1": perfect}
    assert set(select_ensemble(runs, balanced_ds).choices.values()) == {"m1"}


def test_columns_interleave(balanced_ds):
    a = as_run(balanced_ds, np.zeros((len(balanced_ds), N_AUS)))
    b = as_run(balanced_ds, np.ones((len(balanced_ds), N_AUS)))
    choices = {au: ("a" if k % 2 == 0 else "b") for k, au in enumerate(AU_NAMES)}
    spec = EnsembleSpec(choices, {"a": [0.0] * N_AUS, "b": [0.0] * N_AUS})
    out = apply_ensemble(spec, {"a": a, "b": b})
    np.testing.assert_array_equal(out.logits[0], [k % 2 for k in range(N_AUS)])


def test_apply_errors(balanced_ds):
    runs = noisy_runs(balanced_ds, 2, seed=1)
    spec = EnsembleSpec({au: ("m1" if k else "m2") for k, au in enumerate(AU_NAMES)}, {"m1": [0.0] * N_AUS, "m2": [0.0] * N_AUS})
    with pytest.raises(DataError, match="m2"):
        apply_ensemble(spec, {"m1": runs["m1"]})
    m2 = runs["m2"]
    shifted = PredictionRun(m2.video_ids, m2.frames + 100, m2.logits)
    with pytest.raises(AlignmentError):
        apply_ensemble(spec, {"m1": runs["m1"], "m2": shifted})
    with pytest.raises(DataError):
        EnsembleSpec({"AU1": "zz"}, {"m1": [0.0] * N_AUS})
    with pytest.raises(DataError):
        select_ensemble({}, balanced_ds)


def test_spec_json_round_trip(balanced_ds, tmp_path):
    spec = select_ensemble(noisy_runs(balanced_ds, 3, seed=2), balanced_ds)
    path = spec.save(tmp_path / "spec.json")
    blob = json.loads(path.read_text())
    assert list(blob["choices"]) == list(AU_NAMES)
    assert set(blob["f1_table"]) == {"m1", "m2", "m3"}
    assert EnsembleSpec.from_json(path.read_text()) == spec


def test_select_with_windows_matches_presmoothed(balanced_ds):
    from aupipe.postprocess import smooth_run

    runs = noisy_runs(balanced_ds, 2, seed=3)
    windows = {"m1": 3, "m2": 1}
    a = select_ensemble(runs, balanced_ds, windows)
    b = select_ensemble({"m1": smooth_run(runs["m1"], 3), "m2": runs["m2"]}, balanced_ds)
    assert a == b


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31), st.integers(5, 60))
def test_ensemble_reaches_per_au_max(n_runs, seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(-1, 2, size=(n, N_AUS))
    ds = LabelledDataset([f"v{i % 3}" for i in range(n)], [i // 3 for i in range(n)], labels, np.zeros((n, 1)))
    runs = noisy_runs(ds, n_runs, seed, noise=0.6)
    spec = select_ensemble(runs, ds)
    combined = evaluate_run(apply_ensemble(spec, runs), ds)
    table = np.array([evaluate_run(r, ds).per_au_f1 for r in runs.values()])
    np.testing.assert_array_equal(combined.per_au_f1, table.max(axis=0))
    assert combined.macro_f1 >= table.mean(axis=1).max() - 1e-15
    assert np.array_equal(binarize(apply_ensemble(spec, runs)), binarize(apply_ensemble(spec, runs)))
