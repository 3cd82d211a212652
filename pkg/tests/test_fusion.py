import io

import numpy as np
import pytest

from cohesion.dataset import normalize_label
from cohesion.errors import (
    BadStepError,
    DuplicateIdError,
    EmptyValidationSetError,
    HeaderMismatchError,
    InvariantViolationError,
    MissingModalityError,
    ModalityMismatchError,
)
from cohesion.fusion import (
    FusionWeights,
    ModalityPredictions,
    fuse_average,
    fuse_weighted,
    grid_candidates,
    grid_search_weights,
    parse_weights,
    uniform_weights,
    write_weights,
)

MODS = ("face", "skeleton", "scene")


def preds_for(values_by_mod):
    """ModalityPredictions with one shared id set, no imputation needed."""
    ids = sorted(next(iter(values_by_mod.values())).keys())
    preds = {m: dict(v) for m, v in values_by_mod.items()}
    counts = {m: 0 for m in values_by_mod}
    impute = {m: 0.0 for m in values_by_mod}
    return ModalityPredictions(preds, impute, counts)


def three_mod(a, b, c, ids=("x",)):
    return preds_for({
        "face": {i: a for i in ids},
        "skeleton": {i: b for i in ids},
        "scene": {i: c for i in ids},
    })


# ---------------------------------------------------------------- assembly / imputation

def test_from_maps_full_coverage():
    raw = {
        "face": {"a": 0.1, "b": 0.2},
        "scene": {"a": 0.3, "b": 0.4},
    }
    mp = ModalityPredictions.from_maps(raw, train_ids=["a"])
    assert mp.modalities() == ("face", "scene")
    assert tuple(mp.image_ids()) == ("a", "b")
    assert mp.imputed_counts == {"face": 0, "scene": 0}


def test_from_maps_imputes_mean_of_train_coverage():
    raw = {
        "face": {"a": 0.0, "b": 0.4, "c": 0.9},
        "scene": {"a": 0.2, "b": 0.6},  # missing c
    }
    mp = ModalityPredictions.from_maps(raw, train_ids=["a", "b"])
    # imputation value is the mean of the modality's covered train predictions
    assert mp.imputation_values["scene"] == pytest.approx((0.2 + 0.6) / 2)
    assert mp.predictions["scene"]["c"] == mp.imputation_values["scene"]
    assert mp.imputed_counts == {"face": 0, "scene": 1}


def test_from_maps_rejects_empty_modality():
    with pytest.raises(MissingModalityError):
        ModalityPredictions.from_maps({"face": {}}, train_ids=["a"])


def test_from_maps_rejects_no_train_coverage():
    raw = {"face": {"z": 0.5}}
    with pytest.raises((MissingModalityError, InvariantViolationError)):
        ModalityPredictions.from_maps(raw, train_ids=["a", "b"])


def test_modality_predictions_requires_matching_keysets():
    with pytest.raises(InvariantViolationError):
        ModalityPredictions(
            {"face": {"a": 0.1}, "scene": {"b": 0.1}},
            {"face": 0.0, "scene": 0.0},
            {"face": 0, "scene": 0},
        )


# ---------------------------------------------------------------- weighted fusion

def test_vertex_weight_is_exact_passthrough():
    mp = three_mod(0.137, 0.925, 0.5, ids=("p", "q"))
    w = FusionWeights(MODS, np.array([1.0, 0.0, 0.0]), "average")
    fused = fuse_weighted(mp, w)
    # 1*x + 0*y + 0*z must be bitwise x
    assert fused == mp.predictions["face"]


def test_uniform_fusion_mean():
    mp = three_mod(0.2, 0.4, 0.6)
    fused = fuse_average(mp)
    assert fused["x"] == pytest.approx(0.4, abs=1e-12)


def test_weighted_combination_example():
    mp = three_mod(0.3, 0.6, 0.9)
    w = FusionWeights(MODS, np.array([0.5, 0.25, 0.25]), "grid_search", step=0.25)
    assert fuse_weighted(mp, w)["x"] == pytest.approx(0.525, abs=1e-12)


def test_fuse_modality_mismatch():
    mp = three_mod(0.1, 0.2, 0.3)
    w = FusionWeights(("face", "skeleton"), np.array([0.5, 0.5]), "average")
    with pytest.raises(ModalityMismatchError):
        fuse_weighted(mp, w)


def test_average_equals_uniform_weights_exactly():
    rng = np.random.default_rng(11)
    ids = [f"i{k}" for k in range(9)]
    mp = preds_for({m: {i: float(rng.random()) for i in ids} for m in MODS})
    a = fuse_average(mp)
    b = fuse_weighted(mp, uniform_weights(MODS))
    assert a == b


def test_single_modality_average_is_identity():
    mp = preds_for({"face": {"a": 0.77, "b": 0.31}})
    assert fuse_average(mp) == mp.predictions["face"]


def test_fusion_affine_in_weights():
    rng = np.random.default_rng(12)
    ids = ["a", "b", "c"]
    mp = preds_for({m: {i: float(rng.random()) for i in ids} for m in MODS})
    w1 = np.array([0.6, 0.2, 0.2])
    w2 = np.array([0.2, 0.5, 0.3])
    mid = 0.5 * (w1 + w2)
    f1 = fuse_weighted(mp, FusionWeights(MODS, w1, "grid_search", step=0.1))
    f2 = fuse_weighted(mp, FusionWeights(MODS, w2, "grid_search", step=0.1))
    fm = fuse_weighted(mp, FusionWeights(MODS, mid, "grid_search", step=0.05))
    for i in ids:
        assert fm[i] == pytest.approx(0.5 * (f1[i] + f2[i]), abs=1e-12)


def test_fusion_weights_validation():
    with pytest.raises(InvariantViolationError):
        FusionWeights(MODS, np.array([0.5, 0.5]), "average")  # length mismatch
    with pytest.raises(InvariantViolationError):
        FusionWeights(MODS, np.array([0.7, 0.4, -0.1]), "average")  # negative
    with pytest.raises(InvariantViolationError):
        FusionWeights(MODS, np.array([0.5, 0.3, 0.3]), "average")  # sum != 1
    with pytest.raises(InvariantViolationError):
        FusionWeights(MODS, np.array([1 / 3] * 3), "banana")


# ---------------------------------------------------------------- grid enumeration

def test_grid_single_modality():
    cands = grid_candidates(1, 0.05)
    assert len(cands) == 1
    assert tuple(cands[0]) == (1.0,)


def test_grid_two_modalities_half_step():
    cands = [tuple(c) for c in grid_candidates(2, 0.5)]
    assert cands == [(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)]


def test_grid_three_modalities_count_and_contents():
    cands = grid_candidates(3, 0.05)
    assert len(cands) == 232
    tuples = [tuple(c) for c in cands]
    for vertex in ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)):
        assert vertex in tuples
    # exact uniform rides along at the end (off the 0.05 lattice)
    assert tuples[-1] == (1 / 3, 1 / 3, 1 / 3)
    lattice = tuples[:-1]
    assert lattice == sorted(lattice)
    for c in cands:
        assert abs(float(np.sum(c)) - 1.0) <= 1e-9


def test_grid_bad_steps():
    for step in (0.3, 0.0, -0.1, 1.5):
        with pytest.raises(BadStepError):
            grid_candidates(3, step)


def test_grid_step_one():
    cands = [tuple(c) for c in grid_candidates(2, 1.0)]
    # coarse lattice misses the uniform point, so it gets appended
    assert cands == [(0.0, 1.0), (1.0, 0.0), (0.5, 0.5)]


# ---------------------------------------------------------------- grid search

def test_grid_search_picks_perfect_modality():
    truth = {"a": 0, "b": 1, "c": 2, "d": 3}
    exact = {i: normalize_label(l) for i, l in truth.items()}
    rng = np.random.default_rng(13)
    noisy = {i: float(np.clip(v + rng.normal(0, 0.2), 0, 1)) for i, v in exact.items()}
    mp = preds_for({"face": noisy, "skeleton": dict(exact), "scene": noisy})
    truth_norm = {i: normalize_label(l) for i, l in truth.items()}
    w = grid_search_weights(mp, truth_norm, step=0.05)
    wm = w.as_map()
    assert wm["skeleton"] == 1.0
    assert wm["face"] == 0.0 and wm["scene"] == 0.0
    assert w.strategy == "grid_search"
    assert w.step == 0.05


def test_grid_search_tie_keeps_first_candidate():
    # identical predictions everywhere: every candidate ties, first one wins
    mp = three_mod(0.5, 0.5, 0.5, ids=("a", "b"))
    truth = {"a": 1 / 3, "b": 2 / 3}
    w = grid_search_weights(mp, truth, step=0.5)
    first = tuple(grid_candidates(3, 0.5)[0])
    assert tuple(w.weights) == first


def test_grid_search_single_modality():
    mp = preds_for({"face": {"a": 0.4}})
    w = grid_search_weights(mp, {"a": 1 / 3}, step=0.05)
    assert tuple(w.weights) == (1.0,)


def test_grid_search_empty_validation():
    mp = three_mod(0.1, 0.2, 0.3)
    with pytest.raises(EmptyValidationSetError):
        grid_search_weights(mp, {}, step=0.05)


def test_grid_search_matches_manual_scan():
    """Replicate the search by hand (reversed order) and compare losses."""
    from cohesion.dataset import denormalize_prediction
    from cohesion.evaluation import mse

    rng = np.random.default_rng(14)
    ids = [f"v{k}" for k in range(12)]
    mp = preds_for({m: {i: float(rng.random()) for i in ids} for m in MODS})
    truth_norm = {i: float(rng.random()) for i in ids}
    truth_raw = {i: denormalize_prediction(v) for i, v in truth_norm.items()}

    w = grid_search_weights(mp, truth_norm, step=0.05)
    best = None
    for cand in reversed(grid_candidates(3, 0.05)):
        fw = FusionWeights(MODS, cand, "grid_search", step=0.05)
        fused = {i: denormalize_prediction(v) for i, v in fuse_weighted(mp, fw).items()}
        loss = mse(fused, truth_raw)
        if best is None or loss < best:
            best = loss
    chosen = fuse_weighted(mp, w)
    chosen_loss = mse({i: denormalize_prediction(v) for i, v in chosen.items()}, truth_raw)
    assert chosen_loss == best


def test_grid_beats_or_ties_average_on_synth(small_synth):
    """Selection over a candidate set that includes uniform can't lose to it."""
    from cohesion.dataset import denormalize_prediction
    from cohesion.evaluation import MatrixConfig, run_variant, method_predictions, mse

    cfg_synth, ds, features = small_synth
    cfg = MatrixConfig(ds, features, seed=cfg_synth.seed)
    run = run_variant(cfg, "train")
    truth = {i: float(ds.entries[i].level) for i in ds.ids("val")}
    losses = {}
    for method in ("fusion_average", "fusion_grid"):
        preds = method_predictions(run, method)
        preds = {i: denormalize_prediction(v) for i, v in preds.items() if i in truth}
        losses[method] = mse(preds, truth)
    assert losses["fusion_grid"] <= losses["fusion_average"]


# ---------------------------------------------------------------- persistence

def test_weights_roundtrip_grid():
    w = FusionWeights(MODS, np.array([0.25, 0.3, 0.45]), "grid_search", step=0.05)
    buf = io.StringIO()
    write_weights(buf, w)
    w2 = parse_weights(io.StringIO(buf.getvalue()))
    assert w2.strategy == "grid_search"
    assert w2.step == 0.05
    assert w2.modalities == MODS
    assert np.array_equal(w2.weights, w.weights)


def test_weights_roundtrip_average():
    w = uniform_weights(("face", "scene"))
    buf = io.StringIO()
    write_weights(buf, w)
    text = buf.getvalue()
    assert text.splitlines()[0] == "#cohesion-weights v1 strategy=average step=0.0"
    w2 = parse_weights(io.StringIO(text))
    assert w2.strategy == "average"
    assert np.array_equal(w2.weights, w.weights)


def test_weights_parse_errors():
    with pytest.raises(HeaderMismatchError):
        parse_weights(io.StringIO("#nope\n"))
    dup = (
        "#cohesion-weights v1 strategy=average step=0.0\n"
        "face\t0.5\nface\t0.5\n"
    )
    with pytest.raises(DuplicateIdError):
        parse_weights(io.StringIO(dup))
    bad_sum = (
        "#cohesion-weights v1 strategy=average step=0.0\n"
        "face\t0.5\nscene\t0.3\n"
    )
    with pytest.raises(InvariantViolationError):
        parse_weights(io.StringIO(bad_sum))
