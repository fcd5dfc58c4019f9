import json

import numpy as np
import pytest

from gemmguard.model import (
    Dataset,
    build_toy_model,
    forward,
    make_synthetic_dataset,
)
from gemmguard.numerics import Matrix2D
from gemmguard.profiler import RangeProfile, profile_ranges, select_golden


@pytest.fixture(scope="module")
def toy():
    return build_toy_model(blocks=1, dim=8, tokens=4, classes=5, seed=17)


def test_single_sample_bounds(toy):
    ds = make_synthetic_dataset(toy, 1, seed=1)
    prof = profile_ranges(toy, ds)
    trace = forward(toy, ds.inputs[0], 0, tap=range(len(toy.layers)))
    for idx in range(len(toy.layers)):
        out = trace.outputs[idx].widened()
        assert prof.bounds[idx] == (float(out.min()), float(out.max()))


def test_two_sample_bounds_are_union(toy):
    full = make_synthetic_dataset(toy, 2, seed=2)
    a = Dataset([full.inputs[0]], [full.labels[0]], [0], seed=2)
    b = Dataset([full.inputs[1]], [full.labels[1]], [1], seed=2)
    pa, pb, pu = profile_ranges(toy, a), profile_ranges(toy, b), profile_ranges(toy, full)
    for idx in pu.bounds:
        assert pu.bounds[idx][0] == min(pa.bounds[idx][0], pb.bounds[idx][0])
        assert pu.bounds[idx][1] == max(pa.bounds[idx][1], pb.bounds[idx][1])


def test_bounds_match_brute_force_scan(toy):
    ds = make_synthetic_dataset(toy, 6, seed=3)
    prof = profile_ranges(toy, ds)
    for idx in range(len(toy.layers)):
        values = []
        for x in ds.inputs:
            values.append(forward(toy, x, 0, tap=[idx]).outputs[idx].widened().ravel())
        allv = np.concatenate(values)
        assert prof.bounds[idx] == (float(allv.min()), float(allv.max()))


def test_bounds_monotone_under_growth(toy):
    big = make_synthetic_dataset(toy, 8, seed=4)
    small = Dataset(big.inputs[:3], big.labels[:3], big.ids[:3], seed=4)
    ps, pb = profile_ranges(toy, small), profile_ranges(toy, big)
    for idx in ps.bounds:
        assert pb.bounds[idx][0] <= ps.bounds[idx][0]
        assert pb.bounds[idx][1] >= ps.bounds[idx][1]


def test_empty_dataset_rejected(toy):
    with pytest.raises(ValueError, match="nonempty"):
        profile_ranges(toy, Dataset([], [], [], seed=0))


def test_non_finite_activation_reports_layer():
    m = build_toy_model(blocks=1, dim=8, tokens=2, classes=4, seed=23, dtype="binary16-emulated")
    # saturate the embed weights so its raw output overflows binary16
    m.layers[0].weight.data[:] = 60000.0
    bad = Matrix2D(np.full((2, 8), 60000.0), "binary16-emulated")
    with pytest.raises(ValueError, match="layer 0"):
        profile_ranges(m, Dataset([bad], [0], [0], seed=0))


def test_range_profile_json_round_trip(toy):
    prof = profile_ranges(toy, make_synthetic_dataset(toy, 2, seed=5))
    text = prof.to_json()
    doc = json.loads(text)
    assert set(doc) == {str(i) for i in prof.bounds}
    back = RangeProfile.from_json(text)
    assert back.bounds == prof.bounds


def test_golden_teacher_labels_select_everything(toy):
    ds = make_synthetic_dataset(toy, 10, seed=6)
    golden = select_golden(toy, ds)
    assert golden.sample_ids == ds.ids
    for sid in golden.sample_ids:
        assert golden.labels[sid] == ds.labels[sid]
        assert golden.losses[sid] >= 0.0


def test_golden_mislabeled_dataset_errors(toy):
    ds = make_synthetic_dataset(toy, 5, seed=7)
    wrong = [(lbl + 1) % toy.num_classes for lbl in ds.labels]
    with pytest.raises(ValueError, match="empty"):
        select_golden(toy, Dataset(ds.inputs, wrong, ds.ids, seed=7))


def test_golden_mixed_labels_match_per_sample_oracle(toy):
    ds = make_synthetic_dataset(toy, 8, seed=8)
    labels = list(ds.labels)
    for i in range(0, 8, 2):  # corrupt half the labels
        labels[i] = (labels[i] + 1) % toy.num_classes
    mixed = Dataset(ds.inputs, labels, ds.ids, seed=8)
    golden = select_golden(toy, mixed)
    expect = [
        sid
        for sid, x, lbl in zip(mixed.ids, mixed.inputs, mixed.labels)
        if forward(toy, x, lbl).predicted_class == lbl
    ]
    assert golden.sample_ids == expect
    for sid in golden.sample_ids:
        assert golden.labels[sid] == mixed.labels[sid]
