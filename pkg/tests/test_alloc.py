import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from memfault import alloc as al
from memfault.alloc import AllocatorState, Interference


def test_lifo_reuse():
    st_ = AllocatorState(100)
    pages = al.alloc(st_, 1, 5)
    assert pages == [99, 98, 97, 96, 95]
    al.free(st_, 1, pages)
    assert al.alloc(st_, 2, 3) == [95, 96, 97]


def test_out_of_memory():
    st_ = AllocatorState(10, base=5)
    al.alloc(st_, 1, 5)
    with pytest.raises(al.OutOfMemory):
        al.alloc(st_, 1, 1)


def test_free_not_owned():
    st_ = AllocatorState(10)
    pages = al.alloc(st_, 1, 2)
    with pytest.raises(al.NotOwned):
        al.free(st_, 2, pages)
    al.free(st_, 1, pages)
    with pytest.raises(al.NotOwned):
        al.free(st_, 1, pages)


def test_predict_example():
    assert al.predict_target(list(range(1, 13)), 10) == 3
    with pytest.raises(IndexError):
        al.predict_target([1, 2, 3], 10)


def test_pagemap_locked_reads_zero():
    st_ = AllocatorState(50, pagemap_readable=False)
    assert al.pagemap(st_, 1, [7, 8]) == [0, 0]


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 20)), max_size=40), st.integers(0, 99))
def test_conservation(ops, seed):
    st_ = AllocatorState(2000, base=100, interference=Interference(0.05, 16, 4.0, 0.5),
                         rng=random.Random(seed))
    total = st_.total_frames()
    held = []
    for do_alloc, n in ops:
        if do_alloc and n <= st_.free_count:
            held.extend(al.alloc(st_, 1, n))
        elif held:
            al.free(st_, 1, held[-n:])
            del held[-n:]
        assert st_.total_frames() == total
        owned = [p for v in st_.allocated.values() for p in v]
        assert len(owned) == len(set(owned))
        assert not set(owned) & set(st_.free_stack)


@given(st.integers(10, 600), st.integers(1, 10))
def test_no_interference_always_hits(count, idx):
    st_ = AllocatorState(1 << 14, base=64)
    rec = al.prediction_trial(st_, count, al.VictimAllocs(16, idx))
    assert rec.hit
    assert rec.predicted_pfn == rec.sprayed_pfns[-idx]


def test_burst_displaces_whole_pool():
    st_ = AllocatorState(1 << 14)
    sprayed = al.spray_and_free(st_, 1, 448)
    st_.interference = Interference(probability=1.0, burst_min=1024, burst_mean=0.0)
    pages = al.alloc(st_, 2, 1)
    assert not set(pages) & set(sprayed)
    assert set(sprayed) <= set(st_.bursts[-1].pfns)


def test_experiment_deterministic():
    tmpl = AllocatorState(1 << 16, base=2048, interference=Interference(0.05))
    a = al.run_prediction_experiment(tmpl, [8, 64], 50, seed=3)
    b = al.run_prediction_experiment(tmpl, [8, 64], 50, seed=3)
    assert [(r.spray_count, r.hits) for r in a] == [(r.spray_count, r.hits) for r in b]
    assert a[0].hits == 0


def test_hit_rate_matches_geometric_law():
    p = 0.054
    tmpl = AllocatorState(1 << 17, base=2048, interference=Interference(p))
    row = al.run_prediction_experiment(tmpl, [448], 2000, seed=1)[0]
    assert row.rate == pytest.approx((1 - p) ** 10, abs=0.035)


def test_burst_never_starves_request():
    st_ = AllocatorState(300, interference=Interference(1.0, 1024, 0.0))
    assert len(al.alloc(st_, 1, 20)) == 20
    assert st_.total_frames() == 300


def test_prediction_csv():
    import io
    buf = io.StringIO()
    al.write_prediction_csv([al.PredictionRow(8, 10, 0), al.PredictionRow(16, 4, 3)], buf)
    assert buf.getvalue() == "spray_count,trials,hits,rate\n8,10,0,0.0000\n16,4,3,0.7500\n"
