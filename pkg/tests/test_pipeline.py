import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtgr.pipeline import makespan, pipeline_schedule, serial_time


def test_steady_state_hides_copy():
    # copy and dispatch are cheap, compute dominates: after warm-up only compute counts
    n = 6
    sched = pipeline_schedule([1.0] * n, [1.0] * n, [5.0] * n)
    assert makespan(sched) == 2.0 + n * 5.0 + (n - 1) * 1.0
    # copy of the next batch overlaps compute of the current one
    assert sched[1].copy[0] < sched[0].compute[1]


def test_single_batch_is_serial():
    (s,) = pipeline_schedule([1.0], [2.0], [3.0])
    assert (s.copy, s.dispatch, s.compute) == ((0.0, 1.0), (1.0, 3.0), (3.0, 6.0))


def test_empty():
    assert makespan(pipeline_schedule([], [], [])) == 0.0


@pytest.mark.parametrize("args", [([1.0], [1.0, 2.0], [1.0]), ([1.0], [1.0], [1.0], 0)])
def test_bad_input(args):
    with pytest.raises(ValueError):
        pipeline_schedule(*args)



@settings(max_examples=150)
@given(st.integers(0, 12).flatmap(lambda n: st.tuples(*[st.lists(st.floats(0.0, 10.0), min_size=n, max_size=n)] * 3)),
       st.integers(1, 4))
def test_contract(lats, prefetch):
    copy, dispatch, compute = lats
    sched = pipeline_schedule(copy, dispatch, compute, prefetch)
    for i, s in enumerate(sched):
        assert s.copy[1] - s.copy[0] == pytest.approx(copy[i])
        assert s.dispatch[0] >= s.copy[1]
        assert s.compute[0] >= s.dispatch[1]
        if i:
            p = sched[i - 1]
            assert s.copy[0] >= p.copy[1]
            # sparse rows written by the previous update are visible to this lookup
            assert s.dispatch[0] >= p.compute[1]
            assert s.compute[0] >= p.compute[1]
        if i >= prefetch:
            assert s.copy[0] >= sched[i - prefetch].compute[0]
    assert makespan(sched) <= serial_time(copy, dispatch, compute) + 1e-9
    if sched:
        assert makespan(sched) >= sum(compute) - 1e-9


def test_deeper_prefetch_never_slower():
    copy, dispatch, compute = [3.0, 0.5, 4.0, 0.5], [0.5] * 4, [1.0, 4.0, 0.5, 2.0]
    spans = [makespan(pipeline_schedule(copy, dispatch, compute, p)) for p in (1, 2, 3)]
    assert spans[0] >= spans[1] >= spans[2]
