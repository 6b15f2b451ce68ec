import time

import pytest

from tm_modules.errors import DegenerateRunError, MissingTraceError
from tm_modules.memory_metrics import TRACE_COLUMNS, MemorySampler, MetricsTrace, compute_mbar
from tm_modules.transactional_heap import CellAddr

K = 4096


def test_piecewise_trace():
    trace = MetricsTrace.from_samples([(0, 0), (1, 100), (3, 400)], t_end=4)
    assert compute_mbar(trace) == 150
    assert trace.m_max == 400


def test_constant_trace():
    assert compute_mbar(MetricsTrace.from_samples([(10, K)], t_end=1_000_010)) == K


def test_symmetric_trace():
    assert compute_mbar(MetricsTrace.from_samples([(0, 0), (50, 2 * K)], t_end=100)) == K


def test_refining_samples_keeps_mbar():
    coarse = MetricsTrace.from_samples([(0, 10), (40, 30)], t_end=100)
    fine = MetricsTrace.from_samples([(0, 10), (20, 10), (40, 30), (70, 30)], t_end=100)
    assert compute_mbar(coarse) == compute_mbar(fine) == 22


def test_degenerate_run():
    with pytest.raises(DegenerateRunError):
        compute_mbar(MetricsTrace.from_samples([(5, 10)]))


def test_empty_trace():
    with pytest.raises(MissingTraceError):
        compute_mbar(MetricsTrace())


def test_colliding_timestamps_are_bumped():
    trace = MetricsTrace()
    trace.append(7, 1)
    assert trace.append(7, 2) == 8
    assert trace.append(3, 3) == 9
    assert [s.t_ns for s in trace.samples] == [7, 8, 9]


def test_frame_columns():
    frame = MetricsTrace.from_samples([(0, 8), (2, 16)], t_end=3).to_frame()
    assert list(frame.columns) == TRACE_COLUMNS
    assert len(frame) == 3


def _alloc_free_rounds(engine, rounds):
    for _ in range(rounds):
        addr = engine.run_tx(lambda tx: tx.alloc(8)).result
        engine.run_tx(lambda tx, a=addr: tx.free(a))


def test_trap_free_shows_immediate_drop(trap_engine, heap):
    sampler = MemorySampler(heap, trap_engine.strategy, use_timer=False)
    sampler.start()
    _alloc_free_rounds(trap_engine, 3)
    values = [s.m_bytes for s in sampler.stop().samples]
    assert values == [0, 64, 0, 64, 0, 64, 0, 0]


def test_frozen_epochs_never_decrease(epoch_engine, heap):
    epoch_engine.strategy.register_thread("idle")
    sampler = MemorySampler(heap, epoch_engine.strategy, use_timer=False)
    sampler.start()
    _alloc_free_rounds(epoch_engine, 20)
    values = [s.m_bytes for s in sampler.stop().samples]
    assert values == sorted(values)
    assert values[-1] == 20 * 64


def test_idle_heap_sampled_by_timer(heap):
    CellAddr(heap.alloc(2), 0)
    sampler = MemorySampler(heap, interval_s=1e-3)
    sampler.start()
    time.sleep(0.05)
    trace = sampler.stop()
    assert len(trace) >= 3
    assert {s.m_bytes for s in trace.samples} == {16}
