import pytest

from config import TMLabConfig

from tm_modules.errors import DoubleFreeError
from tm_modules.interleaving_scheduler import InterleavingScheduler, Schedule
from tm_modules.reclamation_strategy import GuardedRead
from tm_modules.schedule_programs import (
    FLAGSHIP_SCHEDULE,
    WILD_SCHEDULE,
    flagship_program,
    privatize_then_free_program,
    wild_read_program,
)
from tm_modules.transactional_heap import CellAddr


def trap_counts(stats):
    return stats['traps_total'], stats['traps_recovered'], stats['traps_escalated']


def without_verify(program):
    """去掉微程序自带的断言，只观察历史"""

    def build(probe):
        instance = program(probe)
        instance.verify = None
        return instance

    return build


def test_commit_frees_immediately(trap_engine, heap):
    block = heap.alloc(2)
    trap_engine.run_tx(lambda tx: tx.free(block))
    assert not heap.is_live(block)
    assert trap_engine.deferred_bytes() == 0


def test_double_free_in_commit_still_frees_rest(trap_engine, heap):
    stale = heap.alloc(1)
    other = heap.alloc(1)
    heap.free(stale)

    def body(tx):
        tx.free(stale)
        tx.free(other)

    with pytest.raises(DoubleFreeError):
        trap_engine.run_tx(body)
    assert not heap.is_live(other)
    assert trap_engine.current_transaction() is None
    assert trap_engine.clock.read() % 2 == 0


def test_boundary_events_keep_no_state(trap_engine, heap):
    for _ in range(10_000):
        trap_engine.strategy.boundary_hook("t")
    assert heap.stats().alloc_count == 0
    assert trap_engine.deferred_bytes() == 0


def test_guarded_nontx_read(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)
    heap.write_cell(addr, 11)
    assert trap_engine.nontx_read(addr) == 11

    trap_engine.nontx_free(addr.block)
    assert trap_engine.nontx_read(addr) is GuardedRead.PRIVATIZED
    assert trap_counts(trap_engine.stats()) == (1, 1, 0)


def test_validation_window_trap_recovers():
    history = InterleavingScheduler().run_schedule(flagship_program("norec-trap"),
                                                   Schedule(picks=FLAGSHIP_SCHEDULE))
    assert trap_counts(history.meta['stats']) == (1, 1, 0)
    assert [e.detail for e in history.of_kind("decision")] == ["RollbackRetry"]
    # 重试读到已私有化的 NIL 指针，不再访问内存块
    assert history.meta['observed']['value'] is None
    assert history.meta['observed']['retries'] == 1


def test_validation_window_under_epoch_has_no_trap():
    history = InterleavingScheduler().run_schedule(flagship_program("norec-epoch"),
                                                   Schedule(picks=FLAGSHIP_SCHEDULE))
    assert history.meta['stats']['traps_total'] == 0
    assert history.of_kind("trap") == []


def test_wild_read_quiet_clock_escalates_first_trap():
    history = InterleavingScheduler().run_schedule(wild_read_program("norec-trap"))
    assert trap_counts(history.meta['stats']) == (1, 0, 1)
    assert history.errors[0].startswith("ApplicationError")


def test_wild_read_racing_commit_escalates_second_trap():
    history = InterleavingScheduler().run_schedule(wild_read_program("norec-trap"),
                                                   Schedule(picks=WILD_SCHEDULE))
    assert trap_counts(history.meta['stats']) == (2, 1, 1)
    decisions = [e.detail for e in history.of_kind("decision")]
    assert decisions[0] == "RollbackRetry"
    assert decisions[1].startswith("Escalate(")


@pytest.mark.parametrize("nontx_privatize", [False, True], ids=["tx-privatize", "nontx-privatize"])
def test_nontx_free_never_escalates_across_seeds(nontx_privatize):
    scheduler = InterleavingScheduler()
    program = privatize_then_free_program("norec-trap", nontx_privatize=nontx_privatize)
    recovered = 0
    for seed in range(1000):
        history = scheduler.run_schedule(program, seed)
        stats = history.meta['stats']
        assert stats['traps_escalated'] == 0, (seed, history.errors)
        assert history.meta['observed']['value'] in (None, 42)
        recovered += stats['traps_recovered']
    assert recovered > 0


def test_trap_ceiling_forces_escalation():
    config = TMLabConfig(trap_ceiling=1)
    history = InterleavingScheduler().run_schedule(without_verify(flagship_program("norec-trap", config)),
                                                   Schedule(picks=FLAGSHIP_SCHEDULE))
    assert trap_counts(history.meta['stats']) == (1, 0, 1)
    assert history.errors[0].startswith("ApplicationError")
