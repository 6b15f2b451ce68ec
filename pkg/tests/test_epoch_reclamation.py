import itertools

import pytest

from tm_modules.epoch_reclamation import EpochReclamation
from tm_modules.errors import ApplicationError, DuplicateRegistrationError, ExhaustionLimitError
from tm_modules.norec_engine import NOrecEngine
from tm_modules.transactional_heap import CellAddr, TransactionalHeap
from tm_modules.trap_reclamation import TrapReclamation


def make_strategy(*threads, **kwargs):
    strategy = EpochReclamation(**kwargs)
    NOrecEngine(TransactionalHeap(), strategy)
    for thread in threads:
        strategy.register_thread(thread)
    return strategy


def test_single_thread_consensus():
    strategy = make_strategy("a")
    strategy.boundary_hook("a")
    strategy.boundary_hook("a")
    assert strategy.global_epoch == 2
    assert strategy.thread_epoch("a") == 2


def test_two_threads_advance_once():
    strategy = make_strategy("a", "b")
    strategy.boundary_hook("a")
    assert strategy.global_epoch == 0
    strategy.boundary_hook("b")
    assert strategy.global_epoch == 1


def test_laggard_freezes_global_epoch():
    strategy = make_strategy("a", "b")
    for _ in range(5):
        strategy.boundary_hook("a")
    assert strategy.global_epoch == 0


def test_deregistered_thread_no_longer_blocks():
    strategy = make_strategy("a", "b")
    strategy.boundary_hook("a")
    strategy.deregister_thread("b")
    assert strategy.global_epoch == 1
    assert strategy.registered_threads() == ["a"]


@pytest.mark.parametrize("order", list(itertools.permutations(["a", "b", "c"])))
def test_three_threads_any_order_single_increment(order):
    strategy = make_strategy("a", "b", "c")
    for thread in order:
        strategy.boundary_hook(thread)
    assert strategy.global_epoch == 1


def test_duplicate_registration():
    strategy = make_strategy("a")
    with pytest.raises(DuplicateRegistrationError):
        strategy.register_thread("a")


def test_two_epoch_rule():
    strategy = make_strategy("a")
    heap = strategy.heap
    block = heap.alloc(2)

    strategy.commit_hook([block])
    assert strategy.deferred_bytes() == 16
    strategy.commit_hook([])
    assert heap.is_live(block)

    strategy.boundary_hook("a")
    strategy.commit_hook([])
    assert heap.is_live(block)

    strategy.boundary_hook("a")
    assert strategy.global_epoch == 2
    strategy.commit_hook([])
    assert not heap.is_live(block)
    assert strategy.deferred_bytes() == 0
    assert strategy.safety_violations == 0


def test_one_epoch_mutation_is_caught():
    strategy = make_strategy("a", min_age=1)
    block = strategy.heap.alloc(1)
    strategy.commit_hook([block])
    strategy.boundary_hook("a")
    with pytest.raises(AssertionError):
        strategy.commit_hook([])


def test_one_epoch_mutation_counts_violations_when_not_strict():
    strategy = make_strategy("a", min_age=1, strict_safety=False)
    block = strategy.heap.alloc(1)
    strategy.commit_hook([block])
    strategy.boundary_hook("a")
    strategy.commit_hook([])
    assert strategy.safety_violations == 1
    assert not strategy.heap.is_live(block)


def test_idle_thread_grows_limbo_until_deregistered(epoch_engine, heap):
    strategy = epoch_engine.strategy
    strategy.register_thread("idle")
    cell = CellAddr(heap.alloc(1), 0)
    baseline = heap.live_bytes

    for _ in range(20):
        addr = epoch_engine.run_tx(lambda tx: tx.alloc(4)).result
        epoch_engine.run_tx(lambda tx, a=addr: tx.free(a))

    assert strategy.global_epoch == 0
    assert strategy.limbo_size() == 20
    assert heap.live_bytes - baseline == 20 * 4 * 8

    strategy.deregister_thread("idle")
    # 只读提交不触发回收，这里需要一次写提交
    epoch_engine.run_tx(lambda tx: tx.write(cell, 1))
    assert strategy.limbo_size() == 0
    assert heap.live_bytes == baseline


def test_defer_listener_reports_deferred_bytes(epoch_engine, heap):
    events = []
    epoch_engine.strategy.add_defer_listener(lambda event, block, deferred: events.append((event, deferred)))
    block = heap.alloc(3)
    epoch_engine.run_tx(lambda tx: tx.free(block))
    assert events[0] == ("defer", 24)


def test_trap_is_application_error(epoch_engine):
    with pytest.raises(ApplicationError):
        epoch_engine.run_tx(lambda tx: tx.read(CellAddr(1 << 20, 0)))
    assert epoch_engine.stats()['traps_escalated'] == 1


def test_quiescence_barrier_single_thread(epoch_engine):
    start = epoch_engine.strategy.global_epoch
    epoch_engine.quiescence_barrier()
    assert epoch_engine.strategy.global_epoch >= start + 2


def test_shutdown_drains_limbo(epoch_engine, heap):
    strategy = epoch_engine.strategy
    strategy.register_thread("idle")
    block = heap.alloc(2)
    epoch_engine.run_tx(lambda tx: tx.free(block))
    assert heap.is_live(block)

    epoch_engine.shutdown()
    assert not heap.is_live(block)
    assert strategy.deferred_bytes() == 0


def _alloc_free_loop(engine, iterations):
    for _ in range(iterations):
        addr = engine.run_tx(lambda tx: tx.alloc(8)).result
        engine.run_tx(lambda tx, a=addr: tx.free(a))


def test_limbo_cannot_relieve_exhaustion():
    epoch = EpochReclamation()
    epoch_engine = NOrecEngine(TransactionalHeap(capacity_bytes=1024), epoch)
    epoch.register_thread("stalled")
    with pytest.raises(ExhaustionLimitError):
        _alloc_free_loop(epoch_engine, 100)

    trap_engine = NOrecEngine(TransactionalHeap(capacity_bytes=1024), TrapReclamation())
    _alloc_free_loop(trap_engine, 100)
    assert trap_engine.heap.live_bytes == 0
