import threading

import pytest

from tm_modules.epoch_reclamation import EpochReclamation
from tm_modules.errors import (
    ApplicationError,
    ExhaustionLimitError,
    NestedTransactionError,
    RetryLimitExceeded,
    TransactionStateError,
    TxInvalid,
)
from tm_modules.norec_engine import NOrecEngine, OutcomeKind, RetryPolicy, TxStatus
from tm_modules.transactional_heap import NIL, CellAddr, TransactionalHeap
from tm_modules.trap_reclamation import TrapReclamation


def commit_elsewhere(engine, body):
    """在另一个线程中运行并提交一个事务"""
    outcome = {}
    thread = threading.Thread(target=lambda: outcome.update(result=engine.run_tx(body)))
    thread.start()
    thread.join()
    return outcome['result']


def test_committed_write_is_visible(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)
    outcome = trap_engine.run_tx(lambda tx: tx.write(addr, 7))
    assert outcome.kind is OutcomeKind.COMMITTED
    assert heap.read_cell(addr) == 7
    assert trap_engine.clock.read() == 2


def test_read_your_own_write(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)

    def body(tx):
        tx.write(addr, 5)
        return tx.read(addr)

    assert trap_engine.run_tx(body).result == 5


def test_read_only_commit_leaves_clock(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)
    trap_engine.run_tx(lambda tx: tx.read(addr))
    assert trap_engine.clock.read() == 0
    assert trap_engine.stats()['read_only_commits'] == 1


def test_unchanged_clock_skips_validation(trap_engine, heap):
    block = heap.alloc(10_000)

    def body(tx):
        return sum(tx.read(CellAddr(block, i)) for i in range(10_000))

    assert trap_engine.run_tx(body).result == 0
    assert trap_engine.stats()['validations'] == 0


def test_validation_count_bounded_by_commits(trap_engine, heap):
    block = heap.alloc(10_000)
    other = CellAddr(heap.alloc(1), 0)
    injected = 10

    def body(tx):
        for i in range(10_000):
            if i % 1000 == 500:
                commit_elsewhere(trap_engine, lambda t: t.write(other, i))
            tx.read(CellAddr(block, i))

    outcome = trap_engine.run_tx(body)
    assert outcome.retries == 0
    assert trap_engine.stats()['validations'] <= injected + 1
    assert trap_engine.stats()["comparisons"] <= 10_000 + injected * 10_000


def test_one_commit_costs_one_pass_over_read_set(trap_engine, heap):
    block = heap.alloc(100)
    other = CellAddr(heap.alloc(1), 0)

    def body(tx):
        for i in range(100):
            tx.read(CellAddr(block, i))
        commit_elsewhere(trap_engine, lambda t: t.write(other, 1))
        return tx.read(other)

    assert trap_engine.run_tx(body).result == 1
    stats = trap_engine.stats()
    assert stats["validations"] == 1
    assert stats["comparisons"] == 100


def test_conflicting_commit_forces_retry(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)
    attempts = []

    def body(tx):
        value = tx.read(addr)
        if not attempts:
            commit_elsewhere(trap_engine, lambda t: t.write(addr, 100))
        attempts.append(value)
        tx.read(CellAddr(addr.block, 0))
        tx.write(addr, tx.read(addr) + 1)

    outcome = trap_engine.run_tx(body)
    assert outcome.retries == 1
    assert attempts == [0, 100]
    assert heap.read_cell(addr) == 101


def test_nested_transaction_rejected(trap_engine):
    def body(tx):
        trap_engine.tx_begin()

    with pytest.raises(NestedTransactionError):
        trap_engine.run_tx(body)
    assert trap_engine.current_transaction() is None


def test_abort_discards_logs_and_allocations(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)
    baseline = heap.live_bytes

    tx = trap_engine.tx_begin()
    tx.write(addr, 9)
    tx.alloc(4)
    trap_engine.tx_abort(tx)

    assert tx.status is TxStatus.ABORTED
    assert heap.read_cell(addr) == NIL
    assert heap.live_bytes == baseline
    with pytest.raises(TransactionStateError):
        trap_engine.tx_abort(tx)


def test_body_exception_aborts_and_propagates(trap_engine, heap):
    baseline = heap.live_bytes

    def body(tx):
        tx.alloc(2)
        raise KeyError("boom")

    with pytest.raises(KeyError):
        trap_engine.run_tx(body)
    assert heap.live_bytes == baseline
    assert trap_engine.stats()['aborts'] == 1


def test_retry_limit():
    engine = NOrecEngine(TransactionalHeap(), TrapReclamation(),
                         retry_policy=RetryPolicy(max_retries=2, backoff_base_s=0.0))

    def body(tx):
        raise TxInvalid("always")

    with pytest.raises(RetryLimitExceeded) as info:
        engine.run_tx(body)
    assert info.value.retries == 3


def test_retry_backoff_is_capped():
    policy = RetryPolicy()
    assert policy.delay(1) == pytest.approx(1e-6)
    assert policy.delay(50) == pytest.approx(1e-3)


def test_wild_read_on_quiet_clock_escalates(trap_engine):
    wild = CellAddr(1 << 20, 0)
    with pytest.raises(ApplicationError) as info:
        trap_engine.run_tx(lambda tx: tx.read(wild))
    assert info.value.addr == wild
    stats = trap_engine.stats()
    assert (stats['traps_total'], stats['traps_recovered'], stats['traps_escalated']) == (1, 0, 1)
    assert stats['escalations'] == 1


def test_exhaustion_with_valid_read_set_propagates():
    heap = TransactionalHeap(capacity_bytes=64)
    engine = NOrecEngine(heap, TrapReclamation())
    size_cell = CellAddr(heap.alloc(1), 0)
    heap.write_cell(size_cell, 100)

    with pytest.raises(ExhaustionLimitError):
        engine.run_tx(lambda tx: tx.alloc(tx.read(size_cell)))
    assert engine.current_transaction() is None


def test_exhaustion_with_stale_read_set_is_a_conflict():
    heap = TransactionalHeap(capacity_bytes=64)
    engine = NOrecEngine(heap, TrapReclamation())
    size_cell = CellAddr(heap.alloc(1), 0)
    heap.write_cell(size_cell, 100)

    tx = engine.tx_begin()
    size = tx.read(size_cell)
    commit_elsewhere(engine, lambda t: t.write(size_cell, 1))
    with pytest.raises(TxInvalid):
        tx.alloc(size)
    assert tx.status is TxStatus.DOOMED
    engine.tx_abort(tx)

    # 重启后读到新值，分配成功
    outcome = engine.run_tx(lambda t: t.alloc(t.read(size_cell)))
    assert outcome.is_committed


def test_write_back_to_freed_block_is_application_error(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)

    def body(tx):
        tx.write(addr, 1)
        heap.free(addr.block)

    with pytest.raises(ApplicationError):
        trap_engine.run_tx(body)
    assert trap_engine.clock.read() % 2 == 0
    assert trap_engine.stats()['escalations'] == 1


def test_nontx_write_moves_clock(trap_engine, heap):
    addr = CellAddr(heap.alloc(1), 0)
    trap_engine.nontx_write(addr, 3)
    assert heap.read_cell(addr) == 3
    assert trap_engine.clock.read() == 2


def test_nontx_operations_rejected_inside_transaction(trap_engine, heap):
    block = heap.alloc(1)

    with pytest.raises(TransactionStateError):
        trap_engine.run_tx(lambda tx: trap_engine.nontx_free(block))
    assert heap.is_live(block)


def test_concurrent_counter_increments(trap_engine, heap):
    counter = CellAddr(heap.alloc(1), 0)
    threads_n, per_thread = 4, 200

    def worker():
        for _ in range(per_thread):
            trap_engine.run_tx(lambda tx: tx.write(counter, tx.read(counter) + 1))

    threads = [threading.Thread(target=worker) for _ in range(threads_n)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert heap.read_cell(counter) == threads_n * per_thread
    assert trap_engine.clock.read() == 2 * threads_n * per_thread


def test_failing_epoch_assertion_keeps_transaction_committed(heap):
    # 只等一代的回收在严格模式下触发断言，此时写回已经完成
    strategy = EpochReclamation(min_age=1, strict_safety=True)
    engine = NOrecEngine(heap, strategy)
    strategy.register_thread("peer")
    cell = CellAddr(heap.alloc(1), 0)
    victim = heap.alloc(1)

    engine.run_tx(lambda tx: tx.free(victim))
    strategy.boundary_hook("peer")
    assert strategy.global_epoch == 1

    published = {}

    def body(tx):
        published['addr'] = tx.alloc(2)
        tx.write_ref(cell, published['addr'])

    with pytest.raises(AssertionError):
        engine.run_tx(body)
    assert engine.current_transaction() is None
    assert engine.clock.read() % 2 == 0
    assert heap.is_live(published['addr'].block)
    assert heap.read_cell(cell) == published['addr'].to_word()
