"""
单一全局锁（CGL）基线引擎
所有临界区由一把全局锁串行化，读写直接作用于堆，释放立即执行；
不存在回滚，因此验证、重试、陷阱计数恒为0
"""

import itertools
import logging
import threading
from typing import Hashable, Optional, Union

from .errors import AccessViolation, ApplicationError, NestedTransactionError
from .instrumentation import NULL_PROBE, Probe, YieldKind
from .norec_engine import EngineCounters, RetryPolicy, TxBody, TxHandle, TxOutcome, _as_block, _as_word
from .reclamation_strategy import TrapStats
from .transactional_heap import CellAddr, TransactionalHeap

logger = logging.getLogger(__name__)


class CGLSection(TxHandle):
    """持有全局锁期间的访问句柄，接口与事务描述符一致"""

    def __init__(self, engine: 'CGLEngine', tx_id: int):
        self.engine = engine
        self.tx_id = tx_id

    def read(self, addr: CellAddr) -> int:
        return self.engine.section_read(self, addr)

    def write(self, addr: CellAddr, word: Union[int, CellAddr]):
        self.engine.section_write(self, addr, word)

    def alloc(self, size: int) -> CellAddr:
        return self.engine.section_alloc(self, size)

    def free(self, block: Union[int, CellAddr]):
        self.engine.section_free(self, block)


class CGLEngine:
    """全局锁引擎，与 NOrec 引擎共享相同的堆和工作负载接口"""

    kind = "cgl"
    name = "cgl"

    def __init__(self, heap: TransactionalHeap, probe: Optional[Probe] = None):
        self.heap = heap
        self.probe = probe or NULL_PROBE
        self.counters = EngineCounters()
        self.trap_stats = TrapStats()

        self._lock = threading.Lock()
        self._owner: Optional[Hashable] = None
        self._tx_ids = itertools.count(1)

        logger.info("CGL引擎初始化完成")

    def _acquire(self, thread: Hashable):
        if self._owner == thread:
            raise NestedTransactionError("CGL 临界区不可重入")
        while not self._lock.acquire(blocking=False):
            self.probe.spin("cgl-lock")
        self._owner = thread

    def _release(self):
        self._owner = None
        self._lock.release()

    def run_tx(self, body: TxBody, policy: Optional[RetryPolicy] = None) -> TxOutcome:
        """在全局锁下执行 body；总是提交，应用错误直接向上传播"""
        thread = self.probe.thread_id()
        self._acquire(thread)
        tx_id = next(self._tx_ids)
        section = CGLSection(self, tx_id)
        self.probe.record("begin", tx_id)
        try:
            result = body(section)
        finally:
            # 写入已经就地生效，出错时也按已提交记录
            self.counters.add('commits')
            self.probe.record("commit", tx_id)
            self._release()
        self.probe.yield_point(YieldKind.POST_COMMIT)

        outcome = TxOutcome.committed(self.counters.get('commits'))
        outcome.result = result
        return outcome

    run = run_tx

    # ------------------------------------------------------------------
    # 临界区内访问
    # ------------------------------------------------------------------

    def section_read(self, section: CGLSection, addr: CellAddr) -> int:
        self.probe.yield_point(YieldKind.PRE_CELL_ACCESS)
        try:
            word = self.heap.read_cell(addr)
        except AccessViolation:
            self.counters.add('escalations')
            logger.warning(f"CGL 临界区内非法访问: {addr}")
            raise ApplicationError(addr, "CGL 临界区")
        self.probe.record("read", section.tx_id, addr, word)
        return word

    def section_write(self, section: CGLSection, addr: CellAddr, word: Union[int, CellAddr]):
        word = _as_word(word)
        try:
            self.heap.write_cell(addr, word)
        except AccessViolation:
            self.counters.add('escalations')
            raise ApplicationError(addr, "CGL 临界区")
        self.probe.record("write", section.tx_id, addr, word)

    def section_alloc(self, section: CGLSection, size: int) -> CellAddr:
        block = self.heap.alloc(size)
        self.probe.record("alloc", section.tx_id, value=block)
        return CellAddr(block, 0)

    def section_free(self, section: CGLSection, block: Union[int, CellAddr]):
        self.release_block(_as_block(block))

    # ------------------------------------------------------------------
    # 临界区外
    # ------------------------------------------------------------------

    def nontx_free(self, block: Union[int, CellAddr]):
        self.release_block(_as_block(block))

    def nontx_read(self, addr: CellAddr) -> int:
        try:
            return self.heap.read_cell(addr)
        except AccessViolation:
            self.counters.add('escalations')
            raise ApplicationError(addr, "非事务读取")

    def nontx_write(self, addr: CellAddr, word: Union[int, CellAddr]):
        self.run_tx(lambda section: section.write(addr, word))

    def quiescence_barrier(self):
        self.run_tx(lambda section: None)

    def release_block(self, block: int):
        self.heap.free(block)
        self.probe.record("free", value=block)

    def release_thread(self):
        pass

    def deferred_bytes(self) -> int:
        return 0

    def shutdown(self):
        pass

    def stats(self):
        result = self.counters.snapshot()
        result.update(self.trap_stats.snapshot())
        return result
