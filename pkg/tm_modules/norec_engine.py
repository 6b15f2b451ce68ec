"""
NOrec 风格事务引擎
延迟更新（redo-log）+ 基于值的增量验证 + 全局提交计数器短路
提交计数器同时充当写者锁：偶数表示无提交进行中，奇数表示有提交者持有写锁
"""

import itertools
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Hashable, List, Optional, Union

from .errors import (
    AccessViolation,
    ApplicationError,
    DoubleFreeError,
    ExhaustionLimitError,
    NestedTransactionError,
    RetryLimitExceeded,
    TMLabError,
    TransactionStateError,
    TxInvalid,
    UnknownBlockError,
    ZeroSizeError,
)
from .instrumentation import NULL_PROBE, Probe, YieldKind
from .reclamation_strategy import ReclamationStrategy, TrapAction
from .transactional_heap import NIL, CellAddr, TransactionalHeap

logger = logging.getLogger(__name__)


class GlobalClock:
    """全局提交计数器（奇偶编码的写者锁）"""

    def __init__(self):
        self._value = 0
        self._lock = threading.Lock()

    def read(self) -> int:
        return self._value

    def compare_and_set(self, expected: int, new: int) -> bool:
        with self._lock:
            if self._value != expected:
                return False
            self._value = new
            return True

    def increment(self) -> int:
        with self._lock:
            self._value += 1
            return self._value

    def wait_even(self, probe: Probe) -> int:
        """自旋直到计数器为偶数，返回该值"""
        while True:
            value = self._value
            if value % 2 == 0:
                return value
            probe.spin("clock-odd")


class EngineCounters:
    """引擎插桩计数器（供基准测试模块导出）"""

    FIELDS = ('commits', 'read_only_commits', 'aborts', 'retries',
              'validations', 'comparisons', 'escalations')

    def __init__(self):
        self._lock = threading.Lock()
        self._values = dict.fromkeys(self.FIELDS, 0)

    def add(self, name: str, amount: int = 1):
        with self._lock:
            self._values[name] += amount

    def get(self, name: str) -> int:
        return self._values[name]

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._values)


class TxStatus(Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"
    DOOMED = "doomed"


@dataclass(frozen=True)
class ReadSetEntry:
    """读集合条目：地址 + 第一次读到的值"""
    addr: CellAddr
    value: int


class OutcomeKind(Enum):
    COMMITTED = "Committed"
    ABORTED_RETRYABLE = "AbortedRetryable"
    APPLICATION_ERROR = "ApplicationError"


@dataclass
class TxOutcome:
    """事务结果"""
    kind: OutcomeKind
    commits_observed: int = 0
    reason: Optional[str] = None
    addr: Optional[CellAddr] = None
    retries: int = 0
    result: Any = None

    @classmethod
    def committed(cls, commits_observed: int) -> 'TxOutcome':
        return cls(OutcomeKind.COMMITTED, commits_observed=commits_observed)

    @property
    def is_committed(self) -> bool:
        return self.kind is OutcomeKind.COMMITTED


@dataclass
class RetryPolicy:
    """重试策略：默认无限重试 + 有上限的指数退避（1ms）"""
    max_retries: Optional[int] = None
    backoff_base_s: float = 1e-6
    backoff_cap_s: float = 1e-3

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap_s, self.backoff_base_s * (2 ** max(attempt - 1, 0)))


class TxHandle:
    """
    事务句柄的公共便利方法
    NOrec 事务描述符与 CGL 临界区共用同一套工作负载接口
    """

    def read(self, addr: CellAddr) -> int:
        raise NotImplementedError

    def write(self, addr: CellAddr, word: Union[int, CellAddr]):
        raise NotImplementedError

    def alloc(self, size: int) -> CellAddr:
        raise NotImplementedError

    def free(self, block: Union[int, CellAddr]):
        raise NotImplementedError

    def read_ref(self, addr: CellAddr) -> Optional[CellAddr]:
        """读取一个引用；NIL 返回 None（清单3的判空模式）"""
        word = self.read(addr)
        return None if word == NIL else CellAddr.from_word(word)

    def write_ref(self, addr: CellAddr, ref: Optional[CellAddr]):
        self.write(addr, NIL if ref is None else ref.to_word())


def _as_word(word: Union[int, CellAddr]) -> int:
    return word.to_word() if isinstance(word, CellAddr) else word


def _as_block(block: Union[int, CellAddr]) -> int:
    return block.block if isinstance(block, CellAddr) else block


@dataclass(eq=False)
class TxDescriptor(TxHandle):
    """事务描述符，只属于创建它的线程"""
    engine: 'NOrecEngine' = field(repr=False)
    tx_id: int
    thread: Hashable
    snapshot: int
    status: TxStatus = TxStatus.ACTIVE
    read_set: List[ReadSetEntry] = field(default_factory=list)
    read_index: Dict[CellAddr, int] = field(default_factory=dict, repr=False)
    redo_log: Dict[CellAddr, int] = field(default_factory=dict)
    alloc_log: List[int] = field(default_factory=list)
    free_log: List[int] = field(default_factory=list)
    retries: int = 0
    traps: int = 0  # 本次 run_tx 调用链中累计的陷阱数

    def read(self, addr: CellAddr) -> int:
        return self.engine.tx_read(self, addr)

    def write(self, addr: CellAddr, word: Union[int, CellAddr]):
        self.engine.tx_write(self, addr, word)

    def alloc(self, size: int) -> CellAddr:
        return self.engine.tx_alloc(self, size)

    def free(self, block: Union[int, CellAddr]):
        self.engine.tx_free(self, block)


TxBody = Callable[[TxHandle], Any]


class NOrecEngine:
    """
    NOrec 事务引擎

    核心流程：
    1. tx_begin：等待计数器为偶数并记录快照
    2. tx_read：计数器未变化时跳过验证；读后计数器变化则重新验证并重读
    3. tx_commit：CAS 快照→快照+1 获取写锁，写回 redo-log，交给回收策略处理释放日志
    4. 访问违例交给回收策略的 trap_hook 决定回滚还是升级
    """

    kind = "norec"

    def __init__(self,
                 heap: TransactionalHeap,
                 strategy: ReclamationStrategy,
                 retry_policy: Optional[RetryPolicy] = None,
                 probe: Optional[Probe] = None,
                 validate_on_exhaustion: bool = True):
        self.heap = heap
        self.strategy = strategy
        self.retry_policy = retry_policy or RetryPolicy()
        self.probe = probe or NULL_PROBE
        self.validate_on_exhaustion = validate_on_exhaustion

        self.clock = GlobalClock()
        self.counters = EngineCounters()
        self.name = f"norec-{strategy.name}"

        self._tx_ids = itertools.count(1)
        self._local = threading.local()

        strategy.attach(self)
        logger.info(f"NOrec引擎初始化完成，回收策略: {strategy.name}")

    # ------------------------------------------------------------------
    # 事务生命周期
    # ------------------------------------------------------------------

    def current_transaction(self) -> Optional[TxDescriptor]:
        tx = getattr(self._local, 'active', None)
        if tx is not None and tx.status in (TxStatus.ACTIVE, TxStatus.DOOMED):
            return tx
        return None

    def tx_begin(self) -> TxDescriptor:
        """开始事务（仅支持扁平嵌套）"""
        if self.current_transaction() is not None:
            raise NestedTransactionError("当前线程已有活动事务")

        thread = self.probe.thread_id()
        self.strategy.on_thread_start(thread)

        snapshot = self.clock.wait_even(self.probe)
        tx = TxDescriptor(self, next(self._tx_ids), thread, snapshot)
        self._local.active = tx

        self.strategy.boundary_hook(thread)
        self.probe.record("begin", tx.tx_id, value=snapshot)
        return tx

    def tx_read(self, tx: TxDescriptor, addr: CellAddr) -> int:
        """带增量验证的事务读"""
        self._require_active(tx)

        # 读自己的写
        if addr in tx.redo_log:
            word = tx.redo_log[addr]
            self.probe.record("read", tx.tx_id, addr, word, "local")
            return word

        # 1. 计数器变化则验证整个读集合
        if self.clock.read() != tx.snapshot:
            self._revalidate(tx)

        index = tx.read_index.get(addr)
        if index is not None:
            word = tx.read_set[index].value
            self.probe.record("read", tx.tx_id, addr, word)
            return word

        while True:
            # 2. 读取单元（最后一次验证与访问之间的窗口）
            self.probe.yield_point(YieldKind.PRE_CELL_ACCESS)
            try:
                word = self.heap.read_cell(addr)
            except AccessViolation:
                self._on_trap(tx, addr)

            # 3. 读取期间计数器变化则重新验证并重读
            if self.clock.read() == tx.snapshot:
                break
            self._revalidate(tx)

        # 4. 追加读集合
        tx.read_index[addr] = len(tx.read_set)
        tx.read_set.append(ReadSetEntry(addr, word))
        self.probe.record("read", tx.tx_id, addr, word)
        return word

    def tx_write(self, tx: TxDescriptor, addr: CellAddr, word: Union[int, CellAddr]):
        """写入 redo-log，共享内存不变"""
        self._require_active(tx)
        word = _as_word(word)
        tx.redo_log[addr] = word
        self.probe.record("write", tx.tx_id, addr, word)

    def tx_alloc(self, tx: TxDescriptor, size: int) -> CellAddr:
        """立即分配并记入分配日志"""
        self._require_active(tx)
        try:
            block = self.heap.alloc(size)
        except (ExhaustionLimitError, ZeroSizeError):
            # 分配参数可能来自脏读：读集合失效时按冲突处理
            if self.validate_on_exhaustion and not self.validate(tx):
                tx.status = TxStatus.DOOMED
                raise TxInvalid("分配参数来自失效的读集合")
            raise

        tx.alloc_log.append(block)
        self.probe.record("alloc", tx.tx_id, value=block)
        return CellAddr(block, 0)

    def tx_free(self, tx: TxDescriptor, block: Union[int, CellAddr]):
        """记入释放日志，提交时才交给回收策略"""
        self._require_active(tx)
        tx.free_log.append(_as_block(block))

    def validate(self, tx: TxDescriptor) -> bool:
        """基于值的验证；成功时把快照推进到验证时的计数器值"""
        self.probe.yield_point(YieldKind.PRE_VALIDATE)
        self.counters.add('validations')
        try:
            while True:
                observed = self.clock.wait_even(self.probe)
                if not self._read_set_matches(tx):
                    return False
                if self.clock.read() == observed:
                    tx.snapshot = observed
                    return True
        finally:
            self.probe.yield_point(YieldKind.POST_VALIDATE)

    def tx_commit(self, tx: TxDescriptor) -> TxOutcome:
        """提交事务"""
        self._require_active(tx)

        # 只读快速路径：不触碰计数器
        if not tx.redo_log and not tx.free_log:
            tx.status = TxStatus.COMMITTED
            self._local.active = None
            self.strategy.boundary_hook(tx.thread)
            self.counters.add('commits')
            self.counters.add('read_only_commits')
            self.probe.record("commit", tx.tx_id, value=tx.snapshot, detail="read-only")
            self.probe.yield_point(YieldKind.POST_COMMIT)
            return TxOutcome.committed(tx.snapshot // 2)

        while not self.clock.compare_and_set(tx.snapshot, tx.snapshot + 1):
            self._revalidate(tx)

        write_back_fault = None
        hook_error = None
        try:
            for addr, word in tx.redo_log.items():
                try:
                    self.heap.write_cell(addr, word)
                except AccessViolation:
                    # 写回目标在事务外被释放且未私有化，属于应用错误
                    write_back_fault = write_back_fault or addr

            self.probe.yield_point(YieldKind.PRE_COMMIT_HOOK)
            try:
                self.strategy.commit_hook(tx.free_log)
            except TMLabError as exc:
                hook_error = exc
            self.strategy.boundary_hook(tx.thread)
        finally:
            # 写回已完成：即使回收钩子抛出断言，事务也已提交
            commit_value = self.clock.increment()
            tx.status = TxStatus.COMMITTED
            self._local.active = None

        self.counters.add('commits')
        self.probe.record("commit", tx.tx_id, value=commit_value)
        self.probe.yield_point(YieldKind.POST_COMMIT)

        if hook_error is not None:
            raise hook_error
        if write_back_fault is not None:
            self.strategy.trap_stats.record_escalated()
            self.counters.add('escalations')
            logger.warning(f"写回访问违例升级为应用错误: {write_back_fault}")
            raise ApplicationError(write_back_fault, "写回已释放的内存块")
        return TxOutcome.committed(commit_value // 2)

    def tx_abort(self, tx: TxDescriptor, reason: str = "abort"):
        """回滚：丢弃日志，释放本事务分配的内存块"""
        if tx.status not in (TxStatus.ACTIVE, TxStatus.DOOMED):
            raise TransactionStateError(f"无法回滚状态为 {tx.status.value} 的事务")

        tx.read_set.clear()
        tx.read_index.clear()
        tx.redo_log.clear()
        for block in tx.alloc_log:
            try:
                self.release_block(block)
            except (DoubleFreeError, UnknownBlockError) as exc:
                logger.warning(f"回滚时释放分配日志失败: {exc}")
        tx.alloc_log.clear()
        tx.free_log.clear()

        tx.status = TxStatus.ABORTED
        if getattr(self._local, 'active', None) is tx:
            self._local.active = None
        self.strategy.boundary_hook(tx.thread)
        self.counters.add('aborts')
        self.probe.record("abort", tx.tx_id, detail=reason)

    def run_tx(self, body: TxBody, policy: Optional[RetryPolicy] = None) -> TxOutcome:
        """在 begin/commit 之间执行 body，TxInvalid 时自动回滚重启"""
        policy = policy or self.retry_policy
        retries = 0
        traps = 0

        while True:
            tx = self.tx_begin()
            tx.retries = retries
            tx.traps = traps
            try:
                result = body(tx)
                outcome = self.tx_commit(tx)
            except TxInvalid as exc:
                traps = tx.traps
                if tx.status in (TxStatus.ACTIVE, TxStatus.DOOMED):
                    self.tx_abort(tx, exc.reason)
                retries += 1
                self.counters.add('retries')
                if policy.max_retries is not None and retries > policy.max_retries:
                    raise RetryLimitExceeded(retries) from exc
                self.probe.backoff(policy.delay(retries))
                continue
            except BaseException as exc:
                if tx.status in (TxStatus.ACTIVE, TxStatus.DOOMED):
                    self.tx_abort(tx, type(exc).__name__)
                raise

            outcome.retries = retries
            outcome.result = result
            return outcome

    run = run_tx

    # ------------------------------------------------------------------
    # 事务外路径
    # ------------------------------------------------------------------

    def nontx_free(self, block: Union[int, CellAddr]):
        """事务外释放（§3 的第2、3种情况）"""
        self._require_outside()
        self.strategy.nontx_free(_as_block(block))

    def nontx_read(self, addr: CellAddr):
        """受保护的事务外读取"""
        self._require_outside()
        return self.strategy.nontx_read(addr)

    def nontx_write(self, addr: CellAddr, word: Union[int, CellAddr]):
        """
        受保护的事务外单字写入
        像只有一个写的提交一样占用计数器，因此并发读者能察觉到私有化
        """
        self._require_outside()
        word = _as_word(word)
        while True:
            observed = self.clock.wait_even(self.probe)
            if self.clock.compare_and_set(observed, observed + 1):
                break

        tx_id = next(self._tx_ids)
        fault = False
        try:
            self.heap.write_cell(addr, word)
        except AccessViolation:
            fault = True
        finally:
            commit_value = self.clock.increment()

        if fault:
            self.strategy.trap_stats.record_escalated()
            self.counters.add('escalations')
            raise ApplicationError(addr, "非事务写入")

        self.probe.record("begin", tx_id, value=observed, detail="nontx")
        self.probe.record("write", tx_id, addr, word)
        self.probe.record("commit", tx_id, value=commit_value, detail="nontx")

    def quiescence_barrier(self):
        """事务感知屏障（清单4）"""
        self._require_outside()
        self.strategy.quiescence_barrier()

    def release_block(self, block: int):
        """实际执行释放（回收策略和回滚共用）"""
        self.heap.free(block)
        self.probe.record("free", value=block)

    def release_thread(self):
        """当前线程不再执行事务"""
        self.strategy.on_thread_exit(self.probe.thread_id())

    def deferred_bytes(self) -> int:
        return self.strategy.deferred_bytes()

    def shutdown(self):
        self.strategy.shutdown()

    def stats(self) -> Dict[str, int]:
        """引擎计数器 + 陷阱计数器"""
        result = self.counters.snapshot()
        result.update(self.strategy.trap_stats.snapshot())
        return result

    # ------------------------------------------------------------------
    # 内部方法
    # ------------------------------------------------------------------

    def _require_active(self, tx: TxDescriptor):
        if tx.status is TxStatus.DOOMED:
            raise TxInvalid("事务已注定失败")
        if tx.status is not TxStatus.ACTIVE:
            raise TransactionStateError(f"事务 {tx.tx_id} 状态为 {tx.status.value}")

    def _require_outside(self):
        if self.current_transaction() is not None:
            raise TransactionStateError("该操作不能在事务内调用")

    def _revalidate(self, tx: TxDescriptor):
        if not self.validate(tx):
            tx.status = TxStatus.DOOMED
            raise TxInvalid("读集合验证失败")

    def _read_set_matches(self, tx: TxDescriptor) -> bool:
        """逐项比较读集合；已释放的单元视为不匹配"""
        comparisons = 0
        try:
            for entry in tx.read_set:
                comparisons += 1
                try:
                    current = self.heap.read_cell(entry.addr)
                except AccessViolation:
                    return False
                if current != entry.value:
                    return False
            return True
        finally:
            self.counters.add('comparisons', comparisons)

    def read_set_still_valid(self, tx: TxDescriptor) -> bool:
        """不修改快照的读集合检查（升级断言使用）"""
        return self._read_set_matches(tx)

    def _on_trap(self, tx: TxDescriptor, addr: CellAddr):
        """事务内访问违例：交给回收策略决定，总是抛出异常"""
        tx.traps += 1
        self.probe.yield_point(YieldKind.TRAP_ENTRY)
        self.probe.record("trap", tx.tx_id, addr)
        decision = self.strategy.trap_hook(tx, addr)
        self.probe.record("decision", tx.tx_id, addr, detail=str(decision))

        if decision.action is TrapAction.ROLLBACK_RETRY:
            tx.status = TxStatus.DOOMED
            raise TxInvalid(f"访问违例 {addr}，按冲突回滚", trap=True)

        self.counters.add('escalations')
        raise ApplicationError(addr)
