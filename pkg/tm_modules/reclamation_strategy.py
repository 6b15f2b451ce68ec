"""
回收策略接口模块
NOrec 引擎通过四个钩子驱动可替换的内存回收策略：
boundary_hook（事务开始/重启/结束）、commit_hook（提交时处理释放日志）、
trap_hook（事务内访问违例）以及非事务释放/读取路径
"""

import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Hashable, List, Optional

from .errors import AccessViolation, ApplicationError
from .transactional_heap import CellAddr

logger = logging.getLogger(__name__)


class TrapAction(Enum):
    """陷阱处理决定"""
    ROLLBACK_RETRY = "RollbackRetry"
    ESCALATE = "Escalate"


@dataclass(frozen=True)
class TrapDecision:
    """trap_hook 的返回值"""
    action: TrapAction
    addr: Optional[CellAddr] = None

    @classmethod
    def rollback_retry(cls) -> 'TrapDecision':
        return cls(TrapAction.ROLLBACK_RETRY)

    @classmethod
    def escalate(cls, addr: CellAddr) -> 'TrapDecision':
        return cls(TrapAction.ESCALATE, addr)

    def __str__(self) -> str:
        if self.action is TrapAction.ESCALATE:
            return f"Escalate({self.addr})"
        return self.action.value


class GuardedRead(Enum):
    """受保护的非事务读取命中已私有化（已释放）内存块时的返回值"""
    PRIVATIZED = "PRIVATIZED"


class TrapStats:
    """陷阱计数器：traps_total = traps_recovered + traps_escalated"""

    def __init__(self):
        self._lock = threading.Lock()
        self.traps_total = 0
        self.traps_recovered = 0
        self.traps_escalated = 0

    def record_recovered(self):
        with self._lock:
            self.traps_total += 1
            self.traps_recovered += 1

    def record_escalated(self):
        with self._lock:
            self.traps_total += 1
            self.traps_escalated += 1

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {
                'traps_total': self.traps_total,
                'traps_recovered': self.traps_recovered,
                'traps_escalated': self.traps_escalated,
            }


# 延迟字节变化监听器：参数为 (事件, 块号, 当前deferred_bytes)
DeferListener = Callable[[str, int, int], None]


class ReclamationStrategy:
    """
    回收策略基类

    默认实现对应"不做任何延迟"的行为；子类覆盖需要的钩子
    """

    name = "base"
    requires_quiescence = False

    def __init__(self):
        self.engine = None
        self.heap = None
        self.probe = None
        self.trap_stats = TrapStats()
        self._defer_listeners: List[DeferListener] = []

    def attach(self, engine):
        """绑定到引擎（引擎构造时调用）"""
        self.engine = engine
        self.heap = engine.heap
        self.probe = engine.probe

    def add_defer_listener(self, listener: DeferListener):
        self._defer_listeners.append(listener)

    def remove_defer_listener(self, listener: DeferListener):
        if listener in self._defer_listeners:
            self._defer_listeners.remove(listener)

    # ------------------------------------------------------------------
    # 线程生命周期
    # ------------------------------------------------------------------

    def register_thread(self, thread: Hashable):
        pass

    def deregister_thread(self, thread: Hashable):
        pass

    def on_thread_start(self, thread: Hashable):
        """线程第一次进入事务前调用"""
        pass

    def on_thread_exit(self, thread: Hashable):
        """线程不再执行事务时调用"""
        pass

    # ------------------------------------------------------------------
    # 引擎钩子
    # ------------------------------------------------------------------

    def boundary_hook(self, thread: Hashable):
        pass

    def commit_hook(self, free_log: List[int]):
        raise NotImplementedError

    def trap_hook(self, tx, addr: CellAddr) -> TrapDecision:
        raise NotImplementedError

    # ------------------------------------------------------------------
    # 非事务路径
    # ------------------------------------------------------------------

    def nontx_free(self, block: int):
        """事务外的释放：直接执行"""
        self.engine.release_block(block)

    def nontx_read(self, addr: CellAddr) -> Any:
        """事务外的读取：没有恢复语义，访问违例直接升级为应用错误"""
        try:
            return self.heap.read_cell(addr)
        except AccessViolation:
            self.trap_stats.record_escalated()
            self.engine.counters.add('escalations')
            logger.warning(f"事务外访问违例升级为应用错误: {addr}")
            raise ApplicationError(addr, "非事务读取")

    def quiescence_barrier(self):
        """事务感知屏障：运行一个空事务"""
        self.engine.run_tx(lambda tx: None)

    # ------------------------------------------------------------------
    # 指标与收尾
    # ------------------------------------------------------------------

    def deferred_bytes(self) -> int:
        return 0

    def shutdown(self):
        pass
