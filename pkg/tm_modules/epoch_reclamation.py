"""
基于 epoch 的延迟回收策略
事务内的释放请求带上当前全局 epoch 放入全局 limbo，
只有比全局 epoch 老两代以上的请求才会真正执行
"""

import logging
import threading
from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional

from .errors import DuplicateRegistrationError, TMLabError
from .reclamation_strategy import ReclamationStrategy, TrapDecision
from .transactional_heap import CellAddr

logger = logging.getLogger(__name__)


@dataclass
class ThreadEpoch:
    """
    单个线程的 epoch 记录
    mark: 该线程最近一次边界事件时的全局 epoch，注册后尚未推进时为 None
    """
    epoch: int = 0
    mark: Optional[int] = None
    active: bool = True


@dataclass(frozen=True)
class LimboEntry:
    block: int
    tagged_epoch: int
    nbytes: int


class EpochReclamation(ReclamationStrategy):
    """
    epoch 回收策略

    共识规则：
    1. 每次事务开始、重启、结束时线程 epoch +1，并记下当时的全局 epoch
    2. 所有参与共识的线程都在当前全局 epoch 内推进过之后，全局 epoch +1
    3. 注销的线程不再阻塞共识
    """

    name = "epoch"
    requires_quiescence = True

    def __init__(self, min_age: int = 2, strict_safety: bool = True):
        super().__init__()
        self.min_age = min_age
        self.strict_safety = strict_safety

        self._global_epoch = 0
        self._threads: Dict[Hashable, ThreadEpoch] = {}
        self._epoch_lock = threading.Lock()

        self._limbo: Dict[int, List[LimboEntry]] = {}
        self._deferred_bytes = 0
        self._limbo_lock = threading.Lock()
        self._drain_gate = threading.Lock()

        self.safety_violations = 0

        if min_age < 2:
            logger.warning(f"limbo 最小代龄为 {min_age}，低于安全所需的2代")

    # ------------------------------------------------------------------
    # 共识
    # ------------------------------------------------------------------

    @property
    def global_epoch(self) -> int:
        return self._global_epoch

    def thread_epoch(self, thread: Hashable) -> int:
        return self._threads[thread].epoch

    def registered_threads(self) -> List[Hashable]:
        with self._epoch_lock:
            return [t for t, record in self._threads.items() if record.active]

    def register_thread(self, thread: Hashable):
        with self._epoch_lock:
            record = self._threads.get(thread)
            if record is not None and record.active:
                raise DuplicateRegistrationError(f"线程 {thread} 已注册")
            self._register_locked(thread)

    def deregister_thread(self, thread: Hashable):
        with self._epoch_lock:
            record = self._threads.get(thread)
            if record is None or not record.active:
                return
            record.active = False
            self._try_advance_locked()

    def on_thread_start(self, thread: Hashable):
        with self._epoch_lock:
            record = self._threads.get(thread)
            if record is None or not record.active:
                self._register_locked(thread)

    def on_thread_exit(self, thread: Hashable):
        self.deregister_thread(thread)

    def boundary_hook(self, thread: Hashable):
        with self._epoch_lock:
            record = self._threads.get(thread)
            if record is None or not record.active:
                record = self._register_locked(thread)
            record.epoch += 1
            record.mark = self._global_epoch
            self._try_advance_locked()

    def _register_locked(self, thread: Hashable) -> ThreadEpoch:
        record = self._threads.get(thread)
        if record is None:
            record = ThreadEpoch()
            self._threads[thread] = record
        record.active = True
        record.mark = None
        return record

    def _try_advance_locked(self):
        current = self._global_epoch
        if all(record.mark == current for record in self._threads.values() if record.active):
            self._global_epoch = current + 1

    # ------------------------------------------------------------------
    # limbo
    # ------------------------------------------------------------------

    def commit_hook(self, free_log: List[int]):
        """释放请求进入 limbo，然后回收所有足够老的条目"""
        if free_log:
            tag = self._global_epoch
            for block in free_log:
                nbytes = self.heap.block_bytes(block)
                with self._limbo_lock:
                    self._limbo.setdefault(tag, []).append(LimboEntry(block, tag, nbytes))
                    self._deferred_bytes += nbytes
                    deferred = self._deferred_bytes
                self.probe.record("defer", value=block, detail=tag)
                self._notify("defer", block, deferred)
        self.collect()

    def collect(self) -> int:
        """
        回收满足代龄要求的 limbo 条目
        同一时刻只有一个回收者，拿不到闸门的调用直接返回

        Returns:
            本次释放的内存块数量
        """
        if not self._drain_gate.acquire(blocking=False):
            return 0
        try:
            global_epoch = self._global_epoch
            due = self._take_entries(global_epoch - self.min_age)
            for entry in due:
                self._check_safety(entry, global_epoch)
            self._execute(due)
            return len(due)
        finally:
            self._drain_gate.release()

    def _take_entries(self, max_tag: Optional[int]) -> List[LimboEntry]:
        with self._limbo_lock:
            tags = sorted(t for t in self._limbo if max_tag is None or t <= max_tag)
            due = [entry for t in tags for entry in self._limbo.pop(t)]
            self._deferred_bytes -= sum(entry.nbytes for entry in due)
            return due

    def _execute(self, entries: List[LimboEntry]):
        first_error = None
        for entry in entries:
            try:
                self.engine.release_block(entry.block)
            except TMLabError as exc:
                # 重复释放说明应用有 bug，继续执行剩余条目后再上报
                logger.error(f"执行 limbo 条目失败: {exc}")
                first_error = first_error or exc
            self._notify("reclaim", entry.block, self._deferred_bytes)
        if first_error is not None:
            raise first_error

    def _check_safety(self, entry: LimboEntry, global_epoch: int):
        if global_epoch >= entry.tagged_epoch + 2:
            return
        self.safety_violations += 1
        message = (f"limbo 条目过早回收: block={entry.block}, "
                   f"tag={entry.tagged_epoch}, global={global_epoch}")
        if self.strict_safety:
            raise AssertionError(message)
        logger.error(message)

    def limbo_size(self) -> int:
        with self._limbo_lock:
            return sum(len(bucket) for bucket in self._limbo.values())

    def deferred_bytes(self) -> int:
        return self._deferred_bytes

    def _notify(self, event: str, block: int, deferred: int):
        for listener in self._defer_listeners:
            listener(event, block, deferred)

    # ------------------------------------------------------------------
    # 陷阱与非事务路径
    # ------------------------------------------------------------------

    def trap_hook(self, tx, addr: CellAddr) -> TrapDecision:
        """延迟回收下事务不会访问到已回收的块，陷阱只可能是应用错误"""
        self.trap_stats.record_escalated()
        logger.warning(f"epoch 策略下的访问违例升级为应用错误: {addr} (tx={tx.tx_id})")
        return TrapDecision.escalate(addr)

    def quiescence_barrier(self):
        """
        运行空事务直到全局 epoch 推进两代
        之后屏障之前的私有化内存可以手动释放
        """
        start = self._global_epoch
        self.engine.run_tx(lambda tx: None)
        while self._global_epoch < start + 2:
            self.probe.spin("epoch-barrier")
            self.engine.run_tx(lambda tx: None)

    def shutdown(self):
        """无条件清空 limbo"""
        remaining = self.registered_threads()
        if remaining:
            logger.warning(f"关闭时仍有 {len(remaining)} 个线程注册，强制清空 limbo")
        with self._drain_gate:
            due = self._take_entries(None)
            self._execute(due)
        if due:
            logger.info(f"limbo 已清空，释放 {len(due)} 个内存块")
