"""
基于陷阱的直接回收策略
提交时立即释放；事务内的访问违例通过提交计数器区分冲突与应用错误：
计数器自上次验证以来变化过 → 先当作冲突回滚重试；
计数器未变化 → 读集合有效，升级为应用错误
"""

import logging
from typing import List

from .errors import AccessViolation, TMLabError
from .reclamation_strategy import GuardedRead, ReclamationStrategy, TrapDecision
from .transactional_heap import CellAddr

logger = logging.getLogger(__name__)


class TrapReclamation(ReclamationStrategy):
    """陷阱回收策略：没有任何延迟结构，deferred_bytes 恒为0"""

    name = "trap"

    def __init__(self, trap_ceiling: int = 1000, debug_checks: bool = True):
        super().__init__()
        self.trap_ceiling = trap_ceiling
        self.debug_checks = debug_checks

    def commit_hook(self, free_log: List[int]):
        first_error = None
        for block in free_log:
            try:
                self.engine.release_block(block)
            except TMLabError as exc:
                logger.error(f"提交时释放失败: {exc}")
                first_error = first_error or exc
        if first_error is not None:
            raise first_error

    def trap_hook(self, tx, addr: CellAddr) -> TrapDecision:
        """
        陷阱处理

        Args:
            tx: 触发访问违例的事务
            addr: 违例地址

        Returns:
            RollbackRetry 或 Escalate(addr)
        """
        clock_moved = self.engine.clock.read() != tx.snapshot

        if clock_moved and tx.traps < self.trap_ceiling:
            self.trap_stats.record_recovered()
            logger.debug(f"事务 {tx.tx_id} 在 {addr} 陷入，计数器已变化，回滚重试")
            return TrapDecision.rollback_retry()

        if clock_moved:
            logger.warning(f"事务 {tx.tx_id} 陷阱次数达到上限 {self.trap_ceiling}，强制升级")
        elif (self.debug_checks and not self.engine.read_set_still_valid(tx)
              and self.engine.clock.read() == tx.snapshot):
            # 计数器未变化时读集合必然有效
            raise AssertionError(f"升级时读集合无效: tx={tx.tx_id}, addr={addr}")

        self.trap_stats.record_escalated()
        logger.warning(f"访问违例升级为应用错误: {addr} (tx={tx.tx_id}, 第{tx.traps}次陷阱)")
        return TrapDecision.escalate(addr)

    def nontx_read(self, addr: CellAddr):
        """受保护的非事务读取：命中已私有化的块时返回 PRIVATIZED"""
        try:
            return self.heap.read_cell(addr)
        except AccessViolation:
            self.trap_stats.record_recovered()
            logger.debug(f"非事务读取命中已释放块 {addr}")
            return GuardedRead.PRIVATIZED
