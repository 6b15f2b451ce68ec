"""
不透明性检查模块
对调度历史做暴力搜索：寻找已提交事务的一个串行顺序，使每个已提交事务的读
都来自它之前的状态，且每个中止事务的读都来自该顺序某个前缀之后的同一个状态。
只检查"读自同一个一致状态"，不裁决实时顺序约束。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .errors import SearchExplosion
from .interleaving_scheduler import History
from .transactional_heap import NIL, CellAddr

logger = logging.getLogger(__name__)

State = Dict[CellAddr, int]


@dataclass
class TxRecord:
    """从历史中提取出的一个事务"""
    tx: int
    thread: object
    reads: List[Tuple[CellAddr, int]] = field(default_factory=list)
    writes: Dict[CellAddr, int] = field(default_factory=dict)
    status: str = "active"

    @property
    def is_empty(self) -> bool:
        return not self.reads and not self.writes


@dataclass
class OpacityVerdict:
    passed: bool
    order: List[int] = field(default_factory=list)
    witness: Optional[str] = None

    def __bool__(self) -> bool:
        return self.passed


def extract_transactions(history: History) -> List[TxRecord]:
    """按事务编号聚合 begin/read/write/commit/abort 事件"""
    records: Dict[int, TxRecord] = {}
    for event in history.events:
        if event.tx is None:
            continue
        record = records.get(event.tx)
        if record is None:
            record = records[event.tx] = TxRecord(event.tx, event.thread)

        if event.kind == "read" and event.detail != "local":
            record.reads.append((event.addr, event.value))
        elif event.kind == "write":
            record.writes[event.addr] = event.value
        elif event.kind == "commit":
            record.status = "committed"
        elif event.kind == "abort":
            record.status = "aborted"

    return [records[tx] for tx in sorted(records)]


class OpacityChecker:
    """
    暴力不透明性检查器

    Args:
        max_committed: 参与排列的已提交事务数上限，超过时抛出 SearchExplosion
    """

    def __init__(self, max_committed: int = 8):
        self.max_committed = max_committed

    def check(self, history: History) -> OpacityVerdict:
        records = [r for r in extract_transactions(history) if not r.is_empty]
        committed = [r for r in records if r.status == "committed"]
        others = [r for r in records if r.status != "committed"]

        if len(committed) > self.max_committed:
            raise SearchExplosion(f"已提交事务数 {len(committed)} 超过上限 {self.max_committed}")

        initial = history.initial
        self._deepest: List[int] = []
        self._blocked_by: Optional[str] = None

        order = self._search(initial, {}, committed, [], [{}], others)
        if order is not None:
            return OpacityVerdict(True, order)

        witness = self._blocked_by or "不存在解释全部读操作的串行顺序"
        logger.debug(f"不透明性检查失败: {witness}")
        return OpacityVerdict(False, self._deepest, witness)

    def _search(self, initial: State, state: State, remaining: List[TxRecord],
                order: List[int], prefixes: List[State], others: List[TxRecord]) -> Optional[List[int]]:
        if len(order) > len(self._deepest):
            self._deepest = list(order)

        if not remaining:
            for record in others:
                if not any(self._consistent(initial, prefix, record.reads) for prefix in prefixes):
                    self._blocked_by = (f"中止事务 tx={record.tx} 的读 {self._format(record.reads)} "
                                        f"不来自顺序 {order} 的任何前缀状态")
                    return None
            return list(order)

        for i, record in enumerate(remaining):
            if not self._consistent(initial, state, record.reads):
                continue
            next_state = dict(state)
            next_state.update(record.writes)
            result = self._search(initial, next_state, remaining[:i] + remaining[i + 1:],
                                  order + [record.tx], prefixes + [next_state], others)
            if result is not None:
                return result

        if remaining and self._blocked_by is None:
            stuck = ", ".join(f"tx={r.tx} 读 {self._format(r.reads)}" for r in remaining)
            self._blocked_by = f"顺序 {order} 之后无法放置: {stuck}"
        return None

    @staticmethod
    def _consistent(initial: State, state: State, reads: List[Tuple[CellAddr, int]]) -> bool:
        for addr, value in reads:
            current = state[addr] if addr in state else initial.get(addr, NIL)
            if current != value:
                return False
        return True

    @staticmethod
    def _format(reads: List[Tuple[CellAddr, int]]) -> str:
        return "{" + ", ".join(f"{addr}={value}" for addr, value in reads) + "}"


def check_opacity(history: History, max_committed: int = 8) -> OpacityVerdict:
    """便捷函数"""
    return OpacityChecker(max_committed).check(history)
