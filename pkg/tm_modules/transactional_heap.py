"""
托管事务堆模块
以字（8字节）为粒度的内存单元堆，检测对已释放内存块的访问，
并抛出可恢复的 AccessViolation（段错误的替身）
"""

import itertools
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional

from .errors import (
    AccessViolation,
    DoubleFreeError,
    ExhaustionLimitError,
    UnknownBlockError,
    ZeroSizeError,
)

logger = logging.getLogger(__name__)

WORD_SIZE = 8  # 字长固定为8字节
NIL = 0  # 私有化哨兵，任何编码后的 CellAddr 都不等于它

_OFFSET_BITS = 32
_OFFSET_MASK = (1 << _OFFSET_BITS) - 1


@dataclass(frozen=True, order=True)
class CellAddr:
    """托管堆中的单元地址：内存块 + 块内字偏移"""
    block: int
    offset: int = 0

    def to_word(self) -> int:
        """编码为可存入单元的字（块号从1开始，因此永远不等于 NIL）"""
        return (self.block << _OFFSET_BITS) | self.offset

    @classmethod
    def from_word(cls, word: int) -> 'CellAddr':
        """从字中解码地址"""
        return cls(word >> _OFFSET_BITS, word & _OFFSET_MASK)

    def at(self, offset: int) -> 'CellAddr':
        """同一内存块内的另一个单元"""
        return CellAddr(self.block, offset)

    def __str__(self) -> str:
        return f"{self.block}:{self.offset}"


class BlockState(Enum):
    """内存块状态，Live→Freed 单向转换"""
    LIVE = "live"
    FREED = "freed"


@dataclass
class HeapStats:
    """堆计数器快照"""
    live_bytes: int
    alloc_count: int
    free_count: int
    live_blocks: int


class _Block:
    __slots__ = ("size", "cells")

    def __init__(self, size: int):
        self.size = size
        self.cells: Optional[List[int]] = [NIL] * size


HeapListener = Callable[[str, int, int], None]


class TransactionalHeap:
    """
    托管事务堆

    约定：
    1. BlockId 单调递增且永不复用，释放后的块不保留任何数据
    2. 读写已释放或未知的块抛出 AccessViolation，绝不终止进程
    3. alloc/free/stats 在内部加锁；单元读写依赖列表元素的原子读写
    """

    def __init__(self, capacity_bytes: Optional[int] = None):
        self.capacity_bytes = capacity_bytes

        self._blocks: Dict[int, _Block] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()

        # 计数器
        self._live_bytes = 0
        self._live_blocks = 0
        self._alloc_count = 0
        self._free_count = 0

        # 分配/释放事件监听器（内存采样使用）
        self._listeners: List[HeapListener] = []

    def add_listener(self, listener: HeapListener):
        """注册监听器，参数为 (事件, 块号, 当前live_bytes)，在堆锁内调用"""
        self._listeners.append(listener)

    def remove_listener(self, listener: HeapListener):
        """移除监听器"""
        if listener in self._listeners:
            self._listeners.remove(listener)

    def alloc(self, size: int) -> int:
        """分配 size 个单元，全部初始化为 NIL，返回新的块号"""
        if size < 1:
            raise ZeroSizeError(f"分配大小必须 >= 1, 实际为 {size}")

        nbytes = size * WORD_SIZE
        with self._lock:
            if self.capacity_bytes is not None and self._live_bytes + nbytes > self.capacity_bytes:
                raise ExhaustionLimitError(nbytes, self._live_bytes, self.capacity_bytes)

            block = next(self._ids)
            self._blocks[block] = _Block(size)
            self._live_bytes += nbytes
            self._live_blocks += 1
            self._alloc_count += 1

            for listener in self._listeners:
                listener("alloc", block, self._live_bytes)

        return block

    def free(self, block: int):
        """释放内存块，之后对它的任何访问都会触发访问违例"""
        with self._lock:
            entry = self._blocks.get(block)
            if entry is None:
                raise UnknownBlockError(block)
            if entry.cells is None:
                raise DoubleFreeError(block)

            entry.cells = None
            self._live_bytes -= entry.size * WORD_SIZE
            self._live_blocks -= 1
            self._free_count += 1

            for listener in self._listeners:
                listener("free", block, self._live_bytes)

    def read_cell(self, addr: CellAddr) -> int:
        """读取单元；块已释放、未知或越界时抛出 AccessViolation"""
        entry = self._blocks.get(addr.block)
        cells = entry.cells if entry is not None else None
        if cells is None or not 0 <= addr.offset < len(cells):
            raise AccessViolation(addr)
        return cells[addr.offset]

    def write_cell(self, addr: CellAddr, word: int):
        """写入单元；块已释放、未知或越界时抛出 AccessViolation"""
        entry = self._blocks.get(addr.block)
        cells = entry.cells if entry is not None else None
        if cells is None or not 0 <= addr.offset < len(cells):
            raise AccessViolation(addr)
        cells[addr.offset] = word

    def stats(self) -> HeapStats:
        """计数器的一致快照"""
        with self._lock:
            return HeapStats(
                live_bytes=self._live_bytes,
                alloc_count=self._alloc_count,
                free_count=self._free_count,
                live_blocks=self._live_blocks,
            )

    @property
    def live_bytes(self) -> int:
        return self._live_bytes

    def state(self, block: int) -> BlockState:
        """内存块当前状态"""
        entry = self._blocks.get(block)
        if entry is None:
            raise UnknownBlockError(block)
        return BlockState.LIVE if entry.cells is not None else BlockState.FREED

    def is_live(self, block: int) -> bool:
        entry = self._blocks.get(block)
        return entry is not None and entry.cells is not None

    def block_size(self, block: int) -> int:
        """内存块大小（单元数）"""
        entry = self._blocks.get(block)
        if entry is None:
            raise UnknownBlockError(block)
        return entry.size

    def block_bytes(self, block: int) -> int:
        return self.block_size(block) * WORD_SIZE

    def snapshot(self) -> Dict[CellAddr, int]:
        """所有存活单元的当前内容（调度器记录初始状态使用）"""
        with self._lock:
            result = {}
            for block, entry in self._blocks.items():
                cells = entry.cells
                if cells is None:
                    continue
                for offset, word in enumerate(cells):
                    result[CellAddr(block, offset)] = word
            return result
