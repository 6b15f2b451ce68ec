"""
内存指标模块
m(t) 采样轨迹、峰值 m_max 与按执行时间归一化的平均内存 M̄（阶梯函数积分）
"""

import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import DegenerateRunError, MissingTraceError
from .transactional_heap import TransactionalHeap

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["t_ns", "m_bytes"]


@dataclass(frozen=True)
class MemorySample:
    t_ns: int
    m_bytes: int


class MetricsTrace:
    """
    内存轨迹
    时间戳严格递增：与上一个样本相同或更早的时间戳被推后1ns
    """

    def __init__(self):
        self._t: List[int] = []
        self._m: List[int] = []
        self._lock = threading.Lock()
        self.t_start: Optional[int] = None
        self.t_end: Optional[int] = None

    @classmethod
    def from_samples(cls, samples: List[Tuple[int, int]], t_end: Optional[int] = None) -> 'MetricsTrace':
        """
        由 (t, m) 列表构建轨迹

        Args:
            samples: 样本列表，第一个样本即 t_start
            t_end: 运行结束时间；给出时追加一个 m 与最后样本相同的结束样本
        """
        trace = cls()
        for t, m in samples:
            trace.append(t, m)
        if t_end is not None and trace._t and t_end > trace._t[-1]:
            trace.append(t_end, trace._m[-1])
        trace.t_end = trace._t[-1] if trace._t else None
        return trace

    def append(self, t_ns: int, m_bytes: int) -> int:
        with self._lock:
            if self._t and t_ns <= self._t[-1]:
                t_ns = self._t[-1] + 1
            self._t.append(t_ns)
            self._m.append(m_bytes)
            if self.t_start is None:
                self.t_start = t_ns
            return t_ns

    def close(self, t_ns: int, m_bytes: int):
        """追加结束样本"""
        self.t_end = self.append(t_ns, m_bytes)

    def __len__(self) -> int:
        return len(self._t)

    @property
    def samples(self) -> List[MemorySample]:
        with self._lock:
            return [MemorySample(t, m) for t, m in zip(self._t, self._m)]

    @property
    def m_max(self) -> int:
        if not self._m:
            raise MissingTraceError("轨迹为空")
        return int(np.max(np.asarray(self._m, dtype=np.int64)))

    def to_frame(self) -> pd.DataFrame:
        with self._lock:
            return pd.DataFrame({
                "t_ns": np.asarray(self._t, dtype=np.int64),
                "m_bytes": np.asarray(self._m, dtype=np.int64),
            }, columns=TRACE_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'MetricsTrace':
        samples = [(int(t), int(m)) for t, m in zip(frame["t_ns"], frame["m_bytes"])]
        return cls.from_samples(samples)


def compute_mbar(trace: MetricsTrace) -> float:
    """
    平均内存：Σ m(t_i)·(t_{i+1} − t_i) / (t_end − t_start)
    m 在样本之间右连续；积分用 Python 整数精确计算
    """
    samples = trace.samples
    if not samples:
        raise MissingTraceError("轨迹为空，无法计算平均内存")

    t_start = samples[0].t_ns
    t_end = trace.t_end if trace.t_end is not None else samples[-1].t_ns
    if t_end <= t_start:
        raise DegenerateRunError(f"t_end ({t_end}) 与 t_start ({t_start}) 相等")

    integral = 0
    for current, following in zip(samples, samples[1:]):
        integral += current.m_bytes * (following.t_ns - current.t_ns)
    last = samples[-1]
    if t_end > last.t_ns:
        integral += last.m_bytes * (t_end - last.t_ns)

    return integral / (t_end - t_start)


class MemorySampler:
    """
    内存采样器
    每次分配/释放/延迟事件采样一次，另有固定间隔的定时器兜底

    Args:
        heap: 被测托管堆
        strategy: 回收策略（延迟事件来源），可为 None
        clock: 纳秒时钟，调度模式下传入逻辑时钟
        interval_s: 定时采样间隔
        use_timer: 是否启动定时采样线程
    """

    def __init__(self, heap: TransactionalHeap, strategy=None,
                 clock: Callable[[], int] = time.perf_counter_ns,
                 interval_s: float = 1e-3, use_timer: bool = True):
        self.heap = heap
        self.strategy = strategy
        self.clock = clock
        self.interval_s = interval_s
        self.use_timer = use_timer

        self.trace = MetricsTrace()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._timer: Optional[threading.Thread] = None

    def measure(self) -> int:
        # limbo 中的块仍处于 Live 状态，live_bytes 已包含延迟回收的字节
        return self.heap.live_bytes

    def sample(self, m_bytes: Optional[int] = None):
        with self._lock:
            self.trace.append(self.clock(), self.measure() if m_bytes is None else m_bytes)

    def _on_heap_event(self, event: str, block: int, live_bytes: int):
        self.sample(live_bytes)

    def _on_defer_event(self, event: str, block: int, deferred_bytes: int):
        self.sample()

    def _timer_loop(self):
        while not self._stop.wait(self.interval_s):
            self.sample()

    def start(self):
        self.sample()
        self.heap.add_listener(self._on_heap_event)
        if self.strategy is not None:
            self.strategy.add_defer_listener(self._on_defer_event)
        if self.use_timer:
            self._timer = threading.Thread(target=self._timer_loop, name="memory-sampler", daemon=True)
            self._timer.start()

    def stop(self) -> MetricsTrace:
        self._stop.set()
        if self._timer is not None:
            self._timer.join()
        self.heap.remove_listener(self._on_heap_event)
        if self.strategy is not None:
            self.strategy.remove_defer_listener(self._on_defer_event)
        with self._lock:
            self.trace.close(self.clock(), self.measure())
        return self.trace
