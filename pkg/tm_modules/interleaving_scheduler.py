"""
确定性交错调度器
每个逻辑线程运行在自己的真实线程中，但同一时刻只有一个在执行：
线程运行到下一个让出点（或自旋、或结束）后把控制权交回调度器，
调度器按显式的 (线程, 轮次) 序列或随机种子决定下一个轮到谁。
一个有 k 个让出点的线程需要 k+1 个轮次。
"""

import itertools
import logging
import math
import queue
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

from .errors import BoundExceeded, DeadlockDetected
from .instrumentation import Probe, YieldKind, YieldPoint
from .transactional_heap import CellAddr, TransactionalHeap

logger = logging.getLogger(__name__)

ALL_YIELD_KINDS = frozenset(YieldKind)


class _ScheduleCancelled(BaseException):
    """取消调度时注入逻辑线程的异常，不会被 except Exception 吞掉"""


# ---------------------------------------------------------------------------
# 调度、事件与历史
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    """
    调度：显式的 (线程, 轮次数) 序列，或一个随机种子
    显式序列用完后，剩余线程按编号从小到大依次运行至结束
    """
    picks: List[Tuple[int, int]] = field(default_factory=list)
    seed: Optional[int] = None
    meta: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_sequence(cls, sequence: Iterable[int], **meta) -> 'Schedule':
        """把逐轮次的线程序列压缩为 (线程, 轮次数)"""
        picks = [(tid, len(list(group))) for tid, group in itertools.groupby(sequence)]
        return cls(picks=picks, meta={k: str(v) for k, v in meta.items()})

    @classmethod
    def seeded(cls, seed: int, **meta) -> 'Schedule':
        return cls(seed=seed, meta={k: str(v) for k, v in meta.items()})

    def expand(self) -> List[int]:
        return [tid for tid, count in self.picks for _ in range(count)]

    def to_text(self) -> str:
        lines = [f"# {key}={value}" for key, value in sorted(self.meta.items())]
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        lines.extend(f"{tid} {count}" for tid, count in self.picks)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> 'Schedule':
        schedule = cls()
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key == "seed":
                    schedule.seed = int(value)
                else:
                    schedule.meta[key] = value
                continue
            tid, count = line.split()
            schedule.picks.append((int(tid), int(count)))
        return schedule

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Schedule':
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Event:
    """历史中的一个事件，按 index 全序"""
    index: int
    step: int
    thread: Any
    kind: str
    tx: Optional[int] = None
    addr: Optional[CellAddr] = None
    value: Any = None
    detail: Any = None

    def to_text(self) -> str:
        return (f"{self.index} step={self.step} T{self.thread} {self.kind} tx={self.tx} "
                f"addr={self.addr} value={self.value} detail={self.detail}")


@dataclass
class History:
    """一次调度运行的完整记录"""
    events: List[Event] = field(default_factory=list)
    picks: List[int] = field(default_factory=list)
    yields: List[YieldPoint] = field(default_factory=list)
    initial: Dict[CellAddr, int] = field(default_factory=dict)
    errors: Dict[int, str] = field(default_factory=dict)
    turns: Dict[int, int] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict, repr=False)

    def of_kind(self, kind: str) -> List[Event]:
        return [event for event in self.events if event.kind == kind]

    def schedule(self, **meta) -> Schedule:
        """实际执行过的轮次序列（可用于回放）"""
        return Schedule.from_sequence(self.picks, **meta)

    def to_text(self) -> str:
        lines = [f"picks {' '.join(map(str, self.picks))}"]
        lines.extend(f"init {addr}={word}" for addr, word in sorted(self.initial.items()))
        lines.extend(event.to_text() for event in self.events)
        lines.extend(f"error T{tid} {message}" for tid, message in sorted(self.errors.items()))
        return "\n".join(lines) + "\n"


@dataclass
class ProgramInstance:
    """
    一个可调度程序的实例

    threads: 逻辑线程的入口函数，线程编号即列表下标
    verify: 运行结束后对历史和最终状态的检查，失败时抛出 AssertionError
    """
    threads: List[Callable[[], Any]]
    heap: TransactionalHeap
    engine: Any = None
    verify: Optional[Callable[[History], None]] = None
    meta: Dict[str, Any] = field(default_factory=dict)


Program = Callable[[Probe], ProgramInstance]


# ---------------------------------------------------------------------------
# 调度探针与逻辑线程
# ---------------------------------------------------------------------------

class ScheduledProbe(Probe):
    """调度模式探针：逻辑线程编号、可控让出、事件记录、逻辑时钟"""

    recording = True

    def __init__(self, run: '_ScheduleRun'):
        self._run = run

    def thread_id(self):
        tid = self._run.current_tid()
        return "main" if tid is None else tid

    def yield_point(self, kind: YieldKind):
        self._run.on_yield(kind)

    def spin(self, reason: str):
        self._run.on_spin(reason)

    def backoff(self, seconds: float):
        pass

    def record(self, kind: str, tx: Optional[int] = None, addr: Any = None,
               value: Any = None, detail: Any = None):
        self._run.record(kind, tx, addr, value, detail)

    def now_ns(self) -> int:
        return self._run.tick()


class _Conductor:
    """主线程与逻辑线程之间的双向交接（两个容量为1的队列）"""

    def __init__(self):
        self._notify = queue.Queue(1)
        self._go = queue.Queue(1)

    def notify(self):
        self._notify.put(None)

    def standby(self):
        self._go.get()

    def wait(self):
        self._notify.get()

    def go(self):
        self._go.put(None)


class _LogicalThread:

    def __init__(self, tid: int, target: Callable[[], Any], run: '_ScheduleRun'):
        self.tid = tid
        self.target = target
        self.run = run
        self.conductor = _Conductor()
        self.thread: Optional[threading.Thread] = None
        self.finished = False
        self.blocked: Optional[str] = None
        self.turns = 0
        self.yield_seq = 0

    def _main(self):
        self.run.local.tid = self.tid
        try:
            self.target()
        except _ScheduleCancelled:
            pass
        except Exception as exc:
            self.run.history.errors[self.tid] = f"{type(exc).__name__}: {exc}"
            logger.debug(f"逻辑线程 T{self.tid} 异常结束: {exc}")
        finally:
            self.finished = True
            self.blocked = None
            self.conductor.notify()

    def go(self):
        if self.thread is None:
            self.thread = threading.Thread(target=self._main, name=f"logical-{self.tid}", daemon=True)
            self.thread.start()
        else:
            self.conductor.go()
        self.conductor.wait()


class _ScheduleRun:
    """一次调度运行的全部状态"""

    def __init__(self, active_kinds: Set[YieldKind], max_steps: Optional[int]):
        self.active_kinds = active_kinds
        self.max_steps = max_steps
        self.local = threading.local()
        self.history = History()
        self.threads: List[_LogicalThread] = []
        self.step = 0
        self.cancelled = False
        self._ticks = 0

    # 逻辑线程侧 ---------------------------------------------------------

    def current_tid(self) -> Optional[int]:
        return getattr(self.local, 'tid', None)

    def on_yield(self, kind: YieldKind):
        tid = self.current_tid()
        if tid is None or kind not in self.active_kinds:
            return
        thread = self.threads[tid]
        self.history.yields.append(YieldPoint(kind, tid, thread.yield_seq))
        thread.yield_seq += 1
        self._pause(thread, None)

    def on_spin(self, reason: str):
        tid = self.current_tid()
        if tid is None:
            return
        self._pause(self.threads[tid], reason)

    def _pause(self, thread: _LogicalThread, blocked: Optional[str]):
        if self.cancelled:
            raise _ScheduleCancelled()
        thread.blocked = blocked
        thread.conductor.notify()
        thread.conductor.standby()
        if self.cancelled:
            raise _ScheduleCancelled()

    def record(self, kind, tx, addr, value, detail):
        tid = self.current_tid()
        if tid is None:
            return
        self.history.events.append(
            Event(len(self.history.events), self.step, tid, kind, tx, addr, value, detail)
        )

    def tick(self) -> int:
        self._ticks += 1
        return self._ticks * 1000

    # 调度器侧 -----------------------------------------------------------

    def unfinished(self) -> List[_LogicalThread]:
        return [thread for thread in self.threads if not thread.finished]

    def turn(self, tid: int):
        thread = self.threads[tid]
        if thread.finished:
            return
        self.step += 1
        if self.max_steps is not None and self.step > self.max_steps:
            raise BoundExceeded(f"调度步数超过上限 {self.max_steps}")

        self.history.picks.append(tid)
        thread.turns += 1
        thread.go()

        if thread.blocked is None:
            # 有进展的一步之后，其他线程的自旋条件可能已满足
            for other in self.threads:
                other.blocked = None

        waiting = self.unfinished()
        if waiting and all(t.blocked is not None for t in waiting):
            raise DeadlockDetected({t.tid: t.blocked for t in waiting})

    def next_leftover(self) -> int:
        waiting = self.unfinished()
        runnable = [t for t in waiting if t.blocked is None]
        return (runnable or waiting)[0].tid

    def cancel(self):
        self.cancelled = True
        for thread in self.threads:
            if thread.thread is not None and not thread.finished:
                thread.conductor.go()
                thread.conductor.wait()
        for thread in self.threads:
            if thread.thread is not None:
                thread.thread.join()


# ---------------------------------------------------------------------------
# 调度器
# ---------------------------------------------------------------------------

class InterleavingScheduler:
    """
    确定性交错调度器

    Args:
        active_kinds: 生效的让出点类型，默认全部六种；自旋总是让出
        max_steps: 单次运行的轮次上限，None 表示不限
    """

    def __init__(self, active_kinds: Optional[Iterable[YieldKind]] = None,
                 max_steps: Optional[int] = 100_000):
        self.active_kinds = set(active_kinds) if active_kinds is not None else set(ALL_YIELD_KINDS)
        self.max_steps = max_steps

    def run_schedule(self, program: Program, schedule: Union[Schedule, int, None] = None,
                     verify: bool = True) -> History:
        """
        按调度运行程序

        Args:
            program: 接收探针、返回 ProgramInstance 的工厂
            schedule: Schedule、随机种子或 None（串行执行）
            verify: 是否执行程序自带的检查

        Returns:
            本次运行的历史
        """
        if schedule is None:
            schedule = Schedule()
        elif isinstance(schedule, int):
            schedule = Schedule.seeded(schedule)

        run = _ScheduleRun(self.active_kinds, self.max_steps)
        probe = ScheduledProbe(run)
        instance = program(probe)
        run.history.initial = instance.heap.snapshot()
        run.threads = [_LogicalThread(tid, target, run) for tid, target in enumerate(instance.threads)]

        try:
            for tid in schedule.expand():
                if 0 <= tid < len(run.threads):
                    run.turn(tid)

            if schedule.seed is not None:
                rng = random.Random(schedule.seed)
                while run.unfinished():
                    waiting = run.unfinished()
                    runnable = [t for t in waiting if t.blocked is None] or waiting
                    run.turn(rng.choice(runnable).tid)

            while run.unfinished():
                run.turn(run.next_leftover())
        finally:
            run.cancel()

        run.history.turns = {thread.tid: thread.turns for thread in run.threads}
        run.history.meta = dict(instance.meta)
        if instance.engine is not None:
            run.history.meta['stats'] = instance.engine.stats()
        if verify and instance.verify is not None:
            instance.verify(run.history)
        return run.history

    def count_turns(self, program: Program) -> List[int]:
        """串行执行时每个线程所需的轮次数"""
        history = self.run_schedule(program, Schedule(), verify=False)
        return [history.turns[tid] for tid in sorted(history.turns)]

    def enumerate_schedules(self, program: Program, bound: int = 12) -> Iterator[History]:
        """
        穷举所有交错

        先串行运行一次得到每个线程的轮次数，再遍历该多重集的全部不同排列；
        总轮次超过 bound 时抛出 BoundExceeded

        只对串行运行的轮次前缀穷举：某个交错因重试或自旋多出的轮次
        不再分叉，而是按编号最小的未阻塞线程优先依次执行
        """
        counts = self.count_turns(program)
        total = sum(counts)
        if total > bound:
            raise BoundExceeded(f"总让出点数 {total} 超过上限 {bound}")

        sequence = [tid for tid, count in enumerate(counts) for _ in range(count)]
        logger.debug(f"枚举 {len(DistinctPermutations(sequence))} 种交错，轮次数 {counts}")
        for ordering in DistinctPermutations(sequence):
            yield self.run_schedule(program, Schedule.from_sequence(ordering))


class DistinctPermutations:
    """
    多重集的全部不同排列（字典序生成）
    数量为 N! / n1! / n2! / ... / nk!
    """

    def __init__(self, sequence: Sequence[int]):
        self._start = tuple(sorted(sequence))

    def __len__(self) -> int:
        return multinomial([len(list(group)) for _, group in itertools.groupby(self._start)])

    def __iter__(self) -> Iterator[Tuple[int, ...]]:
        current = list(self._start)
        size = len(current)
        while True:
            yield tuple(current)
            # 1. 找到最大的 i 使 a[i] < a[i+1]
            for i in range(size - 2, -1, -1):
                if current[i] < current[i + 1]:
                    break
            else:
                return
            # 2. 找到最大的 j > i 使 a[i] < a[j]
            for j in range(size - 1, i, -1):
                if current[i] < current[j]:
                    break
            # 3. 交换后反转 i 之后的部分
            current[i], current[j] = current[j], current[i]
            current = current[: i + 1] + list(reversed(current[i + 1:]))


def multinomial(counts: Sequence[int]) -> int:
    """多项式系数 (Σn)! / Π(n!)"""
    result = math.factorial(sum(counts))
    for count in counts:
        result //= math.factorial(count)
    return result
