"""
消息队列基准测试模块
多个线程通过共享单链表 FIFO 快速交换消息：
生产者在事务中分配消息块并挂到队尾，消费者在事务中摘下队头（私有化）并释放
"""

import logging
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Tuple

from config import DEFAULT_CONFIG, TMLabConfig

from .engine_factory import Engine, EngineFactory, split_engine_id
from .errors import ConfigError, QueueIntegrityError, WorkloadLeakError
from .instrumentation import Probe
from .interleaving_scheduler import InterleavingScheduler, ProgramInstance, Schedule
from .memory_metrics import MemorySampler, MetricsTrace, compute_mbar
from .transactional_heap import NIL, CellAddr

logger = logging.getLogger(__name__)

# 队列根块布局
HEAD, TAIL, LEN = 0, 1, 2
ROOT_CELLS = 3

# 消息块布局：[next, tag, payload...]
NEXT, TAG = 0, 1

RECLAIM_MODES = ("in_tx", "after_tx")


@dataclass
class QueueWorkloadConfig:
    """队列工作负载配置"""
    producers: int = 1
    consumers: int = 1
    messages_per_producer: int = 10
    payload_cells: int = 8
    queue_capacity: int = 64
    stalled_threads: int = 0
    reclaim_mode: str = "in_tx"
    seed: Optional[int] = None  # 非 None 时在交错调度器下运行

    def __post_init__(self):
        if self.producers < 1:
            raise ConfigError("--producers", "至少需要1个生产者")
        if self.consumers < 1:
            raise ConfigError("--consumers", "至少需要1个消费者")
        if self.payload_cells < 1:
            raise ConfigError("--payload-cells", "payload_cells 必须 >= 1")
        if self.messages_per_producer < 0:
            raise ConfigError("--messages", "消息数不能为负")
        if self.queue_capacity < 1:
            raise ConfigError("--queue-capacity", "队列容量必须 >= 1")
        if self.stalled_threads < 0:
            raise ConfigError("--stalled-threads", "停滞线程数不能为负")
        if self.reclaim_mode not in RECLAIM_MODES:
            raise ConfigError("--reclaim-mode", f"可选: {', '.join(RECLAIM_MODES)}")

    @property
    def total_messages(self) -> int:
        return self.producers * self.messages_per_producer

    @property
    def threads(self) -> int:
        return self.producers + self.consumers


@dataclass
class RunSummary:
    """单次运行的汇总"""
    engine: str
    threads: int
    exec_time_ms: float
    m_max: int
    m_bar: float
    commits: int
    aborts: int
    validations: int
    traps: int
    escalations: int
    retries: int = 0
    messages: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class QueueRun:
    """一次运行的共享状态与线程函数"""

    def __init__(self, cfg: QueueWorkloadConfig, engine: Engine):
        self.cfg = cfg
        self.engine = engine
        self.heap = engine.heap
        self.strategy = getattr(engine, 'strategy', None)

        self.root = CellAddr(self.heap.alloc(ROOT_CELLS), 0)
        self.baseline_bytes = self.heap.live_bytes

        self.produced: List[List[int]] = [[] for _ in range(cfg.producers)]
        self.consumed: List[List[int]] = [[] for _ in range(cfg.consumers)]
        self.errors: List[BaseException] = []
        self.failed = threading.Event()

        self._lock = threading.Lock()
        self._consumed_total = 0

        self.stalled = [f"stalled-{i}" for i in range(cfg.stalled_threads)]
        if self.strategy is not None:
            for thread in self.stalled:
                self.strategy.register_thread(thread)

    # 事务体 -------------------------------------------------------------

    def enqueue(self, tx, tag: int) -> bool:
        length = tx.read(self.root.at(LEN))
        if length >= self.cfg.queue_capacity:
            return False
        node = tx.alloc(1 + self.cfg.payload_cells)
        tx.write(node.at(TAG), tag)
        tail = tx.read_ref(self.root.at(TAIL))
        if tail is None:
            tx.write_ref(self.root.at(HEAD), node)
        else:
            tx.write_ref(tail.at(NEXT), node)
        tx.write_ref(self.root.at(TAIL), node)
        tx.write(self.root.at(LEN), length + 1)
        return True

    def dequeue(self, tx) -> Optional[Tuple[int, int]]:
        """读队头、判空、重新链接（私有化），in_tx 模式下同时请求释放"""
        head = tx.read_ref(self.root.at(HEAD))
        if head is None:
            return None
        next_word = tx.read(head.at(NEXT))
        tag = tx.read(head.at(TAG))
        length = tx.read(self.root.at(LEN))
        tx.write(self.root.at(HEAD), next_word)
        if next_word == NIL:
            tx.write(self.root.at(TAIL), NIL)
        tx.write(self.root.at(LEN), length - 1)
        if self.cfg.reclaim_mode == "in_tx":
            tx.free(head)
        return head.block, tag

    # 线程函数 -----------------------------------------------------------

    def _guarded(self, worker: Callable[[], None]):
        try:
            worker()
        except Exception as exc:
            self.errors.append(exc)
            self.failed.set()
            logger.error(f"工作线程失败: {type(exc).__name__}: {exc}")
        finally:
            self.engine.release_thread()

    def producer(self, pid: int):
        self._guarded(partial(self._produce, pid))

    def consumer(self, cid: int):
        self._guarded(partial(self._consume, cid))

    def _produce(self, pid: int):
        base = pid * self.cfg.messages_per_producer
        for seq in range(self.cfg.messages_per_producer):
            tag = base + seq + 1
            while not self.engine.run_tx(lambda tx: self.enqueue(tx, tag)).result:
                if self.failed.is_set():
                    return
                self.engine.probe.spin("queue-full")
            self.produced[pid].append(tag)

    def _consume(self, cid: int):
        while not self.failed.is_set() and not self._all_consumed():
            taken = self.engine.run_tx(self.dequeue).result
            if taken is None:
                self.engine.probe.spin("queue-empty")
                continue
            block, tag = taken
            if self.cfg.reclaim_mode == "after_tx":
                self._reclaim_after_tx(block)
            self.consumed[cid].append(tag)
            with self._lock:
                self._consumed_total += 1

    def _reclaim_after_tx(self, block: int):
        """事务外释放已私有化的消息块（epoch 策略需要先通过静默屏障）"""
        if self.strategy is not None and self.strategy.requires_quiescence:
            self.engine.quiescence_barrier()
        self.engine.nontx_free(block)

    def _all_consumed(self) -> bool:
        with self._lock:
            return self._consumed_total >= self.cfg.total_messages

    def thread_targets(self) -> List[Callable[[], None]]:
        return ([partial(self.producer, p) for p in range(self.cfg.producers)]
                + [partial(self.consumer, c) for c in range(self.cfg.consumers)])

    # 收尾 ---------------------------------------------------------------

    def check_integrity(self):
        produced = Counter(tag for tags in self.produced for tag in tags)
        consumed = Counter(tag for tags in self.consumed for tag in tags)
        expected = Counter(range(1, self.cfg.total_messages + 1))
        if produced != expected:
            raise QueueIntegrityError(f"生产的消息不完整: 缺少 {sorted((expected - produced).elements())[:10]}")
        if consumed != produced:
            missing = sorted((produced - consumed).elements())[:10]
            duplicated = sorted((consumed - produced).elements())[:10]
            raise QueueIntegrityError(f"消费多重集不一致: 丢失 {missing}, 重复 {duplicated}")

    def teardown(self):
        """注销停滞线程、强制静默后检查泄漏并释放根块"""
        if self.strategy is not None:
            for thread in self.stalled:
                self.strategy.deregister_thread(thread)
        self.engine.shutdown()

        live = self.heap.live_bytes
        if live != self.baseline_bytes:
            raise WorkloadLeakError(live, self.baseline_bytes)
        self.heap.free(self.root.block)


class QueueBenchmark:
    """
    队列基准测试

    Args:
        cfg: 工作负载配置
        engine_id: norec-epoch / norec-trap / cgl
        lab_config: 引擎与采样相关的全局配置
    """

    def __init__(self, cfg: QueueWorkloadConfig, engine_id: str,
                 lab_config: Optional[TMLabConfig] = None):
        split_engine_id(engine_id)
        self.cfg = cfg
        self.engine_id = engine_id
        self.lab_config = lab_config or DEFAULT_CONFIG
        self.factory = EngineFactory(self.lab_config)

        if (engine_id == "norec-epoch" and cfg.reclaim_mode == "after_tx"
                and cfg.stalled_threads > 0):
            raise ConfigError("--stalled-threads", "停滞线程会让 epoch 静默屏障永远无法完成")

    def run(self) -> Tuple[MetricsTrace, RunSummary]:
        """运行一次工作负载，返回 (内存轨迹, 汇总)"""
        if self.cfg.seed is None:
            run, trace = self._run_threads()
        else:
            run, trace = self._run_scheduled()

        if run.errors:
            raise run.errors[0]
        run.check_integrity()
        run.teardown()

        summary = self._summarize(run.engine, trace)
        logger.info(f"{self.engine_id} 运行完成: exec={summary.exec_time_ms:.2f}ms, "
                    f"m_max={summary.m_max}, m_bar={summary.m_bar:.1f}")
        return trace, summary

    def _prepare(self, probe: Optional[Probe], use_timer: bool) -> Tuple[QueueRun, MemorySampler]:
        engine = self.factory.create(self.engine_id, probe=probe)
        run = QueueRun(self.cfg, engine)
        clock = engine.probe.now_ns if probe is not None else time.perf_counter_ns
        sampler = MemorySampler(
            engine.heap,
            strategy=run.strategy,
            clock=clock,
            interval_s=self.lab_config.sample_interval_s,
            use_timer=use_timer,
        )
        return run, sampler

    def _run_threads(self) -> Tuple[QueueRun, MetricsTrace]:
        run, sampler = self._prepare(None, use_timer=True)
        threads = [threading.Thread(target=target, name=f"queue-worker-{i}")
                   for i, target in enumerate(run.thread_targets())]

        sampler.start()
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        return run, sampler.stop()

    def _run_scheduled(self) -> Tuple[QueueRun, MetricsTrace]:
        holder: Dict[str, Any] = {}

        def program(probe: Probe) -> ProgramInstance:
            run, sampler = self._prepare(probe, use_timer=False)
            sampler.start()
            holder['run'], holder['sampler'] = run, sampler
            return ProgramInstance(run.thread_targets(), run.heap, run.engine)

        scheduler = InterleavingScheduler(max_steps=None)
        scheduler.run_schedule(program, Schedule.seeded(self.cfg.seed))
        return holder['run'], holder['sampler'].stop()

    def _summarize(self, engine: Engine, trace: MetricsTrace) -> RunSummary:
        stats = engine.stats()
        return RunSummary(
            engine=self.engine_id,
            threads=self.cfg.threads,
            exec_time_ms=(trace.t_end - trace.t_start) / 1e6,
            m_max=trace.m_max,
            m_bar=compute_mbar(trace),
            commits=stats['commits'],
            aborts=stats['aborts'],
            validations=stats['validations'],
            traps=stats['traps_total'],
            escalations=stats['escalations'],
            retries=stats['retries'],
            messages=self.cfg.total_messages,
            config=asdict(self.cfg),
        )


def run_queue_workload(cfg: QueueWorkloadConfig, engine_id: str,
                       lab_config: Optional[TMLabConfig] = None) -> Tuple[MetricsTrace, RunSummary]:
    """便捷函数：运行一次队列工作负载"""
    return QueueBenchmark(cfg, engine_id, lab_config).run()
