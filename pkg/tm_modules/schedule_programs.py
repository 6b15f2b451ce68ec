"""
调度微程序与回归套件
每个微程序是一个 (探针) -> ProgramInstance 的工厂，
回归套件用固定调度和穷举交错运行它们，并用不透明性检查器验证历史
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

from config import DEFAULT_CONFIG, TMLabConfig

from .engine_factory import ENGINE_IDS, build_engine
from .errors import TMLabError
from .instrumentation import Probe, YieldKind
from .interleaving_scheduler import (
    DistinctPermutations,
    History,
    InterleavingScheduler,
    Program,
    ProgramInstance,
    Schedule,
)
from .opacity_checker import check_opacity
from .queue_benchmark import HEAD, LEN, NEXT, TAG, QueueRun, QueueWorkloadConfig
from .transactional_heap import NIL, CellAddr

logger = logging.getLogger(__name__)

READER, WRITER, TICKER = 0, 1, 2
PAYLOAD = 42
WILD_ADDR = CellAddr(1 << 20, 0)  # 从未分配过的块

# 读者在第二个 PreCellAccess 处暂停；对已结束线程的多余轮次不计数
FLAGSHIP_SCHEDULE = [(READER, 2), (WRITER, 16), (TICKER, 32)]
PRIVATIZE_SCHEDULE = [(READER, 2), (WRITER, 16)]
WILD_SCHEDULE = [(READER, 1), (WRITER, 16)]

# 队列微程序只在单元访问前让出，使总轮次不超过12
MICRO_YIELD_KINDS = frozenset({YieldKind.PRE_CELL_ACCESS})


def _assert_opaque(history: History):
    verdict = check_opacity(history)
    assert verdict.passed, f"不透明性检查失败: {verdict.witness}"


def _error_kinds(history: History) -> Dict[int, str]:
    return {tid: message.split(":", 1)[0] for tid, message in history.errors.items()}


class _SharedPointerSetup:
    """共享指针 H -> 消息块 M 的初始堆状态（直接在堆上构建）"""

    def __init__(self, engine, threads: Iterable[int]):
        self.engine = engine
        heap = engine.heap
        self.shared = CellAddr(heap.alloc(1), 0)
        self.message = CellAddr(heap.alloc(2), 0)
        self.counter = CellAddr(heap.alloc(1), 0)
        heap.write_cell(self.message, PAYLOAD)
        heap.write_cell(self.shared, self.message.to_word())

        self.observed: Dict[str, object] = {}
        strategy = getattr(engine, 'strategy', None)
        if strategy is not None:
            for tid in threads:
                strategy.register_thread(tid)

    def read_through(self, tx):
        ref = tx.read_ref(self.shared)
        if ref is None:
            return None
        return tx.read(ref)

    def reader(self):
        outcome = self.engine.run_tx(self.read_through)
        self.observed['value'] = outcome.result
        self.observed['retries'] = outcome.retries
        self.engine.release_thread()

    def privatize(self, tx):
        ref = tx.read_ref(self.shared)
        if ref is not None:
            tx.write_ref(self.shared, None)
        return ref

    def ticker(self, commits: int = 2):
        for _ in range(commits):
            self.engine.run_tx(lambda tx: tx.write(self.counter, tx.read(self.counter) + 1))
        self.engine.release_thread()


# ---------------------------------------------------------------------------
# 微程序
# ---------------------------------------------------------------------------

def flagship_program(engine_id: str, config: Optional[TMLabConfig] = None) -> Program:
    """
    验证窗口程序：读者读到 H 后在解引用前暂停，
    写者在事务中私有化 H 并释放 M，计时线程再提交两个写事务
    """

    def build(probe: Probe) -> ProgramInstance:
        engine = build_engine(engine_id, probe=probe, config=config)
        setup = _SharedPointerSetup(engine, (READER, WRITER, TICKER))

        def writer():
            def body(tx):
                ref = setup.privatize(tx)
                if ref is not None:
                    tx.free(ref)
            engine.run_tx(body)
            engine.release_thread()

        def verify(history: History):
            assert not history.errors, f"线程异常: {history.errors}"
            assert setup.observed['value'] in (None, PAYLOAD)
            _assert_opaque(history)

        return ProgramInstance([setup.reader, writer, setup.ticker], engine.heap, engine,
                               verify=verify, meta={'observed': setup.observed})

    return build


def privatize_then_free_program(engine_id: str, config: Optional[TMLabConfig] = None,
                                nontx_privatize: bool = False,
                                barrier: bool = False) -> Program:
    """
    事务外释放程序

    Args:
        nontx_privatize: False 为事务内私有化 + 事务外释放，True 为两者都在事务外
        barrier: 释放前是否执行静默屏障
    """

    def build(probe: Probe) -> ProgramInstance:
        engine = build_engine(engine_id, probe=probe, config=config)
        setup = _SharedPointerSetup(engine, (READER, WRITER))

        def writer():
            if nontx_privatize:
                engine.nontx_write(setup.shared, NIL)
            else:
                engine.run_tx(setup.privatize)
            if barrier:
                engine.quiescence_barrier()
            engine.nontx_free(setup.message.block)
            engine.release_thread()

        def verify(history: History):
            errors = _error_kinds(history)
            assert WRITER not in errors, f"写者异常: {history.errors}"
            unprotected_epoch = engine_id == "norec-epoch" and not barrier
            if not unprotected_epoch:
                assert not errors, f"线程异常: {history.errors}"
            else:
                # 没有屏障时 epoch 策略不覆盖事务外释放
                assert set(errors.values()) <= {"ApplicationError"}
            _assert_opaque(history)

        return ProgramInstance([setup.reader, writer], engine.heap, engine,
                               verify=verify, meta={'observed': setup.observed})

    return build


def wild_read_program(engine_id: str, config: Optional[TMLabConfig] = None) -> Program:
    """读者访问从未分配的地址；另一个线程提交一个无关的写事务"""

    def build(probe: Probe) -> ProgramInstance:
        engine = build_engine(engine_id, probe=probe, config=config)
        setup = _SharedPointerSetup(engine, (READER, WRITER))

        def reader():
            engine.run_tx(lambda tx: tx.read(WILD_ADDR))

        def verify(history: History):
            assert _error_kinds(history).get(READER) == "ApplicationError", history.errors
            assert WRITER not in history.errors

        return ProgramInstance([reader, lambda: setup.ticker(1)], engine.heap, engine,
                               verify=verify)

    return build


def queue_micro_program(engine_id: str, config: Optional[TMLabConfig] = None,
                        producers: int = 2) -> Program:
    """队列微程序：若干生产者各入队一条消息，一个消费者尝试出队一次"""

    def build(probe: Probe) -> ProgramInstance:
        engine = build_engine(engine_id, probe=probe, config=config)
        cfg = QueueWorkloadConfig(producers=producers, consumers=1, messages_per_producer=1,
                                  payload_cells=1, queue_capacity=producers + 1)
        run = QueueRun(cfg, engine)
        result: Dict[str, object] = {}

        def producer(pid: int):
            engine.run_tx(lambda tx: run.enqueue(tx, pid + 1))
            engine.release_thread()

        def consumer():
            result['taken'] = engine.run_tx(run.dequeue).result
            engine.release_thread()

        def verify(history: History):
            assert not history.errors, f"线程异常: {history.errors}"
            heap = engine.heap
            remaining = []
            word = heap.read_cell(run.root.at(HEAD))
            while word != NIL:
                node = CellAddr.from_word(word)
                remaining.append(heap.read_cell(node.at(TAG)))
                word = heap.read_cell(node.at(NEXT))
            assert heap.read_cell(run.root.at(LEN)) == len(remaining)

            taken = result.get('taken')
            consumed = [] if taken is None else [taken[1]]
            assert sorted(remaining + consumed) == list(range(1, producers + 1))
            _assert_opaque(history)

        threads = [lambda pid=pid: producer(pid) for pid in range(producers)] + [consumer]
        return ProgramInstance(threads, engine.heap, engine, verify=verify, meta={'result': result})

    return build


# ---------------------------------------------------------------------------
# 回归套件
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    engine: str
    passed: bool
    detail: str = ""
    schedule: Optional[Schedule] = None
    runs: int = 1


@dataclass
class ScheduledCheck:
    """一个固定调度的回归检查：程序 + 调度 + 对历史的额外断言"""
    name: str
    engine: str
    program: Program
    picks: List
    expect: Callable[[History], None] = lambda history: None
    kinds: Optional[frozenset] = None
    meta: Dict[str, str] = field(default_factory=dict)


def _expect_flagship(engine_id: str) -> Callable[[History], None]:
    def expect(history: History):
        stats = history.meta['stats']
        observed = history.meta['observed']
        if engine_id == "norec-trap":
            assert stats['traps_total'] == 1 and stats['traps_recovered'] == 1, stats
            assert [e.detail for e in history.of_kind("decision")] == ["RollbackRetry"]
            assert observed['value'] is None and observed['retries'] >= 1
        else:
            assert stats['traps_total'] == 0, stats
            assert observed['value'] is None
    return expect


def _expect_case2(engine_id: str) -> Callable[[History], None]:
    def expect(history: History):
        stats = history.meta['stats']
        if engine_id == "norec-trap":
            assert stats['traps_escalated'] == 0 and stats['traps_recovered'] >= 1, stats
            assert history.meta['observed']['value'] is None
        else:
            # 事务外释放未被 epoch 覆盖：读者陷入并升级
            assert _error_kinds(history).get(READER) == "ApplicationError", history.errors
    return expect


def _expect_quiet_barrier(history: History):
    stats = history.meta['stats']
    assert stats['traps_total'] == 0, stats
    assert history.meta['observed']['value'] is None


def _expect_two_step_escalation(history: History):
    stats = history.meta['stats']
    assert (stats['traps_total'], stats['traps_recovered'], stats['traps_escalated']) == (2, 1, 1), stats


class RegressionSuite:
    """
    调度回归套件

    Args:
        config: 全局配置（epoch_min_age 即变异开关）
        micro_producers: 队列微程序的生产者数量
    """

    def __init__(self, config: Optional[TMLabConfig] = None, micro_producers: int = 2,
                 bound: int = 12):
        self.config = config or DEFAULT_CONFIG
        self.micro_producers = micro_producers
        self.bound = bound

    def scheduled_checks(self) -> List[ScheduledCheck]:
        cfg = self.config
        checks = []
        for engine_id in ("norec-epoch", "norec-trap"):
            checks.append(ScheduledCheck("flagship", engine_id, flagship_program(engine_id, cfg),
                                         FLAGSHIP_SCHEDULE, _expect_flagship(engine_id)))
            checks.append(ScheduledCheck("case2", engine_id, privatize_then_free_program(engine_id, cfg),
                                         PRIVATIZE_SCHEDULE, _expect_case2(engine_id)))
        checks.append(ScheduledCheck("case3", "norec-trap",
                                     privatize_then_free_program("norec-trap", cfg, nontx_privatize=True),
                                     PRIVATIZE_SCHEDULE, _expect_case2("norec-trap")))
        checks.append(ScheduledCheck("barrier", "norec-epoch",
                                     privatize_then_free_program("norec-epoch", cfg, barrier=True),
                                     PRIVATIZE_SCHEDULE, _expect_quiet_barrier))
        checks.append(ScheduledCheck("wild-read", "norec-trap", wild_read_program("norec-trap", cfg),
                                     WILD_SCHEDULE, _expect_two_step_escalation))
        return checks

    def program_for(self, name: str, engine_id: str, producers: Optional[int] = None) -> Program:
        cfg = self.config
        producers = producers or self.micro_producers
        builders = {
            "flagship": lambda: flagship_program(engine_id, cfg),
            "case2": lambda: privatize_then_free_program(engine_id, cfg),
            "case3": lambda: privatize_then_free_program(engine_id, cfg, nontx_privatize=True),
            "barrier": lambda: privatize_then_free_program(engine_id, cfg, barrier=True),
            "wild-read": lambda: wild_read_program(engine_id, cfg),
            "queue-micro": lambda: queue_micro_program(engine_id, cfg, producers),
        }
        if name not in builders:
            raise TMLabError(f"未知微程序 {name!r}")
        return builders[name]()

    def run_check(self, check: ScheduledCheck) -> CheckResult:
        scheduler = InterleavingScheduler(active_kinds=check.kinds)
        schedule = Schedule(picks=list(check.picks))
        history = None
        try:
            history = scheduler.run_schedule(check.program, schedule)
            check.expect(history)
        except (AssertionError, TMLabError) as exc:
            realized = history.schedule() if history is not None else schedule
            realized.meta.update(check.meta)
            realized.meta.update(program=check.name, engine=check.engine)
            return CheckResult(check.name, check.engine, False, str(exc), realized)
        return CheckResult(check.name, check.engine, True)

    def sweep_queue(self, engine_id: str) -> CheckResult:
        """穷举队列微程序的全部交错，逐个验证"""
        scheduler = InterleavingScheduler(active_kinds=MICRO_YIELD_KINDS)
        program = queue_micro_program(engine_id, self.config, self.micro_producers)
        runs = 0
        try:
            for _ in scheduler.enumerate_schedules(program, bound=self.bound):
                runs += 1
        except (AssertionError, TMLabError) as exc:
            counts = scheduler.count_turns(program)
            logger.warning(f"队列微程序在第 {runs + 1} 个交错失败 ({engine_id}): {exc}")
            schedule = self._failing_sweep_schedule(scheduler, program, counts, runs)
            schedule.meta.update(program="queue-micro", engine=engine_id, kinds="micro",
                                 micro_producers=str(self.micro_producers))
            return CheckResult("queue-micro", engine_id, False, str(exc), schedule, runs)
        return CheckResult("queue-micro", engine_id, True, runs=runs)

    @staticmethod
    def _failing_sweep_schedule(scheduler, program, counts, index) -> Schedule:
        sequence = [tid for tid, count in enumerate(counts) for _ in range(count)]
        for i, ordering in enumerate(DistinctPermutations(sequence)):
            if i == index:
                return Schedule.from_sequence(ordering)
        return Schedule()

    def run(self, engines: Iterable[str] = ENGINE_IDS) -> List[CheckResult]:
        results = [self.run_check(check) for check in self.scheduled_checks()]
        results.extend(self.sweep_queue(engine_id) for engine_id in engines)
        return results

    def program_for_schedule(self, schedule: Schedule) -> Program:
        """按调度头部记录的程序名、引擎和生产者数量重建微程序"""
        name = schedule.meta.get("program", "flagship")
        engine_id = schedule.meta.get("engine", "norec-trap")
        producers = schedule.meta.get("micro_producers")
        return self.program_for(name, engine_id, int(producers) if producers else None)

    def replay(self, schedule: Schedule) -> CheckResult:
        """按保存的调度重新运行某个检查"""
        name = schedule.meta.get("program", "flagship")
        engine_id = schedule.meta.get("engine", "norec-trap")
        kinds = MICRO_YIELD_KINDS if schedule.meta.get("kinds") == "micro" else None
        expect = {
            "flagship": _expect_flagship(engine_id),
            "case2": _expect_case2(engine_id),
            "case3": _expect_case2(engine_id),
            "barrier": _expect_quiet_barrier,
            "wild-read": _expect_two_step_escalation,
        }.get(name, lambda history: None)
        check = ScheduledCheck(name, engine_id, self.program_for_schedule(schedule),
                               list(schedule.picks), expect, kinds, dict(schedule.meta))
        return self.run_check(check)
