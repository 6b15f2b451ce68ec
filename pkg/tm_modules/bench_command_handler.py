"""
命令行处理模块
负责 bench / check / trace 三个子命令：校验运行配置、驱动基准测试与回归套件、输出 CSV
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import pandas as pd
from pydantic import BaseModel, Field, ValidationError, model_validator

from config import DEFAULT_CONFIG, TMLabConfig

from .confidence_runner import ConfidenceRunner
from .engine_factory import ENGINE_IDS, engine_id_of, split_engine_id
from .errors import ConfigError, MissingTraceError, TMLabError
from .interleaving_scheduler import Schedule
from .memory_metrics import MetricsTrace
from .queue_benchmark import QueueBenchmark, QueueWorkloadConfig, RunSummary
from .schedule_programs import RegressionSuite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

SUMMARY_COLUMNS = ["engine", "threads", "exec_ms", "m_max", "m_bar",
                   "commits", "aborts", "traps", "escalations"]
BENCH_COLUMNS = SUMMARY_COLUMNS + ["validations", "reps", "converged",
                                   "exec_ms_ci_low", "exec_ms_ci_high",
                                   "m_bar_ci_low", "m_bar_ci_high"]


class RunConfig(BaseModel):
    """命令行运行配置"""
    engine: Literal["norec", "cgl"] = "norec"
    strategy: Optional[Literal["epoch", "trap"]] = None
    threads: int = Field(2, ge=1)
    producers: Optional[int] = Field(None, ge=1)
    consumers: Optional[int] = Field(None, ge=1)
    messages: int = Field(1000, ge=0)
    payload_cells: int = Field(8, ge=1)
    stalled_threads: int = Field(0, ge=0)
    seed: Optional[int] = None
    scheduled: bool = False
    reps_min: int = Field(5, ge=1)
    reps_max: int = Field(30, ge=1)
    ci: float = Field(0.05, gt=0)
    out: Optional[str] = None
    trace_out: Optional[str] = None

    @model_validator(mode="after")
    def _check_combination(self) -> 'RunConfig':
        if self.engine == "cgl" and self.strategy is not None:
            raise ValueError("--strategy: cgl 引擎不接受回收策略")
        if self.engine == "norec" and self.strategy is None:
            raise ValueError("--strategy: norec 引擎需要回收策略 (epoch / trap)")
        if self.reps_max < self.reps_min:
            raise ValueError("--reps-max: 不能小于 --reps-min")
        return self

    @property
    def engine_id(self) -> str:
        return engine_id_of(self.engine, self.strategy)

    def split_threads(self) -> tuple:
        """--threads N 拆分为 N//2 个生产者与 N - N//2 个消费者（各至少1个）"""
        producers = self.producers or max(1, self.threads // 2)
        consumers = self.consumers or max(1, self.threads - self.threads // 2)
        return producers, consumers


def _config_error(exc: ValidationError) -> ConfigError:
    error = exc.errors()[0]
    message = str(error.get("msg", ""))
    loc = error.get("loc") or ()
    if loc:
        return ConfigError("--" + str(loc[0]).replace("_", "-"), message)
    # model_validator 的消息形如 "Value error, --flag: 说明"
    text = message.split(", ", 1)[-1]
    flag, _, detail = text.partition(": ")
    return ConfigError(flag, detail or text)


def _int_list(text: str) -> List[int]:
    """解析逗号分隔的整数列表，如 1,2,4,8"""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是逗号分隔的整数列表: {text!r}")


def _engine_list(text: str) -> List[str]:
    engines = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [e for e in engines if e not in ENGINE_IDS]
    if unknown or not engines:
        raise argparse.ArgumentTypeError(f"未知引擎标识 {unknown}，可选: {', '.join(ENGINE_IDS)}")
    return engines


def build_arg_parser() -> argparse.ArgumentParser:
    """构建命令行解析器"""
    parser = argparse.ArgumentParser(prog="tmlab", description="事务内存回收策略实验室")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_workload_flags(p: argparse.ArgumentParser):
        p.add_argument("--engine", choices=["norec", "cgl"], default=None)
        p.add_argument("--strategy", choices=["epoch", "trap"], default=None)
        p.add_argument("--threads", type=_int_list, default=[2], help="线程数，bench 可用逗号分隔多个")
        p.add_argument("--producers", type=int, default=None)
        p.add_argument("--consumers", type=int, default=None)
        p.add_argument("--messages", type=int, default=1000, help="每个生产者的消息数")
        p.add_argument("--payload-cells", type=int, default=None)
        p.add_argument("--stalled-threads", type=int, default=0)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--scheduled", action="store_true", help="在交错调度器下运行（逻辑时钟）")
        p.add_argument("--out", default=None)
        p.add_argument("--trace-out", default=None)
        p.add_argument("--epoch-min-age", type=int, default=None)

    bench = sub.add_parser("bench", help="重复运行队列基准测试直到置信区间收敛")
    add_workload_flags(bench)
    bench.add_argument("--reps-min", type=int, default=None)
    bench.add_argument("--reps-max", type=int, default=None)
    bench.add_argument("--ci", type=float, default=None)
    bench.add_argument("--engines", type=_engine_list, default=None,
                       help="逗号分隔的引擎标识 (norec-epoch,norec-trap,cgl)，不能与 --engine/--strategy 同用")

    trace = sub.add_parser("trace", help="运行一次并导出内存轨迹")
    add_workload_flags(trace)

    check = sub.add_parser("check", help="运行调度回归套件")
    check.add_argument("--out", default=None, help="失败调度的保存路径")
    check.add_argument("--replay", default=None, help="重放保存的调度文件")
    check.add_argument("--epoch-min-age", type=int, default=None)
    check.add_argument("--micro-producers", type=int, default=2)

    return parser


class BenchCommandHandler:
    """
    命令处理器

    功能：
    1. 运行配置校验（错误信息包含出错的参数名）
    2. bench / trace：队列基准测试与 CSV 输出
    3. check：调度回归套件与失败调度保存
    """

    def __init__(self, config: Optional[TMLabConfig] = None):
        self.config = config or DEFAULT_CONFIG

    def run_cli(self, argv: Optional[Sequence[str]] = None) -> int:
        args = build_arg_parser().parse_args(argv)
        return self.handle(args)

    def handle(self, args: argparse.Namespace) -> int:
        """按子命令分发，异常映射为退出码"""
        handlers = {
            "bench": self._handle_bench,
            "trace": self._handle_trace,
            "check": self._handle_check,
        }
        try:
            return handlers[args.command](args)
        except ConfigError as e:
            logger.error(f"配置错误: {e}")
            print(f"❌ 配置错误 {e}")
            return EXIT_ERROR
        except TMLabError as e:
            logger.error(f"运行失败: {type(e).__name__}: {e}")
            print(f"❌ 运行失败: {e}")
            return EXIT_ERROR

    # ------------------------------------------------------------------
    # 配置
    # ------------------------------------------------------------------

    def _lab_config(self, args: argparse.Namespace) -> TMLabConfig:
        overrides: Dict[str, Any] = {}
        min_age = getattr(args, "epoch_min_age", None)
        if min_age is not None:
            if min_age < 1:
                raise ConfigError("--epoch-min-age", "必须 >= 1")
            # 变异运行需要真正执行过早释放，关闭严格断言
            overrides.update(epoch_min_age=min_age, strict_epoch_safety=min_age >= 2)
        payload = getattr(args, "payload_cells", None)
        if payload is not None:
            overrides["payload_cells"] = payload
        for flag, key in (("reps_min", "reps_min"), ("reps_max", "reps_max"), ("ci", "ci_rel_width")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides[key] = value
        return replace(self.config, **overrides) if overrides else self.config

    def build_run_config(self, args: argparse.Namespace, lab: TMLabConfig,
                         threads: int, engine_id: Optional[str] = None) -> RunConfig:
        if engine_id is not None:
            if args.engine or args.strategy:
                raise ConfigError("--engines", "不能与 --engine / --strategy 同时使用")
            engine, strategy = split_engine_id(engine_id)
        else:
            engine = args.engine or lab.engine
            strategy = args.strategy
            if strategy is None and engine == "norec":
                strategy = lab.strategy
        try:
            return RunConfig(
                engine=engine,
                strategy=strategy,
                threads=threads,
                producers=args.producers,
                consumers=args.consumers,
                messages=args.messages,
                payload_cells=lab.payload_cells,
                stalled_threads=args.stalled_threads,
                seed=args.seed,
                scheduled=args.scheduled,
                reps_min=lab.reps_min,
                reps_max=lab.reps_max,
                ci=lab.ci_rel_width,
                out=args.out,
                trace_out=args.trace_out,
            )
        except ValidationError as exc:
            raise _config_error(exc) from exc

    def workload_config(self, run: RunConfig, lab: TMLabConfig) -> QueueWorkloadConfig:
        producers, consumers = run.split_threads()
        seed = (run.seed if run.seed is not None else 0) if run.scheduled else None
        return QueueWorkloadConfig(
            producers=producers,
            consumers=consumers,
            messages_per_producer=run.messages,
            payload_cells=run.payload_cells,
            queue_capacity=lab.queue_capacity,
            stalled_threads=run.stalled_threads,
            seed=seed,
        )

    # ------------------------------------------------------------------
    # 子命令
    # ------------------------------------------------------------------

    def _handle_bench(self, args: argparse.Namespace) -> int:
        lab = self._lab_config(args)
        thread_counts = args.threads
        if len(thread_counts) > 1 and (args.producers or args.consumers):
            raise ConfigError("--threads", "多个线程数不能与 --producers / --consumers 同时使用")
        # 先校验全部组合，再开始运行
        runs = [self.build_run_config(args, lab, threads, engine_id)
                for engine_id in (args.engines or [None])
                for threads in thread_counts]

        rows = []
        converged = True
        last_trace = None
        for run in runs:
            workload = self.workload_config(run, lab)
            benchmark = QueueBenchmark(workload, run.engine_id, lab)
            print(f"🚀 bench {run.engine_id}: {workload.producers} 生产者 / {workload.consumers} 消费者, "
                  f"{workload.total_messages} 条消息")
            runner = ConfidenceRunner(
                rel_width=run.ci,
                confidence=lab.confidence,
                min_reps=run.reps_min,
                max_reps=run.reps_max,
                progress=True,
            )
            result = runner.run(benchmark.run, label=f"{run.engine_id}@{workload.threads}")
            rows.append(result.to_row())
            converged = converged and result.converged
            if result.last_trace is not None:
                last_trace = result.last_trace
            status = "✅ 已收敛" if result.converged else "⚠️ 未收敛"
            print(f"{status}: {result.reps} 次重复")

        out = Path(runs[0].out or Path(lab.output_dir) / "bench_summary.csv")
        self.write_csv(pd.DataFrame(rows, columns=BENCH_COLUMNS), out)
        if runs[0].trace_out and last_trace is not None:
            # 多个组合时只导出最后一个组合的轨迹
            self.write_csv(last_trace.to_frame(), Path(runs[0].trace_out))

        print(f"📄 {len(rows)} 行汇总写入 {out}")
        return EXIT_OK if converged else EXIT_NOT_CONVERGED

    def _handle_trace(self, args: argparse.Namespace) -> int:
        lab = self._lab_config(args)
        if len(args.threads) != 1:
            raise ConfigError("--threads", "trace 只接受一个线程数")
        run = self.build_run_config(args, lab, args.threads[0])
        workload = self.workload_config(run, lab)

        trace, summary = QueueBenchmark(workload, run.engine_id, lab).run()
        if len(trace) == 0:
            raise MissingTraceError("运行没有产生任何内存样本")

        out_dir = Path(lab.output_dir)
        trace_path = Path(run.trace_out or out_dir / "trace.csv")
        summary_path = Path(run.out or out_dir / "trace_summary.csv")
        self.write_csv(trace.to_frame(), trace_path)
        self.write_csv(pd.DataFrame([self.summary_row(summary)], columns=SUMMARY_COLUMNS), summary_path)
        print(f"✅ 轨迹 {len(trace)} 个样本写入 {trace_path}, 汇总写入 {summary_path}")
        return EXIT_OK

    def _handle_check(self, args: argparse.Namespace) -> int:
        lab = self._lab_config(args)
        suite = RegressionSuite(lab, micro_producers=args.micro_producers)
        out = Path(args.out or Path(lab.output_dir) / "failing_schedule.txt")

        if args.replay:
            schedule = Schedule.load(args.replay)
            result = suite.replay(schedule)
            self._print_result(result)
            return EXIT_OK if result.passed else EXIT_ERROR

        results = suite.run()
        for result in results:
            self._print_result(result)

        failures = [r for r in results if not r.passed]
        if failures:
            out.parent.mkdir(parents=True, exist_ok=True)
            failures[0].schedule.save(out)
            print(f"❌ {len(failures)} 项失败，首个失败调度已保存到 {out}")
            return EXIT_ERROR
        print(f"✅ 全部 {len(results)} 项检查通过")
        return EXIT_OK

    # ------------------------------------------------------------------
    # 输出
    # ------------------------------------------------------------------

    @staticmethod
    def summary_row(summary: RunSummary) -> Dict[str, Any]:
        return {
            "engine": summary.engine,
            "threads": summary.threads,
            "exec_ms": summary.exec_time_ms,
            "m_max": summary.m_max,
            "m_bar": summary.m_bar,
            "commits": summary.commits,
            "aborts": summary.aborts,
            "traps": summary.traps,
            "escalations": summary.escalations,
        }

    @staticmethod
    def write_csv(frame: pd.DataFrame, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
        logger.info(f"CSV 已写入: {path}")

    @staticmethod
    def read_trace(path: Path) -> MetricsTrace:
        if not Path(path).exists():
            raise MissingTraceError(f"轨迹文件不存在: {path}")
        return MetricsTrace.from_frame(pd.read_csv(path))

    @staticmethod
    def _print_result(result):
        mark = "✅" if result.passed else "❌"
        extra = f" ({result.runs} 个交错)" if result.runs > 1 else ""
        detail = f": {result.detail}" if result.detail else ""
        print(f"{mark} {result.name} [{result.engine}]{extra}{detail}")
