"""
置信区间重复运行模块
重复执行基准测试，直到 exec_time 与 m_bar 的置信区间宽度
都不超过观测区间 [min, max] 的给定比例，或达到最大重复次数
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from tqdm import tqdm

from .memory_metrics import MetricsTrace
from .queue_benchmark import RunSummary

logger = logging.getLogger(__name__)

CONFIDENCE_METRICS = ("exec_time_ms", "m_bar")

RunnerResult = Union[RunSummary, Tuple[MetricsTrace, RunSummary]]


@dataclass
class MetricAggregate:
    """单个指标的汇总：均值、极值与 Student-t 置信区间"""
    mean: float
    min: float
    max: float
    ci_low: float
    ci_high: float

    @property
    def ci_width(self) -> float:
        return self.ci_high - self.ci_low

    @property
    def span(self) -> float:
        return self.max - self.min


def student_t_interval(samples: Sequence[float], confidence: float = 0.95) -> Tuple[float, float, float]:
    """
    均值的 Student-t 置信区间

    Returns:
        (均值, 下界, 上界)；样本少于2个时区间为无穷
    """
    values = np.asarray(samples, dtype=float)
    mean = float(values.mean())
    n = len(values)
    if n < 2:
        return mean, -math.inf, math.inf
    std = float(values.std(ddof=1))
    half = float(stats.t.ppf((1 + confidence) / 2, n - 1)) * std / math.sqrt(n)
    return mean, mean - half, mean + half


def aggregate(samples: Sequence[float], confidence: float = 0.95) -> MetricAggregate:
    mean, low, high = student_t_interval(samples, confidence)
    return MetricAggregate(mean, float(min(samples)), float(max(samples)), low, high)


@dataclass
class AggregatedSummary:
    """重复运行的汇总结果"""
    engine: str
    threads: int
    reps: int
    converged: bool
    metrics: Dict[str, MetricAggregate]
    runs: List[RunSummary] = field(default_factory=list)
    last_trace: Optional[MetricsTrace] = None

    def mean_of(self, name: str) -> float:
        return float(np.mean([getattr(run, name) for run in self.runs]))

    def to_row(self) -> Dict[str, Any]:
        """基准测试汇总 CSV 的一行"""
        exec_ms = self.metrics["exec_time_ms"]
        m_bar = self.metrics["m_bar"]
        return {
            "engine": self.engine,
            "threads": self.threads,
            "exec_ms": exec_ms.mean,
            "m_max": int(round(self.mean_of("m_max"))),
            "m_bar": m_bar.mean,
            "commits": int(round(self.mean_of("commits"))),
            "aborts": int(round(self.mean_of("aborts"))),
            "traps": int(round(self.mean_of("traps"))),
            "escalations": int(round(self.mean_of("escalations"))),
            "validations": int(round(self.mean_of("validations"))),
            "reps": self.reps,
            "converged": self.converged,
            "exec_ms_ci_low": exec_ms.ci_low,
            "exec_ms_ci_high": exec_ms.ci_high,
            "m_bar_ci_low": m_bar.ci_low,
            "m_bar_ci_high": m_bar.ci_high,
        }


class ConfidenceRunner:
    """
    置信区间驱动的重复运行器

    Args:
        rel_width: 置信区间宽度相对 [min, max] 跨度的上限
        confidence: 置信水平
        min_reps: 最少重复次数
        max_reps: 最多重复次数，达到后标记为未收敛
        progress: 是否显示进度条
    """

    def __init__(self, rel_width: float = 0.05, confidence: float = 0.95,
                 min_reps: int = 5, max_reps: int = 30, progress: bool = False):
        if min_reps < 1 or max_reps < min_reps:
            raise ValueError(f"重复次数范围无效: min_reps={min_reps}, max_reps={max_reps}")
        self.rel_width = rel_width
        self.confidence = confidence
        self.min_reps = min_reps
        self.max_reps = max_reps
        self.progress = progress

    def is_confident(self, samples: Sequence[float]) -> bool:
        result = aggregate(samples, self.confidence)
        return result.ci_width <= self.rel_width * result.span

    def run(self, runner: Callable[[], RunnerResult], label: str = "bench") -> AggregatedSummary:
        runs: List[RunSummary] = []
        last_trace = None
        converged = False

        with tqdm(total=self.max_reps, desc=label, disable=not self.progress, leave=False) as bar:
            while len(runs) < self.max_reps:
                result = runner()
                if isinstance(result, tuple):
                    last_trace, result = result
                runs.append(result)
                bar.update(1)

                if len(runs) >= self.min_reps and all(
                    self.is_confident([getattr(run, name) for run in runs])
                    for name in CONFIDENCE_METRICS
                ):
                    converged = True
                    break

        if not converged:
            logger.warning(f"{label}: {self.max_reps} 次重复后置信区间仍未收敛")

        metrics = {
            name: aggregate([getattr(run, name) for run in runs], self.confidence)
            for name in CONFIDENCE_METRICS
        }
        first = runs[0]
        return AggregatedSummary(
            engine=first.engine,
            threads=first.threads,
            reps=len(runs),
            converged=converged,
            metrics=metrics,
            runs=runs,
            last_trace=last_trace,
        )


def repeat_until_confident(runner: Callable[[], RunnerResult], rel_width: float = 0.05,
                           confidence: float = 0.95, min_reps: int = 5,
                           max_reps: int = 30) -> AggregatedSummary:
    """便捷函数"""
    return ConfidenceRunner(rel_width, confidence, min_reps, max_reps).run(runner)
