"""
事务内存回收策略实验室模块包
"""

from .transactional_heap import TransactionalHeap, CellAddr
from .norec_engine import NOrecEngine, TxOutcome, RetryPolicy
from .cgl_engine import CGLEngine
from .epoch_reclamation import EpochReclamation
from .trap_reclamation import TrapReclamation
from .engine_factory import EngineFactory, build_engine
from .interleaving_scheduler import InterleavingScheduler, Schedule, History
from .opacity_checker import OpacityChecker, check_opacity
from .memory_metrics import MetricsTrace, MemorySampler, compute_mbar
from .queue_benchmark import QueueBenchmark, QueueWorkloadConfig, RunSummary
from .confidence_runner import ConfidenceRunner, repeat_until_confident
from .schedule_programs import RegressionSuite
from .bench_command_handler import BenchCommandHandler

__all__ = [
    'TransactionalHeap',
    'CellAddr',
    'NOrecEngine',
    'TxOutcome',
    'RetryPolicy',
    'CGLEngine',
    'EpochReclamation',
    'TrapReclamation',
    'EngineFactory',
    'build_engine',
    'InterleavingScheduler',
    'Schedule',
    'History',
    'OpacityChecker',
    'check_opacity',
    'MetricsTrace',
    'MemorySampler',
    'compute_mbar',
    'QueueBenchmark',
    'QueueWorkloadConfig',
    'RunSummary',
    'ConfidenceRunner',
    'repeat_until_confident',
    'RegressionSuite',
    'BenchCommandHandler',
]
