"""
引擎工厂模块
按引擎标识（norec-epoch / norec-trap / cgl）构建引擎与回收策略
"""

import logging
from typing import Optional, Tuple, Union

from config import DEFAULT_CONFIG, TMLabConfig

from .cgl_engine import CGLEngine
from .epoch_reclamation import EpochReclamation
from .errors import ConfigError
from .instrumentation import Probe
from .norec_engine import NOrecEngine, RetryPolicy
from .reclamation_strategy import ReclamationStrategy
from .transactional_heap import TransactionalHeap
from .trap_reclamation import TrapReclamation

logger = logging.getLogger(__name__)

Engine = Union[NOrecEngine, CGLEngine]

ENGINE_IDS = ("norec-epoch", "norec-trap", "cgl")
ENGINES = ("norec", "cgl")
STRATEGIES = ("epoch", "trap")


def engine_id_of(engine: str, strategy: Optional[str]) -> str:
    """(引擎, 策略) → 引擎标识"""
    if engine == "cgl":
        if strategy:
            raise ConfigError("--strategy", "cgl 引擎不接受回收策略")
        return "cgl"
    if engine != "norec":
        raise ConfigError("--engine", f"未知引擎 {engine!r}，可选: {', '.join(ENGINES)}")
    if strategy not in STRATEGIES:
        raise ConfigError("--strategy", f"norec 引擎需要回收策略: {', '.join(STRATEGIES)}")
    return f"norec-{strategy}"


def split_engine_id(engine_id: str) -> Tuple[str, Optional[str]]:
    if engine_id not in ENGINE_IDS:
        raise ConfigError("--engine", f"未知引擎标识 {engine_id!r}")
    if engine_id == "cgl":
        return "cgl", None
    return "norec", engine_id.split("-", 1)[1]


class EngineFactory:
    """引擎工厂"""

    def __init__(self, config: Optional[TMLabConfig] = None):
        self.config = config or DEFAULT_CONFIG

    def create_strategy(self, name: str) -> ReclamationStrategy:
        if name == "epoch":
            return EpochReclamation(
                min_age=self.config.epoch_min_age,
                strict_safety=self.config.strict_epoch_safety,
            )
        if name == "trap":
            return TrapReclamation(
                trap_ceiling=self.config.trap_ceiling,
                debug_checks=self.config.debug_checks,
            )
        raise ConfigError("--strategy", f"未知回收策略 {name!r}")

    def create_heap(self) -> TransactionalHeap:
        return TransactionalHeap(capacity_bytes=self.config.heap_capacity_bytes)

    def create(self, engine_id: str,
               heap: Optional[TransactionalHeap] = None,
               probe: Optional[Probe] = None) -> Engine:
        """
        构建引擎

        Args:
            engine_id: norec-epoch / norec-trap / cgl
            heap: 共享的托管堆，None 时按配置新建
            probe: 插桩探针，None 时使用空操作探针

        Returns:
            引擎实例
        """
        engine, strategy = split_engine_id(engine_id)
        heap = heap if heap is not None else self.create_heap()

        if engine == "cgl":
            return CGLEngine(heap, probe=probe)

        policy = RetryPolicy(
            max_retries=self.config.max_retries,
            backoff_base_s=self.config.backoff_base_s,
            backoff_cap_s=self.config.backoff_cap_s,
        )
        return NOrecEngine(
            heap,
            self.create_strategy(strategy),
            retry_policy=policy,
            probe=probe,
            validate_on_exhaustion=self.config.validate_on_exhaustion,
        )


def build_engine(engine_id: str,
                 heap: Optional[TransactionalHeap] = None,
                 probe: Optional[Probe] = None,
                 config: Optional[TMLabConfig] = None) -> Engine:
    """便捷函数：用给定配置构建一个引擎"""
    return EngineFactory(config).create(engine_id, heap=heap, probe=probe)
