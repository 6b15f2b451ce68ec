"""
事务内存实验室配置文件
"""

import os
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional


def _optional_int(value: Optional[str]) -> Optional[int]:
    return int(value) if value not in (None, "") else None


@dataclass
class TMLabConfig:
    """事务内存实验室配置类"""

    # 引擎配置
    engine: str = os.getenv("TMLAB_ENGINE", "norec")
    strategy: str = os.getenv("TMLAB_STRATEGY", "trap")

    # 托管堆配置
    heap_capacity_bytes: Optional[int] = _optional_int(os.getenv("TMLAB_HEAP_CAP"))

    # 回收策略配置
    trap_ceiling: int = int(os.getenv("TMLAB_TRAP_CEILING", "1000"))
    epoch_min_age: int = 2  # 低于2只用于变异测试
    strict_epoch_safety: bool = True
    debug_checks: bool = True

    # 重试配置
    max_retries: Optional[int] = None  # None 表示无限重试
    backoff_base_s: float = 1e-6
    backoff_cap_s: float = 1e-3
    validate_on_exhaustion: bool = True

    # 工作负载与采样配置
    sample_interval_s: float = 1e-3
    payload_cells: int = 8
    queue_capacity: int = 64

    # 置信区间配置
    reps_min: int = 5
    reps_max: int = 30
    ci_rel_width: float = 0.05
    confidence: float = 0.95

    # 输出配置
    output_dir: str = "results"
    log_level: str = os.getenv("TMLAB_LOG_LEVEL", "INFO")

    def __post_init__(self):
        """初始化后的处理"""
        if self.trap_ceiling < 1:
            raise ValueError(f"trap_ceiling 必须 >= 1, 实际为 {self.trap_ceiling}")

    @classmethod
    def from_dict(cls, config_dict: Dict[str, Any]) -> 'TMLabConfig':
        """从字典创建配置对象"""
        return cls(**config_dict)

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return {f.name: getattr(self, f.name) for f in fields(self)}


# 默认配置实例
DEFAULT_CONFIG = TMLabConfig()
