"""
插桩模块
引擎在固定的让出点调用探针；生产模式下探针是空操作，
测试模式下由交错调度器替换为可控的实现
"""

import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Hashable, Optional


class YieldKind(Enum):
    """让出点类型（固定六种）"""
    PRE_VALIDATE = "PreValidate"
    POST_VALIDATE = "PostValidate"
    PRE_CELL_ACCESS = "PreCellAccess"  # 最后一次验证与实际访问之间的窗口
    PRE_COMMIT_HOOK = "PreCommitHook"
    POST_COMMIT = "PostCommit"
    TRAP_ENTRY = "TrapEntry"


@dataclass(frozen=True)
class YieldPoint:
    """一次让出：类型、逻辑线程、序号"""
    kind: YieldKind
    thread: Hashable
    seq: int


class Probe:
    """
    生产模式探针

    - yield_point: 空操作
    - spin: 让出CPU后继续自旋
    - record: 不记录历史
    """

    recording = False

    def thread_id(self) -> Hashable:
        return threading.get_ident()

    def yield_point(self, kind: YieldKind):
        pass

    def spin(self, reason: str):
        time.sleep(0)

    def backoff(self, seconds: float):
        if seconds > 0:
            time.sleep(seconds)

    def record(self, kind: str, tx: Optional[int] = None, addr: Any = None,
               value: Any = None, detail: Any = None):
        pass

    def now_ns(self) -> int:
        return time.perf_counter_ns()


NULL_PROBE = Probe()
