"""
错误类型模块
所有模块共享的异常层次结构，根类型为 TMLabError
"""

from typing import Any, Optional


class TMLabError(Exception):
    """实验室所有错误的根类型"""


# ---------------------------------------------------------------------------
# 托管堆
# ---------------------------------------------------------------------------

class ZeroSizeError(TMLabError):
    """分配大小为0"""


class ExhaustionLimitError(TMLabError):
    """超出配置的 live_bytes 上限（资源耗尽）"""

    def __init__(self, requested_bytes: int, live_bytes: int, capacity_bytes: int):
        super().__init__(
            f"堆容量耗尽: 请求 {requested_bytes} 字节, 当前 {live_bytes} / 上限 {capacity_bytes}"
        )
        self.requested_bytes = requested_bytes
        self.live_bytes = live_bytes
        self.capacity_bytes = capacity_bytes


class DoubleFreeError(TMLabError):
    """重复释放同一内存块"""

    def __init__(self, block: int):
        super().__init__(f"重复释放内存块 {block}")
        self.block = block


class UnknownBlockError(TMLabError):
    """内存块从未被分配"""

    def __init__(self, block: int):
        super().__init__(f"未知内存块 {block}")
        self.block = block


class AccessViolation(TMLabError):
    """
    访问已释放或未知内存块时触发的可恢复条件
    （托管堆中对段错误的模拟，永远不会终止进程）
    """

    def __init__(self, addr: Any):
        super().__init__(f"访问违例: {addr}")
        self.addr = addr


# ---------------------------------------------------------------------------
# 事务引擎
# ---------------------------------------------------------------------------

class TxInvalid(TMLabError):
    """读集合失效，事务需要回滚并重启"""

    def __init__(self, reason: str, trap: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.trap = trap


class NestedTransactionError(TMLabError):
    """当前线程已有活动事务（仅支持扁平嵌套）"""


class TransactionStateError(TMLabError):
    """在错误的事务状态下调用操作"""


class RetryLimitExceeded(TMLabError):
    """超过重试策略的硬性上限"""

    def __init__(self, retries: int):
        super().__init__(f"事务重试次数超过上限: {retries}")
        self.retries = retries


class ApplicationError(TMLabError):
    """读集合有效时仍发生的访问违例，即真正的应用错误"""

    def __init__(self, addr: Any, detail: Optional[str] = None):
        message = f"应用错误: 非法访问 {addr}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.addr = addr


# ---------------------------------------------------------------------------
# 回收策略
# ---------------------------------------------------------------------------

class DuplicateRegistrationError(TMLabError):
    """线程重复注册到 epoch 共识中"""


# ---------------------------------------------------------------------------
# 调度器 / 不透明性检查
# ---------------------------------------------------------------------------

class DeadlockDetected(TMLabError):
    """所有未结束的逻辑线程都处于阻塞状态"""

    def __init__(self, blocked: dict):
        points = ", ".join(f"T{tid}@{kind}" for tid, kind in sorted(blocked.items()))
        super().__init__(f"检测到死锁: {points}")
        self.blocked = blocked


class BoundExceeded(TMLabError):
    """调度枚举或执行步数超出上限"""


class SearchExplosion(TMLabError):
    """不透明性检查的搜索空间超出上限"""


# ---------------------------------------------------------------------------
# 基准测试 / 命令行
# ---------------------------------------------------------------------------

class DegenerateRunError(TMLabError):
    """t_end 与 t_start 相等，无法计算平均内存"""


class WorkloadLeakError(TMLabError):
    """工作负载排空后 live_bytes 与基线不一致"""

    def __init__(self, live_bytes: int, baseline_bytes: int):
        super().__init__(f"内存泄漏: live_bytes={live_bytes}, 基线={baseline_bytes}")
        self.live_bytes = live_bytes
        self.baseline_bytes = baseline_bytes


class QueueIntegrityError(TMLabError):
    """生产与消费的消息多重集不一致"""


class MissingTraceError(TMLabError):
    """没有可导出的内存轨迹"""


class ConfigError(TMLabError):
    """运行配置无效，消息中包含出错的参数名"""

    def __init__(self, flag: str, message: str):
        super().__init__(f"{flag}: {message}")
        self.flag = flag
