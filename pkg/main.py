"""
事务内存回收策略实验室 - 主程序
对比 epoch 回收、陷阱回收与粗粒度锁三种引擎在消息队列负载下的内存占用与执行时间
"""

import os
import sys
import logging
from typing import Optional, Sequence

# 设置日志
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# 添加当前目录到Python路径
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from dotenv import load_dotenv
# 需要在导入 TMLabConfig 之前调用 load_dotenv()
load_dotenv()

from config import DEFAULT_CONFIG, TMLabConfig
from tm_modules.bench_command_handler import BenchCommandHandler, EXIT_ERROR


class TMLabApplication:
    """
    实验室命令行应用

    子命令：
    1. bench：重复运行队列基准测试直到置信区间收敛，输出汇总 CSV
    2. trace：运行一次并导出内存轨迹 CSV
    3. check：运行调度回归套件，失败时保存可重放的调度
    """

    def __init__(self, config: Optional[TMLabConfig] = None):
        self.config = config or DEFAULT_CONFIG
        logging.getLogger().setLevel(self.config.log_level.upper())
        self.handler = BenchCommandHandler(self.config)

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        return self.handler.run_cli(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数"""
    try:
        app = TMLabApplication()
        return app.run(argv)
    except Exception as e:
        logger.error(f"系统运行失败: {e}")
        import traceback
        traceback.print_exc()
        print(f"\n❌ 系统错误: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
