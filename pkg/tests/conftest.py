"""
测试公共夹具
"""

import os
import sys

import pytest

# 与 main.py 一样把项目根目录加入Python路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import TMLabConfig
from tm_modules.epoch_reclamation import EpochReclamation
from tm_modules.norec_engine import NOrecEngine
from tm_modules.transactional_heap import TransactionalHeap
from tm_modules.trap_reclamation import TrapReclamation


@pytest.fixture
def heap():
    return TransactionalHeap()


@pytest.fixture
def lab_config():
    """小规模、确定性的配置"""
    return TMLabConfig(sample_interval_s=1e-4, reps_min=2, reps_max=3)


@pytest.fixture
def trap_engine(heap):
    return NOrecEngine(heap, TrapReclamation())


@pytest.fixture
def epoch_engine(heap):
    return NOrecEngine(heap, EpochReclamation())
