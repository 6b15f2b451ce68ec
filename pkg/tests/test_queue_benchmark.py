import pytest

from tm_modules.engine_factory import ENGINE_IDS, build_engine
from tm_modules.errors import ConfigError, QueueIntegrityError, WorkloadLeakError
from tm_modules.memory_metrics import compute_mbar
from tm_modules.queue_benchmark import QueueBenchmark, QueueRun, QueueWorkloadConfig, run_queue_workload


@pytest.mark.parametrize("engine_id", ENGINE_IDS)
def test_small_workload_drains(engine_id, lab_config):
    cfg = QueueWorkloadConfig(producers=1, consumers=1, messages_per_producer=10)
    trace, summary = run_queue_workload(cfg, engine_id, lab_config)
    assert summary.engine == engine_id
    assert summary.commits >= 20
    assert summary.escalations == 0
    assert summary.m_bar == compute_mbar(trace)
    assert summary.m_max == trace.m_max


@pytest.mark.parametrize("engine_id", ENGINE_IDS)
def test_many_threads_exchange_every_message(engine_id, lab_config):
    cfg = QueueWorkloadConfig(producers=4, consumers=4, messages_per_producer=250, queue_capacity=16)
    _, summary = run_queue_workload(cfg, engine_id, lab_config)
    assert summary.messages == 1000
    assert summary.threads == 8


@pytest.mark.parametrize("engine_id", ["norec-epoch", "norec-trap"])
def test_reclaim_after_transaction(engine_id, lab_config):
    cfg = QueueWorkloadConfig(producers=2, consumers=2, messages_per_producer=50, reclaim_mode="after_tx")
    _, summary = run_queue_workload(cfg, engine_id, lab_config)
    assert summary.escalations == 0


def test_scheduled_mode_is_deterministic(lab_config):
    cfg = QueueWorkloadConfig(producers=2, consumers=2, messages_per_producer=20, seed=5)
    _, first = run_queue_workload(cfg, "norec-trap", lab_config)
    _, second = run_queue_workload(cfg, "norec-trap", lab_config)
    assert first.to_dict() == second.to_dict()


def test_epoch_needs_at_least_as_much_memory_under_same_schedule(lab_config):
    # 单个消费者时两种策略的交错完全相同
    cfg = QueueWorkloadConfig(producers=2, consumers=1, messages_per_producer=30, seed=11)
    _, epoch = run_queue_workload(cfg, "norec-epoch", lab_config)
    _, trap = run_queue_workload(cfg, "norec-trap", lab_config)
    assert epoch.m_max >= trap.m_max


def test_stalled_thread_memory_dominance(lab_config):
    cfg = QueueWorkloadConfig(producers=1, consumers=1, messages_per_producer=10_000, stalled_threads=1)
    _, epoch = run_queue_workload(cfg, "norec-epoch", lab_config)
    _, trap = run_queue_workload(cfg, "norec-trap", lab_config)
    assert epoch.m_max / trap.m_max >= 5
    assert epoch.m_bar > trap.m_bar
    assert epoch.traps == 0


def test_active_threads_epoch_not_below_trap(lab_config):
    cfg = QueueWorkloadConfig(producers=2, consumers=1, messages_per_producer=200, seed=3)
    _, epoch = run_queue_workload(cfg, "norec-epoch", lab_config)
    _, trap = run_queue_workload(cfg, "norec-trap", lab_config)
    assert epoch.m_max >= trap.m_max
    # epoch 持续推进，limbo 不会攒下全部消息
    message_bytes = (1 + cfg.payload_cells) * 8
    assert epoch.m_max < cfg.total_messages * message_bytes


def test_config_errors_name_the_flag():
    with pytest.raises(ConfigError) as info:
        QueueWorkloadConfig(producers=0)
    assert info.value.flag == "--producers"

    cfg = QueueWorkloadConfig(stalled_threads=1, reclaim_mode="after_tx")
    with pytest.raises(ConfigError) as info:
        QueueBenchmark(cfg, "norec-epoch")
    assert info.value.flag == "--stalled-threads"

    with pytest.raises(ConfigError):
        QueueBenchmark(QueueWorkloadConfig(), "norec-rcu")


def test_leak_is_detected():
    engine = build_engine("norec-trap")
    run = QueueRun(QueueWorkloadConfig(), engine)
    engine.heap.alloc(1)
    with pytest.raises(WorkloadLeakError):
        run.teardown()


def test_lost_message_is_detected():
    engine = build_engine("cgl")
    cfg = QueueWorkloadConfig(messages_per_producer=3)
    run = QueueRun(cfg, engine)
    run.produced[0].extend([1, 2, 3])
    run.consumed[0].extend([1, 3])
    with pytest.raises(QueueIntegrityError):
        run.check_integrity()


@pytest.mark.slow
@pytest.mark.parametrize("engine_id", ENGINE_IDS)
def test_full_scale_integrity(engine_id, lab_config):
    cfg = QueueWorkloadConfig(producers=16, consumers=16, messages_per_producer=6250)
    _, summary = run_queue_workload(cfg, engine_id, lab_config)
    assert summary.messages == 100_000
    assert summary.threads == 32
