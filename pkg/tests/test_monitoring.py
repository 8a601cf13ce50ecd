import pytest

from utils.monitoring import ErrorTracker, PerformanceMonitor, error_tracker, monitoring_summary, performance_monitor, track_performance


def test_record_timing_and_summary():
    monitor = PerformanceMonitor()
    monitor.record_timing('step', 0.5)
    monitor.record_timing('step', 1.5)
    summary = monitor.timing_summary('step')
    assert summary['count'] == 2
    assert summary['mean'] == pytest.approx(1.0)
    assert monitor.timing_summary('missing')['count'] == 0


def test_counters_and_rss():
    monitor = PerformanceMonitor()
    monitor.record_counter('evaluations')
    monitor.record_counter('evaluations', 2)
    assert monitor.get_metrics('counter')
    rss = monitor.sample_rss()
    assert rss > 0
    assert monitor.peak_rss >= rss
    assert monitor.get_system_stats()['process_rss'] > 0


def test_error_tracker():
    tracker = ErrorTracker()
    tracker.record_error(ValueError('bad'), {'operation': 'x'})
    summary = tracker.get_error_summary()
    assert summary['total_errors'] == 1
    assert summary['error_counts'] == {'ValueError': 1}
    assert summary['recent_errors'][-1]['context'] == {'operation': 'x'}


def test_track_performance_decorator():
    @track_performance('unit_op')
    def work(x):
        return x * 2

    assert work(3) == 6
    assert performance_monitor.timing_summary('unit_op')['count'] >= 1

    @track_performance('unit_fail')
    def fail():
        raise RuntimeError('boom')

    with pytest.raises(RuntimeError):
        fail()
    assert error_tracker.get_error_summary()['recent_errors'][-1]['context'] == {'operation': 'unit_fail'}


def test_monitoring_summary_collects_timings_memory_and_errors():
    performance_monitor.record_timing('summary_op', 0.25)
    summary = monitoring_summary()
    assert summary['timings']['summary_op']['count'] >= 1
    assert summary['peak_rss'] > 0
    assert summary['system']['process_rss'] > 0
    assert 'total_errors' in summary['errors']
