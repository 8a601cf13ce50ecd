"""
Monitoring for training runs and benchmarks.
"""

import functools
import threading
import time
from collections import defaultdict, deque
from datetime import datetime
from typing import Any, Dict, Optional

import psutil

from utils.logging import log_exception


class PerformanceMonitor:
    """Monitor timings, counters and process resources."""

    def __init__(self):
        self.metrics = defaultdict(lambda: deque(maxlen=1000))
        self.start_time = time.time()
        self._lock = threading.Lock()
        self._process = psutil.Process()
        self._peak_rss = 0

    def record_timing(self, operation: str, duration: float):
        """Record timing for an operation."""
        with self._lock:
            self.metrics[f"timing_{operation}"].append({
                'timestamp': time.time(),
                'duration': duration
            })

    def record_counter(self, metric: str, value: int = 1):
        """Record a counter metric."""
        with self._lock:
            self.metrics[f"counter_{metric}"].append({
                'timestamp': time.time(),
                'value': value
            })

    def get_metrics(self, metric_type: Optional[str] = None) -> Dict[str, Any]:
        """Get current metrics."""
        with self._lock:
            if metric_type:
                return {k: list(v) for k, v in self.metrics.items() if k.startswith(metric_type)}
            return {k: list(v) for k, v in self.metrics.items()}

    def timing_summary(self, operation: str) -> Dict[str, float]:
        """Count, total and mean duration of one operation."""
        with self._lock:
            samples = [m['duration'] for m in self.metrics.get(f"timing_{operation}", [])]
        if not samples:
            return {'count': 0, 'total': 0.0, 'mean': 0.0}
        return {'count': len(samples), 'total': sum(samples), 'mean': sum(samples) / len(samples)}

    def sample_rss(self) -> int:
        """Current resident set size in bytes; also tracks the peak seen so far."""
        rss = self._process.memory_info().rss
        with self._lock:
            self._peak_rss = max(self._peak_rss, rss)
        return rss

    @property
    def peak_rss(self) -> int:
        with self._lock:
            return self._peak_rss

    def get_system_stats(self) -> Dict[str, Any]:
        """Get current system statistics."""
        try:
            memory = psutil.virtual_memory()
            return {
                'cpu_count': psutil.cpu_count(logical=False) or psutil.cpu_count(),
                'memory_percent': memory.percent,
                'memory_available': memory.available,
                'process_rss': self.sample_rss(),
                'uptime': time.time() - self.start_time
            }
        except Exception as e:
            log_exception(e)
            return {'error': str(e)}


class ErrorTracker:
    """Track errors surfaced to the command line."""

    def __init__(self):
        self.errors = deque(maxlen=1000)
        self.error_counts = defaultdict(int)
        self._lock = threading.Lock()

    def record_error(self, error: Exception, context: Optional[Dict[str, Any]] = None):
        """Record an error with context."""
        with self._lock:
            self.errors.append({
                'timestamp': datetime.now().isoformat(),
                'error_type': type(error).__name__,
                'error_message': str(error),
                'context': context or {}
            })
            self.error_counts[type(error).__name__] += 1

    def get_error_summary(self) -> Dict[str, Any]:
        """Get error summary statistics."""
        with self._lock:
            return {
                'total_errors': len(self.errors),
                'error_counts': dict(self.error_counts),
                'recent_errors': list(self.errors)[-10:]
            }


# Global monitoring instances
performance_monitor = PerformanceMonitor()
error_tracker = ErrorTracker()


def track_performance(operation: str):
    """Decorator to track performance of functions."""
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
                performance_monitor.record_timing(operation, time.perf_counter() - start_time)
                return result
            except Exception as e:
                error_tracker.record_error(e, {'operation': operation})
                raise
        return wrapper
    return decorator


def monitoring_summary() -> Dict[str, Any]:
    """Per-operation timings, process memory and surfaced errors for the current process."""
    timings = {
        name[len('timing_'):]: performance_monitor.timing_summary(name[len('timing_'):])
        for name in performance_monitor.get_metrics('timing_')
    }
    system = performance_monitor.get_system_stats()
    return {
        'timings': timings,
        'peak_rss': performance_monitor.peak_rss,
        'system': system,
        'errors': error_tracker.get_error_summary(),
    }
