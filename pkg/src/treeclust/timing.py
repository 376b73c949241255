import time
from datetime import datetime, timezone


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def utc_stamp() -> str:
    """ISO 8601 timestamp ending in 'Z'"""
    return utc_now().strftime("%Y-%m-%dT%H:%M:%SZ")


class Stopwatch:
    """Context manager measuring wall time in seconds."""

    def __init__(self):
        self.start: float | None = None
        self.elapsed: float = 0.0

    def __enter__(self) -> "Stopwatch":
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.elapsed = time.perf_counter() - self.start
