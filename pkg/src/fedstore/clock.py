import threading


class SimClock:
    """Simulated seconds. Time only moves when something calls advance()."""

    def __init__(self, start=0):
        self._now = start
        self._lock = threading.Lock()

    @property
    def now(self):
        return self._now

    def advance(self, seconds):
        if seconds < 0:
            raise ValueError("clock cannot run backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def set(self, t):
        with self._lock:
            if t < self._now:
                raise ValueError("clock cannot run backwards")
            self._now = t

    def __repr__(self):
        return f"SimClock(now={self._now})"


DAY = 86400
WEEK = 7 * DAY
