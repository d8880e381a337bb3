"""
Observer Pattern Implementation for pipeline events
face3d/observer.py

Long-running commands (feature extraction over a manifest, LOO folds) publish
events; observers log progress or collect exclusions for the run outputs.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, List
import logging
import threading

logger = logging.getLogger(__name__)

SCAN_PROCESSED = "scan_processed"
SCAN_EXCLUDED = "scan_excluded"
FOLD_COMPLETED = "fold_completed"


class Observer(ABC):
    """Reacts to events published by a Subject"""

    @abstractmethod
    def update(self, subject, event_type: str, data: Dict[str, Any]):
        pass


class Subject(ABC):
    """Holds observers and notifies them of events"""

    def __init__(self):
        self._observers: List[Observer] = []
        self._lock = threading.Lock()

    def attach(self, observer: Observer):
        with self._lock:
            if observer not in self._observers:
                self._observers.append(observer)

    def detach(self, observer: Observer):
        with self._lock:
            if observer in self._observers:
                self._observers.remove(observer)

    def notify(self, event_type: str, data: Dict[str, Any]):
        with self._lock:
            observers_copy = self._observers.copy()

        for observer in observers_copy:
            try:
                observer.update(self, event_type, data)
            except Exception as e:
                logger.error(f"Error notifying observer {observer.__class__.__name__}: {e}", exc_info=True)


class PipelineEvents(Subject):
    """Concrete subject for scan- and fold-level pipeline events"""

    def scan_processed(self, scan_id: str, **details):
        self.notify(SCAN_PROCESSED, {"scan_id": scan_id, **details})

    def scan_excluded(self, scan_id: str, subject_id: str, reason: str):
        self.notify(SCAN_EXCLUDED, {"scan_id": scan_id, "subject_id": subject_id, "reason": reason})

    def fold_completed(self, fold: str, test_subject: str, n_train: int, n_correct: int, n_test: int):
        self.notify(FOLD_COMPLETED, {
            "fold": fold,
            "test_subject": test_subject,
            "n_train": n_train,
            "n_correct": n_correct,
            "n_test": n_test,
        })


class ProgressLoggerObserver(Observer):
    """Logs every event; progress lines at INFO every `every` events, otherwise DEBUG"""

    def __init__(self, every: int = 25):
        self.every = max(1, every)
        self._counts: Dict[str, int] = {}

    def update(self, subject, event_type: str, data: Dict[str, Any]):
        count = self._counts.get(event_type, 0) + 1
        self._counts[event_type] = count
        if event_type == SCAN_EXCLUDED:
            logger.warning(f"EXCLUDED - Scan: {data.get('scan_id')}, Subject: {data.get('subject_id')}, "
                           f"Reason: {data.get('reason')}")
        elif count % self.every == 0:
            logger.info(f"PROGRESS - {event_type}: {count} done (last: {data})")
        else:
            logger.debug(f"{event_type.upper()} - {data}")

    def count(self, event_type: str) -> int:
        return self._counts.get(event_type, 0)


class ExclusionRecorder(Observer):
    """Collects excluded scans so commands can write them next to their outputs"""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: List[Dict[str, str]] = []

    def update(self, subject, event_type: str, data: Dict[str, Any]):
        if event_type != SCAN_EXCLUDED:
            return
        with self._lock:
            self.records.append({
                "scan_id": str(data.get("scan_id", "")),
                "subject_id": str(data.get("subject_id", "")),
                "reason": str(data.get("reason", "")),
            })

    def sorted_records(self) -> List[Dict[str, str]]:
        return sorted(self.records, key=lambda r: (r["subject_id"], r["scan_id"]))
