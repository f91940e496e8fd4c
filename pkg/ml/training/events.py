"""
Training event log: JSON lines {"step", "event", "payload"}.

Events: warmup_start, warmup_end, epsilon, update, target_sync, evaluation,
checkpoint. No wall-clock data is written, so identical runs produce identical
logs.
"""

import json
import logging
import os
from typing import Any, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)

EVENTS = ('warmup_start', 'warmup_end', 'epsilon', 'update', 'target_sync', 'evaluation', 'checkpoint')


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


class EventLog:
    """Records events in memory and, when given a path, appends them to a file"""

    def __init__(self, filepath: Optional[str] = None):
        self.filepath = filepath
        self.records: List[Dict[str, Any]] = []
        self._handle = None
        if filepath:
            directory = os.path.dirname(filepath)
            if directory:
                os.makedirs(directory, exist_ok=True)
            self._handle = open(filepath, 'w')

    def emit(self, step: int, event: str, payload: Optional[Dict[str, Any]] = None):
        if event not in EVENTS:
            raise ValueError(f"unknown event {event!r}")
        record = {'step': int(step), 'event': event, 'payload': _plain(payload or {})}
        self.records.append(record)
        if self._handle is not None:
            self._handle.write(json.dumps(record, sort_keys=True) + '\n')

    def of_kind(self, event: str) -> List[Dict[str, Any]]:
        return [record for record in self.records if record['event'] == event]

    def close(self):
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> 'EventLog':
        return self

    def __exit__(self, *exc):
        self.close()
