"""Stream events and their JSON-lines wire format.

One event per line:

    {"user": 3, "item": 17, "rewards": {"finish": 1.0}, "ts": 42,
     "stream": "impression"}

Candidate-stream events carry no rewards (there is no label to attach),
so the "rewards" key is omitted when writing and must be empty when
reading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

IMPRESSION = "impression"
CANDIDATE = "candidate"


@dataclass(frozen=True, slots=True)
class Event:
    """One element of the impression or candidate stream."""

    user_id: int
    item_id: int
    timestamp: int
    stream: str = IMPRESSION
    rewards: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.stream not in (IMPRESSION, CANDIDATE):
            raise ValueError(f"unknown stream tag {self.stream!r}")
        if self.stream == CANDIDATE and self.rewards:
            raise ValueError("candidate-stream events carry no rewards")


def event_to_json(event: Event) -> str:
    obj = {
        "user": event.user_id,
        "item": event.item_id,
        "ts": event.timestamp,
        "stream": event.stream,
    }
    if event.stream == IMPRESSION:
        obj["rewards"] = event.rewards
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def event_from_json(line: str) -> Event:
    obj = json.loads(line)
    return Event(
        user_id=int(obj["user"]),
        item_id=int(obj["item"]),
        timestamp=int(obj["ts"]),
        stream=obj["stream"],
        rewards={str(k): float(v) for k, v in obj.get("rewards", {}).items()},
    )


def write_events(path_or_file, events: Iterable[Event]) -> int:
    """Write events as JSON lines; returns the number written."""
    if hasattr(path_or_file, "write"):
        return _write_to(path_or_file, events)
    with open(path_or_file, "w", encoding="utf-8") as fh:
        return _write_to(fh, events)


def _write_to(fh: IO[str], events: Iterable[Event]) -> int:
    n = 0
    for ev in events:
        fh.write(event_to_json(ev))
        fh.write("\n")
        n += 1
    return n


def read_events(path_or_file) -> Iterator[Event]:
    """Yield events from a JSON-lines file, skipping blank lines."""
    if hasattr(path_or_file, "read"):
        yield from _read_from(path_or_file)
        return
    with open(path_or_file, "r", encoding="utf-8") as fh:
        yield from _read_from(fh)


def _read_from(fh: IO[str]) -> Iterator[Event]:
    for line in fh:
        line = line.strip()
        if line:
            yield event_from_json(line)
