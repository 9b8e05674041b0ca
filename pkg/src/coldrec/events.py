"""Typed interaction events and per-user interaction logs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

SIGNALS = ("stream", "skip", "ban", "search", "favorite", "onboarding")
LEVELS = ("track", "artist", "album", "playlist")


class UnknownSignalError(ValueError):
    """Event carries a signal type or entity level outside the vocabulary."""


@dataclass(frozen=True)
class Event:
    """One typed interaction: ``count`` folds repeats of the same event."""

    user: int
    day: int
    signal: str
    level: str
    entity: int
    count: int = 1

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise UnknownSignalError(f"unknown signal type {self.signal!r}")
        if self.level not in LEVELS:
            raise UnknownSignalError(f"unknown entity level {self.level!r}")
        if self.count < 1:
            raise ValueError(f"event count must be >= 1, got {self.count}")


class InteractionLog:
    """Immutable collection of events with a per-user index."""

    def __init__(self, events: Iterable[Event] = ()):
        self.events = tuple(events)
        by_user: dict[int, list[Event]] = {}
        for ev in self.events:
            by_user.setdefault(ev.user, []).append(ev)
        self._by_user = {u: tuple(evs) for u, evs in by_user.items()}

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def users(self) -> list[int]:
        return sorted(self._by_user)

    def for_user(self, user: int) -> tuple[Event, ...]:
        return self._by_user.get(user, ())

    def counts(
        self, user: int, signal: str | None = None, level: str | None = None
    ) -> dict[int, int]:
        """Entity -> total count for one user, optionally filtered."""
        out: dict[int, int] = {}
        for ev in self.for_user(user):
            if signal is not None and ev.signal != signal:
                continue
            if level is not None and ev.level != level:
                continue
            out[ev.entity] = out.get(ev.entity, 0) + ev.count
        return out

    def stream_counts(self, user: int) -> dict[int, int]:
        return self.counts(user, signal="stream", level="track")

    def restricted_to(self, users: Iterable[int]) -> "InteractionLog":
        keep = set(users)
        return InteractionLog(ev for ev in self.events if ev.user in keep)

    def merged_with(self, other: "InteractionLog") -> "InteractionLog":
        return InteractionLog(self.events + other.events)

    def canonical_events(self) -> list[Event]:
        """Events in a canonical order, for serialization."""
        return sorted(
            self.events, key=lambda e: (e.user, e.day, e.signal, e.level, e.entity)
        )
