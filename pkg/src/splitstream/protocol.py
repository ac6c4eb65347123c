"""Per-epoch communication states and the schedules that choose them.

State A sends activations up and gradients down, so the client model trains.
State B sends activations only (the client changed in the previous epoch, so
the server's cached activations are stale). State C sends nothing and the
server replays its cached activations.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

__all__ = [
    "CommState",
    "LossTracker",
    "Transition",
    "avg_epoch_loss",
    "update_state",
    "naive_schedule",
    "naive_update_epochs",
    "Schedule",
    "LossBasedSchedule",
    "NaiveSchedule",
    "AlwaysASchedule",
    "FixedSchedule",
]


class CommState(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"

    def __str__(self):
        return self.value

    @property
    def sends_activation(self) -> bool:
        return self is not CommState.C

    @property
    def sends_gradient(self) -> bool:
        return self is CommState.A


@dataclass(frozen=True)
class LossTracker:
    l_thred: float
    num_batch: int
    K: int = 1
    epoch_loss_sum: float = 0.0
    last_update_loss: float = math.nan

    def __post_init__(self):
        if not self.l_thred >= 0:
            raise ValueError("l_thred must be >= 0")

    def add(self, loss: float) -> "LossTracker":
        return replace(self, epoch_loss_sum=self.epoch_loss_sum + loss)

    def reset(self) -> "LossTracker":
        return replace(self, epoch_loss_sum=0.0)


class Transition(NamedTuple):
    state: CommState
    tracker: LossTracker
    delta_loss: float


def avg_epoch_loss(tracker: LossTracker) -> float:
    denom = tracker.num_batch * tracker.K
    if denom <= 0:
        raise ZeroDivisionError("num_batch * K must be positive")
    return tracker.epoch_loss_sum / denom


def update_state(state: CommState, tracker: LossTracker) -> Transition:
    """End-of-epoch transition.

    Leaving an A epoch first records that epoch's average loss as
    ``last_update_loss``, so the loss drop is 0 and the next state is A only
    when ``l_thred == 0``.
    """
    avg = avg_epoch_loss(tracker)
    if state is CommState.A:
        tracker = replace(tracker, last_update_loss=avg)
    delta = tracker.last_update_loss - avg
    if delta >= tracker.l_thred:
        nxt = CommState.A
    elif state is CommState.A:
        nxt = CommState.B
    else:
        nxt = CommState.C
    return Transition(nxt, tracker, delta)


def naive_update_epochs(total_epochs: int, budget: int) -> set[int]:
    """1-based epochs that update the client, spread uniformly."""
    if not 1 <= budget <= total_epochs:
        raise ValueError(f"budget must be in [1, {total_epochs}], got {budget}")
    return {k * total_epochs // budget + 1 for k in range(budget)}


def naive_schedule(epoch: int, total_epochs: int, budget: int) -> CommState:
    a_epochs = naive_update_epochs(total_epochs, budget)
    if not 1 <= epoch <= total_epochs:
        raise ValueError(f"epoch must be in [1, {total_epochs}]")
    if epoch in a_epochs:
        return CommState.A
    if epoch - 1 in a_epochs:
        return CommState.B
    return CommState.C


class Schedule:
    """Chooses the state of every epoch.

    ``start`` gives the state of epoch 1; ``advance`` is called once at the end
    of each epoch with the tracker holding that epoch's loss sum.
    """

    name = "schedule"

    def start(self, tracker: LossTracker) -> CommState:
        return CommState.A

    def advance(self, epoch: int, state: CommState, tracker: LossTracker) -> Transition:
        raise NotImplementedError


class LossBasedSchedule(Schedule):
    name = "loss_based"

    def __init__(self, l_thred: float):
        if not l_thred >= 0:
            raise ValueError("l_thred must be >= 0")
        self.l_thred = l_thred

    def advance(self, epoch, state, tracker):
        return update_state(state, tracker)


class _ListedSchedule(Schedule):
    """Schedules whose states are known up front; loss is only tracked."""

    def state_for(self, epoch: int) -> CommState:
        raise NotImplementedError

    def start(self, tracker):
        return self.state_for(1)

    def advance(self, epoch, state, tracker):
        avg = avg_epoch_loss(tracker)
        if state is CommState.A:
            tracker = replace(tracker, last_update_loss=avg)
        return Transition(self.state_for(epoch + 1), tracker, tracker.last_update_loss - avg)


class NaiveSchedule(_ListedSchedule):
    name = "naive"

    def __init__(self, total_epochs: int, budget: int):
        self.total_epochs = total_epochs
        self.budget = budget
        self.a_epochs = naive_update_epochs(total_epochs, budget)

    def state_for(self, epoch):
        if epoch in self.a_epochs:
            return CommState.A
        return CommState.B if epoch - 1 in self.a_epochs else CommState.C


class AlwaysASchedule(_ListedSchedule):
    """Synchronous split learning."""

    name = "always_A"

    def state_for(self, epoch):
        return CommState.A


class FixedSchedule(_ListedSchedule):
    """Replays an explicit state list; the last entry repeats past its end."""

    name = "fixed"

    def __init__(self, states: Sequence[CommState | str]):
        if not states:
            raise ValueError("empty state list")
        self.states = [CommState(s) for s in states]

    def state_for(self, epoch):
        return self.states[min(epoch, len(self.states)) - 1]
