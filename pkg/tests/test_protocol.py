"""State machine and schedules."""
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitstream.protocol import (
    AlwaysASchedule,
    CommState,
    FixedSchedule,
    LossBasedSchedule,
    LossTracker,
    NaiveSchedule,
    avg_epoch_loss,
    naive_schedule,
    naive_update_epochs,
    update_state,
)

A, B, C = CommState.A, CommState.B, CommState.C


def tracker(avg, last=math.nan, thr=0.05, num_batch=4, k=1):
    return LossTracker(thr, num_batch, k, epoch_loss_sum=avg * num_batch * k, last_update_loss=last)


def simulate(losses, thr):
    """Drive update_state over a sequence of average epoch losses."""
    state, t, states = A, LossTracker(thr, 1), []
    for loss in losses:
        states.append(state)
        tr = update_state(state, t.reset().add(loss))
        state, t = tr.state, tr.tracker
    return states


class TestAvgLoss:
    def test_arithmetic(self):
        assert avg_epoch_loss(LossTracker(0.1, 30, 2, 120.0)) == 2.0
        assert avg_epoch_loss(LossTracker(0.1, 30, 2, 0.0)) == 0.0

    def test_recorded_batches(self):
        batch_losses = [2.31, 2.05, 1.87]
        t = LossTracker(0.1, 3)
        for v in batch_losses:
            t = t.add(v)
        assert avg_epoch_loss(t) == pytest.approx(sum(batch_losses) / 3, rel=1e-15)

    @pytest.mark.parametrize("num_batch,k", [(0, 1), (3, 0)])
    def test_zero_denominator(self, num_batch, k):
        with pytest.raises(ZeroDivisionError):
            avg_epoch_loss(LossTracker(0.1, num_batch, k, 1.0))

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            LossTracker(-0.01, 1)
        with pytest.raises(ValueError):
            LossBasedSchedule(-1)


class TestUpdateState:
    def test_examples(self):
        tr = update_state(A, tracker(2.0, thr=0.05))
        assert tr.state is B and tr.delta_loss == 0 and tr.tracker.last_update_loss == 2.0
        tr = update_state(B, tracker(1.9, last=2.0, thr=0.05))
        assert tr.state is A and tr.delta_loss == pytest.approx(0.1)
        assert update_state(C, tracker(1.98, last=2.0, thr=0.05)).state is C
        assert update_state(A, tracker(7.3, thr=0.0)).state is A

    # Losses are dyadic so last - avg is exact: delta in {0.25, 0.5, 0.75} vs thr 0.5
    @pytest.mark.parametrize("entering", [A, B, C])
    @pytest.mark.parametrize("avg,relation", [(1.75, "below"), (1.5, "equal"), (1.25, "above")])
    def test_exhaustive(self, entering, avg, relation):
        thr, last = 0.5, 2.0
        tr = update_state(entering, tracker(avg, last=last, thr=thr))
        if entering is A:
            # leaving A resets the reference, so delta is 0 whatever the loss
            assert tr.delta_loss == 0 and tr.state is B
            return
        assert tr.delta_loss == last - avg
        assert tr.tracker.last_update_loss == last
        expected = A if relation in ("equal", "above") else C
        assert tr.state is expected

    def test_tracker_not_mutated(self):
        t = tracker(1.0, last=2.0)
        update_state(A, t)
        assert t.last_update_loss == 2.0


finite_losses = st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=1, max_size=60)


class TestProperties:
    @settings(max_examples=300, deadline=None)
    @given(finite_losses, st.floats(1e-6, 5.0))
    def test_no_consecutive_a(self, losses, thr):
        states = simulate(losses, thr)
        assert states[0] is A
        for prev, cur in zip(states, states[1:]):
            assert not (prev is A and cur is A)
            if cur is B:
                assert prev is A
            if prev is A:
                assert cur is B

    @settings(max_examples=100, deadline=None)
    @given(finite_losses)
    def test_zero_threshold_all_a(self, losses):
        assert set(simulate(losses, 0.0)) == {A}

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=60), st.floats(1e-4, 0.5))
    def test_reference_loss_non_increasing_on_descent(self, drops, thr):
        losses, level = [], 10.0
        for d in drops:
            level -= d
            losses.append(level)
        state, t, refs = A, LossTracker(thr, 1), []
        for loss in losses:
            tr = update_state(state, t.reset().add(loss))
            if state is A:
                refs.append(tr.tracker.last_update_loss)
            state, t = tr.state, tr.tracker
        assert all(b <= a for a, b in zip(refs, refs[1:]))


class TestNaive:
    def test_formula(self):
        assert naive_update_epochs(10, 5) == {1, 3, 5, 7, 9}
        assert [naive_schedule(e, 10, 5) for e in range(1, 11)] == [A, B] * 5

    def test_budget_equals_total(self):
        assert all(naive_schedule(e, 7, 7) is A for e in range(1, 8))

    def test_budget_one(self):
        assert [naive_schedule(e, 5, 1) for e in range(1, 6)] == [A, B, C, C, C]

    @pytest.mark.parametrize("budget", [0, 11, -2])
    def test_budget_out_of_range(self, budget):
        with pytest.raises(ValueError):
            naive_schedule(1, 10, budget)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 200).flatmap(lambda t: st.tuples(st.just(t), st.integers(1, t))))
    def test_budget_respected(self, tb):
        total, budget = tb
        epochs = naive_update_epochs(total, budget)
        assert len(epochs) == budget and min(epochs) == 1 and max(epochs) <= total

    @settings(max_examples=100, deadline=None)
    @given(finite_losses, st.floats(1e-3, 1.0))
    def test_same_a_set_same_messages(self, losses, thr):
        # a naive schedule built from the loss-based A-set reproduces its states
        states = simulate(losses, thr)
        a_set = {i + 1 for i, s in enumerate(states) if s is A}
        listed = [A if e in a_set else B if e - 1 in a_set else C for e in range(1, len(states) + 1)]
        assert listed == states


class TestScheduleObjects:
    def test_fixed_repeats_last(self):
        sched = FixedSchedule("ABCCA")
        t = LossTracker(0.0, 1).add(1.0)
        got = [sched.start(t)]
        for epoch in range(1, 7):
            got.append(sched.advance(epoch, got[-1], t).state)
        assert "".join(got) == "ABCCAAA"

    def test_naive_object_matches_function(self):
        sched = NaiveSchedule(12, 4)
        assert [sched.state_for(e) for e in range(1, 13)] == [naive_schedule(e, 12, 4) for e in range(1, 13)]

    def test_always_a_tracks_reference(self):
        sched = AlwaysASchedule()
        tr = sched.advance(1, A, LossTracker(0.1, 2).add(3.0))
        assert tr.state is A and tr.tracker.last_update_loss == 1.5

    def test_loss_based_delegates(self):
        t = tracker(1.9, last=2.0)
        assert LossBasedSchedule(0.05).advance(3, B, t) == update_state(B, t)
