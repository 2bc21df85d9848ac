import random

from nlemu.cpu import LoopGuard, loop_guard
from nlemu.cpu.loop_guard import CONTINUE, LOOP_DETECTED


def test_repeat_within_window():
    history = [(0x400000, 1), (0x400002, 7), (0x400000, 1)]
    assert loop_guard(history, 64) == LOOP_DETECTED


def test_first_visit_continues():
    assert loop_guard([(0x400000, 1)], 64) == CONTINUE
    assert loop_guard([], 64) == CONTINUE


def test_repeat_outside_window_continues():
    history = [(1, 1), (2, 2), (3, 3), (1, 1)]
    assert loop_guard(history, 2) == CONTINUE
    assert loop_guard(history, 3) == LOOP_DETECTED


def test_state_hash_distinguishes_same_eip():
    # A counted loop revisits the same EIP with a different counter.
    history = [(0x400010, ecx) for ecx in range(1000, 900, -1)]
    assert all(loop_guard(history[: n + 1], 64) == CONTINUE for n in range(len(history)))


def test_straight_line_code():
    history = [(0x400000 + i, i) for i in range(500)]
    assert all(loop_guard(history[: n + 1], 64) == CONTINUE for n in range(len(history)))


def test_zero_window_disables():
    assert loop_guard([(1, 1), (1, 1)], 0) == CONTINUE


def test_incremental_agrees_with_pure_function():
    rng = random.Random(3)
    for window in (1, 4, 16):
        history = []
        guard = LoopGuard(window)
        for _ in range(400):
            key = (rng.randrange(12), rng.randrange(3))
            history.append(key)
            assert guard.observe(key) == (loop_guard(history, window) == LOOP_DETECTED)
            if loop_guard(history, window) == LOOP_DETECTED:
                history.clear()
                guard = LoopGuard(window)
