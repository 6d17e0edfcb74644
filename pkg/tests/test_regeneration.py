import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gwspeed import rng
from gwspeed.conductance import annealed_escape
from gwspeed.regeneration import (BlockTable, NBRejectionError, confirmed_times, detect_regenerations,
                                  extract_blocks, sample_nb_blocks, sample_nb_episode, simulate)
from gwspeed.tree import TreeArena
from gwspeed.walk import RegimeError, WalkTrace, run_walk, walk

from conftest import dary, half_line
from oracles import brute_regenerations


def _random_paths(n_paths, length, seed):
    gen = np.random.default_rng(seed)
    out = []
    for _ in range(n_paths):
        drift = gen.uniform(0, 0.5)
        steps = np.where(gen.random(length - 1) < 0.5 + drift / 2, 1, -1)
        out.append(np.concatenate([[0], np.cumsum(steps)]))
    return out


def test_spec_example_with_and_without_censoring():
    d = [0, 1, 2, 1, 2, 3]
    r = detect_regenerations(d, censor_buffer=0)
    assert list(r.confirmed) == [1, 5] and len(r.censored) == 0
    r = detect_regenerations(d, censor_buffer=1)
    assert list(r.confirmed) == [1] and list(r.censored) == [5]
    assert 2 not in brute_regenerations(np.array(d), 0)


def test_monotone_path_all_times_confirmed():
    d = np.arange(100)
    r = detect_regenerations(d, censor_buffer=10)
    assert list(r.confirmed) == list(range(1, 90))
    assert list(r.censored) == list(range(90, 100))


def test_non_nearest_neighbour_rejected():
    with pytest.raises(ValueError, match="index 2"):
        detect_regenerations([0, 1, 3])


@pytest.mark.parametrize("buffer", [0, 5, 50])
def test_detector_matches_brute_force(buffer):
    for d in _random_paths(150, 2000, buffer):
        assert np.array_equal(detect_regenerations(d, buffer).confirmed, brute_regenerations(d, buffer))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), b1=st.integers(0, 30), b2=st.integers(0, 30))
def test_larger_buffer_never_adds_times(seed, b1, b2):
    lo, hi = sorted((b1, b2))
    d = _random_paths(1, 600, seed)[0]
    assert set(detect_regenerations(d, hi).confirmed) <= set(detect_regenerations(d, lo).confirmed)


def test_kernel_candidates_match_detector(leafy):
    key = rng.stream_key(1, rng.TREE)
    run = run_walk(TreeArena(leafy, key), 1.0, 50000, rng.stream_key(1, rng.WALK), retain=True)
    assert np.array_equal(confirmed_times(run, 50), detect_regenerations(run.depths, 50).confirmed)


def test_blocks_from_trace_and_kernel_agree(leafy):
    key, wkey = rng.stream_key(2, rng.TREE), rng.stream_key(2, rng.WALK)
    tr = walk(WalkTrace(TreeArena(leafy, key), 0.9, rng.Stream(wkey)), 20000)
    run = run_walk(TreeArena(leafy, key), 0.9, 20000, wkey)
    times = detect_regenerations(tr.depths, 20).confirmed
    a = extract_blocks(tr, times)
    b = extract_blocks(run, confirmed_times(run, 20))
    assert np.array_equal(a.blocks.duration, b.blocks.duration)
    assert np.array_equal(a.blocks.trap_time, b.blocks.trap_time)
    assert np.array_equal(a.blocks.excursions, b.blocks.excursions)
    np.testing.assert_allclose(a.blocks.b_sum, b.blocks.b_sum, atol=1e-9)
    # conservation: block 0 + blocks + censored tail = all steps
    assert a.block0.duration + a.blocks.duration.sum() + a.tail_steps == tr.n
    blk = a.blocks
    assert np.all(blk.duration >= 1) and np.all(blk.displacement >= 1)
    assert np.all(blk.displacement <= blk.duration) and np.all(blk.trap_time < blk.duration)


def test_half_line_zero_bias_blocks():
    tr = walk(WalkTrace(TreeArena(half_line(), 0), 0.0, rng.Stream(1)), 200)
    ex = extract_blocks(tr, detect_regenerations(tr.depths, 10).confirmed)
    assert np.all(ex.blocks.duration == 1) and np.all(ex.blocks.displacement == 1)


def test_too_few_times_gives_note():
    tr = walk(WalkTrace(TreeArena(half_line(), 0), 0.0, rng.Stream(1)), 5)
    ex = extract_blocks(tr, [1, 2])
    assert len(ex.blocks) == 0 and ex.notes


def test_dary_block_speed():
    sim = simulate(dary(2), 1.0, 2 * 10**5, 2, 5)
    b = sim.blocks
    assert len(b) >= 10**4
    ratio = b.displacement.sum() / b.duration.sum()
    # delta-method standard error of a ratio of means
    r = b.displacement - ratio * b.duration
    se = r.std() / np.sqrt(len(b)) / b.duration.mean()
    assert abs(ratio - 1 / 3) < 3 * se


def test_block_durations_uncorrelated(leafy):
    b = simulate(leafy, 1.0, 10**6, 1, 8).blocks
    x = b.duration.astype(float)
    lag1 = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(lag1) < 3 / np.sqrt(len(x))


def test_simulation_is_deterministic(leafy):
    a = simulate(leafy, 1.2, 20000, 2, 77).blocks
    b = simulate(leafy, 1.2, 20000, 2, 77).blocks
    assert np.array_equal(a.to_array(), b.to_array())


def test_block_csv(tmp_path, leafy):
    b = simulate(leafy, 1.0, 20000, 1, 1).blocks
    p = tmp_path / "blocks.csv"
    b.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "replica,index,duration,displacement,b_sum,excursions,trap_time"
    assert len(lines) == len(b) + 1
    assert isinstance(BlockTable.concat([b, b]), BlockTable)


def test_nb_acceptance_on_binary_tree():
    nb = sample_nb_blocks(dary(2), 1.0, 3000, 4, censor_buffer=30)
    p = 3000 / nb.attempts
    se = np.sqrt(p * (1 - p) / nb.attempts)
    assert abs(p - 0.5) < 3 * se


def test_nb_acceptance_matches_annealed_escape(leafless):
    nb = sample_nb_blocks(leafless, 0.2, 3000, 6, censor_buffer=20)
    p = 3000 / nb.attempts
    se_nb = np.sqrt(p * (1 - p) / nb.attempts)
    esc = annealed_escape(leafless, 0.2, 400, 4, 6, tol=1e-4)
    se_esc = (esc.hi - esc.lo) / (2 * 1.96)
    assert abs(p - esc.escape) < 3 * np.hypot(se_nb, se_esc)


def test_nb_guards(leafy):
    with pytest.raises(RegimeError):
        sample_nb_episode(leafy, 1.6, 1000, 0)
    with pytest.raises(NBRejectionError):
        sample_nb_episode(dary(2), 1.99, 10**5, 0, max_rejections=3)
