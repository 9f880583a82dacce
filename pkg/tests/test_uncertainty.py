import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcswinu.errors import ValidationError
from mcswinu.model import ModelConfig, init_model
from mcswinu.uncertainty import (
    PredictionStack, export_uncertainty, heatmap_slices, mc_predict, read_pgm, stream_seed, vote,
)
from mcswinu.volumes import ByteGrid, LabelMap, Volume, read_volume

SMALL = ModelConfig(embed_dim=6, depths=(1, 1), num_heads=(1, 2), window_size=2, input_shape=(8, 8, 8))


def _stack(votes):
    """Stack of single-voxel maps with the given per-sample classes."""
    return PredictionStack(np.array(votes, np.uint8).reshape(len(votes), 1, 1, 1))


def brute_vote(votes):
    counts = Counter(votes)
    top = max(counts.values())
    return min(c for c, n in counts.items() if n == top), top


def test_unanimous_vote():
    u = vote(_stack([1] * 10), 5)
    assert (u.agreement.item(), bool(u.uncertain.item()), u.consensus.data.item()) == (10, False, 1)


def test_tied_vote_below_threshold():
    u = vote(_stack([1] * 4 + [5] * 4 + [0] * 2), 5)
    assert u.agreement.item() == 4 and bool(u.uncertain.item())
    assert u.consensus.data.item() == 1


def test_majority_vote_is_certain():
    votes = [2] * 6 + [3] * 4
    u = vote(_stack(votes), 5)
    cls, count = brute_vote(votes)
    assert (u.consensus.data.item(), u.agreement.item()) == (cls, count) == (2, 6)
    assert not bool(u.uncertain.item())


def test_threshold_range():
    with pytest.raises(ValidationError):
        vote(_stack([0, 1]), 3)
    with pytest.raises(ValidationError):
        vote(_stack([0, 1]), 0)


stacks = st.integers(1, 12).flatmap(lambda t: st.tuples(
    st.just(t),
    st.lists(st.integers(0, 5), min_size=t * 27, max_size=t * 27),
    st.randoms(use_true_random=False),
))


@settings(max_examples=100, deadline=None)
@given(stacks)
def test_vote_properties(case):
    t, flat, rnd = case
    labels = np.array(flat, np.uint8).reshape(t, 3, 3, 3)
    stack = PredictionStack(labels)
    maps = [vote(stack, k) for k in range(1, t + 1)]
    # pigeonhole over six classes
    assert maps[0].agreement.min() >= math.ceil(t / 6)
    # brute-force modal counts
    for idx in np.ndindex(3, 3, 3):
        cls, count = brute_vote(labels[(slice(None), *idx)].tolist())
        assert maps[0].consensus.data[idx] == cls and maps[0].agreement[idx] == count
    # monotone in the threshold
    for lo, hi in zip(maps, maps[1:]):
        assert np.all(lo.uncertain <= hi.uncertain)
    assert not maps[0].uncertain.any()
    disagree = np.any(labels != labels[0], axis=0)
    assert np.array_equal(maps[-1].uncertain, disagree)
    # permutation invariance
    order = list(range(t))
    rnd.shuffle(order)
    shuffled = vote(PredictionStack(labels[order]), max(1, t // 2))
    ref = maps[max(1, t // 2) - 1]
    assert np.array_equal(shuffled.agreement, ref.agreement)
    assert shuffled.consensus == ref.consensus
    assert np.array_equal(shuffled.uncertain, ref.uncertain)


def test_stream_seed_is_stable():
    # frozen values: SeedSequence([seed, i]) first word, top bit cleared
    assert stream_seed(0, 0) == stream_seed(0, 0)
    assert len({stream_seed(0, i) for i in range(100)}) == 100
    expected = int(np.random.SeedSequence([7, 3]).generate_state(1, dtype=np.uint64)[0]) & (2 ** 63 - 1)
    assert stream_seed(7, 3) == expected


@pytest.fixture(scope="module")
def volume():
    return Volume(np.random.default_rng(0).standard_normal((16, 8, 8)).astype(np.float32), (3.0, 1.7, 1.7))


def test_no_dropout_gives_identical_samples(volume):
    model = init_model(ModelConfig(**{**SMALL.__dict__, "dropout_rate": 0.0}), 0)
    stack = mc_predict(model, volume, samples=10, seed=1)
    assert stack.samples == 10
    assert all(np.array_equal(stack.labels[0], s) for s in stack.labels)
    assert not vote(stack, 5).uncertain.any()


def test_mc_predict_is_deterministic(volume):
    model = init_model(SMALL, 0)
    a = mc_predict(model, volume, samples=3, seed=4)
    b = mc_predict(model, volume, samples=3, seed=4)
    assert np.array_equal(a.labels, b.labels)


def test_dropout_samples_differ(volume):
    model = init_model(SMALL, 1)
    stack = mc_predict(model, volume, samples=10, seed=0, keep_probabilities=True)
    assert any(not np.array_equal(stack.probabilities[0], p) for p in stack.probabilities[1:])
    assert stack.probabilities.shape == (10, 6, 16, 8, 8)


# ------------------------------------------------------------------ export

def test_export_fully_certain(tmp_path):
    stack = PredictionStack(np.ones((10, 4, 5, 6), np.uint8), (3.0, 1.0, 1.0))
    umap = vote(stack, 5)
    files = export_uncertainty(umap, tmp_path / "case")
    mask = read_volume(files["uncertain"])
    assert isinstance(mask, ByteGrid) and not mask.data.any()
    agreement = read_volume(files["agreement"])
    assert np.array_equal(agreement.data, umap.agreement) and agreement.spacing_mm == (3.0, 1.0, 1.0)
    assert read_volume(files["consensus"]) == umap.consensus
    assert len(files["heatmaps"]) == 4
    assert files["heatmaps"][0].name == "case_heatmap_z000.pgm"
    assert not read_pgm(files["heatmaps"][2]).any()


def test_heatmap_ring_around_sphere(tmp_path):
    n, t = 21, 10
    zz, yy, xx = np.mgrid[:n, :n, :n] - n // 2
    r = np.sqrt(zz ** 2 + yy ** 2 + xx ** 2)
    shell = (r >= 5.5) & (r < 7.0)
    labels = np.zeros((t, n, n, n), np.uint8)
    labels[:, r < 7.0] = 3
    labels[:6, shell] = 0  # 6 of 10 samples disagree on the shell -> agreement 6
    labels[:6, shell] = np.arange(6)[:, None] % 3  # spread the dissent: 0,1,2 twice each, 3 four times
    umap = vote(PredictionStack(labels), 5)
    assert np.array_equal(umap.uncertain, shell)
    files = export_uncertainty(umap, tmp_path / "ring")
    mid = read_pgm(files["heatmaps"][n // 2])
    bright = mid > 0
    assert np.array_equal(bright, shell[n // 2])
    assert bright.sum() == shell[n // 2].sum() > 0
    # bright pixels form a ring: the centre of the slice stays dark
    assert not bright[n // 2, n // 2]


def test_heatmap_scaling():
    stack = PredictionStack(np.array([[0], [0], [1], [2], [3], [4], [5], [0], [1], [2], [3], [4]],
                                     np.uint8).reshape(12, 1, 1, 1))
    umap = vote(stack, 5)
    assert umap.agreement.item() == 3
    # lowest reachable agreement for 12 samples is 2 -> 3 maps to (12-3)/(12-2)
    assert heatmap_slices(umap).item() == round(255 * 9 / 10)
