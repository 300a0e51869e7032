import numpy as np
import pytest

from ntpp import autograd as ag
from ntpp.codec import DualTokenStream, interleave
from ntpp.embeddings import EmbeddingTables, cyclic_depth, embed_sequence, positional_angles


def tables(rng, V=6, dm=8):
    return EmbeddingTables(ag.Tensor(rng.normal(size=(V, dm))), ag.Tensor(rng.normal(size=(2, dm))),
                           ag.Tensor(rng.normal(size=(2, dm))), 10000.0)


def test_cyclic_depth_examples():
    assert cyclic_depth(0, 4) == (0.0, 1.0)
    s, c = cyclic_depth(1, 4)
    assert s == pytest.approx(1.0) and c == pytest.approx(0.0, abs=1e-15)


def test_cyclic_depth_periodic(rng):
    for _ in range(1000):
        D = int(rng.integers(1, 20))
        i = int(rng.integers(0, 10_000))
        assert cyclic_depth(i, D) == cyclic_depth(i + D, D)


def test_channel_difference(rng):
    tb = tables(rng)
    s = DualTokenStream([[3, 4]], [[3, 5]])
    e = embed_sequence(interleave(s), tb).data
    # position 0 is a(depth 1), position 2 is b(depth 1), same token
    assert np.allclose(e[0] - e[2], tb.channel_proj.data[0] - tb.channel_proj.data[1], atol=1e-14)


def test_zeroed_projections_give_codebook(rng):
    tb = tables(rng)
    tb.channel_proj.data[:] = 0
    tb.depth_proj.data[:] = 0
    s = DualTokenStream([[3, 4], [2, 0]], [[1, 5], [5, 5]])
    seq = interleave(s)
    assert np.array_equal(embed_sequence(seq, tb).data, tb.codebook.data[seq.tokens])


def test_d1_depth_term_constant(rng):
    tb = tables(rng)
    tb.codebook.data[:] = 0
    tb.channel_proj.data[:] = 0
    s = DualTokenStream([[2], [3], [4]], [[5], [0], [2]])
    e = embed_sequence(interleave(s), tb).data
    assert np.all(e == e[0])


def test_embedding_rejects_bad_ids(rng):
    from ntpp.errors import ShapeError
    with pytest.raises(ShapeError):
        embed_sequence(interleave(DualTokenStream([[9]], [[1]])), tables(rng))


def test_odd_d_model_rejected(rng):
    with pytest.raises(ValueError):
        EmbeddingTables(ag.Tensor(np.zeros((3, 5))), ag.Tensor(np.zeros((2, 5))),
                        ag.Tensor(np.zeros((2, 5))), 1e4)


def test_angles_zero_step_identity():
    cos, sin = positional_angles(0, 8)
    assert np.array_equal(cos, np.ones(4)) and np.array_equal(sin, np.zeros(4))


def test_angles_shared_within_step():
    from ntpp.codec import position_meta
    D = 3
    i = np.arange(2 * 4 * D)
    step, chan, _ = position_meta(i, D)
    cos, sin = positional_angles(step, 8)
    for t in range(4):
        rows = np.flatnonzero(step == t)
        assert all(np.array_equal(cos[r], cos[rows[0]]) and np.array_equal(sin[r], sin[rows[0]]) for r in rows)
        assert set(chan[rows]) == {0, 1}


def test_rotary_relative_position(rng):
    from ntpp.autograd import rope_np
    q, k = rng.normal(size=8), rng.normal(size=8)

    def score(t, s):
        ct, st_ = positional_angles(t, 8)
        cs, ss = positional_angles(s, 8)
        return rope_np(q, ct, st_) @ rope_np(k, cs, ss)

    base = score(3, 1)
    for t, s in [(5, 3), (10, 8), (2, 0)]:
        assert score(t, s) == pytest.approx(base, rel=1e-10)
    assert abs(score(4, 1) - base) > 1e-6
