import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nora.adapter import count_trainable, expand_groups, init_nora, merge, per_group_count
from nora.diagnostics import wasserstein1
from nora.rational import GroupedRationalLayer, RationalCoeffs, rational_value
from nora.tensor import Tensor

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
coef = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def vec(n):
    return arrays(np.float64, n, elements=coef)


@st.composite
def layers(draw, max_groups=8):
    m, n = draw(st.integers(0, 6)), draw(st.integers(0, 6))
    G = draw(st.sampled_from([g for g in (1, 2, 4, 8) if g <= max_groups]))
    C = G * draw(st.integers(1, 3))
    layer = GroupedRationalLayer(C, G, m, n)
    layer.a.data[...] = draw(arrays(np.float64, (G, m + 1), elements=coef))
    layer.b.data[...] = draw(arrays(np.float64, (G, n + 1), elements=coef))
    return layer


@given(vec(st.integers(1, 9)), arrays(np.float64, 20, elements=finite))
def test_denominator_at_least_one(b, x):
    q = sum(bi * x**i for i, bi in enumerate(b))
    assert np.all(1.0 + np.abs(q) >= 1.0)
    # so |phi| is bounded by |P| everywhere
    a = np.ones(3)
    assert np.all(np.abs(rational_value(a, b, x)) <= np.abs(1 + x + x * x) + 1e-12)


@settings(deadline=None, max_examples=60)
@given(layers(), st.data())
def test_group_purity(layer, data):
    x = data.draw(arrays(np.float64, (2, layer.channels), elements=finite))
    c = data.draw(st.integers(0, layer.channels - 1))
    out = layer.value(x)
    g = layer.group_of_channel(c)
    single = RationalCoeffs(layer.a.data[g], layer.b.data[g])(x[:, c])
    assert np.array_equal(out[:, c], single)
    # perturbing one channel's input never moves any other channel's output
    x2 = x.copy()
    x2[:, c] += 0.5
    moved = np.any(layer.value(x2) != out, axis=0)
    assert not np.delete(moved, c).any()


@settings(deadline=None, max_examples=60)
@given(layers(), st.integers(1, 3), st.sampled_from(["both", "numerator-only", "denominator-only", "const-only"]), st.integers(0, 2**31))
def test_zero_init_identity(layer, r, mode, seed):
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        adapted = init_nora(layer, r, mode, np.random.default_rng(seed))
    x = np.random.default_rng(seed).uniform(-3, 3, (4, layer.channels))
    assert np.array_equal(adapted.value(x), layer.value(x))
    m, n = layer.degrees
    assert count_trainable(adapted) == layer.num_groups * per_group_count(m, n, r, mode)


@settings(deadline=None, max_examples=40)
@given(layers(max_groups=4), st.integers(0, 2**31))
def test_expansion_noop(layer, seed):
    import warnings

    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        adapted = init_nora(layer, 2, "both", rng)
    for _, p in adapted.delta.named_parameters():
        p.data[...] = rng.normal(0, 0.1, p.shape)
    x = rng.uniform(-3, 3, (5, layer.channels))
    cur = adapted
    while layer.channels % (cur.num_groups * 2) == 0:
        nxt = expand_groups(cur, cur.num_groups * 2)
        assert np.array_equal(nxt.value(x), cur.value(x))
        assert count_trainable(nxt) == 2 * count_trainable(cur)
        cur = nxt


@settings(deadline=None, max_examples=40)
@given(layers(max_groups=4), st.integers(0, 2**31))
def test_merge_preserves_function(layer, seed):
    import warnings

    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        adapted = init_nora(layer, 1, "both", rng)
    for _, p in adapted.delta.named_parameters():
        p.data[...] = rng.normal(0, 0.1, p.shape)
    x = rng.uniform(-3, 3, (5, layer.channels))
    merged = merge(adapted)
    ref = adapted.value(x)
    assert np.allclose(merged.value(x), ref, rtol=1e-12, atol=1e-12 * max(1.0, np.max(np.abs(ref))))


@given(arrays(np.float64, 30, elements=finite), arrays(np.float64, 30, elements=finite), finite)
def test_w1_symmetry_and_shift(u, v, c):
    assert wasserstein1(u, v) == wasserstein1(v, u)
    assert wasserstein1(u, v) >= 0.0
    assert abs(wasserstein1(u, u + c) - abs(c)) <= 1e-12 * (1 + abs(c) + np.max(np.abs(u)))


@given(arrays(np.float64, 30, elements=st.floats(-1e6, 1e6)), arrays(np.float64, 30, elements=st.floats(-1e6, 1e6)))
def test_score_in_unit_interval(u, v):
    d = wasserstein1(u, v)
    assert 0.0 <= d / (1.0 + d) < 1.0


@settings(deadline=None, max_examples=40)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_ops_do_not_mutate_inputs(a, b):
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    ((ta @ tb).tanh() * 2.0).sum().backward()
    assert np.array_equal(ta.data, a) and np.array_equal(tb.data, b)
