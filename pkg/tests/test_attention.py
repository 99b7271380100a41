import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mca_forge import tensor as T
from mca_forge.attention import (
    AttentionWeights,
    BranchRole,
    BranchState,
    McaVariant,
    mca_attention,
    mca_weights,
    multi_head_attention,
    multi_head_mca,
    resolve_context,
)
from mca_forge.errors import ConfigError, PolicyError
from mca_forge.tensor import Tensor, bit_equal, grad_check

SRC, TAR = BranchRole.SRC, BranchRole.TAR


def state(role, q, k, v):
    return BranchState(role, Tensor(q), Tensor(k), Tensor(v))


def rand_state(rng, role, n, d):
    return state(role, *(rng.standard_normal((n, d)) for _ in range(3)))


def oracle(q, k, v):
    """Scalar softmax enumeration in float64."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = [float(q[i] @ k[j]) / np.sqrt(d) for j in range(k.shape[0])]
        m = max(scores)
        e = [np.exp(s - m) for s in scores]
        z = sum(e)
        for j in range(k.shape[0]):
            out[i] += e[j] / z * v[j]
    return out


def test_roles_and_variants():
    assert SRC.opposite is TAR and TAR.opposite is SRC
    assert [v.value for v in McaVariant] == ["self", "concat_k", "concat_kv", "swap_k", "swap_kv"]


def test_branch_state_shape_check():
    with pytest.raises(Exception):
        state(SRC, np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


def test_resolve_context_table():
    rng = np.random.default_rng(0)
    own, other = rand_state(rng, SRC, 3, 2), rand_state(rng, TAR, 3, 2)
    cat = lambda a, b: np.concatenate([a.array, b.array])
    expect = {
        McaVariant.SELF: (own.k.array, own.v.array),
        McaVariant.CONCAT_K: (cat(own.k, other.k), cat(own.v, own.v)),
        McaVariant.CONCAT_KV: (cat(own.k, other.k), cat(own.v, other.v)),
        McaVariant.SWAP_K: (other.k.array, own.v.array),
        McaVariant.SWAP_KV: (other.k.array, other.v.array),
    }
    for var, (k, v) in expect.items():
        kb, vb = resolve_context(var, own, other)
        assert np.array_equal(kb.array, k) and np.array_equal(vb.array, v)
        assert kb.shape[0] == vb.shape[0]


def test_self_is_unchanged():
    rng = np.random.default_rng(1)
    own, other = rand_state(rng, SRC, 4, 3), rand_state(rng, TAR, 2, 3)
    kb, vb = resolve_context(McaVariant.SELF, own, other)
    assert kb is own.k and vb is own.v


def test_concat_kv_duplication():
    rng = np.random.default_rng(2)
    own = rand_state(rng, SRC, 2, 2)
    kb, vb = resolve_context(McaVariant.CONCAT_KV, own, own)
    assert np.array_equal(kb.array, np.concatenate([own.k.array] * 2))
    assert np.array_equal(vb.array, np.concatenate([own.v.array] * 2))


def test_swap_kv_substitution():
    own = state(SRC, [[0.0]], [[1.0]], [[0.0]])
    other = state(TAR, [[0.0]], [[9.0]], [[7.0]])
    kb, vb = resolve_context(McaVariant.SWAP_KV, own, other)
    assert kb.array.tolist() == [[9.0]] and vb.array.tolist() == [[7.0]]


@pytest.mark.parametrize("var", [McaVariant.SWAP_K, McaVariant.SWAP_KV])
def test_swap_token_mismatch_names_variant(var):
    rng = np.random.default_rng(3)
    with pytest.raises(PolicyError, match=var.value):
        resolve_context(var, rand_state(rng, SRC, 3, 2), rand_state(rng, TAR, 4, 2))


def test_concat_kv_allows_unequal_tokens():
    rng = np.random.default_rng(4)
    own, other = rand_state(rng, SRC, 3, 2), rand_state(rng, TAR, 5, 2)
    assert mca_attention(own, other, McaVariant.CONCAT_KV).shape == (3, 2)


def test_concat_k_damp_mode():
    rng = np.random.default_rng(5)
    own, other = rand_state(rng, SRC, 3, 2), rand_state(rng, TAR, 3, 2)
    kb, vb = resolve_context(McaVariant.CONCAT_K, own, other, "damp")
    assert np.all(vb.array[3:] == 0)
    out = mca_attention(own, other, McaVariant.CONCAT_K, "damp").array
    w = mca_weights(own, other, McaVariant.CONCAT_K).array.astype(np.float64)
    assert np.allclose(out, w[:, :3] @ own.v.array, atol=1e-6)
    with pytest.raises(ConfigError):
        resolve_context(McaVariant.CONCAT_K, own, other, "bogus")


def test_single_token_example():
    s = state(SRC, [[2.0]], [[3.0]], [[5.0]])
    assert mca_attention(s, s, McaVariant.SELF).array.tolist() == [[5.0]]


def test_concat_kv_enumeration_oracle():
    own = state(SRC, [[0.0], [1.0]], [[0.0], [1.0]], [[1.0], [2.0]])
    other = state(TAR, [[0.0], [0.0]], [[2.0], [3.0]], [[3.0], [4.0]])
    got = mca_attention(own, other, McaVariant.CONCAT_KV).array
    ref = oracle(own.q.array, [[0], [1], [2], [3]], [[1], [2], [3], [4]])
    assert np.max(np.abs(got - ref)) < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_identity_properties(n, d, seed):
    rng = np.random.default_rng(seed)
    own, other = rand_state(rng, SRC, n, d), rand_state(rng, TAR, n, d)
    twin = BranchState(TAR, own.q, own.k, own.v)
    base = T.scaled_dot_product_attention(own.q, own.k, own.v)
    assert bit_equal(mca_attention(own, other, McaVariant.SELF), base)
    for var in (McaVariant.SWAP_K, McaVariant.SWAP_KV):
        assert bit_equal(mca_attention(own, twin, var), base)
    for var in (McaVariant.CONCAT_KV, McaVariant.CONCAT_K):
        assert np.max(np.abs(mca_attention(own, twin, var).array - base.array)) <= 1e-6
    for var in McaVariant:
        w = mca_weights(own, other, var).array.astype(np.float64)
        assert np.max(np.abs(w.sum(1) - 1)) <= 1e-6
        assert mca_attention(own, other, var).shape == (n, d)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_concat_kv_permutation_invariance(n, m, d, seed):
    rng = np.random.default_rng(seed)
    own, other = rand_state(rng, SRC, n, d), rand_state(rng, TAR, m, d)
    p = rng.permutation(m)
    perm = state(TAR, other.q.array, other.k.array[p], other.v.array[p])
    a = mca_attention(own, other, McaVariant.CONCAT_KV).array
    b = mca_attention(own, perm, McaVariant.CONCAT_KV).array
    assert np.max(np.abs(a - b)) <= 1e-6


@pytest.mark.parametrize("var", list(McaVariant))
def test_variant_gradients(var):
    rng = np.random.default_rng(6)

    def f(q, k, v, qo, ko, vo):
        own, other = BranchState(SRC, q, k, v), BranchState(TAR, qo, ko, vo)
        return T.sum_all(mca_attention(own, other, var))

    for _ in range(3):
        inputs = [rng.standard_normal((3, 4)) for _ in range(6)]
        assert grad_check(f, inputs) < 1e-4


# --- multi-head -----------------------------------------------------------


def test_width_must_divide_heads():
    with pytest.raises(ConfigError):
        AttentionWeights.random(10, 3, np.random.default_rng(0))


def test_self_self_matches_single_branch():
    rng = np.random.default_rng(7)
    w = AttentionWeights.random(8, 2, rng)
    xs, xt = Tensor(rng.standard_normal((5, 8))), Tensor(rng.standard_normal((5, 8)))
    s, t = multi_head_mca(xs, xt, w, (McaVariant.SELF, McaVariant.SELF))
    assert bit_equal(s, multi_head_attention(xs, w))
    assert bit_equal(t, multi_head_attention(xt, w))


def test_swap_identical_inputs_is_noop():
    rng = np.random.default_rng(8)
    w = AttentionWeights.random(8, 4, rng)
    x = Tensor(rng.standard_normal((6, 8)))
    a = multi_head_mca(x, x, w, (McaVariant.SWAP_KV, McaVariant.SWAP_KV))
    b = multi_head_mca(x, x, w, (McaVariant.SELF, McaVariant.SELF))
    for u, v in zip(a, b):
        assert np.max(np.abs(u.array - v.array)) <= 1e-6


def test_swap_kv_crossed_state_oracle():
    rng = np.random.default_rng(9)
    w = AttentionWeights.random(8, 2, rng)
    xs, xt = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    src_out, _ = multi_head_mca(Tensor(xs), Tensor(xt), w, {SRC: McaVariant.SWAP_KV, TAR: McaVariant.SELF})
    f64 = lambda t: t.array.astype(np.float64)
    q = xs @ f64(w.wq) + f64(w.bq)
    k = xt @ f64(w.wk) + f64(w.bk)
    v = xt @ f64(w.wv) + f64(w.bv)
    heads = [oracle(q[:, h * 4:(h + 1) * 4], k[:, h * 4:(h + 1) * 4], v[:, h * 4:(h + 1) * 4]) for h in range(2)]
    ref = np.concatenate(heads, axis=1) @ f64(w.wo) + f64(w.bo)
    assert np.max(np.abs(src_out.array - ref)) < 1e-5


def test_each_branch_uses_own_variant():
    rng = np.random.default_rng(10)
    w = AttentionWeights.random(8, 2, rng)
    xs, xt = Tensor(rng.standard_normal((4, 8))), Tensor(rng.standard_normal((4, 8)))
    s, t = multi_head_mca(xs, xt, w, (McaVariant.SELF, McaVariant.SWAP_KV))
    assert bit_equal(s, multi_head_attention(xs, w))
    assert not np.allclose(t.array, multi_head_attention(xt, w).array)
