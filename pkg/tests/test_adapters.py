import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adapter_clir.adapters import (
    Adapter,
    AdapterCatalog,
    AdapterChain,
    LanguageAdapterSet,
    adapter_forward,
    chain_forward,
    count_adapter_params,
    init_adapter,
    init_language_adapters,
    init_task_adapters,
    load_adapter_set,
    save_adapter_set,
    swap_language_adapter,
)
from adapter_clir.core import ConfigError, DimensionError, ParamRegistry, ParamTensor
from adapter_clir.retrieval import build_model
from conftest import TINY, gradcheck


def fixed(h, b, down, up, role="language"):
    return Adapter(
        ParamTensor("d", np.asarray(down, dtype=float)), ParamTensor("db", np.zeros(b)),
        ParamTensor("u", np.asarray(up, dtype=float)), ParamTensor("ub", np.zeros(h)), h // b, role,
    )


def test_zero_up_returns_residual():
    a = init_adapter(8, 2, "task", seed=1)
    r = np.random.default_rng(0).normal(size=(3, 8))
    assert np.array_equal(adapter_forward(a, np.ones((3, 8)), r).data, r)


def test_hand_evaluated_forward():
    a = fixed(2, 1, [[1], [1]], [[1, 0]])
    out = adapter_forward(a, np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]])).data
    assert np.array_equal(out, [[3.5, 0.5]])


def test_relu_dead_case():
    a = fixed(2, 1, [[-1], [-1]], [[1, 1]])
    out = adapter_forward(a, np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]])).data
    assert np.array_equal(out, [[0.5, 0.5]])


def test_width_mismatch():
    a = init_adapter(8, 2, "task", 0)
    with pytest.raises(DimensionError):
        adapter_forward(a, np.ones((1, 4)), np.ones((1, 4)))
    with pytest.raises(DimensionError):
        adapter_forward(a, np.ones((1, 8)), np.ones((2, 8)))


def test_chain_examples():
    h, r = np.array([[1.0, 1.0]]), np.array([[2.0, 2.0]])
    assert np.array_equal(chain_forward(AdapterChain("query"), 0, h, r).data, [[3, 3]])

    la = init_language_adapters("eng", 2, 1, seed=0)
    ta = tuple(init_task_adapters("q", 2, 1, seed=0, r=2))
    assert np.array_equal(chain_forward(AdapterChain("query", la, ta), 0, h, r).data, r)

    hand = LanguageAdapterSet("x", [fixed(2, 1, [[1], [1]], [[1, 0]])])
    out = chain_forward(AdapterChain("query", hand, ta), 0, np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]])).data
    assert np.array_equal(out, [[0.5, 0.5]])


def test_both_adapters_get_same_residual():
    la = LanguageAdapterSet("x", [fixed(2, 1, [[1], [1]], [[1, 0]])])
    ta = (fixed(2, 1, [[1], [0]], [[0, 1]], "task"),)
    h, r = np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]])
    mid = np.array([[3.5, 0.5]])  # LA(h, r)
    expect = np.maximum(mid @ [[1], [0]], 0) @ [[0, 1]] + r
    assert np.allclose(chain_forward(AdapterChain("query", la, ta), 0, h, r).data, expect)


def test_init_counts_and_determinism():
    a = init_adapter(32, 16, "task", seed=4)
    assert a.bottleneck == 2 and a.num_params() == 162
    b = init_adapter(32, 16, "task", seed=4)
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.params(), b.params()))
    assert np.all(np.abs(a.down.data) <= 0.05) and not a.up.data.any()
    with pytest.raises(ConfigError):
        init_adapter(30, 16, "task", 0)


@pytest.mark.parametrize("h,r,layers,expected", [(768, 16, 12, 894_528), (768, 2, 12, 7_091_712), (768, 768, 1, 2_305)])
def test_count_formula(h, r, layers, expected):
    assert count_adapter_params(h, r, layers) == expected


@settings(max_examples=30, deadline=None)
@given(h=st.sampled_from([4, 8, 12, 16, 32]), r=st.sampled_from([1, 2, 4]), layers=st.integers(1, 4))
def test_count_matches_enumeration(h, r, layers):
    reg = ParamRegistry()
    for a in init_task_adapters("t", h, layers, 0, r):
        for p in a.params():
            reg.add(p)
    assert reg.total_params() == count_adapter_params(h, r, layers)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 4))
def test_output_minus_residual_in_up_row_space(seed, n):
    rng = np.random.default_rng(seed)
    a = init_adapter(8, 4, "task", seed)
    a.up.data[:] = rng.normal(size=a.up.shape)
    a.up_bias.data[:] = 0
    h, r = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    delta = adapter_forward(a, h, r).data - r
    assert np.linalg.matrix_rank(np.vstack([a.up.data, delta]), tol=1e-9) <= a.bottleneck


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_adapter_gradcheck(seed):
    rng = np.random.default_rng(seed)
    a = init_adapter(8, 2, "task", seed)
    for p in a.params():
        p.data[:] = rng.normal(size=p.shape)
    h = ParamTensor("h", rng.normal(size=(3, 8)))
    r = ParamTensor("r", rng.normal(size=(3, 8)))
    # keep pre-activations off the ReLU kink
    pre = h.data @ a.down.data + a.down_bias.data
    a.down_bias.data[np.abs(pre).min(axis=0) < 1e-2] += 0.1
    assert gradcheck(lambda: adapter_forward(a, h, r), a.params() + [h, r]) <= 1e-4


def test_serialization_round_trip(tmp_path):
    entry = init_language_adapters("lng1", 16, 2, seed=9)
    entry.adapters[0].up.data[:] = 0.25
    save_adapter_set(tmp_path / "a", entry.adapters, {"language_tag": "lng1"})
    back, meta = load_adapter_set(tmp_path / "a")
    assert meta["language_tag"] == "lng1" and meta["reduction_factor"] == 2 and meta["layers"] == 2
    for x, y in zip(entry.adapters, back):
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(x.params(), y.params()))


def test_catalog_lookup_and_persistence(tmp_path):
    cat = AdapterCatalog()
    cat.add(init_language_adapters("eng", 16, 2, 0), layers=2)
    with pytest.raises(LookupError, match="eng"):
        cat.get("xx")
    with pytest.raises(ConfigError):
        cat.add(init_language_adapters("lng1", 16, 1, 0), layers=2)
    cat.save(tmp_path)
    assert AdapterCatalog.load(tmp_path).tags() == ["eng"]


def _catalog():
    cat = AdapterCatalog()
    for tag, seed in (("eng", 1), ("lng1", 2)):
        entry = init_language_adapters(tag, TINY.hidden, TINY.layers, seed)
        rng = np.random.default_rng(seed)
        for a in entry.adapters:
            a.up.data[:] = rng.normal(0, 0.2, size=a.up.shape)
        cat.add(entry)
    return cat


def _enc(model, side, ids):
    mask = np.ones(ids.shape, dtype=bool)
    return model.hidden_states(ids, mask, side).data


def test_swap_semantics(tiny_backbone):
    model = build_model(tiny_backbone, _catalog(), "dpr", "adapter", reduction_factor=4, seed=1)
    # a zero-up task adapter discards the language adapter's output, so give
    # the task adapters weights as if trained (r=4 keeps the bottleneck alive)
    rng = np.random.default_rng(5)
    for p in model.task_params():
        p.data[:] = rng.normal(0, 0.2, size=p.shape)
    ids = np.random.default_rng(0).integers(10, 500, size=(2, 12))
    q0, d0 = _enc(model, "query", ids), _enc(model, "document", ids)

    same = swap_language_adapter(model, "document", "eng")
    assert np.array_equal(_enc(same, "document", ids), d0)

    swapped = swap_language_adapter(model, "document", "lng1")
    assert np.array_equal(_enc(swapped, "query", ids), q0)
    assert not np.array_equal(_enc(swapped, "document", ids), d0)
    assert np.array_equal(_enc(model, "document", ids), d0)  # original untouched

    back = swap_language_adapter(swapped, "document", "eng")
    assert np.array_equal(_enc(back, "document", ids), d0)

    with pytest.raises(LookupError, match="available"):
        swap_language_adapter(model, "query", "zz")
