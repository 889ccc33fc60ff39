import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pignn_acpf import synth
from pignn_acpf.batch import block_diag_batch, graph_arrays, graph_merits, injections, residuals
from pignn_acpf.grid import build_admittance, to_per_unit
from pignn_acpf.numerics import State, compute_injections, compute_residuals, merit


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["HV", "MV"]), st.integers(2, 14), st.integers(0, 2**31 - 1))
def test_edge_list_injections_match_dense(regime, n, seed):
    rng = np.random.default_rng(seed)
    grid = to_per_unit(synth.sample_engineering_grid(regime, n, rng))
    state = State(rng.uniform(0.85, 1.15, n), rng.uniform(-0.5, 0.5, n))
    g = graph_arrays(grid, state)
    p, q = injections(g, state.v, state.theta)
    pd, qd = compute_injections(build_admittance(grid), state)
    scale = max(1.0, np.abs(pd).max(), np.abs(qd).max())
    assert np.max(np.abs(p - pd)) <= 1e-12 * scale and np.max(np.abs(q - qd)) <= 1e-12 * scale
    dp, dq = residuals(g, state.v, state.theta)
    r = compute_residuals(grid, build_admittance(grid), state)
    assert np.allclose(dp, r.dp, atol=1e-12 * scale) and np.allclose(dq, r.dq, atol=1e-12 * scale)
    assert graph_merits(g, dp, dq)[0] == pytest.approx(merit(r), abs=1e-12 * scale)


def test_edge_features_pairing(hv_small):
    g = graph_arrays(hv_small[0].grid)
    assert g.src.size % 2 == 0
    for e in range(0, g.src.size, 2):
        assert g.src[e] == g.dst[e + 1] and g.dst[e] == g.src[e + 1]
        assert np.array_equal(g.edge_features[e, :3], g.edge_features[e + 1, :3])
        assert {g.edge_features[e, 3], g.edge_features[e + 1, 3]} == {0.0, 1.0}


def test_block_diagonal_batch_layout(hv_small):
    parts = hv_small[:5]
    g = block_diag_batch(parts)
    assert g.n_graphs == 5 and g.n == sum(s.grid.n for s in parts)
    assert np.array_equal(g.sizes, [s.grid.n for s in parts])
    assert np.array_equal(g.node_graph[g.src], g.node_graph[g.dst])
    merits = graph_merits(g, *residuals(g, g.v0, g.theta0))
    for k, s in enumerate(parts):
        solo = graph_arrays(s.grid, s.initial_state)
        assert merits[k] == graph_merits(solo, *residuals(solo, solo.v0, solo.theta0))[0]
    chunks = g.split(g.v0)
    assert all(np.array_equal(c, s.initial_state.v) for c, s in zip(chunks, parts))
