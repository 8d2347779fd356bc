import csv
import io
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmtkit.bench import (KINDS, LayerSpec, MacCounter, Report, Row, bfs_distances, connecting_depth,
                          conv_recurrent_ratio, dependency_graph, max_path_length, report_table,
                          restricted_window, run_layer, scaling_fit, separable_equivalence)


def oracle_distances(graph):
    """Plain per-source BFS over successor lists."""
    succ = [[] for _ in graph.preds]
    for v, ps in enumerate(graph.preds):
        for u in ps:
            succ[u].append(v)
    outs = list(graph.outputs)
    dist = np.full((graph.n, graph.n), -1, dtype=np.int64)
    for s in range(graph.n):
        seen = {s: 0}
        q = deque([s])
        while q:
            u = q.popleft()
            for v in succ[u]:
                if v not in seen:
                    seen[v] = seen[u] + 1
                    q.append(v)
        for j, o in enumerate(outs):
            dist[s, j] = seen.get(o, -1)
    return dist


specs = st.builds(
    lambda kind, n, k, r, dilated: LayerSpec(kind, n, 2, k=min(k, n), r=min(r, n),
                                             dilated=dilated and kind == "convolutional" and min(k, n) >= 2),
    st.sampled_from(KINDS), st.integers(1, 24), st.integers(1, 5), st.integers(1, 7), st.booleans())


class TestSpec:
    @pytest.mark.parametrize("kw", [
        dict(kind="lstm", n=4, d=2), dict(kind="convolutional", n=2, d=2, k=3),
        dict(kind="restricted_self_attention", n=2, d=2, r=3), dict(kind="self_attention", n=0, d=2),
        dict(kind="self_attention", n=4, d=2, dilated=True), dict(kind="convolutional", n=4, d=2, k=1, dilated=True),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LayerSpec(**kw)

    def test_with_axis(self):
        s = LayerSpec("convolutional", 16, 4, k=3).with_axis("d", 8)
        assert (s.n, s.d, s.k) == (16, 8, 3)


class TestCounting:
    def test_einsum_tally(self):
        c = MacCounter()
        out = c.einsum("ij,jk->ik", np.ones((2, 3)), np.ones((3, 4)))
        assert c.macs == 24 and out.shape == (2, 4)
        c.einsum("i,i->", np.ones(5), np.ones(5))
        assert c.macs == 29

    def test_einsum_extent_mismatch(self):
        with pytest.raises(ValueError):
            MacCounter().einsum("ij,jk->ik", np.ones((2, 3)), np.ones((4, 4)))

    def test_self_attention_core(self):
        assert run_layer(LayerSpec("self_attention", 8, 4)).core_macs == 2 * 8 * 8 * 4 == 512

    def test_restricted_full_window_equals_attention(self):
        for n, d in [(8, 4), (16, 2), (33, 3)]:
            full = run_layer(LayerSpec("self_attention", n, d), measure_paths=False)
            rest = run_layer(LayerSpec("restricted_self_attention", n, d, r=n), measure_paths=False)
            assert rest.core_macs == full.core_macs

    def test_attention_memory(self):
        assert run_layer(LayerSpec("self_attention", 16, 4), measure_paths=False).attention_memory == 256
        assert run_layer(LayerSpec("restricted_self_attention", 16, 4, r=5),
                         measure_paths=False).attention_memory == 80

    def test_deterministic(self):
        for kind in KINDS:
            s = LayerSpec(kind, 16, 4, k=3, r=5)
            assert run_layer(s) == run_layer(s)

    def test_sequential_ops(self):
        for n in (1, 4, 16, 64):
            assert run_layer(LayerSpec("recurrent", n, 4), measure_paths=False).sequential_ops == n
        for kind in ("self_attention", "convolutional", "restricted_self_attention", "separable_convolutional"):
            vals = {run_layer(LayerSpec(kind, n, 4, k=min(3, n), r=min(3, n)), measure_paths=False).sequential_ops
                    for n in (4, 16, 64)}
            assert vals == {1}

    def test_scaling_fit(self):
        sweep = [LayerSpec("recurrent", 8, d) for d in (32, 64, 128, 256)]
        assert scaling_fit("recurrent", sweep, "d") == pytest.approx(2.0, abs=0.1)
        sweep = [LayerSpec("separable_convolutional", n, 8, k=3) for n in (64, 128, 256, 512)]
        assert scaling_fit("separable_convolutional", sweep, "n") == pytest.approx(1.0, abs=0.1)

    def test_scaling_fit_errors(self):
        with pytest.raises(ValueError):
            scaling_fit("recurrent", [LayerSpec("recurrent", 8, d) for d in (2, 4, 8)], "d")
        with pytest.raises(ValueError):
            scaling_fit("recurrent", [LayerSpec("recurrent", n, n) for n in (2, 4, 8, 16)], "d")
        with pytest.raises(ValueError):
            scaling_fit("recurrent", [LayerSpec("self_attention", 8, d) for d in (2, 4, 8, 16)], "d")

    def test_conv_recurrent_ratio_proportional_to_k(self):
        # the rnn cell does two d x d products per step, so the ratio is k/2
        assert conv_recurrent_ratio((1, 2, 4, 8)) == [0.5, 1.0, 2.0, 4.0]

    def test_separable_equivalence_within_factor_two(self):
        sep, combo, ratio = separable_equivalence()
        assert 0.5 <= ratio <= 2.0 and sep == 81920 and combo == 147456


class TestWindows:
    def test_centred_and_shifted(self):
        assert restricted_window(5, 10, 3).tolist() == [4, 5, 6]
        assert restricted_window(0, 10, 3).tolist() == [0, 1, 2]
        assert restricted_window(9, 10, 3).tolist() == [7, 8, 9]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.data())
    def test_window_size_always_r(self, n, data):
        r = data.draw(st.integers(1, n))
        p = data.draw(st.integers(0, n - 1))
        w = restricted_window(p, n, r)
        assert len(w) == r and w[0] >= 0 and w[-1] < n and p in w


class TestPaths:
    def test_single_self_attention(self):
        assert run_layer(LayerSpec("self_attention", 1, 4)).max_path_length == 1
        assert run_layer(LayerSpec("self_attention", 12, 4)).max_path_length == 1

    def test_recurrent(self):
        rep = run_layer(LayerSpec("recurrent", 8, 4))
        assert rep.sequential_ops == 8 and rep.max_path_length == 8

    def test_conv_k3_n9_needs_four_layers(self):
        assert connecting_depth(LayerSpec("convolutional", 9, 2, k=3)) == (4, 4)
        assert max_path_length(dependency_graph(LayerSpec("convolutional", 9, 2, k=3), 3)) is None

    def test_dilated_k2_n8_three_layers(self):
        assert connecting_depth(LayerSpec("convolutional", 8, 2, k=2, dilated=True)) == (3, 3)

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_single_conv_layer_reach(self, k):
        n = 10
        dist = bfs_distances(dependency_graph(LayerSpec("convolutional", n, 2, k=k), 1))
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        connected = (j - i >= 0) & (j - i < k)
        assert ((dist >= 0) == connected).all()
        assert (dist[connected] == 1).all()

    @settings(max_examples=80, deadline=None)
    @given(specs, st.integers(1, 4))
    def test_bfs_matches_oracle(self, spec, depth):
        g = dependency_graph(spec, depth)
        np.testing.assert_array_equal(bfs_distances(g), oracle_distances(g))

    def test_bfs_wide_graph_matches_oracle(self):
        g = dependency_graph(LayerSpec("restricted_self_attention", 150, 2, r=9), 3)
        np.testing.assert_array_equal(bfs_distances(g), oracle_distances(g))

    @pytest.mark.parametrize("k,n", [(2, 8), (2, 16), (3, 9), (3, 27), (4, 64), (3, 10)])
    def test_dilated_log_depth(self, k, n):
        depth, path = connecting_depth(LayerSpec("convolutional", n, 2, k=k, dilated=True))
        assert depth == path == math.ceil(round(math.log(n, k), 9))

    def test_connecting_depth_is_minimal(self):
        for spec in (LayerSpec("restricted_self_attention", 40, 2, r=5), LayerSpec("convolutional", 20, 2, k=4)):
            depth, _ = connecting_depth(spec)
            assert max_path_length(dependency_graph(spec, depth)) is not None
            assert max_path_length(dependency_graph(spec, depth - 1)) is None


class TestReport:
    def test_missing_sweep(self):
        with pytest.raises(ValueError, match="missing"):
            report_table([("self_attention", "n", LayerSpec("self_attention", 64, 4), (64, 128, 256, 512), 2.0)])

    def test_csv_columns(self):
        rep = Report([Row("recurrent", "d", 2.0, 2.0, "n", "n", True)], [("x", "y", True)])
        rows = list(csv.reader(io.StringIO(rep.to_csv())))
        assert rows[0] == ["kind", "axis", "measured_exponent", "expected_exponent",
                           "sequential_ops", "max_path_length", "pass"]
        assert rows[1] == ["recurrent", "d", "2.0000", "2.0000", "n", "n", "pass"]
        assert rep.passed and "overall: pass" in rep.render_text()
        assert not Report(rep.rows, [("x", "y", False)]).passed
