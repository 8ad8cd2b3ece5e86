import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spatial_interference.exceptions import InvalidInput
from spatial_interference.panel import (CoefficientSet, GridShape, PanelData, build_neighbor_design, flat_index,
                                        interference_matrix, neighbor_order, read_panel_csv, unflatten_index,
                                        write_panel_csv)

from conftest import make_panel

grids = st.tuples(st.integers(2, 6), st.integers(2, 6))


class TestGridShape:
    def test_derived_counts(self):
        g = GridShape(3, 4)
        assert (g.P, g.n_neighbors, g.p) == (12, 11, 132)

    @pytest.mark.parametrize("R,C", [(1, 3), (3, 1), (0, 0)])
    def test_too_small(self, R, C):
        with pytest.raises(InvalidInput):
            GridShape(R, C)

    def test_unit_ids_are_row_major_and_one_based(self):
        g = GridShape(2, 3)
        assert [g.unit_id(u) for u in g.units()] == list(range(6))
        assert g.unit_coords(4) == (2, 2)
        with pytest.raises(InvalidInput):
            g.unit_id((0, 1))


class TestNeighborOrder:
    def test_three_by_three_corner(self):
        order = neighbor_order(GridShape(3, 3))
        assert order.neighbors((1, 1)) == [(1, 2), (2, 1), (2, 2), (1, 3), (3, 1), (2, 3), (3, 2), (3, 3)]

    def test_two_by_two_tie_break(self):
        assert neighbor_order(GridShape(2, 2)).neighbors((1, 1)) == [(1, 2), (2, 1), (2, 2)]

    @given(grids)
    def test_bijection_sorted_row_major_ties(self, rc):
        shape = GridShape(*rc)
        order = neighbor_order(shape)
        for u in range(shape.P):
            nb = order.index[u]
            assert len(nb) == shape.P - 1 and len(set(nb.tolist())) == shape.P - 1 and u not in nb
            d2 = order.squared_distances(u)
            assert np.all(np.diff(d2) >= 0)
            # within a distance class, flat ids (row-major) increase
            for value in np.unique(d2):
                assert np.all(np.diff(nb[d2 == value]) > 0)

    def test_naive_oracle(self):
        shape = GridShape(4, 3)
        order = neighbor_order(shape)
        for unit in shape.units():
            others = [v for v in shape.units() if v != unit]
            naive = sorted(others, key=lambda v: ((v[0] - unit[0]) ** 2 + (v[1] - unit[1]) ** 2, v))
            assert order.neighbors(unit) == naive

    def test_edge_neighbors(self):
        shape = GridShape(4, 4)
        order = neighbor_order(shape)
        assert len(order.edge_neighbor_ranks(shape.unit_id((2, 2)))) == 4
        assert len(order.edge_neighbor_ranks(shape.unit_id((1, 1)))) == 2
        assert len(order.edge_neighbor_ranks(shape.unit_id((1, 2)))) == 3

    def test_rank_of_inverts_index(self):
        order = neighbor_order(GridShape(3, 4))
        for u in range(12):
            assert order.rank_of[u, u] == -1
            np.testing.assert_array_equal(order.rank_of[u, order.index[u]], np.arange(11))


class TestNeighborDesign:
    def test_read_off(self):
        M = np.array([[[1.0, -1.0], [-1.0, 1.0]]])
        data = PanelData(np.zeros((1, 2, 2)), np.ones((1, 2, 2, 1)), M)
        out = build_neighbor_design(data, (1, 1), neighbor_order(data.shape))
        np.testing.assert_array_equal(out, [[-1.0, -1.0, 1.0]])

    def test_all_ones(self):
        data = PanelData(np.zeros((5, 3, 3)), np.ones((5, 3, 3, 1)), np.ones((5, 3, 3)))
        np.testing.assert_array_equal(build_neighbor_design(data, (2, 2), neighbor_order(data.shape)),
                                      np.ones((5, 8)))

    def test_double_loop_oracle(self):
        data, _ = make_panel(R=3, C=4, n=7, seed=2)
        order = neighbor_order(data.shape)
        for unit in data.shape.units():
            out = build_neighbor_design(data, unit, order)
            for j, (r, c) in enumerate(order.neighbors(unit)):
                for i in range(data.n):
                    assert out[i, j] == data.M[i, r - 1, c - 1]

    def test_outside_grid(self):
        data, _ = make_panel()
        with pytest.raises(InvalidInput):
            build_neighbor_design(data, (4, 1), neighbor_order(data.shape))

    def test_interference_matrix_matches_model_equation(self):
        data, coeffs = make_panel(R=3, C=3, n=6, seed=4, S_density=0.4)
        order = neighbor_order(data.shape)
        W = interference_matrix(coeffs.S, order)
        for unit in data.shape.units():
            u = data.shape.unit_id(unit)
            direct = build_neighbor_design(data, unit, order) @ coeffs.S[unit[0] - 1, unit[1] - 1]
            np.testing.assert_allclose(data.M_flat @ W[u], direct, atol=1e-12)


class TestFlatIndex:
    def test_first_and_last_of_first_unit(self):
        g = GridShape(3, 3)
        assert flat_index((1, 1), 1, g) == 0
        assert flat_index((1, 1), 8, g) == 7
        assert flat_index((1, 2), 1, g) == 8

    def test_round_trip_4x4(self):
        g = GridShape(4, 4)
        for unit in g.units():
            for j in range(1, g.P):
                assert unflatten_index(flat_index(unit, j, g), g) == (unit, j)

    @pytest.mark.parametrize("R,C", list(itertools.product(range(2, 6), repeat=2)))
    def test_bijection_exhaustive(self, R, C):
        g = GridShape(R, C)
        seen = [flat_index(u, j, g) for u in g.units() for j in range(1, g.P)]
        assert seen == list(range(g.p))

    def test_out_of_range(self):
        g = GridShape(3, 3)
        with pytest.raises(InvalidInput):
            flat_index((1, 1), 0, g)
        with pytest.raises(InvalidInput):
            flat_index((1, 1), 9, g)
        with pytest.raises(InvalidInput):
            unflatten_index(g.p, g)


class TestPanelData:
    def test_rejects_non_binary_treatments(self):
        with pytest.raises(InvalidInput):
            PanelData(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 1)), np.zeros((2, 2, 2)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(InvalidInput):
            PanelData(np.zeros((2, 2, 2)), np.zeros((3, 2, 2, 1)), np.ones((2, 2, 2)))

    def test_rejects_non_finite(self):
        Y = np.zeros((2, 2, 2))
        Y[0, 0, 0] = np.inf
        with pytest.raises(InvalidInput):
            PanelData(Y, np.zeros((2, 2, 2, 1)), np.ones((2, 2, 2)))

    def test_immutable(self):
        data, _ = make_panel()
        with pytest.raises(ValueError):
            data.Y[0, 0, 0] = 1.0

    def test_flat_views(self):
        data, _ = make_panel(R=2, C=3, n=4, d=2)
        assert data.Y_flat[1, 4] == data.Y[1, 1, 1]
        assert data.X_units.shape == (6, 4, 2)
        np.testing.assert_array_equal(data.X_units[5, 2], data.X[2, 1, 2])

    def test_coefficient_set_validation(self):
        with pytest.raises(InvalidInput):
            CoefficientSet(np.zeros((2, 2, 1)), np.zeros((2, 2)), np.zeros((2, 2, 2)))
        cs = CoefficientSet.zeros(GridShape(2, 2), 3)
        assert cs.support().size == 0


class TestCsv:
    def test_round_trip(self, tmp_path):
        data, _ = make_panel(R=2, C=3, n=5, d=2, seed=9)
        write_panel_csv(data, tmp_path / "p.csv")
        back = read_panel_csv(tmp_path / "p.csv")
        np.testing.assert_array_equal(back.Y, data.Y)
        np.testing.assert_array_equal(back.X, data.X)
        np.testing.assert_array_equal(back.M, data.M)

    def test_bad_line_is_named(self, tmp_path):
        data, _ = make_panel(R=2, C=2, n=2, d=1)
        path = tmp_path / "p.csv"
        write_panel_csv(data, path)
        lines = path.read_text().splitlines()
        lines[3] = lines[3].replace(lines[3].split(",")[3], "abc", 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(InvalidInput, match=r"p\.csv:4"):
            read_panel_csv(path)

    def test_bad_treatment(self, tmp_path):
        data, _ = make_panel(R=2, C=2, n=2, d=1)
        path = tmp_path / "p.csv"
        write_panel_csv(data, path)
        lines = path.read_text().splitlines()
        fields = lines[2].split(",")
        fields[-1] = "0"
        lines[2] = ",".join(fields)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(InvalidInput, match=":3"):
            read_panel_csv(path)

    def test_missing_records(self, tmp_path):
        data, _ = make_panel(R=2, C=2, n=2, d=1)
        path = tmp_path / "p.csv"
        write_panel_csv(data, path)
        path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(InvalidInput, match="missing"):
            read_panel_csv(path)

    def test_bad_sidecar(self, tmp_path):
        data, _ = make_panel(R=2, C=2, n=2, d=1)
        write_panel_csv(data, tmp_path / "p.csv")
        (tmp_path / "p.json").write_text("{\"R\": 2}")
        with pytest.raises(InvalidInput):
            read_panel_csv(tmp_path / "p.csv")
