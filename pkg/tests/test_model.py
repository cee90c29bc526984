import copy
import dataclasses
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distopf.model import (
    CaseParseError,
    CaseValidationError,
    Model,
    build_matrices,
    bundled_case_path,
    case_to_dict,
    from_internal_units,
    load_case,
    scale_line_limits,
    to_internal_units,
)
from distopf.oracle import objective

from conftest import SMALL_CASES, TWO_BUS


def doc(**changes):
    d = copy.deepcopy(TWO_BUS)
    d.update(changes)
    return d


class TestLoadCase:
    def test_two_bus_document(self):
        case = load_case(TWO_BUS)
        assert case.n_bus == 2 and case.n_line == 1 and case.n_gen == 1
        assert case.slack == 1
        assert case.generators[0].cost(50) == pytest.approx(0.5 * 2500 + 500)

    @pytest.mark.parametrize("kind", ["dict", "str", "bytes", "file", "path"])
    def test_source_kinds(self, kind, tmp_path):
        text = json.dumps(TWO_BUS)
        src = {
            "dict": TWO_BUS,
            "str": text,
            "bytes": text.encode(),
            "file": io.StringIO(text),
            "path": tmp_path / "c.json",
        }[kind]
        if kind == "path":
            src.write_text(text)
        assert load_case(src).n_bus == 2

    def test_malformed_json(self):
        with pytest.raises(CaseParseError):
            load_case(b"{not json")

    def test_wrong_shape(self):
        with pytest.raises(CaseParseError):
            load_case({"buses": {}, "lines": [], "gens": []})

    @pytest.mark.parametrize(
        "mutate, path",
        [
            (lambda d: d["lines"][0].update(x=-0.1), "lines[0].x"),
            (lambda d: d["lines"][0].update(to=7), "lines[0].to"),
            (lambda d: d["lines"][0].update(to=1), "lines[0].to"),
            (lambda d: d["lines"][0].update(limit=0), "lines[0].limit"),
            (lambda d: d["gens"][0].update(bus=9), "generators[0].bus"),
            (lambda d: d["gens"][0].update(a=0), "generators[0].a"),
            (lambda d: d["gens"][0].update(pmin=200), "generators[0].pmin"),
            (lambda d: d["buses"][1].update(load=-1), "buses[1].load"),
            (lambda d: d["buses"][1].update(id=1), "buses[1].id"),
            (lambda d: [b.update(slack=True) for b in d["buses"]], "buses[1].slack"),
            (lambda d: d["buses"].append({"id": 3, "load": 0}), "lines"),
            (lambda d: d.update(base_mva=0), "base_mva"),
            (lambda d: d["lines"][0].pop("x"), "lines[0].x"),
        ],
    )
    def test_validation_errors_name_the_field(self, mutate, path):
        d = copy.deepcopy(TWO_BUS)
        mutate(d)
        with pytest.raises(CaseValidationError) as info:
            load_case(d)
        assert info.value.path == path

    def test_renumbering_and_explicit_slack(self):
        d = {
            "buses": [{"id": 30, "load": 5}, {"id": 10, "load": 0}, {"id": 20, "load": 0, "slack": True}],
            "lines": [{"from": 10, "to": 20, "x": 0.1, "limit": 9}, {"from": 20, "to": 30, "x": 0.2, "limit": 9}],
            "generators": [{"bus": 20, "a": 1, "b": 1, "pmax": 10}],
        }
        case = load_case(d)
        assert [b.label for b in case.buses] == [10, 20, 30]
        assert case.slack == 2
        assert case.generators[0].bus == 2
        assert case.lines[1].endpoints == (2, 3)

    def test_parallel_lines_merge(self):
        d = doc(lines=[{"from": 1, "to": 2, "x": 0.1, "limit": 100}, {"from": 2, "to": 1, "x": 0.2, "limit": 50}])
        case = load_case(d)
        assert case.n_line == 1
        assert case.lines[0].susceptance == pytest.approx(15.0)
        assert case.lines[0].limit == 150

    def test_round_trip_dict(self):
        case = load_case(bundled_case_path("case5"))
        assert load_case(case_to_dict(case)) == case

    def test_rts24(self):
        raw = json.load(open(bundled_case_path("rts24")))
        case = load_case(raw)
        assert len(raw["lines"]) == 38
        assert case.n_bus == 24 and case.n_gen == 32
        assert case.n_line == 34  # four parallel pairs merged
        assert sum(1 for b in case.buses if b.load > 0) == 17
        assert case.total_load() == pytest.approx(2850.0)

    @pytest.mark.parametrize("name", SMALL_CASES + ["rts24"])
    def test_bundled_cases_have_tuning(self, name):
        case = load_case(bundled_case_path(name))
        assert case.tuning is not None and all(v > 0 for v in case.tuning)


class TestMatrices:
    def test_two_bus(self):
        m = build_matrices(load_case(TWO_BUS))
        np.testing.assert_allclose(m.B, [[10, -10], [-10, 10]])
        np.testing.assert_allclose(m.incidence, [[1], [-1]])
        np.testing.assert_allclose(m.By, [[10, -10], [-10, 10]])

    def test_triangle(self):
        m = build_matrices(load_case(bundled_case_path("case3")))
        np.testing.assert_allclose(np.diag(m.B), [20, 20, 20])
        off = m.B[~np.eye(3, dtype=bool)]
        np.testing.assert_allclose(off, -10)
        assert m.By.shape == (6, 3)

    @pytest.mark.parametrize("name", SMALL_CASES + ["rts24"])
    def test_structure(self, name):
        case = load_case(bundled_case_path(name))
        m = build_matrices(case)
        np.testing.assert_allclose(m.B.sum(axis=1), 0, atol=1e-9)
        np.testing.assert_allclose(m.B, m.B.T)
        assert np.linalg.eigvalsh(m.B).min() > -1e-9
        nl = case.n_line
        np.testing.assert_allclose(m.By[:nl] + m.By[nl:], 0)


class TestTransforms:
    def test_scale(self):
        d = {
            "buses": [{"id": 1}, {"id": 2}, {"id": 3, "load": 10}],
            "lines": [{"from": 1, "to": 2, "x": 0.1, "limit": 100}, {"from": 2, "to": 3, "x": 0.1, "limit": 200}],
            "generators": [{"bus": 1, "a": 1, "pmax": 20}],
        }
        case = load_case(d)
        assert [l.limit for l in scale_line_limits(case, 0.55).lines] == pytest.approx([55, 110])
        assert scale_line_limits(case, 1.0) == case
        for bad in (0, -1):
            with pytest.raises(ValueError):
                scale_line_limits(case, bad)

    @given(f=st.floats(0.01, 100), g=st.floats(0.01, 100))
    def test_scale_multiplicative(self, f, g):
        case = load_case(bundled_case_path("case5"))
        a = scale_line_limits(scale_line_limits(case, f), g)
        b = scale_line_limits(case, f * g)
        np.testing.assert_allclose([l.limit for l in a.lines], [l.limit for l in b.lines], rtol=1e-12)

    def test_units(self):
        pu = to_internal_units(load_case(TWO_BUS))
        assert pu.buses[1].load == 0.5
        assert pu.generators[0].a == pytest.approx(5000)
        assert pu.generators[0].b == pytest.approx(1000)
        with pytest.raises(ValueError):
            to_internal_units(dataclasses.replace(load_case(TWO_BUS), base_mva=0))

    @settings(max_examples=50)
    @given(base=st.floats(1, 1000), scale=st.floats(0.1, 10))
    def test_unit_round_trip_and_objective_invariance(self, base, scale):
        case = dataclasses.replace(load_case(bundled_case_path("case3_multigen")), base_mva=base)
        back = from_internal_units(to_internal_units(case))
        for g0, g1 in zip(case.generators, back.generators):
            for f in ("a", "b", "c", "pmin", "pmax"):
                assert getattr(g1, f) == pytest.approx(getattr(g0, f), rel=1e-12, abs=1e-12)
        for b0, b1 in zip(case.buses, back.buses):
            assert b1.load == pytest.approx(b0.load, rel=1e-12, abs=1e-12)
        pg = np.array([g.pmax for g in case.generators]) * scale / 10
        pu = to_internal_units(case)
        f_pu = sum(g.cost(p / base) for g, p in zip(pu.generators, pg))
        assert f_pu == pytest.approx(objective(case, pg), rel=1e-12)
        assert Model.from_case(case).objective(pg / base) == pytest.approx(objective(case, pg), rel=1e-12)

    def test_model_prices_in_dollars_per_mwh(self):
        m = Model.from_case(load_case(TWO_BUS))
        # marginal cost at 50 MW: 2*0.5*50 + 10
        assert 2 * m.a[0] * 0.5 + m.b[0] == pytest.approx(60.0)
        assert m.dim == 2 + 2 + 2 + 1
