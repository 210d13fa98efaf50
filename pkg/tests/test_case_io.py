from importlib import resources

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddopf import case_io
from ddopf.case_io import (
    DemandSeries,
    StorageAugmentation,
    augmentation_from_dict,
    case_from_dict,
    case_to_dict,
    load_case_json,
    load_demand_csv,
    load_results_csv,
    parse_matpower,
    save_case_json,
    save_demand_csv,
    save_results_csv,
    to_grid_case,
)
from ddopf.errors import (
    AlignmentError,
    CaseReferenceError,
    CaseValidationError,
    MissingFieldError,
    ParseError,
    UnsupportedCostError,
)
from ddopf.netmodel import Storage

MINI = """function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t135\t1\t1.06\t0.94;
\t2\t2\t40\t0\t0\t0\t1\t1\t0\t135\t1\t1.06\t0.94;
\t3\t1\t60\t0\t0\t0\t1\t1\t0\t135\t1\t1.06\t0.94;
];
mpc.gen = [
\t1\t0\t0\t10\t-10\t1\t100\t1\t150\t0;
\t2\t0\t0\t10\t-10\t1\t100\t1\t100\t5;
\t3\t0\t0\t10\t-10\t1\t100\t0\t80\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.05\t0\t300\t0\t0\t0\t0\t1\t-360\t360;
\t2\t3\t0.01\t0.1\t0\t0\t0\t0\t0.98\t0\t1\t-360\t360;
\t1\t3\t0.01\t0.1\t0\t0\t0\t0\t0\t0\t0\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.02\t20\t0;
\t2\t0\t0\t3\t0.05\t22\t0;
\t2\t0\t0\t3\t0.01\t30\t0;
];
mpc.bus_name = {
\t'one';
\t'two';
};
"""


def _with_comments(text):
    out = []
    for line in text.splitlines():
        out.append("% a comment line")
        out.append(line + "  % trailing")
    return "\n".join(out)


class TestParse:
    def test_base_mva(self):
        assert parse_matpower(MINI).baseMVA == 100

    def test_positional_branch_row(self):
        raw = parse_matpower(MINI)
        assert raw.branch.shape == (3, 13)
        assert raw.branch[0, 3] == 0.05

    def test_comments_ignored(self):
        a, b = parse_matpower(MINI), parse_matpower(_with_comments(MINI))
        for name in ("bus", "branch", "gen", "gencost"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_number_formats(self):
        text = MINI.replace("0.05\t0", "5e-2\t0", 1).replace("\t300\t", "\t3.0E2\t", 1)
        raw = parse_matpower(text)
        assert raw.branch[0, 3] == 0.05 and raw.branch[0, 5] == 300.0

    def test_ragged_row_reports_line(self):
        bad = MINI.replace("\t2\t3\t0.01\t0.1\t0\t0\t0\t0\t0.98\t0\t1\t-360\t360;", "\t2\t3\t0.01;")
        with pytest.raises(ParseError) as info:
            parse_matpower(bad, source="bad.m")
        assert info.value.line == 16
        assert "bad.m:16" in str(info.value)

    @pytest.mark.parametrize("field", ["bus", "branch", "gen"])
    def test_missing_matrix(self, field):
        text = MINI.replace(f"mpc.{field} = [", "mpc.other = [")
        with pytest.raises(MissingFieldError):
            parse_matpower(text)

    def test_missing_base_mva(self):
        with pytest.raises(MissingFieldError):
            parse_matpower(MINI.replace("mpc.baseMVA = 100;", ""))

    def test_gencost_row_count(self):
        with pytest.raises(ParseError):
            parse_matpower(MINI.replace("\t2\t0\t0\t3\t0.01\t30\t0;\n", "", 1).replace(
                "\t2\t0\t0\t3\t0.05\t22\t0;\n", ""))

    @given(st.lists(st.lists(st.integers(-999, 999), min_size=3, max_size=3), min_size=1, max_size=6))
    def test_grammar_roundtrip(self, rows):
        body = "\n".join(" ".join(str(v) for v in r) + ";" for r in rows)
        text = f"mpc.baseMVA = 1;\nmpc.bus = [\n{body}\n];\nmpc.branch = [{body}];\nmpc.gen = [\n{body}\n];\n"
        raw = parse_matpower(text)
        np.testing.assert_array_equal(raw.bus, np.array(rows, dtype=float))
        np.testing.assert_array_equal(raw.branch, np.array(rows, dtype=float))


class TestToGridCase:
    def test_mapping(self):
        case = to_grid_case(parse_matpower(MINI))
        assert [g.bus for g in case.generators] == [1, 2]  # status-0 generator dropped
        assert case.generators[1].pmin == 5 and case.generators[1].pmax == 100
        assert case.generators[0].cost_quad == 0.02 and case.generators[0].cost_lin == 20
        assert len(case.branches) == 2  # status-0 branch dropped
        assert case.branches[0].x == 0.05 and case.branches[0].tap == 1.0
        assert case.branches[1].tap == 0.98 and case.branches[1].rate == 300.0  # RATE_A = 0 -> default
        assert case.demand_buses == (2, 3)
        np.testing.assert_array_equal(case.nominal_demand(), [40, 60])
        assert case.slack_bus == 1

    def test_default_limit_configurable(self):
        case = to_grid_case(parse_matpower(MINI), StorageAugmentation(default_flow_limit=123.0))
        assert case.branches[1].rate == 123.0

    def test_slack_policies(self):
        raw = parse_matpower(MINI)
        assert to_grid_case(raw, slack_policy="ref_bus").slack_bus == 1
        case = to_grid_case(raw, slack_policy=2)
        assert case.slack_bus == 2 and case.generators[0].bus == 2

    def test_unsupported_cost_model(self):
        text = MINI.replace("\t2\t0\t0\t3\t0.02\t20\t0;", "\t1\t0\t0\t3\t0.02\t20\t0;")
        with pytest.raises(UnsupportedCostError):
            to_grid_case(parse_matpower(text))

    def test_cubic_cost_rejected(self):
        text = MINI.replace("\t2\t0\t0\t3\t0.02\t20\t0;", "\t2\t0\t0\t4\t1\t0.02\t20\t0;")
        text = text.replace("\t2\t0\t0\t3\t0.05\t22\t0;", "\t2\t0\t0\t4\t0\t0.05\t22\t0;")
        text = text.replace("\t2\t0\t0\t3\t0.01\t30\t0;", "\t2\t0\t0\t4\t0\t0.01\t30\t0;")
        with pytest.raises(UnsupportedCostError):
            to_grid_case(parse_matpower(text))

    def test_generator_on_unknown_bus(self):
        text = MINI.replace("\t3\t0\t0\t10\t-10\t1\t100\t0\t80\t0;", "\t9\t0\t0\t10\t-10\t1\t100\t1\t80\t0;")
        with pytest.raises(CaseReferenceError):
            to_grid_case(parse_matpower(text))

    def test_storage_on_unknown_bus(self):
        aug = StorageAugmentation(storages=(Storage(9, 0, 1, -1, 1, 0.5),))
        with pytest.raises(CaseReferenceError):
            to_grid_case(parse_matpower(MINI), aug)

    def test_drops_exactly_zero_status_rows(self):
        raw = parse_matpower(resources.files("ddopf").joinpath("data/case118.m").read_text())
        case = to_grid_case(raw)
        assert len(case.branches) == int(np.sum(raw.branch[:, 10] != 0))
        assert len(case.generators) == int(np.sum(raw.gen[:, 7] != 0))

    def test_118_with_storage(self, cases):
        case = cases["case118"]
        assert len(case.generators) + len(case.storages) == 58
        assert len(case.branches) == 186 and len(case.demands) == 99
        assert [s.bus for s in case.storages] == [21, 59, 89, 116]
        assert all(s.e_max == 200 and s.s_max == 50 and s.s_min == -50 for s in case.storages)
        assert all(br.rate == 300 for br in case.branches)


class TestJson:
    def test_roundtrip_triangle(self, tmp_path, cases):
        path = tmp_path / "c.json"
        save_case_json(cases["case3"], path)
        assert load_case_json(path) == cases["case3"]

    @pytest.mark.parametrize("name", ["case6", "case14", "case118"])
    def test_roundtrip_builtin(self, tmp_path, cases, name):
        path = tmp_path / "c.json"
        save_case_json(cases[name], path)
        assert load_case_json(path) == cases[name]

    def test_missing_branches(self, cases):
        data = case_to_dict(cases["case3"])
        del data["branches"]
        with pytest.raises(CaseValidationError) as info:
            case_from_dict(data)
        assert info.value.field == "branches"

    def test_bad_field_named(self, cases):
        data = case_to_dict(cases["case3"])
        data["branches"][1]["x"] = "big"
        with pytest.raises(CaseValidationError) as info:
            case_from_dict(data)
        assert info.value.field == "branches[1].x"

    def test_unknown_key_warns(self, cases):
        data = case_to_dict(cases["case3"])
        data["comment"] = "made by hand"
        with pytest.warns(UserWarning, match="comment"):
            assert case_from_dict(data) == cases["case3"]

    def test_invalid_json_has_line(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{\n "buses": [\n')
        with pytest.raises(ParseError) as info:
            load_case_json(path)
        assert info.value.line is not None

    def test_augmentation_from_dict(self):
        aug = augmentation_from_dict({"storages": [{"bus": 2, "e_min": 0, "e_max": 5, "s_min": -1, "s_max": 1,
                                                    "e0": 2}], "default_flow_limit": 50})
        assert aug.storages[0].e_max == 5.0 and aug.default_flow_limit == 50.0


class TestDemandCsv:
    def test_roundtrip(self, tmp_path, cases):
        case = cases["case3"]
        rng = np.random.default_rng(0)
        series = DemandSeries(rng.uniform(1, 50, (96, 2)), 0.25)
        path = tmp_path / "d.csv"
        save_demand_csv(series, case, path)
        back = load_demand_csv(path, case)
        assert back.values.shape == (96, 2)
        np.testing.assert_array_equal(back.values, series.values)

    def test_columns_reordered_by_bus(self, tmp_path, cases):
        path = tmp_path / "d.csv"
        path.write_text("bus_3,bus_2\n60,40\n61,41\n")
        back = load_demand_csv(path, cases["case3"])
        np.testing.assert_array_equal(back.values, [[40, 60], [41, 61]])

    def test_unknown_bus(self, tmp_path, cases):
        path = tmp_path / "d.csv"
        path.write_text("bus_2,bus_3,bus_1\n1,2,3\n")
        with pytest.raises(AlignmentError, match="bus"):
            load_demand_csv(path, cases["case3"])

    def test_missing_bus(self, tmp_path, cases):
        path = tmp_path / "d.csv"
        path.write_text("bus_2\n1\n")
        with pytest.raises(AlignmentError):
            load_demand_csv(path, cases["case3"])

    def test_negative_rejected(self, tmp_path, cases):
        path = tmp_path / "d.csv"
        path.write_text("bus_2,bus_3\n-1,2\n")
        with pytest.raises(AlignmentError):
            load_demand_csv(path, cases["case3"])
        assert load_demand_csv(path, cases["case3"], allow_negative=True).values[0, 0] == -1

    def test_window_bounds(self):
        series = DemandSeries(np.ones((5, 2)))
        assert series.window(3, 2).shape == (2, 2)
        with pytest.raises(AlignmentError):
            series.window(4, 2)


def test_results_csv(tmp_path):
    rows = [
        {"step": k, "controller": c, "stage_cost": 1.5 * k, "max_abs_flow": 10.0, "solve_seconds": None,
         "e": [1.0, 2.0]}
        for c in ("exact", "ddopf")
        for k in range(3)
    ]
    path = tmp_path / "r.csv"
    assert save_results_csv(rows, path) == 6
    back = load_results_csv(path)
    assert list(back[0]) == ["step", "controller", "stage_cost", "max_abs_flow", "solve_seconds", "e_1", "e_2"]
    assert sum(r["controller"] == "ddopf" for r in back) == 3
    assert back[2]["stage_cost"] == "3.0" and back[0]["solve_seconds"] == ""
