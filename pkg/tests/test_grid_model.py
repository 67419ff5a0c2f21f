import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopf.exceptions import NonRadialTopology, ParseError, SingularMatrix, ValidationError
from dopf.grid_model import (
    build_admittance,
    build_incidence,
    dump_network,
    is_radial,
    load_network,
    network_to_dict,
    parse_network,
    random_radial_network,
    tree_parents,
)

from conftest import data_path
from oracles import nodal_admittance


def _doc(**over):
    doc = json.loads(open(data_path("feeder8.json")).read())
    doc.update(over)
    return doc


def test_feeder8_shape(feeder8):
    assert feeder8.nodes[0] == "n0"
    assert feeder8.n == 7 and feeder8.m == 7
    assert len(feeder8.devices.regulators) == 1
    assert feeder8.v_min == (0.95,) * 7


def test_admittance_matches_line_by_line_assembly(feeder8):
    adm = build_admittance(feeder8)
    Y = nodal_admittance(feeder8)
    np.testing.assert_allclose(adm.Y, Y, atol=1e-14)
    np.testing.assert_allclose(adm.YLL, Y[1:, 1:])
    np.testing.assert_allclose(adm.YL0, Y[1:, 0])
    assert adm.Y00 == Y[0, 0]


def test_two_node_blocks(two_node):
    adm = build_admittance(two_node)
    y = 1 - 10j
    assert adm.Y00 == y
    np.testing.assert_allclose(adm.YLL, [[y]])
    np.testing.assert_allclose(adm.Yline_0, [y])
    np.testing.assert_allclose(adm.Yline_L, [[-y]])


def test_line_shunt_split_half_per_end():
    doc = {"nodes": [{"id": "a"}, {"id": "b"}],
           "lines": [{"id": "l", "from": "a", "to": "b", "z": [0.01, 0.05], "shunt": [0, 0.02]}]}
    net = parse_network(json.dumps(doc))
    adm = build_admittance(net)
    y = 1 / (0.01 + 0.05j)
    np.testing.assert_allclose(adm.Y, [[y + 0.01j, -y], [-y, y + 0.01j]])


def test_incidence_regulator_downstream(feeder8):
    maps = build_incidence(feeder8)
    # rg1 on l5 (n2 -> n5) feeds n5 and n6
    np.testing.assert_array_equal(maps.C_r[:, 0], [0, 0, 0, 0, 1, 1, 0])
    np.testing.assert_array_equal(maps.I_pv[:, 0], [0, 0, 0, 0, 0, 1, 0])
    np.testing.assert_array_equal(maps.I_cb.sum(axis=0), [1])


def test_round_trip(feeder8):
    again = parse_network(dump_network(feeder8))
    assert network_to_dict(again) == network_to_dict(feeder8)


def test_missing_file_names_path(tmp_path):
    p = tmp_path / "nope.json"
    with pytest.raises(ParseError) as ei:
        load_network(p)
    assert str(p) in str(ei.value)


def test_syntax_error_has_line():
    text = '{\n "nodes": [\n  {"id": "a"},\n ]\n}'
    with pytest.raises(ParseError) as ei:
        parse_network(text)
    assert ei.value.line == 4


def test_unknown_node_reference_reports_line():
    doc = _doc()
    doc["lines"][2]["to"] = "nX"
    text = json.dumps(doc, indent=1)
    with pytest.raises((ValidationError, ParseError)) as ei:
        parse_network(text)
    assert "nX" in str(ei.value)
    assert ei.value.line == text.splitlines().index(next(ln for ln in text.splitlines() if '"nX"' in ln)) + 1


def test_missing_required_device_key():
    doc = _doc()
    del doc["devices"]["pv_units"][0]["p_rating"]
    with pytest.raises(ParseError) as ei:
        parse_network(json.dumps(doc, indent=1))
    assert "p_rating" in ei.value.field


def test_inverted_box_rejected():
    doc = _doc()
    doc["devices"]["cap_banks"][0]["q_max"] = 0.01
    with pytest.raises(ValidationError):
        parse_network(json.dumps(doc))


def test_disconnected_rejected():
    doc = _doc()
    doc["nodes"].append({"id": "island"})
    with pytest.raises(ValidationError, match="disconnected"):
        parse_network(json.dumps(doc))


def test_mesh_is_not_radial():
    doc = _doc()
    doc["lines"].append({"id": "tie", "from": "n4", "to": "n7", "z": [0.05, 0.05]})
    net = parse_network(json.dumps(doc))
    assert not is_radial(net)
    with pytest.raises(NonRadialTopology):
        build_incidence(net)
    with pytest.raises(NonRadialTopology):
        tree_parents(net)


def test_zero_admittance_rejected():
    doc = {"nodes": [{"id": "a"}, {"id": "b"}], "lines": [{"id": "l", "from": "a", "to": "b", "y": [0, 0]}]}
    with pytest.raises(ValidationError):
        parse_network(json.dumps(doc))


def test_floating_shunt_only_subnetwork_is_singular():
    # the load block is singular when a line has a purely imaginary admittance
    # that cancels the only shunt path
    doc = {"nodes": [{"id": "a"}, {"id": "b", "shunt": [0, 1]}],
           "lines": [{"id": "l", "from": "a", "to": "b", "y": [0, -1]}]}
    net = parse_network(json.dumps(doc))
    with pytest.raises(SingularMatrix):
        build_admittance(net)


def test_operating_point_scales_loads(feeder8):
    net = feeder8.with_operating_point(0.5, {"pv1": 0.2}, {"n7": [0.01, 0.0]})
    assert net.base_load[0] == pytest.approx(0.025 + 0.01j)
    assert net.base_load[6] == pytest.approx(0.035 + 0.01j)
    assert net.devices.pv_units[0].p_rating == 0.2
    with pytest.raises(ValidationError):
        feeder8.with_operating_point(1.0, {"ghost": 1.0})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
def test_random_radial_admittance_properties(seed, n):
    net = random_radial_network(np.random.default_rng(seed), n)
    assert is_radial(net)
    adm = build_admittance(net)
    np.testing.assert_allclose(adm.Y, adm.Y.T)
    # no shunts: every row sums to zero
    np.testing.assert_allclose(adm.Y.sum(axis=1), 0, atol=1e-9)
    maps = build_incidence(net)
    assert maps.C_r.shape == (n - 1, 1)
    parent, _ = tree_parents(net)
    assert parent[0] == -1 and np.all(parent[1:] >= 0)
