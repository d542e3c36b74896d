import itertools

import numpy as np
import pytest

from hypolab.brackets import (
    EMPTY_INDEX,
    BracketTable,
    GridSpec,
    MultiIndex,
    ball_sample,
    bracket_local_bound,
    check_hormander,
    coefficient_local_bound,
    enumerate_indices,
    gram_matrix,
    lie_bracket,
    local_field_bound,
    spanning_value,
    stratonovich_drift,
)
from hypolab.errors import BracketSizeError, ConfigError
from hypolab.fieldlang import CoefficientSet, VectorField

# ---------------------------------------------------------------------------
# multi-indices


def test_multiindex_weight_counts_zeros_twice():
    a = MultiIndex((0, 1, 0))
    assert a.length == 3
    assert a.weight == 5
    assert a.last == 0
    assert a.prefix == MultiIndex((0, 1))
    assert EMPTY_INDEX.weight == 0


def test_weight_bounds():
    for entries in itertools.product(range(3), repeat=3):
        mi = MultiIndex(entries)
        assert mi.length <= mi.weight <= 2 * mi.length


def test_enumerate_indices_small_cases():
    assert enumerate_indices(0, 1) == [EMPTY_INDEX]
    got = enumerate_indices(1, 2)
    assert set(mi.entries for mi in got) == {(), (1,), (2,)}
    got = enumerate_indices(2, 1)
    assert set(mi.entries for mi in got) == {(), (0,), (1,), (1, 1)}


def test_enumerate_indices_matches_brute_force():
    max_weight, m = 4, 2
    brute = {()}
    for length in range(1, max_weight + 1):
        for entries in itertools.product(range(m + 1), repeat=length):
            if len(entries) + sum(1 for e in entries if e == 0) <= max_weight:
                brute.add(entries)
    got = enumerate_indices(max_weight, m)
    assert set(mi.entries for mi in got) == brute
    # sorted by (length, lexicographic)
    keys = [(mi.length, mi.entries) for mi in got]
    assert keys == sorted(keys)


# ---------------------------------------------------------------------------
# stratonovich drift and brackets


def test_stratonovich_drift_constant_sigma_is_plain_drift():
    c = CoefficientSet.from_text(2, 2, "sin(x1), x2", ["1, 0", "0, 3"])
    drift = stratonovich_drift(c)
    for got, expected in zip(drift.components, c.drift.components):
        assert got == expected


def test_stratonovich_drift_linear_noise():
    c = CoefficientSet.from_text(1, 1, "-x1", ["x1"])
    drift = stratonovich_drift(c)
    for x in (-2.0, 0.5, 3.0):
        assert drift.evaluate((x,))[0] == pytest.approx(-1.5 * x)


def test_stratonovich_drift_matches_directional_derivative():
    c = CoefficientSet.from_text(2, 1, "0, 0", ["x2, 0"])
    drift = stratonovich_drift(c)
    rng = np.random.default_rng(2)
    step = 1e-6
    sig = c.diffusion[0]
    for _ in range(20):
        x = rng.uniform(-2, 2, size=2)
        sx = sig.evaluate(x)
        fd = (sig.evaluate(x + step * sx) - sig.evaluate(x - step * sx)) / (2 * step)
        assert np.allclose(drift.evaluate(x), -0.5 * fd, atol=1e-6)


def test_lie_bracket_linear_fields():
    A = np.array([[1.0, 2.0], [0.0, -1.0]])
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    v = VectorField.from_text("x1 + 2*x2, -x2", 2)
    u = VectorField.from_text("x2, x1", 2)
    br = lie_bracket(v, u)
    C = B @ A - A @ B
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = rng.uniform(-2, 2, size=2)
        assert np.allclose(br.evaluate(x), C @ x, atol=1e-12)


def test_lie_bracket_of_field_with_itself_vanishes():
    v = VectorField.from_text("sin(x1)*x2, x1^2", 2)
    br = lie_bracket(v, v)
    rng = np.random.default_rng(5)
    for _ in range(10):
        x = rng.uniform(-2, 2, size=2)
        assert np.allclose(br.evaluate(x), 0.0, atol=1e-12)


def test_lie_bracket_hand_example():
    v = VectorField.from_text("1, 0", 2)
    u = VectorField.from_text("0, x1", 2)
    br = lie_bracket(v, u)
    assert np.allclose(br.evaluate((0.7, -0.3)), [0.0, 1.0])


_FIELDS = [
    "x2, -x1",
    "sin(x1), cos(x2)",
    "x1*x2, x1 + x2",
    "exp(x1/3), x2^2",
    "tanh(x2), x1",
    "1, x1^2",
    "x2^3, sin(x1*x2)",
    "cos(x1) + x2, x1*x1",
    "0.5*x1, -2*x2",
    "x1 + 1, x2 - 1",
]


def test_bracket_antisymmetry_and_bilinearity():
    rng = np.random.default_rng(6)
    fields = [VectorField.from_text(t, 2) for t in _FIELDS[:5]]
    for v, u in itertools.combinations(fields, 2):
        vu = lie_bracket(v, u)
        uv = lie_bracket(u, v)
        for _ in range(6):
            x = rng.uniform(-2, 2, size=2)
            a, b = vu.evaluate(x), uv.evaluate(x)
            assert np.allclose(a, -b, rtol=1e-9, atol=1e-9)


def test_jacobi_identity_on_corpus():
    rng = np.random.default_rng(7)
    fields = [VectorField.from_text(t, 2) for t in _FIELDS]
    triples = [(fields[i], fields[(i + 3) % 10], fields[(i + 6) % 10]) for i in range(10)]
    for u, v, w in triples:
        cyclic = [
            lie_bracket(u, lie_bracket(v, w)),
            lie_bracket(v, lie_bracket(w, u)),
            lie_bracket(w, lie_bracket(u, v)),
        ]
        for _ in range(4):
            x = rng.uniform(-1.5, 1.5, size=2)
            s = sum(term.evaluate(x) for term in cyclic)
            assert np.max(np.abs(s)) <= 1e-7


# ---------------------------------------------------------------------------
# bracket table


def test_table_empty_index_returns_base(ou):
    table = BracketTable(ou)
    sig = ou.diffusion[0]
    assert table.bracket(sig, EMPTY_INDEX) is sig


def test_table_ou_time_bracket(ou):
    table = BracketTable(ou)
    br = table.diffusion_bracket(1, MultiIndex((0,)))
    for x in (-1.0, 0.0, 2.0):
        assert br.evaluate((x,))[0] == pytest.approx(1.0)


def test_table_heisenberg_bracket(heisenberg):
    table = BracketTable(heisenberg)
    br = table.diffusion_bracket(1, MultiIndex((0,)))
    assert np.allclose(br.evaluate((0.1, 0.2)), [0.0, -1.0])


def test_table_recursion_consistency(heisenberg):
    table = BracketTable(heisenberg)
    alpha = MultiIndex((1, 0))
    direct = table.diffusion_bracket(1, alpha)
    manual = lie_bracket(
        table.direction(0), table.diffusion_bracket(1, MultiIndex((1,)))
    )
    x = (0.3, -0.7)
    assert np.allclose(direct.evaluate(x), manual.evaluate(x))


def test_bracket_size_cap():
    c = CoefficientSet.from_text(1, 1, "exp(x1^3)", ["sin(x1^2)*exp(x1)"])
    table = BracketTable(c, max_nodes=40)
    with pytest.raises(BracketSizeError):
        table.diffusion_bracket(1, MultiIndex((0, 0, 0)))


# ---------------------------------------------------------------------------
# gram matrix and spanning values


def test_gram_elliptic_identity(elliptic2):
    table = BracketTable(elliptic2)
    M = gram_matrix((0.4, -1.0), 1, table)
    assert np.allclose(M, np.eye(2))
    assert spanning_value((0.4, -1.0), 1, table) == 1.0


def test_gram_heisenberg_levels(heisenberg):
    table = BracketTable(heisenberg)
    x = (1.3, -0.4)
    assert np.allclose(gram_matrix(x, 1, table), np.diag([1.0, 0.0]))
    assert spanning_value(x, 1, table) == 0.0
    assert np.allclose(gram_matrix(x, 3, table), np.eye(2))
    assert spanning_value(x, 3, table) == 1.0


def test_spanning_value_matches_sphere_sampling(heisenberg):
    table = BracketTable(heisenberg)
    x = (0.2, 0.5)
    M = gram_matrix(x, 3, table)
    rng = np.random.default_rng(10)
    etas = rng.normal(size=(10_000, 2))
    etas /= np.linalg.norm(etas, axis=1, keepdims=True)
    quad = np.einsum("ni,ij,nj->n", etas, M, etas)
    lam = np.linalg.eigvalsh(M)[0]
    assert quad.min() >= lam - 1e-9
    assert abs(min(quad.min(), 1.0) - min(lam, 1.0)) <= 1e-3


def test_spanning_nondecreasing_in_level(heisenberg):
    table = BracketTable(heisenberg)
    x = (0.9, 1.1)
    vals = [spanning_value(x, L, table) for L in (1, 2, 3, 4)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_degenerate_sigma_never_spans(degenerate):
    table = BracketTable(degenerate)
    for L in (1, 2, 3):
        assert spanning_value((0.3,), L, table) == 0.0


def test_multiplicative_sigma_spans_away_from_origin():
    c = CoefficientSet.from_text(1, 1, "0", ["x1"])
    table = BracketTable(c)
    assert spanning_value((0.0,), 1, table) == 0.0
    assert spanning_value((1.0,), 1, table) == 1.0


# ---------------------------------------------------------------------------
# reports


def test_check_hormander_heisenberg_grid(heisenberg):
    table = BracketTable(heisenberg)
    spec = GridSpec((-2.0, -2.0), (2.0, 2.0), (21, 21))
    report = check_hormander(spec, 3, table)
    assert report.inf_value == 1.0
    assert report.empirical_uniform
    assert report.level_candidate == 3
    payload = report.to_json_dict()
    assert payload["summary"]["inf_V_L"] == 1.0
    assert payload["summary"]["L0_candidate"] == 3
    assert len(payload["points"]) == 441
    assert "finite" in payload["summary"]["caveat"]


def test_check_hormander_degenerate(degenerate):
    table = BracketTable(degenerate)
    report = check_hormander([(0.0,), (1.0,)], 2, table)
    assert report.inf_value == 0.0
    assert not report.empirical_uniform
    assert report.level_candidate is None


def test_check_hormander_flags_origin():
    c = CoefficientSet.from_text(1, 1, "0", ["x1"])
    table = BracketTable(c)
    report = check_hormander([(0.0,), (1.0,)], 1, table)
    assert report.values[0] == 0.0
    assert report.values[1] == 1.0
    assert not report.in_span_set[0]
    assert report.in_span_set[1]


def test_check_hormander_empty_points(ou):
    with pytest.raises(ConfigError):
        check_hormander([], 1, BracketTable(ou))


# ---------------------------------------------------------------------------
# local sup-norm bounds


def test_ball_sample_prefix_monotone():
    small = ball_sample((0.0, 0.0), 1.0, 64)
    large = ball_sample((0.0, 0.0), 1.0, 256)
    assert np.array_equal(large[: len(small)], small)
    assert np.all(np.linalg.norm(large, axis=1) <= 1.0 + 1e-12)


def test_local_bound_constant_fields():
    c = CoefficientSet.from_text(1, 1, "0", ["1"])
    assert coefficient_local_bound(c, (0.0,)) == 1.0
    bound, n = local_field_bound([c.diffusion[0]], (5.0,), order=0)
    assert bound == 1.0
    assert n >= 512


def test_local_bound_cubic_drift_interval_suprema():
    c = CoefficientSet.from_text(1, 1, "-x1^3", ["1"])
    assert coefficient_local_bound(c, (0.0,)) == pytest.approx(1.0)
    assert coefficient_local_bound(c, (2.0,)) == pytest.approx(27.0)


def test_local_bound_monotone_in_sample_size():
    c = CoefficientSet.from_text(1, 1, "sin(3*x1)*x1^2", ["1"])
    v = VectorField.from_text("sin(3*x1)*x1^2", 1)
    b1, _ = local_field_bound([v], (1.0,), order=0, n_ball=64)
    b2, _ = local_field_bound([v], (1.0,), order=0, n_ball=512)
    assert b2 >= b1


def test_bracket_local_bound_includes_derivatives(ou):
    table = BracketTable(ou)
    bound = bracket_local_bound(table, (0.0,), L=1)
    # sigma = 1 has norm 1 and zero derivatives; the time bracket is 1.
    assert bound == pytest.approx(1.0)
