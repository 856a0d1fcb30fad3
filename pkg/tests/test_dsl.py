import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_jacobian, python_restriction, rel_error
from shadowprice.dsl import (
    BinOp,
    Pow,
    Ref,
    RestrictionIndexError,
    RestrictionSyntaxError,
    RestrictionSystem,
    eval_g,
    eval_G,
    eval_h,
    eval_h_grad,
    eval_h_hess,
    make_sigma,
    parse_restriction,
    to_text,
)

P = 4


def expressions(p=P):
    leaf = st.one_of(
        st.integers(0, p - 1).map(lambda j: f"theta[{j}]"),
        st.floats(0.1, 3.0, allow_nan=False).map(lambda x: f"{x:.3f}"),
    )

    def extend(children):
        return st.one_of(
            st.tuples(children, st.sampled_from("+-*"), children).map(lambda t: f"({t[0]}{t[1]}{t[2]})"),
            children.map(lambda e: f"(-{e})"),
            st.tuples(children, st.integers(0, 3)).map(lambda t: f"({t[0]})^{t[1]}"),
        )

    return st.recursive(leaf, extend, max_leaves=5)


thetas = st.lists(st.floats(-1.5, 1.5, allow_nan=False), min_size=P, max_size=P).map(np.array)


class TestParse:
    def test_sum_of_four(self):
        e = parse_restriction("theta[1]+theta[2]+theta[3]+theta[4]=0", 11)
        sys_ = RestrictionSystem.from_strings(["theta[1]+theta[2]+theta[3]+theta[4]=0"], 11)
        np.testing.assert_array_equal(sys_.jacobian(np.zeros(11))[0], [0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
        assert isinstance(e, BinOp)

    def test_identity_restriction(self):
        assert parse_restriction("theta[0]", 1) == Ref(0)

    def test_cubic_difference(self):
        e = parse_restriction("theta[1]-(-theta[2])^3=0", 3)
        assert isinstance(e, BinOp) and e.op == "-"
        lhs = e.left
        assert isinstance(lhs, BinOp) and isinstance(lhs.right, Pow) and lhs.right.exponent == 3

    def test_index_out_of_range(self):
        with pytest.raises(RestrictionIndexError):
            parse_restriction("theta[99]=0", 3)

    @pytest.mark.parametrize("text", ["theta[1]+", "theta(1)", "theta[1]^x", "(theta[0]", "theta[0]/2", "", "theta[0]=1=2"])
    def test_syntax_errors(self, text):
        with pytest.raises(RestrictionSyntaxError):
            parse_restriction(text, 3)

    def test_error_reports_position(self):
        with pytest.raises(RestrictionSyntaxError) as info:
            parse_restriction("theta[0] + $", 3)
        assert "11" in str(info.value)

    @settings(max_examples=200, deadline=None)
    @given(expressions())
    def test_round_trip(self, text):
        e = parse_restriction(text, P)
        assert parse_restriction(to_text(e), P) == e

    @settings(max_examples=200, deadline=None)
    @given(expressions(), thetas)
    def test_value_matches_python_arithmetic(self, text, theta):
        sys_ = RestrictionSystem.from_strings([text], P)
        expect = python_restriction(text)(theta)
        assert sys_.g(theta)[0] == pytest.approx(expect, rel=1e-10, abs=1e-10)


class TestEvaluation:
    def test_case_truths(self):
        sys_ = RestrictionSystem.from_strings(["theta[1]+theta[2]+theta[3]+theta[4]=0"], 11)
        case2 = np.array([0.1, 0.3, 0.2, -0.5, 0.0, 0.3, 0.0, 0.4, 0.0, -0.2, 0.0])
        case3 = np.array([0.1, 0.3, 0.0, -0.5, 0.0, 0.3, 0.0, 0.4, 0.0, -0.2, 0.0])
        assert eval_g(sys_, case2)[0] == pytest.approx(0.0, abs=1e-15)
        assert eval_g(sys_, case3)[0] == pytest.approx(-0.2, abs=1e-15)

    def test_zero(self):
        sys_ = RestrictionSystem.from_strings([f"theta[{j}]=0" for j in range(3)], 3)
        np.testing.assert_array_equal(eval_g(sys_, np.zeros(3)), 0.0)
        assert eval_h(sys_, np.zeros(3)) == 0.0
        np.testing.assert_array_equal(eval_h_grad(sys_, np.zeros(3)), 0.0)

    def test_cubic_derivative(self):
        sys_ = RestrictionSystem.from_strings(["theta[1]-(-theta[2])^3=0"], 3)
        G = eval_G(sys_, np.array([0.0, 0.0, -0.5]))
        assert G[0, 2] == pytest.approx(0.75, abs=1e-15)

    def test_square_power_rule(self):
        sys_ = RestrictionSystem.from_strings(["theta[0]^2"], 1)
        assert eval_G(sys_, np.array([2.0]))[0, 0] == pytest.approx(4.0)

    def test_h_identity_sigma(self):
        sys_ = RestrictionSystem.from_strings(["theta[0]-1=0", "theta[1]-2=0"], 2)
        theta = np.array([2.0, 4.0])
        assert eval_h(sys_, theta) == pytest.approx(5.0)
        np.testing.assert_allclose(eval_h_grad(sys_, theta), 2 * np.eye(2) @ np.array([1.0, 2.0]))

    def test_solow_unrestricted_value(self):
        sys_ = RestrictionSystem.from_strings(["theta[1]+theta[2]=0"], 3)
        assert eval_g(sys_, np.array([4.651, 1.2756, -2.7087]))[0] == pytest.approx(-1.4331, abs=1e-12)

    def test_sigma_checks(self):
        with pytest.raises(ValueError):
            RestrictionSystem.from_strings(["theta[0]", "theta[1]"], 2, np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(ValueError):
            RestrictionSystem.from_strings(["theta[0]", "theta[1]"], 2, np.array([[1.0, 0.1], [0.0, 1.0]]))
        np.testing.assert_array_equal(make_sigma("identity", 3), np.eye(3))
        np.testing.assert_array_equal(make_sigma([1.0, 2.0], 2), np.diag([1.0, 2.0]))


class TestDerivatives:
    @settings(max_examples=150, deadline=None)
    @given(st.lists(expressions(), min_size=1, max_size=3), thetas, st.floats(0.5, 2.0))
    def test_finite_differences(self, texts, theta, scale):
        q = len(texts)
        sigma = scale * np.eye(q) + 0.1 * (np.ones((q, q)) - np.eye(q))
        sys_ = RestrictionSystem.from_strings(texts, P, sigma)
        funcs = [python_restriction(t) for t in texts]
        g = lambda t: np.array([f(t) for f in funcs])
        assert rel_error(sys_.jacobian(theta), central_jacobian(g, theta)) < 1e-6
        hfun = lambda t: np.array([g(t) @ np.linalg.solve(sigma, g(t))])
        assert rel_error(eval_h_grad(sys_, theta), central_jacobian(hfun, theta)[0]) < 1e-6
        assert rel_error(eval_h_hess(sys_, theta), central_jacobian(sys_.h_grad, theta)) < 1e-6
        for j in range(q):
            row = lambda t, j=j: sys_.jacobian(t)[j]
            assert rel_error(sys_.hessians(theta)[j], central_jacobian(row, theta)) < 1e-6

    @settings(max_examples=100, deadline=None)
    @given(st.lists(expressions(), min_size=1, max_size=3), thetas)
    def test_h_nonnegative_and_hessian_symmetric(self, texts, theta):
        sys_ = RestrictionSystem.from_strings(texts, P)
        assert eval_h(sys_, theta) >= 0
        Hh = eval_h_hess(sys_, theta)
        np.testing.assert_array_equal(Hh, Hh.T)
