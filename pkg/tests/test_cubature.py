import math

import numpy as np
import pytest

from services.cubature import CubatureRule, certify_exactness, exact_rule, integrate, product_rule, simple_rule
from services.sphere import build_maximal_net, build_partition, sphere_area
from utils.errors import CubatureInfeasibleError, DomainError


@pytest.mark.parametrize("d,degree", [(2, 9), (3, 8), (3, 17)])
def test_product_rule_exact(d, degree):
    assert certify_exactness(product_rule(d, degree)) <= 1e-12


def test_product_rule_dimension_guard():
    with pytest.raises(DomainError):
        product_rule(4, 3)


def test_simple_rule_integrates_constants():
    rule = simple_rule(build_partition(build_maximal_net(3, 2, 0.5)))
    assert rule.integrate(lambda x: np.ones(len(x))) == pytest.approx(4 * math.pi)


@pytest.mark.parametrize("j", [0, 1, 3, 6])
def test_circle_rules_exact(j):
    rule = exact_rule(2, j, 0.5)
    assert rule.exact_degree >= 2 ** (j + 1)
    assert certify_exactness(rule) <= 1e-9
    assert certify_exactness(rule, 2 ** (j + 1)) <= 1e-9


@pytest.mark.parametrize("j", [1, 2])
def test_sphere_rules_exact_and_positive(j, cache):
    rule = exact_rule(3, j, 0.5, cache=cache)
    assert rule.exact_degree == 2 ** (j + 1)
    assert certify_exactness(rule) <= 1e-9
    assert np.all(rule.weights > 0)
    assert rule.weight_constant() <= 10.0 + 1e-9


def test_cached_rule_is_reused(cache):
    first = exact_rule(3, 1, 0.5, cache=cache)
    again = exact_rule(3, 1, 0.5, cache=cache)
    assert np.array_equal(first.nodes, again.nodes)
    assert np.array_equal(first.weights, again.weights)


def test_degree_two_moments():
    rule = exact_rule(3, 1, 0.5)
    second = integrate(lambda x: x[:, 2] ** 2, rule)
    assert second == pytest.approx(sphere_area(3) / 3, abs=1e-9)


def test_infeasible_rule_raises():
    with pytest.raises(CubatureInfeasibleError) as info:
        exact_rule(3, 1, 0.5, max_attempts=0)
    assert info.value.level == 1


def test_rule_json():
    rule = exact_rule(3, 1, 0.5)
    back = CubatureRule.from_json(rule.to_json())
    assert back.exact_degree == rule.exact_degree
    assert np.array_equal(back.weights, rule.weights)
