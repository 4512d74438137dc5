import numpy as np
import pytest

from mkvbranch.genealogy import (
    Label,
    ROOT,
    ParticleConfiguration,
    concat,
    config_count,
    config_distance,
    is_strict_ancestor,
    parent,
)

from conftest import random_configuration


def L(*entries):
    return Label(tuple(entries))


def test_concat():
    assert concat(ROOT, L(3)) == L(3)
    assert concat(L(1, 2), L(1)) == L(1, 2, 1)
    assert concat(L(2), L(1, 1)) == L(2, 1, 1)


def test_strict_ancestor():
    assert is_strict_ancestor(L(1), L(1, 2))
    assert not is_strict_ancestor(L(1), L(1))
    assert not is_strict_ancestor(L(2), L(1, 2))
    assert is_strict_ancestor(ROOT, L(7))


def test_parent():
    assert parent(L(1, 2, 1)) == L(1, 2)
    assert parent(L(7)) == ROOT
    with pytest.raises(ValueError):
        parent(ROOT)


def test_label_validation_and_round_trip():
    with pytest.raises(ValueError):
        Label((0,))
    with pytest.raises(ValueError):
        Label((-3, 1))
    assert str(L(1, 2, 1)) == "1.2.1"
    assert str(ROOT) == ""
    assert Label.parse("1.2.1") == L(1, 2, 1)
    assert Label.parse("") == ROOT


def test_antichain_rejected():
    with pytest.raises(ValueError):
        ParticleConfiguration({L(1): np.zeros(1), L(1, 2): np.zeros(1)})
    with pytest.raises(ValueError):
        ParticleConfiguration({ROOT: np.zeros(1), L(4): np.zeros(1)})
    # siblings and cousins are fine
    ParticleConfiguration({L(1, 1): np.zeros(1), L(1, 2): np.zeros(1), L(2): np.zeros(1)})


def brute_force_distance(e1, e2):
    """Direct evaluation of the definition, independent of the library path."""
    k1 = set(e1.labels)
    k2 = set(e2.labels)
    total = float(len(k1 ^ k2))
    for k in k1 & k2:
        total += min(float(np.linalg.norm(e1.position(k) - e2.position(k))), 1.0)
    return total


def test_config_distance_examples():
    e1 = ParticleConfiguration({L(1): [0.0], L(2): [1.0]})
    e2 = ParticleConfiguration({L(1): [0.3], L(2, 1): [1.0]})
    # common label {1} contributes 0.3, symmetric difference {2, 2.1} adds 2
    assert config_distance(e1, e2) == pytest.approx(2.3, abs=1e-12)
    assert config_distance(e1, e1) == 0.0
    far1 = ParticleConfiguration({L(1): [5.0]})
    far2 = ParticleConfiguration({L(1): [9.0]})
    assert config_distance(far1, far2) == 1.0  # truncation at 1


def test_config_distance_dimension_mismatch():
    e1 = ParticleConfiguration({L(1): [0.0]})
    e2 = ParticleConfiguration({L(1): [0.0, 0.0]})
    with pytest.raises(ValueError):
        config_distance(e1, e2)


def test_config_count_matches_distance_to_null(rng):
    assert config_count(ParticleConfiguration.empty(dim=1)) == 0
    for _ in range(50):
        e = random_configuration(rng)
        assert config_count(e) == len(e.labels)
        assert config_count(e) == config_distance(e, ParticleConfiguration.empty(dim=1))


def test_metric_axioms_on_random_pool(rng):
    pool = [random_configuration(rng) for _ in range(60)]
    for e in pool:
        assert config_distance(e, e) == 0.0
    for _ in range(1000):
        i, j, k = rng.integers(0, len(pool), size=3)
        a, b, c = pool[i], pool[j], pool[k]
        dab = config_distance(a, b)
        assert dab == config_distance(b, a)
        assert dab == pytest.approx(brute_force_distance(a, b), abs=1e-12)
        if a != b:
            assert dab > 0.0
        assert config_distance(a, c) <= dab + config_distance(b, c) + 1e-12


def test_deterministic_iteration_order(rng):
    e = random_configuration(rng)
    assert list(e.labels) == sorted(e.labels, key=lambda k: k.word)


def test_pairing():
    e = ParticleConfiguration({L(1): [2.0], L(2): [3.0]})
    assert e.pairing(lambda k, x: 1.0) == 2.0
    assert e.pairing(lambda k, x: float(x[0])) == 5.0


def test_config_csv_round_trip(tmp_path, rng):
    from mkvbranch.genealogy import read_config_csv, write_config_csv

    e = random_configuration(rng, dim=2)
    file = tmp_path / "config.csv"
    write_config_csv(e, file)
    back = read_config_csv(file, dim=2)
    assert back == e
    assert file.read_text().splitlines()[0] == "label,x_1,x_2"
