import pytest

from services.seeding import canonical_json, derive_seed, stable_hash


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
    assert len({derive_seed(7, 1, k) for k in range(1, 100)}) == 99
    assert derive_seed(7, 1, 2) != derive_seed(8, 1, 2)
    assert 0 <= derive_seed(0) < 2 ** 32


def test_negative_seed_components_are_rejected():
    with pytest.raises(ValueError):
        derive_seed(1, -1)


def test_hash_ignores_key_order():
    a = {"b": 1, "a": [1.5, None]}
    b = {"a": (1.5, None), "b": 1}
    assert canonical_json(a) == canonical_json(b)
    assert stable_hash(a) == stable_hash(b)
    assert len(stable_hash(a)) == 16
    assert stable_hash(a) != stable_hash({"b": 2, "a": [1.5, None]})
