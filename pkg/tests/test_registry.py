import numpy as np
import pytest

from fate.registry import (
    DuplicateFeature,
    EmptyName,
    FeatureRegistry,
    UnknownFeatureWhenFrozen,
    canonicalize,
)


@pytest.mark.parametrize("raw, canon", [("cd45", "CD45"), ("FSC-A", "FSC-A"), ("HLA-Dr ", "HLA-DR")])
def test_canonicalize(raw, canon):
    assert canonicalize(raw) == canon


def test_canonicalize_alias_and_empty():
    assert canonicalize(" hladr", {"HLADR": "HLA-DR"}) == "HLA-DR"
    with pytest.raises(EmptyName):
        canonicalize("   ")


def test_register_examples():
    reg = FeatureRegistry()
    assert reg.register(["CD45", "CD34"]).tolist() == [0, 1]
    assert reg.M == 2
    assert reg.register(["CD34", "CD45"]).tolist() == [1, 0]
    reg.freeze()
    with pytest.raises(UnknownFeatureWhenFrozen):
        reg.register(["CD33"])
    assert reg.register(["cd34"]).tolist() == [1]


def test_repeat_registration_is_stable_in_any_order():
    names = ["CD7", "CD45", "FSC-A", "CD34", "SSC-H"]
    reg = FeatureRegistry()
    reg.register(names)
    before = {n: reg.id_of(n) for n in names}
    rng = np.random.default_rng(0)
    for _ in range(5):
        order = list(rng.permutation(names))
        panel = reg.register(order)
        assert panel.tolist() == [before[n] for n in order]
    assert reg.M == len(names)


def test_duplicates_rejected():
    with pytest.raises(DuplicateFeature):
        FeatureRegistry().register(["CD45", "cd45"])
    with pytest.raises(DuplicateFeature):
        FeatureRegistry(["A", "a"])


def test_json_round_trip():
    reg = FeatureRegistry(["FSC-A", "CD45"], aliases={"ptprc": "CD45"})
    reg.register(["CD34"])
    reg.freeze()
    back = FeatureRegistry.from_json(reg.to_json())
    assert back == reg
    assert [back.id_of(n) for n in reg.names] == [0, 1, 2]
    assert back.id_of("PTPRC") == 1
    assert back.frozen
