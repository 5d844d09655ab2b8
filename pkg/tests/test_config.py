import math

import pytest

from poram.config import OramConfig, load_config, parse_config_text, with_overrides


def test_default_partition_count_is_ceil_sqrt():
    assert OramConfig(n=1024).partitions == 32
    assert OramConfig(n=10).partitions == 4
    assert OramConfig(n=2**16).partitions == 256


def test_level_geometry_power_of_four():
    cfg = OramConfig(n=1024, capacity_mode="empirical")
    assert cfg.levels == 6
    assert cfg.level_sizes[:5] == (2, 4, 8, 16, 32)
    # top level: twice the partition capacity ceil(1.15 * 32) = 37
    assert cfg.capacity == 37
    assert cfg.level_sizes[5] == 74
    assert cfg.write_cycle == 32


def test_padded_capacity_mode_default():
    cfg = OramConfig(n=1024)
    assert cfg.capacity_mode == "padded"
    expect = math.ceil(32 + 2.0 * 1024 ** 0.25 * math.sqrt(math.log(1024)))
    assert cfg.capacity == expect
    assert cfg.capacity > OramConfig(n=1024, capacity_mode="empirical").capacity


def test_analytic_capacity_mode():
    cfg = OramConfig(n=2**14, capacity_mode="analytic", capacity_k=1, capacity_c=2)
    expect = math.ceil(math.sqrt(2**14) + 3 * math.log(2**14))
    assert cfg.capacity == expect


def test_sealed_size_and_meta_size():
    cfg = OramConfig(n=64, block_size=100)
    assert cfg.sealed_block_size == 12 + 8 + 100 + 16
    assert cfg.meta_wire_size(5) == 24 + 40


def test_alpha_matches_block_and_capacity():
    assert OramConfig(n=2**16, block_size=256).alpha == 8
    # clamps at 2 when blocks are too small for the packing to win
    assert OramConfig(n=2**20, block_size=16).alpha == 2


def test_validation_errors():
    with pytest.raises(ValueError):
        OramConfig(n=0)
    with pytest.raises(ValueError):
        OramConfig(n=16, nu=-1)
    with pytest.raises(ValueError):
        OramConfig(n=16, evict_algo="bogus")
    with pytest.raises(ValueError):
        OramConfig(n=16, evict_algo="rand", nu=1.5)
    with pytest.raises(ValueError):
        OramConfig(n=16, payload_mode="full", block_size=0)
    with pytest.raises(ValueError):
        OramConfig(n=16, recursive=True, compressed_posmap=True)


def test_parse_config_text_and_overrides(tmp_path):
    text = """
    # experiment setup
    n = 1024
    block_size = 64
    nu = 1.5
    evict_algo = seq
    piggyback = yes
    compression = off
    seed = 42
    """
    values = parse_config_text(text)
    assert values == {"n": 1024, "block_size": 64, "nu": 1.5,
                      "evict_algo": "seq", "piggyback": True,
                      "compression": False, "seed": 42}
    path = tmp_path / "run.conf"
    path.write_text(text)
    cfg = load_config(str(path), overrides={"nu": 2.0, "seed": None})
    assert cfg.nu == 2.0 and cfg.seed == 42

    bumped = with_overrides(cfg, nu=4.0)
    assert bumped.nu == 4.0 and bumped.n == 1024


def test_parse_rejects_unknown_keys_and_bad_lines():
    with pytest.raises(ValueError):
        parse_config_text("wat = 1")
    with pytest.raises(ValueError):
        parse_config_text("just some text")
    with pytest.raises(ValueError):
        parse_config_text("piggyback = maybe")
