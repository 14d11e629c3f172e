import json
from pathlib import Path

import numpy as np
import pytest

from wlattice import io
from wlattice.config import SCHEMA, load_config, parse_config
from wlattice.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]

BASE = {"model": "rotor_saddle", "lambda": 0.5, "omega": [0.6180339887498949], "epsilon": 0.0,
        "gamma": {"alpha": 1.0, "p": 2.0}, "R": 2, "N": 1, "excited_sites": [[0]]}


def with_(**kw):
    d = json.loads(json.dumps(BASE))
    d.update(kw)
    return d


def test_reference_configs_parse():
    for path in sorted((ROOT / "configs").glob("*.json")):
        cfg = load_config(path)
        assert cfg.L_max_eff == 2 * cfg.L


def test_published_schema_matches_code():
    doc = json.loads((ROOT / "docs" / "config.schema.json").read_text())
    doc.pop("$schema")
    doc.pop("title")
    assert doc == json.loads(json.dumps(SCHEMA))


def test_lambda_key_maps_to_field():
    cfg = parse_config(with_())
    assert cfg.lam == 0.5
    assert cfg.as_dict()["lambda"] == 0.5


@pytest.mark.parametrize("doc", [
    {k: v for k, v in BASE.items() if k != "epsilon"},
    with_(epsilon=-1.0),
    with_(lam=0.5),
    with_(model="unknown"),
    with_(excited_sites=[[3]]),
    with_(excited_sites=[[0], [0]]),
    with_(excited_sites=[[0, 0]]),
    with_(omega=[1.0]),
    with_(L=4, L_max=3),
    with_(style="other"),
    {k: v for k, v in BASE.items() if k != "lambda"},
    with_(model="klein_gordon", nu=1.0),
    with_(model="klein_gordon", nu=1.0, kappa=1.3, omega=[], t_list=[0.305], h=0.01),
    with_(model="coupled_standard", k=0.8),
])
def test_invalid_configs_raise(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    arr = tmp_path / "arr.json"
    arr.write_text("[]")
    with pytest.raises(ConfigError):
        load_config(arr)


def test_overrides_replace_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(BASE))
    cfg = load_config(p, {"epsilon": 0.01, "L": 3, "R": None})
    assert cfg.epsilon == 0.01 and cfg.L == 3 and cfg.R == 2


def test_hex_float_roundtrip():
    x = np.random.default_rng(0).standard_normal(50)
    assert np.array_equal(io.unhex_array(io.hex_array(x), x.shape), x)
    assert io.unhexf(io.hexf(0.1)) == 0.1


def test_csv_roundtrip(tmp_path):
    rows = [("a", "b"), (1, 0.1), (2, 1 / 3)]
    p = io.write_csv(tmp_path / "t.csv", rows, "two lines\nof comment")
    text = p.read_text().splitlines()
    assert text[0] == "# two lines" and text[1] == "# of comment"
    back = io.read_csv(p)
    assert back[0] == ["a", "b"] and float(back[2][1]) == 1 / 3


def test_dumps_is_deterministic():
    a = {"b": 1, "a": [1, 2]}
    b = {"a": [1, 2], "b": 1}
    assert io.dumps(a) == io.dumps(b)


def test_torus_roundtrip(run5):
    K = run5.K
    back = io.torus_from_dict(json.loads(io.dumps(io.torus_to_dict(K))))
    np.testing.assert_allclose(back.periodic, K.periodic, atol=1e-15)
    np.testing.assert_array_equal(back.omega, K.omega)
    np.testing.assert_array_equal(back.lift, K.lift)


def test_pair_roundtrip(run5):
    pair = run5.pair
    sites = run5.gamma.geometry.sites.tolist()
    back = io.pair_from_dict(json.loads(io.dumps(io.pair_to_dict(pair, sites))))
    th = np.random.default_rng(0).random((20, 1))
    s = np.random.default_rng(1).uniform(-0.05, 0.05, (20, 1))
    np.testing.assert_allclose(back.evaluate(th, s), pair.evaluate(th, s), atol=1e-14)
    np.testing.assert_allclose(back.evaluate_P(th, s), pair.evaluate_P(th, s), atol=1e-14)
    assert back.L == pair.L and back.style == pair.style and back.dims == pair.dims


def test_splitting_document(run5):
    doc = io.splitting_to_dict(run5.spl)
    V = io.unhex_array(doc["frames"], doc["frames_shape"])
    assert np.array_equal(V, run5.spl.V)
    assert set(doc["rates"]) == {"mu1", "mu2", "mu3", "C_h", "mu_s_min"}
