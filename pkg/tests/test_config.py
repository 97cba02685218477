from pathlib import Path

import numpy as np
import pytest
import yaml

from qnetctl import config as cf
from qnetctl import polarization as pol

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_empty_config_is_all_defaults():
    cfg = cf.parse_config({})
    assert cfg == cf.RunConfig()
    assert cfg.calibration.target_fraction == 0.85
    assert cfg.darkcheck.d_min == 10 and cfg.darkcheck.d_max == 500
    assert cfg.calibration.grid.values()[0] == 0.0 and cfg.calibration.grid.values()[-1] == 15.5


def test_shipped_default_yaml_matches_defaults():
    assert cf.load_config(CONFIGS / "default.yaml") == cf.RunConfig()


@pytest.mark.parametrize("name", ["default.yaml", "service-drift.yaml", "tcp.yaml"])
def test_shipped_configs_load(name):
    cfg = cf.load_config(CONFIGS / name)
    cf.load_profile(cfg.profile)


def test_misspelled_key_reports_path():
    with pytest.raises(cf.ConfigError, match="sevice"):
        cf.parse_config({"sevice": {}})
    with pytest.raises(cf.ConfigError, match=r"calibration\.grid\.step"):
        cf.parse_config({"calibration": {"grid": {"step": 0}}})
    with pytest.raises(cf.ConfigError, match=r"calibration\.tagret_fraction"):
        cf.parse_config({"calibration": {"tagret_fraction": 0.8}})


@pytest.mark.parametrize("bad", [
    {"darkcheck": {"d_min": 600, "d_max": 500}},
    {"service": {"run_time_hours": 1, "interval_hours": 1}},
    {"tpi": {"points": 4}},
    {"transport": "udp"},
    {"endpoints": {"eps": "nohost"}},
    {"endpoints": {"eps": "127.0.0.1:5000", "sim": "127.0.0.1:5000"}},
    {"drift_events": [{"site": "site3", "at_iteration": 0}]},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(cf.ConfigError):
        cf.parse_config(bad)


def test_port_zero_may_repeat():
    cfg = cf.parse_config({"endpoints": {"eps": "127.0.0.1:0", "sim": "127.0.0.1:0"}})
    assert cfg.endpoints["sim"] == "127.0.0.1:0"


def test_env_overrides_endpoints():
    cfg = cf.parse_config({"endpoints": {"eps": "127.0.0.1:5000"}},
                          env={"QNETCTL_ENDPOINT_EPS": "10.0.0.2:6000", "QNETCTL_ENDPOINT_TTU_SITE2": "10.0.0.3:6001",
                               "UNRELATED": "x"})
    assert cfg.endpoints == {"eps": "10.0.0.2:6000", "ttu_site2": "10.0.0.3:6001"}


def test_resolve_endpoints():
    cfg = cf.parse_config({"endpoints": {"eps": "127.0.0.1:7000"}})
    eps = cf.resolve_endpoints(cfg, ("site2", "site3"))
    assert eps["eps"] == "127.0.0.1:7000" and eps["sim"] == "127.0.0.1:0" and len(eps) == 6
    with pytest.raises(cf.ConfigError, match="unknown agent"):
        cf.resolve_endpoints(cf.parse_config({"endpoints": {"pa_site9": "h:1"}}), ("site2", "site3"))


def test_digest_tracks_content_but_not_output_dir():
    a = cf.parse_config({"seed": 1})
    assert a.digest() == cf.parse_config({"seed": 1, "output_dir": "elsewhere"}).digest()
    assert a.digest() != cf.parse_config({"seed": 2}).digest()


def test_load_config_file_errors(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: [1, 2\n")
    with pytest.raises(cf.ConfigError):
        cf.load_config(p)
    with pytest.raises(cf.ConfigError):
        cf.load_config(tmp_path / "missing.yaml")


def test_builtin_profiles_build_scenarios():
    assert set(cf.builtin_profiles()) >= {"ideal", "colocated", "remote", "dark-violation"}
    for name in cf.builtin_profiles():
        sc = cf.load_profile(name).scenario()
        pol.check_density_matrix(sc.true_state, atol=1e-9)
        assert sc.sites == ("site2", "site3")


def test_remote_profile_ships_a_fixed_misalignment():
    sc = cf.load_profile("remote").scenario()
    assert all(sc.channels[s].misalignment is not None for s in sc.sites)
    assert cf.load_profile("ideal").scenario().channels["site3"].misalignment is None


def test_profile_from_file_and_errors(tmp_path):
    data = yaml.safe_load((Path(cf.__file__).parent / "profiles" / "ideal.yaml").read_text())
    data["detectors"]["site2"]["efficiency"] = 0.5
    p = tmp_path / "mine.yaml"
    p.write_text(yaml.safe_dump(data))
    assert cf.load_profile(str(p)).scenario().detectors["site2"].efficiency == 0.5
    with pytest.raises(cf.ConfigError, match="neither"):
        cf.load_profile("no-such-profile")
    data["detectors"]["site2"]["effciency"] = 0.5
    with pytest.raises(cf.ConfigError, match="effciency"):
        cf.parse_profile(data)


def test_state_specs():
    assert np.allclose(cf.StateSpec(kind="werner", p=0.8).density(), pol.werner_state(0.8))
    assert np.allclose(cf.StateSpec(kind="bell").density(), pol.bell_state("phi+"))


def test_scheduled_drift_unitary():
    d = cf.ScheduledDrift(site="site3", at_iteration=2, axis=(0, 0, 1), angle_deg=90)
    assert np.allclose(d.unitary(), pol.su2_from_vector([0, 0, np.pi / 2]))
