import pytest

from anisograph import config
from anisograph.errors import ConfigError, InvalidMu


def test_defaults_validate():
    cfg = config.load()
    assert cfg["mode"] == "area" and cfg["k"] == 3
    assert cfg["barrier.fd_order"] == "auto"


def test_parse_text_and_comments():
    text = """
    # comment line
    mode = "anisotropic"   # trailing comment
    mu = 0.2
    pde.R = [25, 50]
    integrand.kind = series
    barrier.fd_order = True
    """
    d = config.parse_text(text)
    assert d == {"mode": "anisotropic", "mu": 0.2, "pde.R": [25, 50],
                 "integrand.kind": "series", "barrier.fd_order": True}


def test_malformed_line():
    with pytest.raises(ConfigError):
        config.parse_text("mode area")


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text('mode = "anisotropic"\nmu = 0.3\n')
    cfg = config.load(p, {"mu": 0.2})
    assert cfg["mode"] == "anisotropic" and cfg["mu"] == 0.2


def test_roundtrip(tmp_path):
    cfg = config.load(overrides={"mode": "anisotropic", "mu": 0.1, "pde.R": [10.0, 20.0, 40.0]})
    p = tmp_path / "c.cfg"
    p.write_text(config.dumps(cfg))
    assert config.load(p) == cfg


def test_unknown_key():
    with pytest.raises(ConfigError):
        config.load(overrides={"integrand.kappa_scan": [1, 2]})


def test_area_k2_complex_exponent():
    with pytest.raises(InvalidMu):
        config.load(overrides={"k": 2})


@pytest.mark.parametrize("over", [
    {"mode": "other"},
    {"k": 0},
    {"mode": "anisotropic", "mu": 0.5},
    {"mode": "anisotropic", "mu": 0.0},
    {"mode": "anisotropic", "integrand.kind": "poly"},
    {"foliation.tol_ode": 1e-3},
    {"pde.n_rho": 32},
    {"pde.omega": 1.5},
    {"pde.R": []},
    {"pde.R": [10, -1]},
    {"barrier.fd_order": "yes"},
    {"barrier.n_samples": 10},
])
def test_rejected(over):
    with pytest.raises(ConfigError):
        config.load(overrides=over)


@pytest.mark.parametrize("v", [True, False, "auto"])
def test_fd_order_values(v):
    assert config.load(overrides={"barrier.fd_order": v})["barrier.fd_order"] == v


def test_section():
    cfg = config.load()
    s = config.section(cfg, "pde", "seed")
    assert set(s) == {"seed", "pde.R", "pde.n_rho", "pde.n_theta", "pde.omega", "pde.tol",
                      "pde.max_iters"}
