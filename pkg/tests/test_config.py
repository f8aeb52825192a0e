import copy

import pytest
import yaml

from flowest.config import ConfigError, load, validate

BASE = {
    "seed": 1,
    "synth": {"grid": {"dims": [16, 8], "lower": [0, -1], "upper": [4, 1]}, "n_modes": 4, "span": [0, 6]},
    "pod": {"n_retained": 3, "window": [0, 4]},
    "calibration": {"window": [0, 2], "n_nodes": 21},
    "sensors": [{"kind": "point-velocity", "location": [1.0, 0.2]}],
    "estimation": {"training_window": [0, 4], "window": [4, 5], "methods": [{"method": "K-LSE"}]},
}


def _with(path, value):
    cfg = copy.deepcopy(BASE)
    node = cfg
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    return cfg


def test_defaults_fill_present_sections():
    cfg = validate(copy.deepcopy(BASE))
    assert cfg["synth"]["dynamics"] == "limit-cycle"
    assert cfg["paths"]["format"] == "text"
    assert cfg["report"]["c_r_values"] == [0.01, 0.1, 1.0, 10.0, 100.0]


@pytest.mark.parametrize("path,value,needle", [
    (("pod", "n_retained"), 0, "pod.n_retained"),
    (("synth", "grid", "dims"), [16], "synth.grid.dims"),
    (("synth", "dynamics"), "turbulent", "synth.dynamics"),
    (("estimation", "methods"), [{"method": "KALMAN"}], "estimation.methods[0].method"),
    (("estimation", "window"), [5, 4], "estimation.window"),
    (("estimation", "window"), [4, 9], "outside synth.span"),
    (("calibration", "n_nodes"), 3, "calibration.n_nodes"),
    (("synth", "grid", "upper"), [4], "synth.grid.upper"),
    (("estimation", "methods"), [{"method": "LSE", "stride": 2}], "stride"),
])
def test_errors_name_the_key(path, value, needle):
    with pytest.raises(ConfigError, match=needle.replace("[", r"\[").replace("]", r"\]").replace(".", r"\.")):
        validate(_with(path, value))


def test_unknown_key_is_refused():
    with pytest.raises(ConfigError, match="colour"):
        validate(_with(("colour",), "blue"))


def test_kalman_methods_need_calibration():
    cfg = copy.deepcopy(BASE)
    del cfg["calibration"]
    with pytest.raises(ConfigError, match="calibration"):
        validate(cfg)


def test_yaml_loading(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(BASE))
    assert load(p) == BASE
    p.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError, match="mapping"):
        load(p)
    p.write_text("a: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load(p)
