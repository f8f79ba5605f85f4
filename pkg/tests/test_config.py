import pytest
from hypothesis import given, settings, strategies as st

from icp2pfl.config import KEYS, ConfigError, parse_config
from icp2pfl.data import DEFAULT_PROTOCOLS
from icp2pfl.presets import DESK


def test_minimal_config_gets_full_scale_defaults():
    cfg = parse_config("method = icp2pfl\ninstitutions = 1, 2\n")
    t = cfg.train
    assert (t.transmissions, t.site_rounds, t.lr, t.batch, t.threshold) == (10, 5, 1e-4, 64, 1.4759)
    assert t.epsilon == 1.0 and t.switch and t.fine_tune and not t.drift_row
    assert cfg.institutions == (1, 2)
    assert cfg.protocols[2] == DEFAULT_PROTOCOLS[2]
    assert cfg.arch.patch == 64 and cfg.seeds == (0,)


def test_comments_blank_lines_and_types():
    cfg = parse_config("""
        # a comment
        method = fedavg   # trailing comment
        seeds = 3, 4,5
        train.switch = no
        institution.2.gain = 0.05
        institution.2.window_hi = 0.9
        addresses = 1=127.0.0.1:9001, 2=localhost:9002, 3=127.0.0.1:9003
    """)
    assert cfg.method == "fedavg" and cfg.seeds == (3, 4, 5)
    assert cfg.train.switch is False
    assert cfg.protocols[2].gain == 0.05 and cfg.protocols[2].window[1] == 0.9
    assert cfg.protocols[2].sigma == DEFAULT_PROTOCOLS[2].sigma
    assert cfg.addresses[2] == ("localhost", 9002)


def test_negative_learning_rate_names_key():
    with pytest.raises(ConfigError, match="train.sigma") as err:
        parse_config("method = icp2pfl\n\ntrain.sigma = -0.1\n")
    assert err.value.line == 3 and err.value.key == "train.sigma"


def test_duplicate_institution_id():
    with pytest.raises(ConfigError, match="institutions: duplicate institution id 2"):
        parse_config("institutions = 1,2,2\n")


@pytest.mark.parametrize("text, fragment", [
    ("bogus = 1\n", "line 1: bogus: unknown key"),
    ("method icp2pfl\n", "line 1: expected 'key = value'"),
    ("method = sgd\n", "method: expected one of"),
    ("seeds = 1\nseeds = 2\n", "line 2: seeds: repeated"),
    ("institution.9.gain = 0.1\n", "institution 9 is not listed"),
    ("institution.1.colour = 3\n", "unknown institution field"),
    ("institution.1.window_lo = 0.95\n", "not inside"),
    ("train.batch = 2.5\n", "train.batch"),
    ("train.switch = maybe\n", "expected a boolean"),
    ("institutions = 1\n", "at least two institutions"),
    ("method = cl-si\nsi.institution = 7\n", "si.institution"),
    ("addresses = 1=127.0.0.1:9001\n", "no address for institutions [2, 3]"),
    ("train.patch = 128\n", "exceeds image size"),
    ("data.size = 16\ntrain.patch = 16\n", "at least 32"),
])
def test_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_single_institution_allowed_for_centralized():
    assert parse_config("method = cl-mi\ninstitutions = 4\n").institutions == (4,)


def test_preset_then_file_then_overrides():
    cfg = parse_config("preset = desk\ntrain.batch = 16\n", ["train.batch=4", ("seeds", "1,2")])
    assert cfg.train.batch == 4
    assert cfg.seeds == (1, 2)
    assert cfg.train.lr == float(DESK["train.sigma"])
    assert cfg.arch.channels == int(DESK["model.channels"])
    assert parse_config("", ["preset=desk"]).train.patch == 32
    with pytest.raises(ConfigError):
        parse_config("", ["no-equals-sign"])


def test_to_text_round_trips():
    cfg = parse_config("preset = desk\ninstitution.1.gain = 0.004\naddresses = 1=h:1,2=h:2,3=h:3\n")
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_preset_only_uses_known_keys():
    assert set(DESK) <= set(KEYS)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=6, unique=True),
       st.floats(1e-6, 1.0), st.integers(1, 20))
def test_parse_property(ids, lr, T):
    text = f"institutions = {','.join(map(str, ids))}\ntrain.sigma = {lr!r}\ntrain.transmissions = {T}\n"
    cfg = parse_config(text)
    assert cfg.institutions == tuple(ids) and cfg.train.lr == lr and cfg.train.transmissions == T
    assert set(cfg.protocols) == set(ids)
