"""Experiment configuration: flat ``key = value`` text.

Example::

    # three sites at desk scale
    preset = desk
    method = icp2pfl
    seeds = 0,1,2
    train.epsilon = 0.5
    institution.3.gain = 0.03

Values are layered: preset, then the file, then command-line overrides.
Keys not listed in :data:`KEYS` (or ``institution.<id>.<field>``) are
rejected, as are repeated keys within one layer.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

from .continual import TrainConfig
from .data import InstitutionDataset, ProtocolParams, default_protocol, make_institutions
from .nn import Arch
from .presets import PRESETS

METHOD_NAMES = ("icp2pfl", "fedavg", "cl-si", "cl-mi", "seq-ablation")


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        where = f"line {line}: " if line is not None else ""
        what = f"{key}: " if key is not None else ""
        super().__init__(f"{where}{what}{message}")
        self.line = line
        self.key = key


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s):
    out = tuple(int(x) for x in s.split(",") if x.strip())
    if not out:
        raise ValueError("expected a comma-separated list of integers")
    return out


def _words(s):
    out = tuple(x.strip() for x in s.split(",") if x.strip())
    if not out:
        raise ValueError("expected a comma-separated list")
    return out


def _addresses(s):
    """``1=127.0.0.1:9001, 2=127.0.0.1:9002``"""
    out = {}
    for item in _words(s):
        k, _, addr = item.partition("=")
        host, _, port = addr.rpartition(":")
        if not host or not port:
            raise ValueError(f"bad address {item!r}; expected id=host:port")
        out[int(k)] = (host, int(port))
    return out


def _positive(kind):
    def conv(s):
        v = kind(s)
        if not v > 0:
            raise ValueError(f"must be > 0, got {s}")
        return v
    return conv


def _nonneg(kind):
    def conv(s):
        v = kind(s)
        if not v >= 0:
            raise ValueError(f"must be >= 0, got {s}")
        return v
    return conv


def _choice(*names):
    def conv(s):
        s = s.strip()
        if s not in names:
            raise ValueError(f"expected one of {', '.join(names)}, got {s!r}")
        return s
    return conv


# key -> (converter, default documented in the README)
KEYS = {
    "preset": (_choice(*PRESETS), None),
    "method": (_choice(*METHOD_NAMES), "icp2pfl"),
    "seeds": (_ints, (0,)),
    "output": (str.strip, "results"),
    "transport": (_choice("inproc", "socket"), "inproc"),
    "addresses": (_addresses, {}),
    "institutions": (_ints, (1, 2, 3)),
    "si.institution": (int, None),
    "compare.methods": (lambda s: tuple(_choice(*METHOD_NAMES)(w) for w in _words(s)),
                        ("icp2pfl", "fedavg", "cl-mi")),
    "train.sigma": (_positive(float), 1e-4),
    "train.batch": (_positive(int), 64),
    "train.epsilon": (_nonneg(float), 1.0),
    "train.transmissions": (_positive(int), 10),
    "train.site_rounds": (_positive(int), 5),
    "train.threshold": (float, 1.4759),
    "train.patch": (_positive(int), 64),
    "train.stride": (_positive(int), 64),
    "train.decay_round": (_positive(int), 100),
    "train.decay_factor": (_positive(float), 0.2),
    "train.switch": (_bool, True),
    "train.fine_tune": (_bool, True),
    "train.drift_row": (_bool, False),
    "train.psnr_cap": (_positive(float), 60.0),
    "model.blocks": (_nonneg(int), 3),
    "model.channels": (_positive(int), 16),
    "model.residual": (_bool, True),
    "data.size": (_positive(int), 64),
    "data.n_train": (_positive(int), 200),
    "data.n_test": (_positive(int), 50),
    "data.n_char": (_positive(int), 50),
}

INSTITUTION_FIELDS = {
    "gain": _nonneg(float),
    "sigma": _nonneg(float),
    "window_lo": float,
    "window_hi": float,
    "style": _nonneg(int),
}
_INST_KEY = re.compile(r"^institution\.(\d+)\.([a-z_]+)$")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "icp2pfl"
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: Arch = field(default_factory=Arch)
    institutions: tuple[int, ...] = (1, 2, 3)
    protocols: dict = field(default_factory=dict)
    n_train: int = 200
    n_test: int = 50
    n_char: int = 50
    size: int = 64
    transport: str = "inproc"
    addresses: dict = field(default_factory=dict)
    output: str = "results"
    seeds: tuple[int, ...] = (0,)
    si_institution: int | None = None
    compare_methods: tuple[str, ...] = ("icp2pfl", "fedavg", "cl-mi")
    values: dict = field(default_factory=dict, compare=False)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def datasets(self, seed: int) -> list[InstitutionDataset]:
        return make_institutions(self.institutions, self.protocols,
                                 n_train=self.n_train, n_test=self.n_test, n_char=self.n_char,
                                 size=self.size, patch=self.train.patch, stride=self.train.stride,
                                 seed=seed)

    def to_text(self) -> str:
        """Resolved values, one ``key = value`` line each, sorted."""
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.values.items()))


def _split_lines(text):
    """Yield ``(line_no, key, raw_value)``; rejects syntax errors and repeats."""
    seen = {}
    for no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, eq, value = body.partition("=")
        key = key.strip()
        if not eq or not key or not re.fullmatch(r"[A-Za-z0-9_.]+", key):
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", no)
        if key in seen:
            raise ConfigError(f"repeated (first set on line {seen[key]})", no, key)
        seen[key] = no
        yield no, key, value.strip()


def _convert(key, raw, line):
    m = _INST_KEY.match(key)
    if m:
        conv = INSTITUTION_FIELDS.get(m.group(2))
        if conv is None:
            raise ConfigError(f"unknown institution field; choose from {', '.join(INSTITUTION_FIELDS)}",
                              line, key)
    elif key in KEYS:
        conv = KEYS[key][0]
    else:
        raise ConfigError("unknown key", line, key)
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(str(exc), line, key) from None


def parse_config(text: str = "", overrides=()) -> ExperimentConfig:
    """Parse config text plus ``overrides`` (``"key=value"`` strings or pairs)."""
    layers = list(_split_lines(text))
    over = []
    for item in overrides:
        if isinstance(item, str):
            key, eq, raw = item.partition("=")
            if not eq:
                raise ConfigError(f"override {item!r} is not key=value")
        else:
            key, raw = item
        over.append((None, key.strip(), str(raw).strip()))

    raw_values = {}
    lines = {}
    preset = None
    for no, key, raw in layers + over:
        if key == "preset":
            preset = _convert(key, raw, no)
    if preset is not None:
        for key, raw in PRESETS[preset].items():
            raw_values[key] = raw
    for no, key, raw in layers + over:
        raw_values[key] = raw
        lines[key] = no

    values = {k: v for k, (_, v) in KEYS.items()}
    for key, raw in raw_values.items():
        values[key] = _convert(key, raw, lines.get(key))
    return _build(values, lines)


def _build(v, lines):
    def fail(key, msg):
        raise ConfigError(msg, lines.get(key), key)

    ids = v["institutions"]
    if len(set(ids)) != len(ids):
        dup = sorted({k for k in ids if ids.count(k) > 1})
        fail("institutions", f"duplicate institution id {dup[0]}")
    if any(k < 0 for k in ids):
        fail("institutions", "institution ids must be >= 0")

    protocols = {k: default_protocol(k) for k in ids}
    overrides = {}
    for key in v:
        m = _INST_KEY.match(key)
        if not m:
            continue
        k = int(m.group(1))
        if k not in protocols:
            fail(key, f"institution {k} is not listed in institutions")
        overrides.setdefault(k, {})[m.group(2)] = v[key]
    for k, o in overrides.items():
        base = protocols[k]
        lo, hi = o.get("window_lo", base.window[0]), o.get("window_hi", base.window[1])
        try:
            protocols[k] = ProtocolParams(k, o.get("gain", base.gain), o.get("sigma", base.sigma),
                                          (lo, hi), o.get("style", base.style))
        except ValueError as exc:
            fail(next(key for key in v if key.startswith(f"institution.{k}.")), str(exc))

    if v["method"] == "cl-si" or "cl-si" in v["compare.methods"]:
        si = v["si.institution"]
        if si is not None and si not in ids:
            fail("si.institution", f"institution {si} is not listed in institutions")
    if v["method"] in ("icp2pfl", "seq-ablation") and len(ids) < 2:
        fail("institutions", "the ring needs at least two institutions")
    if v["addresses"]:
        missing = [k for k in ids if k not in v["addresses"]]
        if missing:
            fail("addresses", f"no address for institutions {missing}")
    if v["data.size"] < 32:
        fail("data.size", "phantoms must be at least 32 pixels")
    if v["train.patch"] > v["data.size"]:
        fail("train.patch", f"patch {v['train.patch']} exceeds image size {v['data.size']}")

    train = TrainConfig(
        lr=v["train.sigma"], batch=v["train.batch"], epsilon=v["train.epsilon"],
        transmissions=v["train.transmissions"], site_rounds=v["train.site_rounds"],
        threshold=v["train.threshold"], patch=v["train.patch"], stride=v["train.stride"],
        decay_round=v["train.decay_round"], decay_factor=v["train.decay_factor"],
        switch=v["train.switch"], fine_tune=v["train.fine_tune"],
        psnr_cap=v["train.psnr_cap"], drift_row=v["train.drift_row"])
    if not train.decay_factor <= 1:
        fail("train.decay_factor", "must be <= 1")
    arch = Arch(blocks=v["model.blocks"], channels=v["model.channels"], patch=train.patch,
                residual=v["model.residual"])
    shown = {}
    for key, val in v.items():
        if key == "preset" and val is None:
            continue
        if isinstance(val, tuple):
            val = ",".join(str(x) for x in val)
        elif isinstance(val, dict):
            val = ",".join(f"{k}={h}:{p}" for k, (h, p) in sorted(val.items()))
        if val is None or val == "":
            continue
        shown[key] = val
    return ExperimentConfig(
        method=v["method"], train=train, arch=arch, institutions=ids, protocols=protocols,
        n_train=v["data.n_train"], n_test=v["data.n_test"], n_char=v["data.n_char"],
        size=v["data.size"], transport=v["transport"], addresses=v["addresses"],
        output=v["output"], seeds=v["seeds"], si_institution=v["si.institution"],
        compare_methods=v["compare.methods"], values=shown)
