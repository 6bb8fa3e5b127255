"""Pipeline configuration: a small sectioned key/value text format.

Grammar, one item per line::

    # comment               (also allowed after a value, preceded by space)
    [section]
    key = value

Values are typed by the default they replace: integers, floats, booleans
(``true``/``false``), comma-separated number lists, or bare strings.
Unknown sections and keys are errors; omitted keys keep their defaults.
"""
from dataclasses import dataclass
from pathlib import Path

SCHEMA = {
    "run": {
        "seed": 0,
        "record_timings": False,
    },
    "paths": {
        "data_dir": "",
        "out_dir": "out",
        "edge_weights": "",
        "phase_weights": "",
        "hv_weights": "",
        "feature_table": "",
    },
    "synth": {
        "n_images": 6,
        "n_train": 4,
        "height": 128,
        "width": 128,
        "n_grains": 12,
        "weak_boundary_fraction": 0.0,
        "particle_count": 12,
        "particle_radius": (2.5, 5.0),
        "scratch_count": 2,
        "scratch_length": (40.0, 90.0),
        "scratch_width": 1.5,
        "noise_sigma": 0.02,
        "blur_sigma": 0.6,
        "pixel_scale_um": 1.0,
        "gd_range": (0.08, 2.9),
        "law": "hall_petch",
        "hv_noise_sigma": 1.0,
    },
    "edge": {
        "epochs": 2,
        "lr": 1e-3,
        "batch_size": 4,
        "crop": 64,
        "crop_stride": 64,
        "rotations": True,
        "tol_px": 2,
    },
    "phase": {
        "depth": 4,
        "base_channels": 8,
        "epochs": 2,
        "lr": 2e-3,
        "batch_size": 4,
        "crop": 64,
        "threshold": 0.5,
    },
    "repair": {
        "threshold": 0.5,
        "min_area_px": 30.0,
        "similarity_tol": 0.15,
        "max_fill_ratio": 0.5,
        "use_gradient": True,
        "link_px": 1,
    },
    "intercept": {
        "n_h_lines": 10,
        "n_v_lines": 10,
        "margin_px": 0,
    },
    "regressor": {
        "d_model": 64,
        "n_layers": 3,
        "n_heads": 4,
        "token_mode": "feature_tokens",
        "lr": 1e-3,
        "epochs": 500,
    },
    "explain": {
        "plots": False,
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    sections: dict

    def __getitem__(self, section):
        return self.sections[section]

    def get(self, section, key):
        return self.sections[section][key]

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.sections[section][key] = _coerce(SCHEMA[section][key], value, f"[{section}] {key}")

    def serialize(self):
        return serialize(self)


def defaults():
    return PipelineConfig({s: dict(keys) for s, keys in SCHEMA.items()})


def _coerce(default, value, where):
    if not isinstance(value, str):
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        if isinstance(default, tuple):
            return tuple(float(v) for v in value)
        return type(default)(value)
    text = value.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError
            return tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {_type_name(default)}") from None
    return text


def _type_name(default):
    if isinstance(default, bool):
        return "true/false"
    if isinstance(default, tuple):
        return f"{len(default)} comma-separated numbers"
    return type(default).__name__


def _strip_comment(line):
    if line.lstrip().startswith("#"):
        return ""
    idx = line.find(" #")
    return line if idx < 0 else line[:idx]


def parse_config(text, source="<config>"):
    cfg = defaults()
    section = None
    unknown = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                unknown.append(f"[{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if section not in SCHEMA:
            continue
        if key not in SCHEMA[section]:
            unknown.append(f"[{section}] {key}")
            continue
        try:
            cfg.sections[section][key] = _coerce(SCHEMA[section][key], value, f"[{section}] {key}")
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    if unknown:
        raise ConfigError(f"{source}: unknown config keys: {', '.join(unknown)}")
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def serialize(cfg):
    """Canonical text: every section and key in schema order."""
    out = []
    for section, keys in SCHEMA.items():
        if out:
            out.append("")
        out.append(f"[{section}]")
        for key in keys:
            out.append(f"{key} = {_fmt(cfg.sections[section][key])}")
    return "\n".join(out) + "\n"
