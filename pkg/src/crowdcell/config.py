"""Run configuration: ``key = value`` files with typed, validated keys."""

from __future__ import annotations

from pathlib import Path

from .exceptions import ConfigError


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _bandwidth(text):
    v = str(text).strip()
    return "auto" if v.lower() == "auto" else float(v)


def _optional_float(text):
    v = str(text).strip()
    return None if v.lower() in ("", "none", "off") else float(v)


# key -> (parser, default, estimator parameter or None for paths)
KEYS = {
    "fg.threshold": (int, 30, "fg_threshold"),
    "fg.external_mask_dir": (str, None, None),
    "flow.window": (int, 15, "flow_window"),
    "flow.levels": (int, 3, "flow_levels"),
    "flow.iters": (int, 10, "flow_iters"),
    "flow.eps": (float, 0.01, "flow_eps"),
    "cell.size": (int, 16, "cell_size"),
    "gabor.ksize": (int, 9, "gabor_ksize"),
    "gabor.lambda": (float, 4.0, "gabor_lambda"),
    "gabor.sigma": (float, 2.0, "gabor_sigma"),
    "gabor.gamma": (float, 0.5, "gabor_gamma"),
    "gabor.fg_only": (_bool, False, "texture_fg_only"),
    "model.delta_x": (float, 0.25, "delta_x"),
    "model.mot_max": (float, 10.0, "motion_max"),
    "model.size_max": (_optional_float, None, "size_max"),
    "model.bandwidth": (_bandwidth, "auto", "bandwidth"),
    "detect.threshold": (float, 0.01, "threshold"),
    "detect.texture_gate": (float, 0.9, "texture_gate"),
    "detect.min_train_samples": (int, 1, "min_train_samples"),
    "detect.size_threshold": (_optional_float, None, "size_threshold"),
    "frames.pattern": (str, "*.p[gp]m", None),
    "train_dir": (str, None, None),
    "test_dir": (str, None, None),
    "model_path": (str, None, None),
    "out_dir": (str, None, None),
    "gt_frames": (str, None, None),
    "gt_pixels": (str, None, None),
    "seed": (int, None, None),
}


class RunConfig:
    """Typed view over configuration values (flag > file > default)."""

    def __init__(self, values=None):
        self.values = {}
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key, raw):
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        parser = KEYS[key][0]
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}") from None

    def get(self, key):
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.values.get(key, KEYS[key][1])

    def require(self, *keys):
        for key in keys:
            if self.get(key) is None:
                raise ConfigError(f"missing required configuration key {key!r}")

    def path(self, key):
        value = self.get(key)
        return None if value is None else Path(value)

    def estimator_params(self):
        return {param: self.get(key) for key, (_, _, param) in KEYS.items() if param}

    def update(self, pairs):
        for key, raw in pairs:
            self.set(key, raw)
        return self


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}")
        pairs.append((key, value))
    return pairs


def load_config(path=None, overrides=()):
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config_text(text, str(path)))
    return cfg.update(overrides)
