"""Strict experiment-config loading.

Files are TOML; the schema is flat-plus-sections: scalar run keys at the
top level, one optional section per concern ([params], [train], [net],
[dgm], [oracle]). Parsing is strict: any key the chosen method does not
understand is an error, and the message carries the line number so a typo
in a 40-line config is a ten-second fix. Values are type-checked against
the defaults table rather than coerced.

A resolved copy of every run's config (defaults folded in, flag overrides
applied) is written next to the artifacts, so an output directory is
self-describing and re-runnable.
"""

import json

import tomli

from .models import MODEL_NAMES


class ConfigError(ValueError):
    """Bad config file; str() carries file/line context when known."""


TRAIN_METHODS = ("mfc-direct", "fbsde-shoot", "dgm")
METHODS = TRAIN_METHODS + ("oracle",)

# defaults double as the type schema; lr accepts int or float
_TOP = {"method": "", "model": "", "outdir": "", "seed": None}
_TRAIN = {
    "n_particles": 0, "n_steps": 0, "n_iters": 0, "lr": 0.0,
    "lr_decay_iters": 0, "clip_norm": 0.0, "eval_every": 0, "log_every": 0,
    "divergence_cap": 0.0,
}
_SECTION_KEYS = {
    "params": None,              # validated by the model factory
    "train": set(_TRAIN),
    "net": {"width", "depth"},
    "dgm": {"n_boundary", "n_quad", "x_lo", "x_hi",
            "w_kfp", "w_kfp0", "w_hjb", "w_hjb_t"},
    "oracle": {"n_steps", "nx", "nt", "x_lo", "x_hi", "damping", "tol",
               "grid"},
}
_SECTIONS_BY_METHOD = {
    "mfc-direct": ("params", "train", "net"),
    "fbsde-shoot": ("params", "train", "net"),
    "dgm": ("params", "train", "net", "dgm"),
    "oracle": ("params", "oracle"),
}
# train keys that do not apply to a given method
_TRAIN_DROPPED = {"dgm": {"n_steps"}}


def _find_line(text, section, key):
    """Best-effort line number of `key` inside `section` ('' = top)."""
    current = ""
    for ln, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if not key and current == section:
                return ln
        elif current == section and s.split("=")[0].strip() == key:
            return ln
    return None


def _err(text, path, section, key, what):
    ln = _find_line(text, section, key)
    where = f"{path}:{ln}" if ln else path
    sec = f"[{section}] " if section else ""
    raise ConfigError(f"{where}: {sec}{what}")


def load_config(path, overrides=None, fallback_method=None):
    """Parse + validate; returns a plain nested dict with every key the
    run needs (absent sections come back as empty dicts). overrides is a
    {key: value} map for top-level keys (CLI flags win over the file);
    fallback_method fills in 'method' when the file leaves it out (the
    subcommand already names it)."""
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    with open(path, "r") as fh:
        text = fh.read()

    sections = {k: v for k, v in raw.items() if isinstance(v, dict)}
    top = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    top.update({k: v for k, v in (overrides or {}).items() if v is not None})

    for key in top:
        if key not in _TOP:
            _err(text, path, "", key, f"unknown key {key!r}")
    method = top.get("method") or fallback_method
    if not method:
        raise ConfigError(f"{path}: missing required key 'method'")
    if method not in METHODS:
        _err(text, path, "", "method",
             f"unknown method {method!r} (expected one of {', '.join(METHODS)})")
    model = top.get("model")
    if not model:
        raise ConfigError(f"{path}: missing required key 'model'")
    if model not in MODEL_NAMES:
        _err(text, path, "", "model",
             f"unknown model {model!r} (expected one of {', '.join(MODEL_NAMES)})")
    if method in TRAIN_METHODS and top.get("seed") is None:
        raise ConfigError(
            f"{path}: missing required key 'seed' (train runs must pin it)")
    if top.get("seed") is not None and not isinstance(top["seed"], int):
        _err(text, path, "", "seed", "seed must be an integer")

    allowed = _SECTIONS_BY_METHOD[method]
    for name in sections:
        if name not in allowed:
            _err(text, path, name, "",
                 f"section not used by method {method!r}")

    cfg = {"method": method, "model": model,
           "outdir": top.get("outdir"), "seed": top.get("seed")}
    for name in ("params", "train", "net", "dgm", "oracle"):
        table = dict(sections.get(name, {}))
        schema = _SECTION_KEYS[name]
        store = "model_params" if name == "params" else name
        if name == "train":
            schema = set(schema) - _TRAIN_DROPPED.get(method, set())
            for key, val in table.items():
                if key not in schema:
                    _err(text, path, name, key, f"unknown key {key!r}")
                if isinstance(_TRAIN[key], float):
                    if not isinstance(val, (int, float)):
                        _err(text, path, name, key, f"{key} must be a number")
                elif not isinstance(val, int) or isinstance(val, bool):
                    _err(text, path, name, key, f"{key} must be an integer")
        elif name == "params":
            for key, val in table.items():
                if not isinstance(val, (int, float)):
                    _err(text, path, name, key, f"{key} must be a number")
        else:
            for key, val in table.items():
                if key not in schema:
                    _err(text, path, name, key, f"unknown key {key!r}")
                if not isinstance(val, (int, float)):
                    _err(text, path, name, key, f"{key} must be a number")
        cfg[store] = table
    return cfg


def resolved_copy(cfg, extra=None):
    """Serializable snapshot of everything that determined the run."""
    out = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    for name in ("model_params", "train", "net", "dgm", "oracle"):
        if cfg.get(name):
            out[name] = dict(cfg[name])
    out.update(extra or {})
    return out


def write_resolved(cfg, outpath, extra=None):
    with open(outpath, "w") as fh:
        json.dump(resolved_copy(cfg, extra), fh, indent=2, sort_keys=True)
        fh.write("\n")


def lr_schedule(train_table, default_lr):
    """lr and optional 1/(1+k/d) decay from the [train] section."""
    lr = float(train_table.get("lr", default_lr))
    decay = int(train_table.get("lr_decay_iters", 0))
    if decay <= 0:
        return lr
    return lambda k: lr / (1.0 + k / decay)
