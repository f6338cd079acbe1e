"""Experiment configuration: an INI file with ``[generator]``, ``[hyper]``,
``[analysis]`` and ``[output]`` sections.  Unknown keys are errors."""
from __future__ import annotations

import configparser
import hashlib
import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path

from .learners import METHODS, Hyper
from .model import FEATURE_KINDS, FeatureMap, make_feature_map
from .tasks import GENERATORS

PAIR_MODES = ("all", "first", "consecutive", "last")
METRIC_KINDS = ("auto", "accuracy", "neg_loss")

# key -> (Hyper field or None, parser)
_HYPER_KEYS = {
    "lambda": ("lam", float),
    "lr": ("lr", float),
    "lr_fraction": ("lr_fraction", float),
    "max_iters": ("max_iters", int),
    "grad_tol": ("grad_tol", float),
    "components": ("mem_per_task", int),
    "pca_samples": ("pca_samples", int),
    "dep_tol": ("dep_tol", float),
    "refresh_gem_gradients": ("refresh_gem_gradients", None),
    "feature_map": (None, str),
    "param_dim": (None, int),
    "map_seed": (None, int),
    "bandwidth": (None, float),
    "memory_sizes": (None, None),
}
_ANALYSIS_KEYS = ("methods", "seeds", "cf", "bounds", "spectra", "metrics", "pairs", "metric_kind",
                  "iterative_check", "normalize_drift", "workers")
_OUTPUT_KEYS = ("dir", "save_trajectories")


class ConfigError(ValueError):
    pass


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # generator keys such as T are case-sensitive
    return parser


def _int_list(text: str, key: str) -> tuple:
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected a list of integers, got {text!r}") from None


def _bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class ExperimentConfig:
    generator: str
    generator_params: dict
    methods: tuple = ("sgd", "ogd", "pca_ogd", "gem_nt")
    seeds: tuple = (0,)
    hyper: Hyper = field(default_factory=Hyper)
    feature_map: str = "identity"
    param_dim: int | None = None
    map_seed: int = 0
    bandwidth: float = 1.0
    memory_sizes: tuple = (0, 1, 2, 4)
    cf: bool = True
    bounds: bool = True
    spectra: bool = False
    metrics: bool = True
    pairs: str = "all"
    metric_kind: str = "auto"
    iterative_check: bool = False
    normalize_drift: bool = False
    workers: int = 1
    out_dir: str = "results"
    save_trajectories: bool = True

    def __post_init__(self):
        validate(self)

    def make_feature_map(self, input_dim: int) -> FeatureMap:
        return make_feature_map(self.feature_map, input_dim, self.param_dim, self.map_seed, self.bandwidth)

    def hyper_for(self, seed: int) -> Hyper:
        return Hyper(**{**self.hyper.__dict__, "seed": int(seed)})

    def canonical(self) -> dict:
        """Everything that determines results (output placement and worker count excluded)."""
        return {
            "generator": self.generator,
            "generator_params": dict(sorted(self.generator_params.items())),
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "hyper": {k: v for k, v in sorted(self.hyper.__dict__.items()) if k != "seed"},
            "feature_map": [self.feature_map, self.param_dim, self.map_seed, self.bandwidth],
            "memory_sizes": list(self.memory_sizes),
            "analysis": [self.cf, self.bounds, self.spectra, self.metrics, self.pairs, self.metric_kind,
                         self.iterative_check, self.normalize_drift],
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_ini(self) -> str:
        """Round-trippable text form of this config."""
        h = self.hyper
        lines = ["[generator]", f"name = {self.generator}"]
        lines += [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}"
                  for k, v in sorted(self.generator_params.items())]
        lines += ["", "[hyper]", f"lambda = {h.lam!r}"]
        if h.lr is not None:
            lines.append(f"lr = {h.lr!r}")
        lines += [f"lr_fraction = {h.lr_fraction!r}", f"max_iters = {h.max_iters}", f"grad_tol = {h.grad_tol!r}",
                  f"components = {h.mem_per_task}", f"pca_samples = {h.pca_samples}", f"dep_tol = {h.dep_tol!r}",
                  f"refresh_gem_gradients = {str(h.refresh_gem_gradients).lower()}",
                  f"feature_map = {self.feature_map}"]
        if self.param_dim is not None:
            lines.append(f"param_dim = {self.param_dim}")
        lines += [f"map_seed = {self.map_seed}", f"bandwidth = {self.bandwidth!r}",
                  f"memory_sizes = {', '.join(map(str, self.memory_sizes))}",
                  "", "[analysis]", f"methods = {', '.join(self.methods)}",
                  f"seeds = {', '.join(map(str, self.seeds))}"]
        for k in ("cf", "bounds", "spectra", "metrics", "iterative_check", "normalize_drift"):
            lines.append(f"{k} = {str(getattr(self, k)).lower()}")
        lines += [f"pairs = {self.pairs}", f"metric_kind = {self.metric_kind}", f"workers = {self.workers}",
                  "", "[output]", f"dir = {self.out_dir}",
                  f"save_trajectories = {str(self.save_trajectories).lower()}", ""]
        return "\n".join(lines)


def _generator_signature(name: str):
    if name not in GENERATORS:
        raise ConfigError(f"[generator] name: unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    params = inspect.signature(GENERATORS[name]).parameters
    allowed = {k for k in params if k not in ("seed", "permutations")}
    required = {k for k, v in params.items() if v.default is inspect.Parameter.empty and k != "seed"}
    return allowed, required


def validate(cfg: ExperimentConfig) -> None:
    allowed, required = _generator_signature(cfg.generator)
    unknown = set(cfg.generator_params) - allowed
    if unknown:
        raise ConfigError(f"[generator] unknown keys for {cfg.generator}: {sorted(unknown)}")
    missing = required - set(cfg.generator_params)
    if missing:
        raise ConfigError(f"[generator] missing keys for {cfg.generator}: {sorted(missing)}")
    if not cfg.methods:
        raise ConfigError("[analysis] methods: at least one method is required")
    bad = [m for m in cfg.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"[analysis] methods: unknown {bad}; choose from {METHODS}")
    if len(set(cfg.methods)) != len(cfg.methods) or len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("[analysis] methods and seeds must not repeat")
    if not cfg.seeds:
        raise ConfigError("[analysis] seeds: at least one seed is required")
    if cfg.feature_map not in FEATURE_KINDS:
        raise ConfigError(f"[hyper] feature_map: choose from {FEATURE_KINDS}")
    if cfg.pairs not in PAIR_MODES:
        raise ConfigError(f"[analysis] pairs: choose from {PAIR_MODES}")
    if cfg.metric_kind not in METRIC_KINDS:
        raise ConfigError(f"[analysis] metric_kind: choose from {METRIC_KINDS}")
    if cfg.workers < 1:
        raise ConfigError("[analysis] workers must be >= 1")
    h = cfg.hyper
    needs_closed_form = cfg.cf or cfg.bounds or cfg.spectra or any(m != "a_gem" for m in cfg.methods)
    if needs_closed_form and not h.lam > 0:
        raise ConfigError("[hyper] lambda must be > 0 for closed-form training and analyses")
    if h.lam < 0:
        raise ConfigError("[hyper] lambda must be non-negative")
    if h.lr is not None and h.lr <= 0:
        raise ConfigError("[hyper] lr must be positive")
    if not 0 < h.lr_fraction < 1:
        raise ConfigError("[hyper] lr_fraction must lie in (0, 1)")
    if h.mem_per_task < 0 or h.pca_samples < 1 or h.max_iters < 1 or h.grad_tol <= 0:
        raise ConfigError("[hyper] components >= 0, pca_samples >= 1, max_iters >= 1 and grad_tol > 0 required")
    if any(m < 0 for m in cfg.memory_sizes):
        raise ConfigError("[hyper] memory_sizes must be non-negative")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    parser = _parser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(parser, str(path))


def parse_config_text(text: str) -> ExperimentConfig:
    parser = _parser()
    parser.read_string(text)
    return parse_config(parser, "<string>")


def parse_config(parser: configparser.ConfigParser, where: str = "<config>") -> ExperimentConfig:
    extra = set(parser.sections()) - {"generator", "hyper", "analysis", "output"}
    if extra:
        raise ConfigError(f"{where}: unknown sections {sorted(extra)}")
    if not parser.has_section("generator") or "name" not in parser["generator"]:
        raise ConfigError(f"{where}: [generator] section with a 'name' key is required")
    gen = dict(parser["generator"])
    name = gen.pop("name").strip()
    _generator_signature(name)
    params = {k: _scalar(v.strip()) for k, v in gen.items()}
    kwargs: dict = {"generator": name, "generator_params": params}

    hyper_kwargs = {}
    for key, raw in (parser["hyper"].items() if parser.has_section("hyper") else ()):
        if key not in _HYPER_KEYS:
            raise ConfigError(f"{where}: [hyper] unknown key {key!r}; allowed {sorted(_HYPER_KEYS)}")
        target, cast = _HYPER_KEYS[key]
        raw = raw.strip()
        if key == "refresh_gem_gradients":
            value = _bool(raw, key)
        elif key == "memory_sizes":
            value = _int_list(raw, key)
        else:
            try:
                value = cast(raw)
            except ValueError:
                raise ConfigError(f"{where}: [hyper] {key}: cannot parse {raw!r}") from None
        if target is None:
            kwargs[key] = value
        else:
            hyper_kwargs[target] = value
    kwargs["hyper"] = Hyper(**hyper_kwargs)

    for key, raw in (parser["analysis"].items() if parser.has_section("analysis") else ()):
        if key not in _ANALYSIS_KEYS:
            raise ConfigError(f"{where}: [analysis] unknown key {key!r}; allowed {sorted(_ANALYSIS_KEYS)}")
        raw = raw.strip()
        if key == "methods":
            kwargs[key] = tuple(m for m in raw.replace(",", " ").split())
        elif key == "seeds":
            kwargs[key] = _int_list(raw, key)
        elif key in ("pairs", "metric_kind"):
            kwargs[key] = raw
        elif key == "workers":
            kwargs[key] = int(raw)
        else:
            kwargs[key] = _bool(raw, key)

    for key, raw in (parser["output"].items() if parser.has_section("output") else ()):
        if key not in _OUTPUT_KEYS:
            raise ConfigError(f"{where}: [output] unknown key {key!r}; allowed {sorted(_OUTPUT_KEYS)}")
        if key == "dir":
            kwargs["out_dir"] = raw.strip()
        else:
            kwargs[key] = _bool(raw, key)
    return ExperimentConfig(**kwargs)
