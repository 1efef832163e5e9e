"""
Run configuration: defaults, named presets under configs/, the flat JSON config file,
environment overrides and --set key=value coercion.
Used by run.py and harness.py.
"""

import dataclasses
import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, fields
from typing import Any, Dict, Optional, Sequence, Tuple

from errors import ConfigError
from etc_backbone import BackboneConfig
from supertoken_gcn import GcnConfig

logger = logging.getLogger(__name__)

ROOT = os.path.dirname(os.path.abspath(__file__))
PRESET_DIR = os.path.join(ROOT, "configs")
DEFAULT_VOCAB_PATH = os.path.join(ROOT, "data", "toy_vocab.txt")
MANIFEST_FILE = "manifest.json"

# environment variable -> RunConfig field
ENV_OVERRIDES = {
    "FORMGRAPH_SEED": "seed",
    "FORMGRAPH_OUT_DIR": "out_dir",
    "FORMGRAPH_CORPUS": "corpus_dir",
    "FORMGRAPH_VOCAB": "vocab_path",
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/latest"
    corpus_dir: str = "corpus/synthetic"
    vocab_path: str = DEFAULT_VOCAB_PATH
    lowercase_vocab: bool = True
    entity_types: Tuple[str, ...] = ("header", "question", "answer")

    # backbone
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 4
    local_radius: int = 8
    max_seq: int = 1024
    use_rich_attention: bool = True
    use_gcn: bool = True
    embed_dim: int = 32
    init_std: float = 0.02

    # super-token encoder
    gcn_layers: int = 2
    gcn_hidden_dim: int = 32
    max_neighbors: int = 8

    # optimization
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 200
    eval_every: int = 50
    pretrain_learning_rate: float = 1e-3
    pretrain_batch_size: int = 4
    pretrain_steps: int = 500
    warmup_proportion: float = 0.01
    mask_rate: float = 0.15
    workers: int = 4

    # synthetic corpus
    n_docs: int = 100
    columns: int = 2
    rows_per_column: int = 6
    interleave_prob: float = 0.8

    # ablation
    ablate_seeds: Tuple[int, ...] = (0, 1, 2)

    # debug output
    dump_scores: bool = False
    dump_graphs: bool = False
    plots: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps <= 0 or self.pretrain_steps <= 0:
            raise ConfigError("steps must be positive")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must be in [0, 1), got {self.mask_rate}")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ConfigError(f"warmup_proportion must be in [0, 1], got {self.warmup_proportion}")
        if not self.entity_types:
            raise ConfigError("entity_types must not be empty")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


# ---------------------------------------------------------------------------
# Coercion
# ---------------------------------------------------------------------------
def _coerce(key: str, value: Any) -> Any:
    """Convert a raw value (JSON or command-line text) to the declared field type."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key}")
    kind = FIELD_TYPES[key]
    try:
        if kind in (bool, "bool"):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind in (int, "int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if kind in (float, "float"):
            return float(value)
        if kind in (str, "str"):
            return str(value)
        # tuples: JSON lists or comma-separated text
        items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
        inner = int if "int" in str(kind) else str
        return tuple(inner(str(v).strip()) for v in items)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {e}") from e


def apply_overrides(
    config: RunConfig, values: Dict[str, Any], source: str = "override", strict: bool = True
) -> RunConfig:
    """Unknown keys raise in strict mode; config files only warn about them."""
    if not values:
        return config
    if not strict:
        unknown = sorted(k for k in values if k not in FIELD_TYPES)
        if unknown:
            logger.warning("Ignoring unknown keys in %s: %s", source, ", ".join(unknown))
        values = {k: v for k, v in values.items() if k in FIELD_TYPES}
    coerced = {key: _coerce(key, val) for key, val in values.items()}
    logger.debug("Applying %s: %s", source, sorted(coerced))
    return dataclasses.replace(config, **coerced)


def parse_set_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    """["key=value", ...] -> {key: value}."""
    out: Dict[str, str] = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------
def load_config_file(path: str) -> Dict[str, Any]:
    """Flat JSON object of RunConfig fields."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (json.JSONDecodeError, OSError) as e:
        logger.error("Could not read config %s: %s", path, e, exc_info=True)
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return data


def save_config(config: RunConfig, path: str) -> None:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(config.as_dict(), f, indent=2)
    except OSError as e:
        logger.warning("Could not save config %s: %s", path, e)


def preset_names() -> Tuple[str, ...]:
    if not os.path.isdir(PRESET_DIR):
        return ()
    return tuple(sorted(os.path.splitext(n)[0] for n in os.listdir(PRESET_DIR) if n.endswith(".json")))


def load_preset(name: str) -> Dict[str, Any]:
    path = os.path.join(PRESET_DIR, f"{name}.json")
    if not os.path.isfile(path):
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return load_config_file(path)


def env_overrides() -> Dict[str, str]:
    return {key: os.environ[var] for var, key in ENV_OVERRIDES.items() if os.environ.get(var)}


def build_config(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    set_pairs: Optional[Sequence[str]] = None,
    explicit: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Layer preset < config file < environment < --set < explicit flags."""
    config = RunConfig()
    if preset:
        config = apply_overrides(config, load_preset(preset), f"preset {preset}", strict=False)
    if config_path:
        config = apply_overrides(config, load_config_file(config_path), f"config {config_path}", strict=False)
    config = apply_overrides(config, env_overrides(), "environment")
    config = apply_overrides(config, parse_set_overrides(set_pairs), "--set")
    config = apply_overrides(config, {k: v for k, v in (explicit or {}).items() if v is not None}, "flags")
    return config


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------
def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=ROOT, capture_output=True, text=True, timeout=5, check=False
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out_dir: str, command: str, config: RunConfig, extra: Optional[Dict[str, Any]] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "seed": config.seed,
        "code_version": code_version(),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": config.as_dict(),
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, MANIFEST_FILE)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, default=str)
    except OSError as e:
        logger.error("Could not write manifest %s: %s", path, e, exc_info=True)
        raise ConfigError(f"cannot write manifest {path}: {e}") from e
    return path


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------
def model_config(config: RunConfig, vocab_size: int, num_tags: int = 0, **flags: bool) -> BackboneConfig:
    """BackboneConfig for a run; ``flags`` may override use_gcn / use_rich_attention (ablation)."""
    use_gcn = flags.get("use_gcn", config.use_gcn)
    use_rich = flags.get("use_rich_attention", config.use_rich_attention)
    gcn = GcnConfig(
        num_layers=config.gcn_layers,
        hidden_dim=config.gcn_hidden_dim,
        max_neighbors=config.max_neighbors,
        vocab_size=vocab_size,
        embed_dim=config.embed_dim,
        init_std=config.init_std,
    )
    return BackboneConfig(
        num_layers=config.num_layers,
        hidden_dim=config.hidden_dim,
        num_heads=config.num_heads,
        local_radius=config.local_radius,
        max_seq=config.max_seq,
        use_rich_attention=use_rich,
        use_gcn=use_gcn,
        vocab_size=vocab_size,
        embed_dim=config.embed_dim,
        num_tags=num_tags,
        init_std=config.init_std,
        gcn=gcn,
    )
