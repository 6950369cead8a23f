import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

PROJECT_ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = PROJECT_ROOT / "config"
CONFIG_PATH = CONFIG_DIR / "config.json"
TABLES_SWEEP_PATH = CONFIG_DIR / "paper_tables.cfg"
REFERENCE_PATH = CONFIG_DIR / "reference_sparsity.json"

# Block-sparse tiling
DEFAULT_BLOCK_SIZE = 128
DENSE_MASK_CAP = 16384     # max N for dense N x N materialization
RENDER_CAP = DENSE_MASK_CAP

# Cost model
DEFAULT_P_EFF = 1.0        # single-threaded CPU measurement

# Timing protocol: 10 runs x 100 iterations, first 25% discarded
WARMUP_FRACTION = 0.25
BENCH_RUNS = 10
BENCH_ITERATIONS = 100

LOG_FILE = "logs/hatk-events.log"
LOG_LEVEL = "INFO"

MAX_LOG_SIZE_MB = 10       # size of one event log before rotation
MAX_LOG_FILES = 5          # rotated generations kept
DISK_USAGE_LIMIT_MB = 100  # cap for the whole log directory


@dataclass(frozen=True)
class ToolkitSettings:
    """Resolved toolkit settings (env > config.json > defaults)"""
    dense_cap: int = DENSE_MASK_CAP
    threads: int = 0  # 0 = one per physical core
    log_file: str = LOG_FILE
    log_level: str = LOG_LEVEL
    bench_runs: int = BENCH_RUNS
    bench_iterations: int = BENCH_ITERATIONS
    p_eff: float = DEFAULT_P_EFF


_ENV_INT = {
    "dense_cap": "HATK_DENSE_CAP",
    "threads": "HATK_THREADS",
    "bench_runs": "HATK_BENCH_RUNS",
    "bench_iterations": "HATK_BENCH_ITERATIONS",
}
_ENV_STR = {
    "log_file": "HATK_LOG_FILE",
    "log_level": "HATK_LOG_LEVEL",
}


def _read_config_file(path: Path) -> dict:
    if not path.exists():
        return {}
    try:
        with open(path) as f:
            data = json.load(f)
        return data.get("toolkit", {}) if isinstance(data, dict) else {}
    except Exception:
        return {}


def load_settings(config_path: Optional[Path] = None) -> ToolkitSettings:
    """Read toolkit settings from config file and environment with sane defaults.

    Priority: env vars > config.json > defaults
    """
    settings = ToolkitSettings()

    file_values = _read_config_file(Path(config_path) if config_path else CONFIG_PATH)
    known = {k: v for k, v in file_values.items() if k in ToolkitSettings.__dataclass_fields__}
    if known:
        try:
            settings = replace(settings, **known)
        except TypeError:
            pass

    def _parse_int(name: str, default: int) -> int:
        try:
            value = int(os.getenv(name, "").strip() or 0)
            return value if value > 0 else default
        except Exception:
            return default

    overrides = {}
    for field_name, env_name in _ENV_INT.items():
        overrides[field_name] = _parse_int(env_name, getattr(settings, field_name))
    for field_name, env_name in _ENV_STR.items():
        value = os.getenv(env_name, "").strip()
        if value:
            overrides[field_name] = value

    try:
        p_eff = float(os.getenv("HATK_P_EFF", "").strip() or 0)
        if p_eff >= 1.0:
            overrides["p_eff"] = p_eff
    except ValueError:
        pass

    return replace(settings, **overrides)
