"""
Configuration sweeps: sparsity census, reference verification and the
staged forward benchmark (reshape -> QKV projection -> attention).

Sweep files are INI: a [sweep] section with defaults, then one section per
case. See docs/SWEEP_CONFIG.md.
"""

import configparser
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from core.block_analysis import BlockSpec, SparsityReport, classify, percent, sparsity
from core.config import CONFIG_DIR, REFERENCE_PATH
from core.errors import ToolkitError, ValidationError
from core.grid_curve import GridShape, OrderingKind, apply_order
from core.patterns import PatternKind, PatternSpec, make_pattern, materialize_mask, window_partition
from core.performance import StageStat, StageTimer, TimingResult, resolve_threads
from ml.attention import AttnTensors, dense_forward, sparse_forward, window_attention
from telemetry.logger import log_event
from telemetry.prometheus_metrics import get_metrics

logger = logging.getLogger(__name__)

ENGINES = ("sparse", "dense", "window")
DTYPES = {"f32": np.float32, "f64": np.float64}
OUTPUT_FORMATS = ("table", "json", "csv")

STATUS_OK = "ok"
STATUS_WARNING = "warning"
STATUS_MISMATCH = "mismatch"
STATUS_ERROR = "error"
STATUS_COMPUTED = "computed"  # no reference value

# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class SweepCase:
    """One sweep row; values are validated when the case runs"""
    case_id: str
    pattern: str
    shape: str
    window: Optional[str] = None
    kernel: Optional[str] = None
    radius: Optional[int] = None
    shift: Optional[int] = None
    block: str = "128"
    engine: str = "sparse"
    dtype: str = "f32"
    repeats: Optional[int] = None
    timed: bool = False
    iterations: Optional[int] = None
    batch: int = 1
    heads: int = 2
    dim: int = 64
    reference: Optional[str] = None
    expected: Optional[float] = None

    def build_spec(self) -> PatternSpec:
        return make_pattern(
            self.pattern, GridShape.parse(self.shape),
            window=parse_pair(self.window), kernel=parse_pair(self.kernel),
            radius=self.radius, shift=self.shift,
        )

    def build_blocks(self) -> BlockSpec:
        return BlockSpec.parse(self.block)

    def validate(self):
        if self.engine not in ENGINES:
            raise ValidationError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.repeats is not None and self.repeats < 1:
            raise ValidationError(f"repeats must be >= 1, got {self.repeats}")
        if min(self.batch, self.heads, self.dim) < 1:
            raise ValidationError("batch, heads and dim must be >= 1")
        if self.engine == "window" and PatternKind(self.pattern) != PatternKind.WSA:
            raise ValidationError("the window engine runs wsa cases only")


@dataclass
class SweepConfig:
    cases: List[SweepCase] = field(default_factory=list)
    output_format: str = "table"
    seed: int = 0
    threads: Optional[int] = None
    source: Optional[str] = None


def parse_pair(text: Optional[str]) -> Optional[Tuple[int, int]]:
    if text is None or str(text).strip() == "":
        return None
    parts = [int(p) for p in str(text).replace("x", ",").split(",") if p.strip()]
    return (parts[0], parts[0]) if len(parts) == 1 else (parts[0], parts[1])


_INT_FIELDS = ("radius", "shift", "repeats", "iterations", "batch", "heads", "dim")
_CASE_FIELDS = set(SweepCase.__dataclass_fields__) - {"case_id"}


def _parse_bool(text: str) -> bool:
    try:
        return configparser.ConfigParser.BOOLEAN_STATES[str(text).strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}")


def _case_from_section(name: str, section: Dict[str, str], defaults: Dict[str, str]) -> SweepCase:
    values = {k: v for k, v in defaults.items() if k in _CASE_FIELDS}
    values.update({k: v for k, v in section.items() if k in _CASE_FIELDS})
    unknown = set(section) - _CASE_FIELDS
    if unknown:
        raise ValidationError(f"case [{name}]: unknown keys {sorted(unknown)}")
    for key in ("pattern", "shape"):
        if key not in values:
            raise ValidationError(f"case [{name}]: missing '{key}'")
    try:
        for key in _INT_FIELDS:
            if key in values:
                values[key] = int(values[key])
        if "expected" in values:
            values["expected"] = float(values["expected"])
        if "timed" in values:
            values["timed"] = _parse_bool(values["timed"])
    except ValueError as e:
        raise ValidationError(f"case [{name}]: {e}")
    return SweepCase(case_id=name, **values)


def load_sweep(path: Union[str, Path]) -> SweepConfig:
    """Parse a sweep file. Case values are checked later, per case."""
    path = Path(path)
    if not path.exists() and not path.is_absolute() and (CONFIG_DIR / path).exists():
        # bare names also resolve against the bundled config directory
        path = CONFIG_DIR / path
    if not path.exists():
        raise ValidationError(f"sweep config not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path)

    header = dict(parser["sweep"]) if parser.has_section("sweep") else {}
    config = SweepConfig(
        output_format=header.get("format", "table"),
        seed=int(header.get("seed", 0)),
        threads=int(header["threads"]) if "threads" in header else None,
        source=str(path),
    )
    if config.output_format not in OUTPUT_FORMATS:
        raise ValidationError(f"format must be one of {OUTPUT_FORMATS}, got {config.output_format!r}")

    for name in parser.sections():
        if name == "sweep":
            continue
        config.cases.append(_case_from_section(name, dict(parser[name]), header))
    return config


def load_references(path: Union[str, Path, None] = None) -> Dict[str, Dict]:
    """{reference key: {"sparsity_pct": float, "provenance": str}}"""
    path = Path(path) if path else REFERENCE_PATH
    if not path.exists():
        return {}
    with open(path) as f:
        data = json.load(f)
    return data.get("values", {})


# ============================================================================
# REPORT ROWS
# ============================================================================

@dataclass
class ReportRow:
    case_id: str
    pattern: Optional[str] = None
    sparsity: Optional[SparsityReport] = None
    reference_pct: Optional[float] = None
    provenance: Optional[str] = None
    status: str = STATUS_COMPUTED
    message: str = ""
    timing: Optional[Dict] = None
    stats: Optional[Dict] = None

    @property
    def failed(self) -> bool:
        return self.status in (STATUS_MISMATCH, STATUS_ERROR)

    def stage_seconds(self) -> Tuple[float, float, float]:
        if not self.timing:
            return (0.0, 0.0, 0.0)
        stages = self.timing["stages"]
        return tuple(stages.get(name, {}).get("mean", 0.0) for name in ("reshape", "projection", "attention"))

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["sparsity"] = self.sparsity.to_dict() if self.sparsity else None
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ReportRow":
        data = dict(data)
        if data.get("sparsity") is not None:
            data["sparsity"] = SparsityReport.from_dict(data["sparsity"])
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


def rows_to_json(rows: List[ReportRow], seed: int = 0) -> str:
    return json.dumps({"seed": seed, "rows": [row.to_dict() for row in rows]}, indent=2)


def rows_from_json(text: str) -> List[ReportRow]:
    return [ReportRow.from_dict(row) for row in json.loads(text)["rows"]]


def rows_to_frame(rows: List[ReportRow]) -> pd.DataFrame:
    """Flat table: computed vs reference sparsity side by side, plus timings in ms"""
    records = []
    for row in rows:
        report = row.sparsity
        reshape, projection, attention = row.stage_seconds()
        records.append({
            "case": row.case_id,
            "pattern": row.pattern,
            "n": report.n if report else None,
            "block": f"{report.b_q}x{report.b_k}" if report else None,
            "empty_pct": percent(report.empty_ratio) if report else None,
            "kernel_pct": percent(report.kernel_sparsity) if report else None,
            "reference_pct": row.reference_pct,
            "status": row.status,
            "reshape_ms": reshape * 1e3 if row.timing else None,
            "projection_ms": projection * 1e3 if row.timing else None,
            "attention_ms": attention * 1e3 if row.timing else None,
        })
    return pd.DataFrame.from_records(records, columns=[
        "case", "pattern", "n", "block", "empty_pct", "kernel_pct", "reference_pct",
        "status", "reshape_ms", "projection_ms", "attention_ms",
    ])


_NUMERIC_COLUMNS = ["empty_pct", "kernel_pct", "reference_pct", "reshape_ms", "projection_ms", "attention_ms"]


def _printable(frame: pd.DataFrame) -> pd.DataFrame:
    """Missing numbers become NaN and missing labels "-", so both print as "-"."""
    frame = frame.copy()
    frame[_NUMERIC_COLUMNS] = frame[_NUMERIC_COLUMNS].apply(pd.to_numeric, errors="coerce")
    frame["n"] = ["-" if pd.isna(value) else int(value) for value in frame["n"]]
    for column in ("pattern", "block"):
        frame[column] = frame[column].fillna("-")
    return frame


def format_rows(rows: List[ReportRow], output_format: str = "table", seed: int = 0) -> str:
    if output_format == "json":
        return rows_to_json(rows, seed)
    frame = rows_to_frame(rows)
    if output_format == "csv":
        return frame.to_csv(index=False)
    if frame.empty:
        return "(no cases)"
    return _printable(frame).to_string(index=False, na_rep="-")


# ============================================================================
# VERIFICATION
# ============================================================================

def verify_row(row: ReportRow) -> ReportRow:
    """
    Compare a computed census with its reference value (two decimals).

    Divisible N compares the empty-block ratio and fails on mismatch. Padded
    N (N not a multiple of the block size) compares the kernel sparsity and
    only warns, always reporting both numbers.
    """
    report = row.sparsity
    if report is None or row.reference_pct is None:
        return row

    empty_pct = percent(report.empty_ratio)
    kernel_pct = percent(report.kernel_sparsity)
    divisible = report.n % report.b_q == 0 and report.n % report.b_k == 0

    if divisible:
        if empty_pct == row.reference_pct:
            return replace(row, status=STATUS_OK)
        return replace(row, status=STATUS_MISMATCH,
                       message=f"empty ratio {empty_pct:.2f}% != reference {row.reference_pct:.2f}%")

    if empty_pct == row.reference_pct:
        return replace(row, status=STATUS_OK)
    agreement = "matches" if kernel_pct == row.reference_pct else "differs from"
    return replace(row, status=STATUS_WARNING, message=(
        f"padded N={report.n}: empty ratio {empty_pct:.2f}% (N_pad={report.n_pad}) vs reference "
        f"{row.reference_pct:.2f}%; kernel sparsity {kernel_pct:.2f}% {agreement} the reference"
    ))


# ============================================================================
# STAGE BENCHMARK
# ============================================================================

@dataclass
class BenchResult:
    timing: TimingResult
    stats: Optional[Dict] = None

    @property
    def seconds(self) -> Tuple[float, float, float]:
        """(reshape, projection, attention) mean seconds"""
        return tuple(self.timing.stage_mean(name) for name in ("reshape", "projection", "attention"))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(..., N, heads * dim) -> (batch, heads, ..., N, dim) with batch leading"""
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, heads, c // heads)
    return np.moveaxis(x, -2, 1)


def _project(x: np.ndarray, weights: Tuple[np.ndarray, np.ndarray, np.ndarray], heads: int):
    return tuple(_split_heads(x @ w, heads) for w in weights)


def build_pipeline(case: SweepCase, seed: int = 0,
                   threads: Optional[int] = None) -> Tuple[List[Tuple[str, Callable]], np.ndarray, Optional[Dict]]:
    """
    Stages of one forward pass for a case.

    Returns:
        (stages, input features (batch, N, heads*dim) in row-major order,
         ExecStats dict of one sparse forward or None)
    """
    case.validate()
    spec = case.build_spec()
    blocks = case.build_blocks()
    dtype = DTYPES[case.dtype]
    channels = case.heads * case.dim

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((case.batch, spec.n, channels)).astype(dtype)
    weights = tuple((rng.standard_normal((channels, channels)) / np.sqrt(channels)).astype(dtype)
                    for _ in range(3))
    stages: List[Tuple[str, Callable]] = []
    stats = None

    if case.engine == "window":
        shape, window = spec.shape, spec.window
        stages.append(("reshape", lambda feats: window_partition(feats, shape, window)))
        stages.append(("projection", lambda xw: _project(xw, weights, case.heads)))
        stages.append(("attention", lambda qkv: window_attention(*qkv)))
        return stages, x, stats

    if spec.ordering != OrderingKind.ROW_MAJOR:
        mapping = spec.mapping
        stages.append(("reshape", lambda feats: apply_order(feats, mapping, axis=1)))
    stages.append(("projection", lambda feats: _project(feats, weights, case.heads)))

    if case.engine == "sparse":
        grid = classify(spec, blocks, threads=threads)
        stages.append(("attention", lambda qkv: sparse_forward(AttnTensors(*qkv), grid, spec, threads=threads)[0]))
        _, exec_stats = sparse_forward(AttnTensors(*_project(x, weights, case.heads)), grid, spec, threads=threads)
        stats = exec_stats.to_dict()
    else:
        mask = materialize_mask(spec)
        stages.append(("attention", lambda qkv: dense_forward(AttnTensors(*qkv), mask)))
    return stages, x, stats


def stage_bench(case: SweepCase, timer: Optional[StageTimer] = None, seed: int = 0,
                threads: Optional[int] = None) -> BenchResult:
    """
    Time reshape, QKV projection and attention of one case under the
    warm-up protocol. Row-major block-sparse cases have no reshape stage
    and report it as 0.
    """
    timer = timer or StageTimer(runs=case.repeats, iterations=case.iterations)
    stages, x, stats = build_pipeline(case, seed=seed, threads=threads)
    timing = timer.measure(stages, x)
    if "reshape" not in timing.stages:
        timing.stages = {"reshape": StageStat(), **timing.stages}

    metrics = get_metrics()
    for name, stat in timing.stages.items():
        metrics.record_stage(name, stat.mean)
    if stats:
        metrics.record_engine_run(case.pattern, stats["block_visits_total"], stats["elementwise_masks_applied"])
    return BenchResult(timing=timing, stats=stats)


# ============================================================================
# SWEEP
# ============================================================================

def run_case(case: SweepCase, references: Dict[str, Dict], seed: int = 0,
             threads: Optional[int] = None) -> ReportRow:
    """Census, verification and optional timing of one case; failures become error rows."""
    row = ReportRow(case_id=case.case_id)
    try:
        case.validate()
        spec = case.build_spec()
        row.pattern = spec.label
        row.sparsity = sparsity(classify(spec, case.build_blocks(), threads=threads))

        ref = references.get(case.reference or case.case_id)
        if case.expected is not None:
            row.reference_pct = case.expected
        elif ref is not None:
            row.reference_pct = float(ref["sparsity_pct"])
            row.provenance = ref.get("provenance")
        row = verify_row(row)

        if case.timed:
            bench = stage_bench(case, seed=seed, threads=threads)
            row.timing = bench.timing.to_dict()
            row.stats = bench.stats
    except (ToolkitError, ValueError, KeyError) as e:
        logger.error(f"Case {case.case_id} failed: {e}")
        row.status = STATUS_ERROR
        row.message = str(e)

    if row.status == STATUS_MISMATCH:
        logger.error(f"Case {case.case_id}: {row.message}")
    elif row.status == STATUS_WARNING:
        logger.warning(f"Case {case.case_id}: {row.message}")
    else:
        logger.info(f"Case {case.case_id}: {row.status}")

    get_metrics().record_case(case.case_id, row.status, row.sparsity.empty_ratio if row.sparsity else None)
    log_event("sweep_case", {
        "case": case.case_id,
        "status": row.status,
        "empty_ratio": row.sparsity.empty_ratio if row.sparsity else None,
        "reference_pct": row.reference_pct,
        "message": row.message,
    })
    return row


def run_sweep(config: SweepConfig, references: Optional[Dict[str, Dict]] = None,
              threads: Optional[int] = None) -> List[ReportRow]:
    """
    Run every case; rows come back in config order.

    Census-only sweeps run cases in parallel; any timed case makes the whole
    sweep sequential so timings are not disturbed.
    """
    references = load_references() if references is None else references
    threads = resolve_threads(threads if threads is not None else config.threads)
    if not config.cases:
        return []

    timed = any(case.timed for case in config.cases)
    if timed or threads == 1:
        return [run_case(case, references, config.seed, threads) for case in config.cases]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda c: run_case(c, references, config.seed, 1), config.cases))


def summarize(rows: List[ReportRow]) -> Dict[str, int]:
    summary: Dict[str, int] = {}
    for row in rows:
        summary[row.status] = summary.get(row.status, 0) + 1
    return summary
