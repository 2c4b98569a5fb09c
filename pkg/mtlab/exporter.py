"""Run artifacts and comparison reports for mtlab."""

import csv
import json
import logging
import statistics
from collections import OrderedDict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .models import LossLog, MetricReport, RunRecord

logger = logging.getLogger(__name__)

RUN_RECORD_FILE = "run_record.json"
CONFIG_FILE = "config.json"
TOKENIZER_FILE = "tokenizer.bpe"
LOSS_LOG_FILE = "loss_log.csv"
METRICS_FILE = "metrics.json"
REPORT_COLUMNS = ("run", "experiment", "seed", "architecture", "regime", "direction", "bleu", "chrf", "ter", "status")


def _write_json(path: Path, data: Any) -> Path:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def _write_lines(path: Path, lines: Sequence[str]) -> Path:
    with open(path, 'w', encoding='utf-8') as f:
        for line in lines:
            f.write(line.replace("\n", " ") + "\n")
    return path


def read_lines(path: Union[str, Path]) -> List[str]:
    """One segment per line; a trailing newline does not add an empty segment."""
    text = Path(path).read_text(encoding='utf-8')
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.rstrip("\r") for line in lines]


class RunExporter:
    """Writes every artifact of one run into its directory."""

    def __init__(self, run_dir: Union[str, Path]):
        """
        Initialize RunExporter.

        Args:
            run_dir: Directory holding this run's artifacts (created if missing)
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / "checkpoints"

    @property
    def tokenizer_path(self) -> Path:
        return self.run_dir / TOKENIZER_FILE

    def export_config(self, config: Dict[str, Any]) -> Path:
        """Snapshot of the fully resolved config the run used."""
        return _write_json(self.run_dir / CONFIG_FILE, config)

    def export_loss_log(self, loss_log: LossLog, include_seconds: bool = False) -> Path:
        return loss_log.write_csv(self.run_dir / LOSS_LOG_FILE, include_seconds)

    def export_segments(self, direction: str, sources: Sequence[str], hypotheses: Sequence[str],
                        references: Sequence[str]) -> Dict[str, str]:
        """
        Store the segments behind a direction's scores, one per line.

        Args:
            direction: Direction label such as ``en-hi``
            sources: Source sentences in test order
            hypotheses: Model outputs aligned with ``sources``
            references: Reference translations aligned with ``sources``

        Returns:
            Dict mapping segment kinds to file paths
        """
        files = {}
        for kind, lines in (("src", sources), ("hyp", hypotheses), ("ref", references)):
            files[kind] = str(_write_lines(self.run_dir / f"{kind}.{direction}.txt", lines))
        return files

    def export_metrics(self, reports: Sequence[MetricReport]) -> Path:
        """All direction reports of the run, keyed by direction."""
        return _write_json(self.run_dir / METRICS_FILE, {r.direction: r.to_dict() for r in reports})

    def export_run_record(self, record: RunRecord) -> Path:
        return _write_json(self.run_dir / RUN_RECORD_FILE, record.to_dict())


def load_run_record(run_dir: Union[str, Path]) -> RunRecord:
    with open(Path(run_dir) / RUN_RECORD_FILE, 'r', encoding='utf-8') as f:
        return RunRecord.from_dict(json.load(f))


def load_config_snapshot(run_dir: Union[str, Path]) -> Dict[str, Any]:
    with open(Path(run_dir) / CONFIG_FILE, 'r', encoding='utf-8') as f:
        return json.load(f)


def load_metric_reports(run_dir: Union[str, Path]) -> Dict[str, MetricReport]:
    with open(Path(run_dir) / METRICS_FILE, 'r', encoding='utf-8') as f:
        data = json.load(f)
    return {direction: MetricReport.from_dict(report) for direction, report in data.items()}


# ---------------------------------------------------------------------------
# Comparison reports
# ---------------------------------------------------------------------------

@dataclass
class ReportRow:
    """One (run, direction) line of a comparison table; missing scores stay None."""
    run: str
    experiment: str = ""
    seed: Optional[int] = None
    architecture: str = ""
    regime: str = ""
    direction: str = ""
    bleu: Optional[float] = None
    chrf: Optional[float] = None
    ter: Optional[float] = None
    status: str = "completed"
    buckets: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    spread: Dict[str, Tuple[float, float]] = field(default_factory=dict)


def collect_report_rows(run_dirs: Sequence[Union[str, Path]]) -> List[ReportRow]:
    """
    Read run records and metric reports into table rows.

    A missing directory, an unreadable record or a corrupt metrics file
    still yields a row, flagged in ``status`` with blank scores.

    Args:
        run_dirs: Run directories in the order they should be listed

    Returns:
        List of ReportRow objects
    """
    rows: List[ReportRow] = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        if not (run_dir / RUN_RECORD_FILE).exists():
            rows.append(ReportRow(run=run_dir.name, status="missing"))
            continue
        try:
            record = load_run_record(run_dir)
        except (OSError, ValueError, TypeError, KeyError) as e:
            logger.warning(f"Corrupt run record in {run_dir}: {e}")
            rows.append(ReportRow(run=run_dir.name, status="corrupt record"))
            continue
        base = dict(run=record.name, experiment=record.experiment, seed=record.seed,
                    architecture=record.architecture, regime=record.regime)
        if record.status == "failed":
            rows.append(ReportRow(**base, status=f"failed ({record.failed_stage or 'unknown'})"))
            continue
        if not record.completed:
            rows.append(ReportRow(**base, status=record.status))
            continue
        try:
            reports = load_metric_reports(run_dir)
        except (OSError, ValueError, TypeError, KeyError) as e:
            logger.warning(f"Corrupt metrics in {run_dir}: {e}")
            rows.append(ReportRow(**base, status="corrupt metrics"))
            continue
        for direction, report in reports.items():
            buckets = {
                b.label: {"bleu": b.bleu, "chrf": b.chrf, "ter": b.ter} for b in report.buckets
            }
            rows.append(ReportRow(**base, direction=direction, bleu=report.bleu, chrf=report.chrf,
                                  ter=report.ter, buckets=buckets))
    return rows


def aggregate_seeds(rows: Sequence[ReportRow]) -> List[ReportRow]:
    """Merge completed rows that differ only in seed into mean rows with (min, max) spread."""
    groups: "OrderedDict[Tuple[str, str, str, str], List[ReportRow]]" = OrderedDict()
    passthrough: List[ReportRow] = []
    for row in rows:
        if row.status != "completed":
            passthrough.append(row)
            continue
        groups.setdefault((row.experiment, row.architecture, row.regime, row.direction), []).append(row)

    merged = []
    for (experiment, architecture, regime, direction), members in groups.items():
        row = ReportRow(
            run=f"{experiment} ({len(members)} seeds)",
            experiment=experiment,
            architecture=architecture,
            regime=regime,
            direction=direction,
            status="completed",
        )
        for metric in ("bleu", "chrf", "ter"):
            values = [getattr(m, metric) for m in members]
            setattr(row, metric, statistics.mean(values))
            row.spread[metric] = (min(values), max(values))
        merged.append(row)
    return merged + passthrough


def bucket_labels(rows: Sequence[ReportRow]) -> List[str]:
    labels: List[str] = []
    for row in rows:
        for label in row.buckets:
            if label not in labels:
                labels.append(label)
    return labels


def _cell(value: Optional[float], digits: int) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def _metric_digits(metric: str) -> int:
    return 4 if metric == "ter" else 2


def table_cells(row: ReportRow, labels: Sequence[str] = ()) -> List[str]:
    """Row values as strings; absent scores are blanks, never zeros."""
    cells = [row.run, row.experiment, "" if row.seed is None else str(row.seed),
             row.architecture, row.regime, row.direction]
    for metric in ("bleu", "chrf", "ter"):
        text = _cell(getattr(row, metric), _metric_digits(metric))
        if metric in row.spread:
            low, high = row.spread[metric]
            text += f" [{low:.{_metric_digits(metric)}f}, {high:.{_metric_digits(metric)}f}]"
        cells.append(text)
    cells.append(row.status)
    for label in labels:
        bucket = row.buckets.get(label, {})
        cells.extend(_cell(bucket.get(m), _metric_digits(m)) for m in ("bleu", "chrf", "ter"))
    return cells


def table_header(labels: Sequence[str] = ()) -> List[str]:
    header = list(REPORT_COLUMNS)
    for label in labels:
        header.extend(f"{m}[{label}]" for m in ("bleu", "chrf", "ter"))
    return header


class ReportExporter:
    """Writes comparison tables as CSV and Markdown."""

    def __init__(self, output_dir: Union[str, Path] = "reports"):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def export(self, rows: Sequence[ReportRow], include_buckets: bool = False,
               filename_prefix: str = "report") -> Dict[str, str]:
        """
        Export rows to CSV and Markdown.

        Args:
            rows: Table rows in display order
            include_buckets: Add per-length-bucket columns
            filename_prefix: Prefix for output filenames

        Returns:
            Dict mapping format names to file paths
        """
        labels = bucket_labels(rows) if include_buckets else []
        header = table_header(labels)
        body = [table_cells(row, labels) for row in rows]

        csv_path = self.output_dir / f"{filename_prefix}.csv"
        with open(csv_path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(body)

        md_path = self.output_dir / f"{filename_prefix}.md"
        md_content = [
            "# Translation Results",
            f"\n**Generated:** {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            f"**Rows:** {len(rows)}\n",
            "| " + " | ".join(header) + " |",
            "|" + "|".join("---" for _ in header) + "|",
        ]
        md_content.extend("| " + " | ".join(cells) + " |" for cells in body)
        with open(md_path, 'w', encoding='utf-8') as f:
            f.write('\n'.join(md_content) + '\n')

        return {"csv": str(csv_path), "markdown": str(md_path)}
