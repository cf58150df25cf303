"""Results tables: rows are methods, cells are ``mean ± std`` over seeds in percent."""

from __future__ import annotations

import csv
import io
import json
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .evaluation import AP_FIELDS
from .train import STRATEGIES

METHOD_NAMES = {
    "zs": "Zero-Shot (ZS)",
    "hft": "Head Finetuning (HFT)",
    "ft": "Full Finetuning (FT)",
    "vp-fixed": "Visual Prompt (Fixed)",
    "vp-random": "Visual Prompt (Random)",
    "vp-padding": "Visual Prompt (Padding)",
    "vp-wm": "Visual Prompt (WM)",
    "vp-wm2": "Visual Prompt (WM_v2)",
    "modprompt-mb": "ModPrompt (MB)",
    "modprompt-res": "ModPrompt (RES)",
}
# config entries allowed to differ between records of one table
_VARYING = (("strategy", "kind"), ("strategy", "with_task_residuals"), ("optim", "seed"))


class ReportError(ValueError):
    pass


@dataclass
class ExperimentRecord:
    config: dict
    code_version: str
    strategy: str  # label, e.g. "modprompt-mb+tr"
    seed: int
    modality: str
    ap_report: dict  # flat APReport on the target modality
    retention: dict
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ExperimentRecord:
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> ExperimentRecord:
        return cls.from_json(Path(path).read_text())


def code_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
            cwd=Path(__file__).parent, timeout=10,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return __version__


def mean_std(values) -> tuple[float, float]:
    """Sample mean and sample (n - 1) standard deviation; std is 0 for a single value."""
    values = [float(v) for v in values]
    if not values:
        raise ReportError("no values to aggregate")
    m = math.fsum(values) / len(values)
    if len(values) < 2:
        return m, 0.0
    var = math.fsum((v - m) ** 2 for v in values) / (len(values) - 1)
    return m, math.sqrt(var)


def format_cell(values) -> str:
    m, s = mean_std(values)
    return f"{100 * m:05.2f} ± {100 * s:.2f}"


def _config_key(cfg: dict) -> str:
    stripped = json.loads(json.dumps(cfg))
    for sec, key in _VARYING:
        stripped.get(sec, {}).pop(key, None)
    return json.dumps(stripped, sort_keys=True)


def _row_order(label: str):
    kind, _, tr = label.partition("+")
    return (STRATEGIES.index(kind) if kind in STRATEGIES else len(STRATEGIES), tr, label)


def method_name(label: str) -> str:
    kind, _, tr = label.partition("+")
    name = METHOD_NAMES.get(kind, kind)
    return name + (" + Task Residuals" if tr else "")


def group_records(records) -> dict[str, list[ExperimentRecord]]:
    records = list(records)
    if not records:
        raise ReportError("no records")
    keys = {_config_key(r.config) for r in records}
    if len(keys) > 1:
        raise ReportError(f"records come from {len(keys)} different configs; refusing to mix them")
    modalities = {r.modality for r in records}
    if len(modalities) > 1:
        raise ReportError(f"records span modalities {sorted(modalities)}")
    groups: dict[str, list[ExperimentRecord]] = {}
    for r in sorted(records, key=lambda r: (_row_order(r.strategy), r.seed)):
        groups.setdefault(r.strategy, []).append(r)
    return groups


def emit_report(records) -> tuple[str, str]:
    """Markdown tables and a full-precision CSV mirror, both deterministic in the records."""
    groups = group_records(records)
    modality = next(iter(groups.values()))[0].modality

    lines = [
        f"## Target modality: {modality}",
        "",
        "| Method | Seeds | AP50 | AP75 | AP |",
        "|---|---|---|---|---|",
    ]
    for label, recs in groups.items():
        cells = [format_cell([r.ap_report[f] for r in recs]) for f in AP_FIELDS]
        lines.append(f"| {method_name(label)} | {len(recs)} | " + " | ".join(cells) + " |")
    lines += [
        "",
        "## Source modality (rgb) retention: adapted minus zero-shot",
        "",
        "| Method | ΔAP50 | ΔAP75 | ΔAP | Prompt off == ZS |",
        "|---|---|---|---|---|",
    ]
    for label, recs in groups.items():
        cells = [format_cell([r.retention["delta"][f] for r in recs]) for f in AP_FIELDS]
        off = [r.retention.get("disabled_matches_zeroshot") for r in recs]
        flag = "n/a" if any(o is None for o in off) else ("yes" if all(off) else "no")
        lines.append(f"| {method_name(label)} | " + " | ".join(cells) + f" | {flag} |")
    markdown = "\n".join(lines) + "\n"

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["strategy", "modality", "n_seeds", "seeds"]
    for f in AP_FIELDS:
        header += [f"{f}_mean", f"{f}_std"]
    for f in AP_FIELDS:
        header += [f"retention_delta_{f}_mean", f"retention_delta_{f}_std"]
    writer.writerow(header)
    for label, recs in groups.items():
        row = [label, modality, len(recs), " ".join(str(r.seed) for r in recs)]
        for f in AP_FIELDS:
            row += [repr(v) for v in mean_std([r.ap_report[f] for r in recs])]
        for f in AP_FIELDS:
            row += [repr(v) for v in mean_std([r.retention["delta"][f] for r in recs])]
        writer.writerow(row)
    return markdown, buf.getvalue()


def load_records(out_dir) -> list[ExperimentRecord]:
    return [ExperimentRecord.load(p) for p in sorted(Path(out_dir).glob("*/*/record.json"))]


def write_report(out_dir, records=None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    records = load_records(out_dir) if records is None else records
    markdown, table = emit_report(records)
    md, csv_path = out_dir / "report.md", out_dir / "report.csv"
    md.write_text(markdown)
    csv_path.write_text(table)
    return md, csv_path
