"""Report serialization: atomic writes, stable field order, 9-digit floats.

Floats are rounded to 9 significant digits before emission, which makes
emit -> parse -> emit a fixed point (re-emitting a parsed report reproduces
it byte for byte).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .apcc import ApccReport, ClassResult, ImpactEvent
from .errors import IoError, ValidationError


def round9(x: float) -> float:
    return float(f"{float(x):.9g}")


def _rounded(obj):
    if isinstance(obj, float):
        return round9(obj)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def write_text_atomic(path: str | Path, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_json_atomic(path: str | Path, payload) -> None:
    write_text_atomic(path, json.dumps(_rounded(payload), indent=2) + "\n")


def write_csv_atomic(path: str | Path, header: list[str], rows: list[list]) -> None:
    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.9g}"
        return str(v)

    lines = [",".join(header)]
    lines.extend(",".join(cell(v) for v in row) for row in rows)
    write_text_atomic(path, "\n".join(lines) + "\n")


def report_to_payload(report: ApccReport) -> dict:
    return {
        "kind": "apcc_report",
        "flavor": report.flavor,
        "aggregation": report.aggregation,
        "apcc_delta": report.apcc_delta,
        "classes": [
            {
                "class_label": c.class_label,
                "rho_gt": c.rho_gt,
                "rho_gen": c.rho_gen,
                "abs_delta": c.abs_delta,
                "event_count": c.event_count,
            }
            for c in report.classes
        ],
        "excluded_classes": report.excluded_classes,
        "excluded_events": report.excluded_events,
        "events": [
            {
                "video_id": e.video_id,
                "class_label": e.class_label,
                "impact_time": e.impact_time,
                "object_id": e.object_id,
                "v_pre": e.v_pre,
                "v_post": e.v_post,
                "mass": e.mass,
                "delta_ke": e.delta_ke,
                "onset_strength_gt": e.onset_strength_gt,
                "onset_strength_gen": e.onset_strength_gen,
            }
            for e in report.events
        ],
    }


def report_from_payload(payload: dict) -> ApccReport:
    if payload.get("kind") != "apcc_report":
        raise ValidationError("report: missing kind 'apcc_report'")
    return ApccReport(
        classes=[ClassResult(**c) for c in payload["classes"]],
        apcc_delta=payload["apcc_delta"],
        excluded_classes=payload.get("excluded_classes", []),
        excluded_events=payload.get("excluded_events", []),
        events=[ImpactEvent(**e) for e in payload.get("events", [])],
        flavor=payload.get("flavor", "pearson"),
        aggregation=payload.get("aggregation", "unweighted"),
    )


EVENT_CSV_HEADER = [
    "video_id", "class_label", "impact_time", "object_id", "v_pre", "v_post",
    "mass", "delta_ke", "onset_strength_gt", "onset_strength_gen",
]


def emit_report(report: ApccReport, json_path=None, csv_path=None) -> None:
    """Write the JSON report and/or the flat per-event CSV table."""
    if json_path is not None:
        write_json_atomic(json_path, report_to_payload(report))
    if csv_path is not None:
        rows = [
            [e.video_id, e.class_label, e.impact_time, e.object_id, e.v_pre,
             e.v_post, e.mass, e.delta_ke, e.onset_strength_gt, e.onset_strength_gen]
            for e in report.events
        ]
        write_csv_atomic(csv_path, EVENT_CSV_HEADER, rows)


def emit_loss_curve(losses: list[float], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        write_json_atomic(json_path, {"kind": "loss_curve", "losses": list(losses)})
    if csv_path is not None:
        write_csv_atomic(csv_path, ["step", "loss"],
                         [[i, float(v)] for i, v in enumerate(losses)])


def parse_report(path: str | Path):
    """Load either report kind; returns ('apcc_report', ApccReport) or
    ('loss_curve', list[float])."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = payload.get("kind")
    if kind == "apcc_report":
        return kind, report_from_payload(payload)
    if kind == "loss_curve":
        return kind, [float(v) for v in payload["losses"]]
    raise ValidationError(f"report: unknown kind '{kind}'")
