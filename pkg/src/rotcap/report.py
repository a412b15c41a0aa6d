"""Model-comparison report rendering.

``render_report`` writes four files per run: the delimited ``report.csv``
(schema: model,pretext_acc,probe_acc,loss,perplexity,bleu1..bleu4), an
aligned plain-text table, a matplotlib comparison figure, and the
sample-captions sidecar that puts references and generated captions side
by side.  Output bytes are a pure function of the report list.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import DataError
from .evaluation import CaptionSample, MetricsReport

REPORT_COLUMNS = ("model", "pretext_acc", "probe_acc", "loss", "perplexity",
                  "bleu1", "bleu2", "bleu3", "bleu4")


def _cell(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _row(r: MetricsReport) -> list[str]:
    return [r.model_name, _cell(r.pretext_accuracy), _cell(r.probe_accuracy),
            _cell(r.caption_loss), _cell(r.perplexity),
            _cell(r.bleu1), _cell(r.bleu2), _cell(r.bleu3), _cell(r.bleu4)]


def write_report_csv(reports: list[MetricsReport], path: str | Path) -> None:
    lines = [",".join(REPORT_COLUMNS)]
    lines += [",".join(_row(r)) for r in reports]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report_csv(path: str | Path) -> list[MetricsReport]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report csv not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ",".join(REPORT_COLUMNS):
        raise DataError(f"{path}: unexpected report header")
    reports = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(REPORT_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} columns")
        opt = lambda s: None if s == "" else float(s)
        reports.append(MetricsReport(
            model_name=cells[0], pretext_accuracy=opt(cells[1]), probe_accuracy=opt(cells[2]),
            caption_loss=float(cells[3]), perplexity=float(cells[4]),
            bleu1=float(cells[5]), bleu2=float(cells[6]), bleu3=float(cells[7]),
            bleu4=float(cells[8])))
    return reports


def write_report_table(reports: list[MetricsReport], path: str | Path) -> None:
    rows = [list(REPORT_COLUMNS)] + [_row(r) for r in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for k, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(widths))))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_samples(reports: list[MetricsReport], path: str | Path) -> None:
    lines = []
    for r in reports:
        lines.append(f"model: {r.model_name}")
        for s in r.samples:
            lines.append(f"image: {s.image_id}")
            lines.append(f"  reference: {s.reference}")
            lines.append(f"  generated: {s.generated}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def read_samples(path: str | Path) -> dict[str, list[CaptionSample]]:
    """Parse a samples sidecar back into per-model sample lists."""
    path = Path(path)
    out: dict[str, list[CaptionSample]] = {}
    current: list[CaptionSample] | None = None
    image_id = reference = None
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("model: "):
            current = out.setdefault(line[len("model: "):], [])
        elif line.startswith("image: "):
            image_id = line[len("image: "):]
        elif line.startswith("  reference: "):
            reference = line[len("  reference: "):]
        elif line.startswith("  generated: ") and current is not None:
            current.append(CaptionSample(image_id=image_id or "?",
                                         reference=reference or "",
                                         generated=line[len("  generated: "):]))
    return out


def write_report_figure(reports: list[MetricsReport], path: str | Path) -> None:
    names = [r.model_name for r in reports]
    x = range(len(names))
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))

    axes[0, 0].bar(x, [r.caption_loss for r in reports], color="#4878cf")
    axes[0, 0].set_title("caption loss")
    axes[0, 1].bar(x, [r.perplexity for r in reports], color="#6acc65")
    axes[0, 1].set_title("perplexity")

    width = 0.2
    for j, key in enumerate(("bleu1", "bleu2", "bleu3", "bleu4")):
        vals = [getattr(r, key) for r in reports]
        axes[1, 0].bar([i + (j - 1.5) * width for i in x], vals, width=width, label=key)
    axes[1, 0].set_title("corpus BLEU")
    axes[1, 0].set_ylim(0, 1.05)
    axes[1, 0].legend(fontsize=8)

    for j, (key, label) in enumerate((("pretext_accuracy", "pretext"),
                                      ("probe_accuracy", "probe"))):
        vals = [getattr(r, key) if getattr(r, key) is not None else 0.0 for r in reports]
        axes[1, 1].bar([i + (j - 0.5) * 0.35 for i in x], vals, width=0.35, label=label)
    axes[1, 1].set_title("accuracies")
    axes[1, 1].set_ylim(0, 1.05)
    axes[1, 1].legend(fontsize=8)

    for ax in axes.flat:
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": "rotcap"})
    plt.close(fig)


def render_report(reports: list[MetricsReport], out_dir: str | Path) -> dict[str, Path]:
    """Write the comparison table in all formats; rows sorted by model name."""
    if not reports:
        raise DataError("render_report needs at least one metrics report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(reports, key=lambda r: r.model_name)
    paths = {
        "csv": out_dir / "report.csv",
        "table": out_dir / "report.txt",
        "figure": out_dir / "report.png",
        "samples": out_dir / "samples.txt",
    }
    write_report_csv(ordered, paths["csv"])
    write_report_table(ordered, paths["table"])
    write_report_figure(ordered, paths["figure"])
    write_samples(ordered, paths["samples"])
    return paths
