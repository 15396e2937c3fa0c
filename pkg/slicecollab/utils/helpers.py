"""Helper functions and utilities."""

import logging
from typing import Any, Dict, List, Sequence, Tuple

from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table
from rich.theme import Theme

logger = logging.getLogger(__name__)

# Create a custom theme
custom_theme = Theme(
    {
        "info": "cyan",
        "warning": "yellow",
        "error": "bold red",
        "success": "bold green",
        "metric": "bold",
        "panel.border": "cyan",
    }
)

# Create a console with the custom theme
console = Console(theme=custom_theme)


def print_info(message: str) -> None:
    """Print an info message with styling."""
    console.print(f"[info]ℹ {message}[/info]")


def print_success(message: str) -> None:
    """Print a success message with styling."""
    console.print(f"[success]✓ {message}[/success]")


def print_warning(message: str) -> None:
    """Print a warning message with styling."""
    console.print(f"[warning]⚠ {message}[/warning]")


def print_error(message: str) -> None:
    """Print an error message with styling."""
    console.print(f"[error]✗ {message}[/error]")


def create_panel(title: str, content: str, style: str = "cyan") -> Panel:
    """Create a Rich panel with the given title and content."""
    return Panel(
        content,
        title=f"[bold {style}]{title}[/bold {style}]",
        border_style=style,
        expand=False,
    )


def display_summary(
    title: str, items: List[Tuple[str, Any]], style: str = "cyan"
) -> None:
    """Display a summary panel with key-value pairs."""
    content = "\n".join([f"[bold]{k}:[/bold] {v}" for k, v in items])
    panel = create_panel(title, content, style)
    console.print(panel)


def format_mean_sd(stats: Dict[str, Any], scale: float = 1.0) -> str:
    """``mean ± sd`` of a report summary entry, or ``n/a`` when undefined."""
    if stats.get("mean") is None:
        return "n/a"
    text = f"{stats['mean'] * scale:.2f} ± {(stats.get('sd') or 0.0) * scale:.2f}"
    if stats.get("undefined"):
        text += f" [warning]({stats['undefined']} undefined)[/warning]"
    return text


def metrics_table(reports: Sequence[Any], title: str = "Test metrics") -> Table:
    """
    Build a table with one row per method report.

    Overlap metrics are shown in percent, ASSD in millimeters.

    Args:
        reports: Objects with ``method``, ``per_case`` and ``summary``
        title: Table title
    """
    table = Table(title=title, header_style="bold cyan")
    table.add_column("Method")
    table.add_column("Cases", justify="right")
    table.add_column("B-IoU (%)", justify="right")
    table.add_column("DSC (%)", justify="right")
    table.add_column("ASSD (mm)", justify="right")
    table.add_column("RAVD (%)", justify="right")
    for report in reports:
        summary = report.summary
        table.add_row(
            report.method,
            str(len(report.per_case)),
            format_mean_sd(summary["b_iou"], 100.0),
            format_mean_sd(summary["dsc"], 100.0),
            format_mean_sd(summary["assd_mm"]),
            format_mean_sd(summary["ravd"], 100.0),
        )
    return table


def comparisons_table(comparisons: Sequence[Dict[str, Any]]) -> Table:
    """Paired t-test results; significant rows (p < 0.05) are highlighted."""
    table = Table(title="Paired t-tests", header_style="bold cyan")
    for column in ("Method A", "Method B", "Metric", "n"):
        table.add_column(column)
    table.add_column("t", justify="right")
    table.add_column("p", justify="right")
    for row in comparisons:
        if not row.get("defined"):
            t_text, p_text = "n/a", "[warning]undefined[/warning]"
        else:
            t_text = f"{row['t']:.4f}"
            p_text = f"{row['p_value']:.4g}"
            if row["p_value"] < 0.05:
                p_text = f"[success]{p_text}[/success]"
        table.add_row(
            row["method_a"],
            row["method_b"],
            row["metric"],
            str(row["n"]),
            t_text,
            p_text,
        )
    return table


class EpochProgress:
    """Live per-stage training status; usable as a training callback.

    Each distinct label gets its own spinner line showing the latest epoch
    record.
    """

    def __init__(self, enabled: bool = True):
        self._progress = Progress(
            SpinnerColumn(),
            TextColumn("[info]{task.description}[/info]"),
            TextColumn("{task.fields[status]}"),
            TimeElapsedColumn(),
            console=console,
            transient=True,
            disable=not enabled,
        )
        self._tasks: Dict[str, Any] = {}

    def __enter__(self) -> "EpochProgress":
        self._progress.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self._progress.stop()

    def __call__(self, label: str, record: Dict[str, float]) -> None:
        task = self._tasks.get(label)
        if task is None:
            task = self._progress.add_task(label, total=None, status="")
            self._tasks[label] = task
        values = " ".join(
            f"{key}={value:.4g}" for key, value in record.items() if key != "epoch"
        )
        self._progress.update(task, status=f"epoch {record.get('epoch')} {values}")

    def for_stage(self, label: str):
        """A single-argument callback bound to one label."""
        return lambda record: self(label, record)

