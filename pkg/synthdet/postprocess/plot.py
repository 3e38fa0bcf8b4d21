"""
The plot module which summarizes all the plotting functionality
"""
import logging
import os
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from ..evaluation.evaluator import RECALL_POINTS, EvalResult

plot_logger = logging.getLogger('synthdet.postprocess')

AXIS_SYMBOLS = {'p': '$p$',
                'tau_s': r'$\tau_s$',
                'tau_iou': r'$\tau_{iou}$',
                'tau_i': r'$\tau_i$',
                'tau_a': r'$\tau_a$',
                'copies': 'copies per image',
                'fraction': 'image fraction',
                'iterations': 'iterations'}
AP_COLUMNS = ['AP', 'AP_r', 'AP_c', 'AP_f']


class Plotter:
    """Render the figures of a finished run into <output_dir>/figures."""

    def __init__(self, model):
        self.source_class = model
        output_dir = Path(model.paths['output_dir'], 'figures')

        if model.eval_result is not None:
            plot_logger.info('Plot precision recall curves')
            plot_pr_curves(model.eval_result, output_dir=output_dir, title=model.config['info']['run_name'])

        if model.image_filter_report is not None and len(model.image_filter_report):
            plot_logger.info('Plot aesthetic score distribution')
            plot_score_histogram(model.image_filter_report, tau_a=model.config['image_filter']['tau_a'],
                                 output_dir=output_dir)

        if model.instance_filter_report is not None and len(model.instance_filter_report):
            plot_logger.info('Plot instance filter support')
            plot_instance_support(model.instance_filter_report, output_dir=output_dir)

        if model.train_state is not None and model.train_state.telemetry:
            plot_logger.info('Plot training losses')
            plot_training_losses(pd.DataFrame(model.train_state.telemetry), output_dir=output_dir)


def plot_pr_curves(result: EvalResult,
                   output_dir: Union[str, Path] = Path.cwd() / 'figures',
                   title: str = '',
                   fig_size=8,
                   plot_context='paper',
                   ) -> None:
    """
    Plot the interpolated precision recall curve at IoU 0.5 of every evaluated category.

    Parameters
    ----------
    result : EvalResult
        Result of the evaluator.
    output_dir : str or Path, optional
        The directory in which to save the figure. The default is './figures'.
    title : str, optional
        Figure title, usually the run name.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sns.set_context(plot_context)

    rows = []
    for cat in result.per_category.values():
        if cat.ap is None:
            continue
        label = f'{cat.name} ({cat.frequency_bucket})' if cat.frequency_bucket else cat.name
        rows.append(pd.DataFrame({'recall': RECALL_POINTS, 'precision': cat.precision50, 'category': label}))
    if not rows:
        plot_logger.warning('no category with ground truth, skip precision recall plot')
        return

    fig, ax = plt.subplots(figsize=(fig_size, fig_size))
    sns.lineplot(data=pd.concat(rows, ignore_index=True), x='recall', y='precision', hue='category',
                 drawstyle='steps-post', ax=ax)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    plt.title(f'{title} AP50={100 * result.ap50:.1f}'.strip())
    plt.tight_layout()
    fig.savefig(Path(output_dir, 'pr_curves.png'), dpi=300)
    plt.close()


def plot_sweep(summary: pd.DataFrame,
               axis: str,
               output_dir: Union[str, Path] = Path.cwd() / 'figures',
               fig_size=8,
               plot_context='paper',
               ) -> Path:
    """
    Plot AP and the bucket APs over the values of a sweep axis.

    Parameters
    ----------
    summary : pandas.DataFrame
        One row per run with a column named after the axis and the AP columns (x100).
    axis : str
        The swept parameter; the x label shows its symbol.

    Returns
    -------
    Path
        The written figure.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sns.set_context(plot_context)

    columns = [c for c in AP_COLUMNS if c in summary.columns and summary[c].notna().any()]
    melted = summary.melt(id_vars=[axis], value_vars=columns, var_name='metric', value_name='value')
    fig, ax = plt.subplots(figsize=(fig_size, fig_size * 0.75))
    sns.lineplot(data=melted, x=axis, y='value', hue='metric', marker='o', ax=ax)
    plt.xlabel(AXIS_SYMBOLS.get(axis, axis))
    plt.ylabel('AP')
    plt.tight_layout()
    path = Path(output_dir, f'sweep_{axis}.png')
    fig.savefig(path, dpi=300)
    plt.close()
    return path


def plot_score_histogram(report: pd.DataFrame,
                         tau_a: float,
                         output_dir: Union[str, Path] = Path.cwd() / 'figures',
                         fig_size=8,
                         plot_context='paper',
                         ) -> None:
    """Histogram of the aesthetic scores of the generated images with the threshold marked."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sns.set_context(plot_context)

    scored = report[np.isfinite(report['score'].astype(float))]
    fig, ax = plt.subplots(figsize=(fig_size, fig_size * 0.75))
    sns.histplot(data=scored, x='score', hue='kept', ax=ax)
    if np.isfinite(tau_a):
        ax.axvline(tau_a, color='k', linestyle='--')
    plt.xlabel('aesthetic score')
    plt.tight_layout()
    fig.savefig(Path(output_dir, 'aesthetic_scores.png'), dpi=300)
    plt.close()


def plot_instance_support(report: pd.DataFrame,
                          output_dir: Union[str, Path] = Path.cwd() / 'figures',
                          fig_size=8,
                          plot_context='paper',
                          ) -> None:
    """Best supporting score against best supporting IoU per annotation, colored by the decision."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sns.set_context(plot_context)

    data = report.assign(corruption=report['corruption'].fillna('clean'))
    fig, ax = plt.subplots(figsize=(fig_size, fig_size))
    sns.scatterplot(data=data, x='best_iou', y='best_score', hue='kept', style='corruption', ax=ax)
    ax.axvline(report['tau_iou'].iloc[0], color='k', linestyle='--')
    ax.axhline(report['tau_s'].iloc[0], color='k', linestyle='--')
    plt.tight_layout()
    fig.savefig(Path(output_dir, 'instance_support.png'), dpi=300)
    plt.close()


def plot_training_losses(telemetry: pd.DataFrame,
                         output_dir: Union[str, Path] = Path.cwd() / 'figures',
                         window: int = 25,
                         fig_size=8,
                         plot_context='paper',
                         ) -> None:
    """Rolling mean of the loss terms over the training steps."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sns.set_context(plot_context)

    terms = ['objectness_loss', 'classification_loss', 'box_regression_loss']
    smoothed = telemetry.set_index('step')[terms].rolling(window, min_periods=1).mean().reset_index()
    fig, ax = plt.subplots(figsize=(fig_size, fig_size * 0.75))
    sns.lineplot(data=smoothed.melt(id_vars='step', var_name='term', value_name='loss'),
                 x='step', y='loss', hue='term', ax=ax)
    plt.tight_layout()
    fig.savefig(Path(output_dir, 'training_losses.png'), dpi=300)
    plt.close()


def markdown_table(frame: pd.DataFrame, float_format: str = '{:.2f}') -> str:
    """Render a DataFrame as a github markdown table; missing values are shown as '-'."""
    def cell(value):
        if value is None or (isinstance(value, float) and np.isnan(value)):
            return '-'
        if isinstance(value, (float, np.floating)):
            return float_format.format(value)
        return str(value)

    # cells are preformatted, a config hash must not be parsed as a number
    return frame.applymap(cell).to_markdown(index=False, disable_numparse=True) + '\n'


def write_summary(summary: pd.DataFrame, output_dir: Union[str, Path], title: str = 'Summary',
                  figures: Optional[Sequence[Path]] = None, extra: Optional[Dict[str, str]] = None) -> Path:
    """Write summary.md with the AP table and links to the figures."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    lines = [f'# {title}', '', markdown_table(summary)]
    for key, value in (extra or {}).items():
        lines.append(f'- {key}: {value}')
    for figure in figures or []:
        lines += ['', f'![{Path(figure).stem}]({Path(os.path.relpath(figure, output_dir)).as_posix()})']
    path = Path(output_dir, 'summary.md')
    path.write_text('\n'.join(lines) + '\n')
    plot_logger.info(f'wrote {path}')
    return path
