"""
This is the central Module which is a class from which the different stages are called
"""
import copy
from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import logging
from pathlib import Path
import sys
import time
from typing import Any, Dict, List, Optional, Sequence, Union

import click
import pandas as pd
import yaml

from .dataset.dataset_io import (Dataset, assign_frequency_buckets, copy_buckets, load_dataset, save_dataset,
                                 subsample, with_absolute_paths)
from .dataset.detections import read_detections, write_detections
from .dataset.toy_corpus import make_glyph_corpus
from .evaluation.evaluator import EvalResult, evaluate, load_eval, save_eval
from .filtering.detector_filter import DetectorFilterConfig, removal_rates, run_filter, train_filter_detector
from .filtering.image_filter import (ImageFilterConfig, filter_by_score, read_report, score_images,
                                     scorer_from_config, write_report)
from .generation.generation_client import (InpaintingServiceClient, MockGenConfig, MockGenerator,
                                           generate_synthetic_dataset)
from .postprocess.plot import Plotter, markdown_table, plot_sweep, write_summary
from .training.toy_detector import (TrainingConfig, load_state, predict_dataset, save_state, train,
                                    write_telemetry)

logger = logging.getLogger('synthdet')
logger.setLevel(logging.INFO)
formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(name)s - %(message)s')

DEFAULT_ROOT = Path(__file__).parents[1]
STAMP_FILE = 'artifacts.json'

STAGES = ('prepare_data', 'generate', 'filter_images', 'filter_instances', 'train', 'evaluate')

SWEEP_AXES = {'p': ('training', 'sampler', 'p'),
              'tau_s': ('detector_filter', 'tau_s'),
              'tau_iou': ('detector_filter', 'tau_iou'),
              'tau_i': ('training', 'tau_i'),
              'tau_a': ('image_filter', 'tau_a'),
              'copies': ('generation', 'copies'),
              'fraction': ('data', 'fraction'),
              'iterations': ('training', 'iterations')}


class StageError(RuntimeError):
    """A pipeline stage failed; the cause is chained."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f'stage {stage} failed: {cause}')


def run_directory(conf: dict, root: Optional[Path] = None) -> Path:
    """<root>/<output_directory>/<run_name>, root defaults to the repository root."""
    root = Path(root) if root is not None else DEFAULT_ROOT
    return Path(root, conf['output']['output_directory'], conf['info']['run_name'])


def config_hash(conf: dict) -> str:
    """First 12 hex characters of the sha256 of the canonical json of the config without its output section."""
    relevant = {k: v for k, v in conf.items() if k != 'output'}
    canonical = json.dumps(relevant, sort_keys=True, default=str, separators=(',', ':'))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def set_config_value(conf: dict, dotted_key: str, value: Any) -> dict:
    """Set a value in the config tree addressed by a dotted key, creating missing sections."""
    keys = dotted_key.split('.')
    node = conf
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ValueError(f'{dotted_key}: {key} is not a config section')
    node[keys[-1]] = value
    return conf


def resolve_stages(conf: dict) -> Dict[str, Any]:
    """
    Translate the stage switches into the effective settings of a run.

    p = 0, copies = 0 or use_synthetic = false train on real data only; use_real = false
    trains on synthetic data only (p = 1). Without batch sampling the natural share of
    synthetic images is used as p once the synthetic set is known (p = None here). The
    LD-COCO protocol switches off both filters and background ignore.
    """
    stages = conf.get('stages', {})
    copies = int(conf['generation'].get('copies', 2))
    p = float(conf['training'].get('sampler', {}).get('p', 0.2))
    use_real = stages.get('use_real', True)
    use_synthetic = stages.get('use_synthetic', True) and copies > 0
    if not use_real and not use_synthetic:
        raise ValueError('a run needs real or synthetic training data')
    if use_synthetic and use_real and stages.get('use_sampling', True) and p == 0:
        use_synthetic = False
    if not use_synthetic:
        p = 0.0
    elif not use_real:
        p = 1.0
    elif not stages.get('use_sampling', True):
        p = None
    ld_coco = stages.get('ld_coco', False)
    return {'use_real': use_real,
            'use_synthetic': use_synthetic,
            'p': p,
            'use_image_filter': use_synthetic and stages.get('use_image_filter', True) and not ld_coco,
            'use_detector_filter': use_synthetic and stages.get('use_detector_filter', True) and not ld_coco,
            'use_bg_ignore': stages.get('use_bg_ignore', True) and not ld_coco,
            'ld_coco': ld_coco}


@dataclass
class RunReport:
    run_name: str
    config_hash: str
    wall_time: float
    parameters: Dict[str, Any]
    stages: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    eval: Optional[Dict[str, Any]] = None

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w') as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True, default=str)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'RunReport':
        with open(path) as f:
            return cls(**json.load(f))

    @property
    def eval_result(self) -> Optional[EvalResult]:
        return EvalResult.from_dict(self.eval) if self.eval is not None else None


class Model:
    def __init__(self, conf: dict, output: bool = True, root: Optional[Path] = None):
        """Initialization method for a new Model instance. Reads the configuration, builds the working
        directory and resolves the stage switches.

        Args:
            conf: Dictionary that contains the configurations from synthdet.yml
            output: If False no plots are rendered
            root: Directory relative config paths are resolved against, the repository root by default
        """
        self.config = conf
        self.paths: dict = {'root': Path(root) if root is not None else DEFAULT_ROOT}
        self.output = output
        if not self.output:
            logger.info(f'Set output to {self.output} results in no plotting')
            self.config['output']['plot_results'] = False
        self.config_hash = config_hash(conf)
        self.settings = resolve_stages(conf)
        self.resume = bool(conf['output'].get('resume', False))
        self.seed = int(conf.get('seed', 0))

        self.real_train: Optional[Dataset] = None
        self.test: Optional[Dataset] = None
        self.synthetic: Optional[Dataset] = None
        self.image_filter_report: Optional[pd.DataFrame] = None
        self.instance_filter_report: Optional[pd.DataFrame] = None
        self.filter_state = None
        self.train_state = None
        self.eval_result: Optional[EvalResult] = None
        self.stage_reports: Dict[str, Dict[str, Any]] = {}

        self._build_wd()

    @staticmethod
    def read_config(config_file_path: Path) -> dict:
        """Creates a dictionary out of a YAML file."""
        with open(config_file_path) as c:
            conf = yaml.safe_load(c)
        return conf

    def _build_wd(self):
        """Builds the working directory and attaches the log file of the run."""
        self.paths['output_dir'] = run_directory(self.config, self.paths['root'])
        self.paths['output_dir'].mkdir(parents=True, exist_ok=True)
        for handler in [h for h in logger.handlers if isinstance(h, logging.FileHandler)]:
            logger.removeHandler(handler)
            handler.close()
        fh = logging.FileHandler(Path(self.paths['output_dir'], 'synthdet.log'), mode='w')
        fh.setFormatter(formatter)
        logger.addHandler(fh)
        logger.info(f'run {self.config["info"]["run_name"]} with config hash {self.config_hash}')
        for key, value in self.settings.items():
            logger.info(f'stage setting {key} = {value}')

    def _path(self, name: str) -> Path:
        return Path(self.paths['output_dir'], name)

    def _read_stamps(self) -> Dict[str, str]:
        path = self._path(STAMP_FILE)
        if not path.exists():
            return {}
        with open(path) as f:
            return json.load(f)

    def _stamp(self, *names: str):
        """Record that the artifacts were written under the current config hash."""
        stamps = self._read_stamps()
        stamps.update({n: self.config_hash for n in names})
        with open(self._path(STAMP_FILE), 'w') as f:
            json.dump(stamps, f, indent=1, sort_keys=True)

    def _resumable(self, *names: str) -> bool:
        """True if resuming and every artifact exists and was written under the current config hash."""
        if not self.resume:
            return False
        stamps = self._read_stamps()
        stale = [n for n in names if not self._path(n).exists() or stamps.get(n) != self.config_hash]
        if stale and any(self._path(n).exists() for n in stale):
            logger.info(f"recompute {', '.join(stale)}: written under another config")
        return not stale

    def _training_config(self, p: float, background_ignore: bool) -> TrainingConfig:
        return TrainingConfig.from_config(self.config['training'], seed=self.seed,
                                          background_ignore=background_ignore, p=p)

    # %% the stages
    def prepare_data(self):
        """Load (or render) the real corpus, subsample it and assign the frequency buckets."""
        data_conf = self.config['data']
        train_path = Path(self.paths['root'], data_conf['train_path'])
        test_path = Path(self.paths['root'], data_conf['test_path'])
        corpus_conf = data_conf.get('toy_corpus', {})
        if not (train_path.exists() and test_path.exists()) and corpus_conf.get('build', False):
            self._build_corpus(corpus_conf)

        real = load_dataset(train_path)
        fraction = float(data_conf.get('fraction', 1.0))
        if fraction < 1.0 or self.settings['ld_coco']:
            real = subsample(real, fraction, self.seed)
        buckets = data_conf.get('frequency_buckets', {})
        self.real_train = with_absolute_paths(
            assign_frequency_buckets(real, buckets.get('rare_max', 10), buckets.get('common_max', 100)))
        self.test = copy_buckets(load_dataset(test_path), self.real_train)
        save_dataset(self.real_train, self._path('real_train.json'))

        self.stage_reports['prepare_data'] = {
            'real_images': len(self.real_train.images), 'real_annotations': len(self.real_train.annotations),
            'test_images': len(self.test.images),
            'buckets': {c.name: c.frequency_bucket for c in self.real_train.categories}}

    def _build_corpus(self, corpus_conf: dict):
        directory = Path(self.paths['root'], corpus_conf.get('directory', 'output/corpus'))
        logger.info(f'render glyph corpus into {directory}')
        train_counts = corpus_conf['train_counts']
        names = list(train_counts)
        common = dict(image_size=int(corpus_conf.get('image_size', 64)),
                      max_glyphs_per_image=int(corpus_conf.get('max_glyphs_per_image', 3)),
                      category_names=names)
        seed = int(corpus_conf.get('seed', 0))
        make_glyph_corpus(directory, train_counts, int(corpus_conf.get('train_images', 200)), name='train',
                          seed=seed, **common)
        make_glyph_corpus(directory, corpus_conf.get('test_counts', {n: 20 for n in names}),
                          int(corpus_conf.get('test_images', 60)), name='test', seed=seed + 1, **common)

    def generate(self):
        """Inpaint the layouts of the real images with new instances."""
        if not self.settings['use_synthetic']:
            logger.info('no synthetic data used in this run, skip generation')
            return
        path = self._path('synthetic_raw.json')
        if self._resumable(path.name):
            self.synthetic = load_dataset(path)
        else:
            gen_conf = self.config['generation']
            if gen_conf.get('backend', 'mock') == 'mock':
                names = [c.name for c in sorted(self.real_train.categories, key=lambda c: c.id)]
                backend = MockGenerator(MockGenConfig.from_config(gen_conf.get('mock', {}), category_names=names))
            elif gen_conf['backend'] == 'service':
                backend = InpaintingServiceClient.from_config(gen_conf['service'])
            else:
                raise ValueError(f'unknown generation backend {gen_conf["backend"]!r}')
            self.synthetic = generate_synthetic_dataset(self.real_train, int(gen_conf['copies']), self.seed,
                                                        backend, self.paths['output_dir'],
                                                        article=gen_conf.get('prompts', {}).get('article', 'a'))
            save_dataset(self.synthetic, path)
            self._stamp(path.name)
        self.stage_reports['generate'] = {'synthetic_images': len(self.synthetic.images),
                                          'synthetic_annotations': len(self.synthetic.annotations)}

    def filter_images(self):
        """Discard generated images with an aesthetic score below tau_a."""
        if self.synthetic is None or not self.settings['use_image_filter']:
            logger.info('image filter disabled')
            return
        path = self._path('synthetic_image_filtered.json')
        report_path = self._path('image_filter_report.jsonl')
        conf = self.config['image_filter']
        if self._resumable(path.name, report_path.name):
            self.synthetic = load_dataset(path)
            self.image_filter_report = read_report(report_path)
        else:
            scored = score_images(self.synthetic, scorer_from_config(conf))
            self.synthetic, report = filter_by_score(scored, ImageFilterConfig.from_config(conf))
            self.image_filter_report = report.decisions
            save_dataset(self.synthetic, path)
            write_report(self.image_filter_report, report_path)
            self._stamp(path.name, report_path.name)
        self.stage_reports['filter_images'] = {
            'tau_a': conf.get('tau_a', 4.5),
            'kept_images': int(self.image_filter_report['kept'].sum()),
            'discarded_images': int((~self.image_filter_report['kept'].astype(bool)).sum())}

    def filter_instances(self):
        """Flag generated annotations not supported by the real-only filter detector."""
        if self.synthetic is None or not self.settings['use_detector_filter']:
            logger.info('detector filter disabled')
            return
        conf = self.config['detector_filter']
        cfg = DetectorFilterConfig.from_config(conf)
        path = self._path('synthetic_filtered.json')
        report_path = self._path('instance_filter_report.jsonl')
        predictions_path = self._path('filter_predictions.jsonl')
        state_path = self._path('filter_detector.json')

        if self._resumable(path.name, report_path.name):
            self.synthetic = load_dataset(path)
            self.instance_filter_report = read_report(report_path)
        else:
            if self._resumable(state_path.name):
                self.filter_state = load_state(state_path)
            else:
                self.filter_state = train_filter_detector(self.real_train, self._training_config(0.0, False),
                                                          config_hash=self.config_hash)
                save_state(self.filter_state, state_path)
                self._stamp(state_path.name)
            if self._resumable(predictions_path.name):
                predictions = read_detections(predictions_path)
            else:
                eval_conf = self.config['evaluation']
                predictions = predict_dataset(self.filter_state, self.synthetic,
                                              nms_iou=float(eval_conf.get('nms_iou', 0.5)),
                                              score_floor=float(conf.get('score_floor', 0.01)),
                                              max_detections=int(eval_conf.get('max_detections', 100)))
                write_detections(predictions, predictions_path)
                self._stamp(predictions_path.name)
            self.synthetic, self.instance_filter_report = run_filter(self.synthetic, self.filter_state, cfg,
                                                                     predictions=predictions)
            save_dataset(self.synthetic, path)
            write_report(self.instance_filter_report, report_path)
            self._stamp(path.name, report_path.name)

        report = self.instance_filter_report
        summary = {'tau_s': cfg.tau_s, 'tau_iou': cfg.tau_iou,
                   'kept_annotations': int(report['kept'].sum()) if len(report) else 0,
                   'removed_annotations': int((~report['kept'].astype(bool)).sum()) if len(report) else 0}
        if len(report) and report['corruption'].notna().any():
            summary.update(removal_rates(report))
        self.stage_reports['filter_instances'] = summary

    def train(self):
        """Train the detector on the real and the (filtered) synthetic batches."""
        p = self.settings['p']
        synth = self.synthetic if self.settings['use_synthetic'] else None
        real = self.real_train if self.settings['use_real'] else None
        if synth is not None and not synth.images:
            if real is None:
                raise ValueError('every generated image was filtered out and no real data is used')
            logger.warning('every generated image was filtered out, train on real data only')
            synth, p = None, 0.0
        if p is None:
            n_real, n_synth = len(real.images), len(synth.images)
            p = n_synth / (n_real + n_synth)
            logger.info(f'batch sampling disabled, natural synthetic share p={p:.3f}')
        cfg = self._training_config(p, self.settings['use_bg_ignore'])
        state_path = self._path('detector.json')
        if self._resumable(state_path.name):
            self.train_state = load_state(state_path)
        else:
            self.train_state = train(real, synth, cfg, config_hash=self.config_hash)
            save_state(self.train_state, state_path)
            write_telemetry(self.train_state, self._path('telemetry.jsonl'))
            self._stamp(state_path.name)
        telemetry = pd.DataFrame(self.train_state.telemetry)
        self.stage_reports['train'] = {
            'p': p, 'iterations': cfg.iterations, 'tau_i': cfg.tau_i,
            'background_ignore': cfg.background_ignore,
            'synthetic_batches': int((telemetry['source'] == 'synthetic').sum()) if len(telemetry) else 0,
            'ignored_anchors': int(telemetry['ignored_anchor_count'].sum()) if len(telemetry) else 0}

    def evaluate(self):
        """Evaluate the trained detector on the real test split."""
        eval_path = self._path('eval.json')
        if self._resumable(eval_path.name):
            self.eval_result = load_eval(eval_path)
        else:
            conf = self.config['evaluation']
            detections = predict_dataset(self.train_state, self.test, nms_iou=float(conf.get('nms_iou', 0.5)),
                                         score_floor=float(conf.get('score_floor', 0.05)),
                                         max_detections=int(conf.get('max_detections', 100)))
            write_detections(detections, self._path('test_predictions.jsonl'))
            self.eval_result = evaluate(detections, self.test, max_detections=int(conf.get('max_detections', 100)))
            save_eval(self.eval_result, eval_path)
            self._stamp(eval_path.name)
        row = self.eval_result.summary_row()
        logger.info('evaluation ' + ', '.join(f'{k}={v:.2f}' for k, v in row.items() if v is not None))
        self.stage_reports['evaluate'] = row

    def run_stage(self, stage: str):
        logger.info(f'start stage {stage}')
        try:
            getattr(self, stage)()
        except Exception as e:
            logger.exception(f'stage {stage} failed')
            raise StageError(stage, e) from e
        logger.info(f'finished stage {stage}')

    def parameters(self) -> Dict[str, Any]:
        conf = self.config
        return {'p': self.settings['p'] if self.settings['p'] is not None else
                self.stage_reports.get('train', {}).get('p'),
                'tau_s': conf['detector_filter'].get('tau_s'),
                'tau_iou': conf['detector_filter'].get('tau_iou'),
                'tau_i': conf['training'].get('tau_i'),
                'tau_a': conf['image_filter'].get('tau_a'),
                'copies': conf['generation'].get('copies'),
                'fraction': conf['data'].get('fraction', 1.0),
                'iterations': conf['training'].get('iterations'),
                'seed': self.seed}


def run_pipeline(conf: dict, output: bool = True, until: str = 'evaluate', root: Optional[Path] = None,
                 ) -> RunReport:
    """
    Run the stages in their fixed order up to and including `until`.

    Every intermediate dataset and report is written to the run directory; with
    output.resume the artifacts of finished stages are reused.

    Raises
    ------
    StageError
        Naming the failed stage, with the original exception chained.
    """
    if until not in STAGES:
        raise ValueError(f'unknown stage {until!r}, choose one of {STAGES}')
    start = time.time()
    model = Model(conf, output=output, root=root)
    for stage in STAGES[:STAGES.index(until) + 1]:
        model.run_stage(stage)

    if until == 'evaluate' and model.config['output'].get('plot_results', False):
        Plotter(model)

    report = RunReport(run_name=conf['info']['run_name'], config_hash=model.config_hash,
                       wall_time=round(time.time() - start, 3), parameters=model.parameters(),
                       stages=model.stage_reports,
                       eval=model.eval_result.to_dict() if model.eval_result is not None else None)
    report.save(Path(model.paths['output_dir'], 'run_report.json'))
    logger.info(f'run finished in {report.wall_time:.1f} s')
    return report


def _format_value(value) -> str:
    return f'{value:g}' if isinstance(value, float) else str(value)


def sweep(conf: dict, axis: str, values: Sequence, output: bool = True, root: Optional[Path] = None,
          ) -> List[RunReport]:
    """
    One full run per value of a sweep axis, everything else (seeds included) shared.

    Runs are written to <run_name>/<axis>_<value> below the output directory.

    Raises
    ------
    ValueError
        If the axis is unknown.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f'unknown sweep axis {axis!r}, choose one of {sorted(SWEEP_AXES)}')
    base_name = conf['info']['run_name']
    reports = []
    for value in values:
        run_conf = copy.deepcopy(conf)
        node = run_conf
        for key in SWEEP_AXES[axis][:-1]:
            node = node.setdefault(key, {})
        node[SWEEP_AXES[axis][-1]] = value
        run_conf['info']['run_name'] = f'{base_name}/{axis}_{_format_value(value)}'
        logger.info(f'sweep {axis}={value}')
        reports.append(run_pipeline(run_conf, output=output, root=root))
    return reports


def summary_frame(reports: Sequence[RunReport], axis: Optional[str] = None) -> pd.DataFrame:
    rows = []
    for report in reports:
        row = {'run': report.run_name, 'config_hash': report.config_hash}
        if axis is not None:
            row[axis] = report.parameters.get(axis)
        if report.eval is not None:
            row.update(report.eval_result.summary_row())
        rows.append(row)
    return pd.DataFrame(rows)


def report(reports: Sequence[RunReport], output_dir: Union[str, Path], axis: Optional[str] = None) -> Path:
    """
    Render summary.md (one row per run) and, for a sweep, the AP curves over the swept value.

    Raises
    ------
    ValueError
        If no report is given.
    """
    if not reports:
        raise ValueError('report needs at least one run report')
    output_dir = Path(output_dir)
    summary = summary_frame(reports, axis)
    figures = []
    if axis is not None:
        summary = summary.sort_values(axis, kind='stable').reset_index(drop=True)
        if len(reports) > 1:
            figures.append(plot_sweep(summary, axis, output_dir=Path(output_dir, 'figures')))
    title = f'Sweep over {axis}' if axis else 'Run summary'
    return write_summary(summary, output_dir, title=title, figures=figures)


# %% command line interface
def _load_config(config_file: Optional[Path], overrides: Sequence[str], output_dir: Optional[str],
                 seed: Optional[int]) -> dict:
    if config_file is None:
        config_file = Path(DEFAULT_ROOT, 'synthdet.yml')
    conf = Model.read_config(config_file)
    for item in overrides:
        if '=' not in item:
            raise click.BadParameter(f'expected key=value, got {item!r}', param_hint='--set')
        key, value = item.split('=', 1)
        set_config_value(conf, key, yaml.safe_load(value))
    if output_dir is not None:
        conf['output']['output_directory'] = output_dir
    if seed is not None:
        conf['seed'] = seed
    return conf


def _attach_console():
    if not any(type(h) is logging.StreamHandler for h in logger.handlers):
        sh = logging.StreamHandler(sys.stderr)
        sh.setFormatter(formatter)
        logger.addHandler(sh)


def _run_cli(conf: dict, until: str):
    try:
        result = run_pipeline(conf, until=until)
    except StageError as e:
        raise click.ClickException(f'stage {e.stage} failed: {e.__cause__}') from e
    if result.eval is not None:
        click.echo(markdown_table(summary_frame([result])))
    return result


@click.group()
@click.option('--config', '-c', 'config_file', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help='YAML config, synthdet.yml of the repository by default')
@click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
              help='override a config value by its dotted key, the value is parsed as YAML')
@click.option('--output-dir', default=None, help='overrides output.output_directory')
@click.option('--seed', type=int, default=None, help='overrides the global seed')
@click.pass_context
def cli(ctx, config_file, overrides, output_dir, seed):
    """Synthetic detection data pipeline: generate, filter, train and evaluate."""
    _attach_console()
    ctx.obj = _load_config(config_file, overrides, output_dir, seed)


def _stage_command(name: str, stage: str, help_text: str):
    @cli.command(name=name, help=help_text)
    @click.option('--resume/--no-resume', default=True, help='reuse the artifacts of finished stages')
    @click.pass_obj
    def command(conf, resume):
        conf['output']['resume'] = resume
        _run_cli(conf, stage)
    return command


generate_cmd = _stage_command('generate', 'generate', 'Generate the synthetic dataset.')
filter_images_cmd = _stage_command('filter-images', 'filter_images', 'Generate and filter images by aesthetic score.')
filter_instances_cmd = _stage_command('filter-instances', 'filter_instances',
                                      'Generate, filter images and flag unsupported annotations.')
train_cmd = _stage_command('train', 'train', 'Run all stages up to the detector training.')
evaluate_cmd = _stage_command('evaluate', 'evaluate', 'Run all stages and evaluate on the test split.')


@cli.command(name='run')
@click.pass_obj
def run_cmd(conf):
    """Run the full pipeline."""
    _run_cli(conf, 'evaluate')


@cli.command(name='sweep')
@click.option('--axis', required=True, type=click.Choice(sorted(SWEEP_AXES)))
@click.option('--values', required=True, help='comma separated values, e.g. 0,0.1,0.2')
@click.pass_obj
def sweep_cmd(conf, axis, values):
    """One run per value of a parameter and a summary over all of them."""
    parsed = [yaml.safe_load(v.strip()) for v in values.split(',') if v.strip()]
    try:
        reports = sweep(conf, axis, parsed)
    except StageError as e:
        raise click.ClickException(f'stage {e.stage} failed: {e.__cause__}') from e
    path = report(reports, run_directory(conf), axis=axis)
    click.echo(markdown_table(summary_frame(reports, axis)))
    click.echo(f'summary written to {path}')


@cli.command(name='report')
@click.argument('run_dirs', nargs=-1, required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option('--axis', default=None, type=click.Choice(sorted(SWEEP_AXES)))
@click.option('--out', 'out_dir', default='.', type=click.Path(file_okay=False, path_type=Path))
def report_cmd(run_dirs, axis, out_dir):
    """Summarize finished runs given by their directories."""
    reports = [RunReport.load(Path(d, 'run_report.json')) for d in run_dirs]
    path = report(reports, out_dir, axis=axis)
    click.echo(f'summary written to {path}')


def main(args=None):
    cli.main(args=args, prog_name='synthdet')


if __name__ == '__main__':
    main()
