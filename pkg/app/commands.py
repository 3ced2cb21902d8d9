"""Command-line interface: pre-training, few-shot fine-tuning, sweeps and analysis."""
import csv
import hashlib
import json
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path

import click
from flask import Blueprint, current_app

from app.agents.analysis import (
    export_states_csv,
    nearest_labels,
    rd_curve,
    train_with_capture,
    write_rd_curve_csv,
)
from app.agents.fewshot_harness import (
    ABLATION_ARMS,
    DART,
    HEAD_ARM,
    FewShotHarness,
    GridSpace,
    dart_arm,
    fixed_prompt_arm,
)
from app.agents.trainer import TrainConfig
from app.errors import ArtifactMismatchError, ConfigError, DartError, exit_code_for
from app.models import RunManifest, RunResult, db
from app.run_config import load_finetune_config, load_grid, load_pretrain_config
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.differentiable_prompt import PromptSpec
from app.services.synthetic_data import build_task_vocab, generate_corpus, grammar_words, make_task
from app.services.toy_mlm import Corpus, MlmConfig, PretrainConfig, ToyMlmModel, pretrain

bp = Blueprint('cli', __name__, cli_group=None)

ANALYSES = ('rd', 'neighbors', 'export')


def _fail(exc, what, manifest=None):
    """Log, mark the manifest failed and exit with the error's code."""
    current_app.logger.error(f"Error {what}: {exc}")
    if manifest is not None:
        manifest.status = 'failed'
        manifest.error_message = str(exc)
        manifest.finished_at = datetime.utcnow()
        db.session.commit()
        _write_manifest_json(manifest)
    click.echo(f"error: {exc}", err=True)
    raise click.exceptions.Exit(exit_code_for(exc))


def _config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode('utf-8')).hexdigest()


def _start_manifest(command, config, seed, inputs, outputs, output_dir):
    """Record the run in the registry and as manifest.json before any training."""
    from app import __version__

    manifest = RunManifest(command=command, config_hash=_config_hash(config), seed=seed,
                           code_version=__version__)
    manifest.set_input_paths(inputs)
    manifest.set_output_paths(outputs)
    db.session.add(manifest)
    db.session.commit()

    output_dir.mkdir(parents=True, exist_ok=True)
    manifest.json_path = output_dir / 'manifest.json'
    manifest.config_snapshot = config
    _write_manifest_json(manifest)
    return manifest


def _write_manifest_json(manifest):
    """Mirror the registry row, plus the resolved config, into the run's manifest.json."""
    payload = manifest.to_dict()
    payload['config'] = manifest.config_snapshot
    manifest.json_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _finish_manifest(manifest, entries=()):
    for entry in entries:
        db.session.add(RunResult.from_entry(manifest, entry))
    manifest.status = 'finished'
    manifest.finished_at = datetime.utcnow()
    db.session.commit()
    _write_manifest_json(manifest)


def _output_dir(output_dir, command):
    return Path(output_dir or Path(current_app.config['OUTPUT_DIR']) / command)


def _load_task_model(checkpoint):
    """Load a checkpoint and check it was built on the task grammar's vocabulary."""
    model, manifest = load_checkpoint(checkpoint)
    if model.vocab.natural_tokens() != grammar_words():
        raise ArtifactMismatchError(f"{checkpoint}: vocabulary does not match the task grammar")
    return model, manifest


def _seed_list(count, configured):
    seeds = list(configured or current_app.config['DEFAULT_SEEDS'])
    if count is None:
        return seeds
    if not 1 <= count <= len(seeds):
        raise ConfigError(f"--seeds must be in [1, {len(seeds)}], got {count}", field='seeds')
    return seeds[:count]


def _train_defaults():
    return TrainConfig(**current_app.config['TRAIN_DEFAULTS'])


@bp.cli.command('pretrain')
@click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
              help='Pre-training JSON config')
@click.option('--output-dir', default=None, help='Directory for the checkpoint and metrics')
def pretrain_command(config_path, output_dir):
    """Pre-train the toy masked language model on the synthetic grammar."""
    out = _output_dir(output_dir, 'pretrain')
    try:
        cfg = load_pretrain_config(config_path, current_app.config.get('SEED_OVERRIDE'))
    except DartError as e:
        _fail(e, 'loading pre-training config')

    checkpoint_path = out / 'pretrained.ckpt'
    metrics_path = out / 'pretrain_metrics.csv'
    manifest = _start_manifest('pretrain', cfg.to_dict(), cfg.seed, [config_path],
                               [checkpoint_path, metrics_path], out)
    try:
        vocab = build_task_vocab(cfg.reserved_count)
        model = ToyMlmModel(MlmConfig(vocab_size=vocab.size, **asdict(cfg.model)), vocab, seed=cfg.seed)
        if cfg.corpus.kind == 'file':
            corpus = Corpus.from_file(cfg.corpus.path, vocab)
        else:
            corpus = generate_corpus(vocab, cfg.corpus.n_sentences, cfg.corpus.seed)

        trace = []
        result = pretrain(model, corpus, PretrainConfig(
            steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, mask_prob=cfg.mask_prob,
            weight_decay=cfg.weight_decay, seed=cfg.seed, log_every=cfg.log_every,
        ), on_step=lambda step, loss: trace.append((step, loss)))

        save_checkpoint(model, checkpoint_path, metadata={
            'command': 'pretrain',
            'seed': cfg.seed,
            'steps': cfg.steps,
            'heldout_loss_initial': result.heldout_loss_initial,
            'heldout_loss_final': result.heldout_loss_final,
        })
        with open(metrics_path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(('step', 'loss'))
            for step, loss in trace:
                writer.writerow((step, f'{loss:.9g}'))
    except Exception as e:
        _fail(e, 'pre-training', manifest)

    _finish_manifest(manifest)
    current_app.logger.info(f"pre-training finished: {checkpoint_path}")
    click.echo(f"checkpoint: {checkpoint_path}")
    click.echo(f"held-out loss: {result.heldout_loss_initial:.4f} -> {result.heldout_loss_final:.4f}")


def _finetune_setup(config_path, task, k, seeds):
    """Merge the optional config file with CLI overrides."""
    file_cfg = load_finetune_config(config_path) if config_path else None
    train_config = _train_defaults()
    if file_cfg is not None:
        train_config = train_config.replace(**file_cfg.train)
    task_name = task or (file_cfg.task if file_cfg else 'easy')
    k = k or (file_cfg.k if file_cfg else current_app.config['DEFAULT_K'])
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}", field='k')
    if k not in current_app.config['SUPPORTED_K']:
        current_app.logger.warning(f"K={k} is outside the usual {current_app.config['SUPPORTED_K']}")
    seed_list = _seed_list(seeds, file_cfg.seeds if file_cfg else None)
    grid = GridSpace.from_dict(file_cfg.grid) if file_cfg and file_cfg.grid else GridSpace.single()
    template_length = file_cfg.template_length if file_cfg else 3
    return file_cfg, train_config, task_name, k, seed_list, grid, template_length


def _write_report(report, out, echo=True):
    csv_path = report.to_csv(out / 'report.csv')
    json_path = report.to_json(out / 'aggregate.json')
    for entry in report.entries:
        if entry.history is not None:
            entry.history.to_csv(out / 'history' / f'{entry.method.replace("/", "_")}_seed{entry.seed}.csv')
    if echo:
        for row in report.aggregate():
            click.echo(f"{row['method']} {row['task']} K={row['K']}: {row['display']}")
    return csv_path, json_path


def _save_best(report, out):
    """Checkpoint of the entry with the best dev metric (first on ties)."""
    best = None
    for entry in report.entries:
        if entry.model is not None and (best is None or entry.dev_metric > best.dev_metric):
            best = entry
    if best is None:
        return None
    return save_checkpoint(best.model, out / 'best_model.ckpt', prompt_spec=best.spec, metadata={
        'command': 'finetune',
        'method': best.method,
        'task': best.task,
        'K': best.k,
        'seed': best.seed,
        'config': best.config,
    })


@bp.cli.command('finetune')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--task', type=click.Choice(['easy', 'hard', 'many']), default=None)
@click.option('--method', type=click.Choice(['dart', 'head', 'fixed']), default='dart')
@click.option('--k', type=int, default=None, help='Shots per class (8, 16 or 32)')
@click.option('--seeds', type=int, default=None, help='Number of protocol seeds to run')
@click.option('--no-fluency', is_flag=True, help='Drop the fluency constraint (lambda = 0 path)')
@click.option('--fixed-template', is_flag=True, help='Use the natural base template instead of pseudo tokens')
@click.option('--fixed-label', is_flag=True, help='Use natural label words instead of continuous labels')
@click.option('--label-words', default=None, help='Comma-separated label words, class order')
@click.option('--template-length', type=int, default=None)
@click.option('--ablation', is_flag=True, help='Run the four ablation arms')
@click.option('--template-sweep', is_flag=True, help='Sweep template lengths 1, 2, 3, 5, 10')
@click.option('--label-study', is_flag=True, help='Compare DART with fixed prompts over label-word pairs')
@click.option('--config', 'config_path', default=None, type=click.Path(dir_okay=False))
@click.option('--output-dir', default=None)
@click.option('--jobs', type=int, default=None, help='Worker processes for seeds')
def finetune_command(checkpoint, task, method, k, seeds, no_fluency, fixed_template, fixed_label,
                     label_words, template_length, ablation, template_sweep, label_study,
                     config_path, output_dir, jobs):
    """Few-shot fine-tuning over the seed protocol."""
    out = _output_dir(output_dir, 'finetune')
    jobs = jobs or current_app.config['DEFAULT_JOBS']
    try:
        file_cfg, train_config, task_name, k, seed_list, grid, default_length = _finetune_setup(
            config_path, task, k, seeds)
        template_length = template_length or default_length
        words = tuple(w.strip() for w in label_words.split(',')) if label_words else None
        model, _ = _load_task_model(checkpoint)
        task_data = make_task(task_name)
    except DartError as e:
        _fail(e, 'preparing fine-tuning')

    config = {
        'task': task_name, 'method': method, 'K': k, 'seeds': seed_list,
        'train': train_config.to_dict(), 'grid': grid.to_dict(), 'template_length': template_length,
        'no_fluency': no_fluency, 'fixed_template': fixed_template, 'fixed_label': fixed_label,
        'label_words': words, 'ablation': ablation, 'template_sweep': template_sweep,
        'label_study': label_study,
    }
    manifest = _start_manifest('finetune', config, seed_list[0], [checkpoint, config_path or ''],
                               [out / 'report.csv', out / 'aggregate.json', out / 'best_model.ckpt'], out)
    try:
        harness = FewShotHarness(model, task_data, train_config, grid)
        if template_sweep:
            report = harness.template_length_sweep(k, seed_list, jobs=jobs)
        elif label_study:
            report = harness.label_word_study(k, seed_list, jobs=jobs)
        else:
            if ablation:
                arms = list(ABLATION_ARMS)
            elif method == 'head':
                arms = [HEAD_ARM]
            elif method == 'fixed':
                arms = [fixed_prompt_arm(words, template_length=template_length)]
            else:
                arms = [dart_arm(DART, template_length, fluency=not no_fluency,
                                 fixed_template=fixed_template, fixed_label=fixed_label)]
                if words:
                    arms = [replace(arms[0], label_words=words)]
            report = harness.run_protocol(arms, k, seed_list, jobs=jobs)
        _write_report(report, out)
        _save_best(report, out)
    except Exception as e:
        _fail(e, 'fine-tuning', manifest)

    _finish_manifest(manifest, report.entries)
    current_app.logger.info(f"fine-tuning finished: {len(report.entries)} runs")


@bp.cli.command('sweep')
@click.option('--checkpoint', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--grid', 'grid_path', default=None, type=click.Path(dir_okay=False),
              help='Grid JSON (defaults to the configured lambda / learning-rate grid)')
@click.option('--task', type=click.Choice(['easy', 'hard', 'many']), default=None)
@click.option('--method', type=click.Choice(['dart', 'head', 'fixed']), default='dart')
@click.option('--k', type=int, default=None)
@click.option('--seeds', type=int, default=None)
@click.option('--config', 'config_path', default=None, type=click.Path(dir_okay=False))
@click.option('--output-dir', default=None)
@click.option('--jobs', type=int, default=None)
def sweep_command(checkpoint, grid_path, task, method, k, seeds, config_path, output_dir, jobs):
    """Grid search on D_dev per seed, then one test evaluation of the selection."""
    out = _output_dir(output_dir, 'sweep')
    jobs = jobs or current_app.config['DEFAULT_JOBS']
    try:
        _, train_config, task_name, k, seed_list, file_grid, template_length = _finetune_setup(
            config_path, task, k, seeds)
        if grid_path:
            grid = GridSpace.from_dict(load_grid(grid_path))
        elif file_grid.axes:
            grid = file_grid
        else:
            grid = GridSpace.from_dict(current_app.config['DEFAULT_GRID'])
        model, _ = _load_task_model(checkpoint)
        task_data = make_task(task_name)
    except DartError as e:
        _fail(e, 'preparing sweep')

    arm = {'dart': dart_arm(DART, template_length), 'head': HEAD_ARM,
           'fixed': fixed_prompt_arm(template_length=template_length)}[method]
    config = {'task': task_name, 'method': method, 'K': k, 'seeds': seed_list,
              'train': train_config.to_dict(), 'grid': grid.to_dict()}
    manifest = _start_manifest('sweep', config, seed_list[0], [checkpoint, grid_path or ''],
                               [out / 'selection.json', out / 'report.csv'], out)
    try:
        harness = FewShotHarness(model, task_data, train_config, grid)
        report = harness.run_protocol([arm], k, seed_list, grid=grid, jobs=jobs)
        selection = [{
            'seed': entry.seed,
            'best_config': entry.config,
            'dev_metric': entry.dev_metric,
            'test_metric': entry.metric,
            'trials': entry.trials,
        } for entry in report.entries]
        out.mkdir(parents=True, exist_ok=True)
        (out / 'selection.json').write_text(json.dumps(selection, indent=2, sort_keys=True))
        _write_report(report, out)
    except Exception as e:
        _fail(e, 'sweeping', manifest)

    _finish_manifest(manifest, report.entries)
    for row in selection:
        click.echo(f"seed {row['seed']}: dev {row['dev_metric']:.4f} test {row['test_metric']:.4f} "
                   f"{json.dumps(row['best_config'], sort_keys=True)}")


def _parse_steps(text):
    if text is None:
        return list(current_app.config['DEFAULT_CAPTURE_STEPS'])
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError as e:
        raise ConfigError(f"capture steps must be integers, got {text!r}", field='capture-steps') from e


@bp.cli.command('analyze')
@click.option('--checkpoint', 'checkpoints', required=True, multiple=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option('--what', type=click.Choice(ANALYSES), required=True)
@click.option('--task', type=click.Choice(['easy', 'hard', 'many']), default='easy')
@click.option('--method', type=click.Choice(['dart', 'fixed', 'both']), default='dart',
              help='Arm(s) trained for rd/export captures')
@click.option('--k', type=int, default=8)
@click.option('--seed', type=int, default=None)
@click.option('--top-k', type=int, default=3)
@click.option('--capture-steps', default=None, help='Comma-separated global steps')
@click.option('--config', 'config_path', default=None, type=click.Path(dir_okay=False))
@click.option('--output-dir', default=None)
def analyze_command(checkpoints, what, task, method, k, seed, top_k, capture_steps, config_path, output_dir):
    """R_D curves, nearest-token projection of label slots and state exports."""
    out = _output_dir(output_dir, 'analyze')
    try:
        steps = _parse_steps(capture_steps)
        train_config = _train_defaults()
        if config_path:
            train_config = train_config.replace(**load_finetune_config(config_path).train)
        seed = current_app.config['DEFAULT_SEEDS'][0] if seed is None else seed
        loaded = [(path, *_load_task_model(path)) for path in checkpoints]
    except DartError as e:
        _fail(e, 'preparing analysis')

    config = {'what': what, 'task': task, 'method': method, 'K': k, 'seed': seed, 'top_k': top_k,
              'capture_steps': steps, 'train': train_config.to_dict()}
    manifest = _start_manifest('analyze', config, seed, list(checkpoints), [out], out)
    try:
        if what == 'neighbors':
            reports = []
            for path, model, ckpt_manifest in loaded:
                if not ckpt_manifest.get('prompt_spec'):
                    raise ArtifactMismatchError(f"{path}: checkpoint carries no prompt spec")
                spec = PromptSpec.from_dict(ckpt_manifest['prompt_spec'], model.vocab)
                reports.append({'checkpoint': str(path), **nearest_labels(model, spec, top_k).to_dict()})
            out.mkdir(parents=True, exist_ok=True)
            (out / 'neighbors.json').write_text(json.dumps(reports, indent=2))
            click.echo(f"neighbors: {out / 'neighbors.json'}")
        else:
            task_data = make_task(task)
            arms = {'dart': [dart_arm()], 'fixed': [fixed_prompt_arm()],
                    'both': [dart_arm(), fixed_prompt_arm()]}[method]
            curve_rows, captured = [], []
            for path, model, _ in loaded:
                harness = FewShotHarness(model, task_data, train_config)
                episode = harness.episode(k, seed)
                for arm in arms:
                    tag = arm.method if len(loaded) == 1 else f'{Path(path).stem}:{arm.method}'
                    if not steps:
                        continue
                    capture = train_with_capture(harness, arm, episode, steps,
                                                 harness.arm_config(arm, seed=seed))
                    curve_rows.extend((tag, step, value) for step, value in rd_curve(capture.states()))
                    captured.extend(capture.states())
            if what == 'rd':
                write_rd_curve_csv(curve_rows, out / 'rd_curve.csv')
                click.echo(f"rd curve: {out / 'rd_curve.csv'} ({len(curve_rows)} rows)")
            else:
                export_states_csv(captured, out / 'mask_states.csv')
                click.echo(f"states: {out / 'mask_states.csv'}")
    except Exception as e:
        _fail(e, 'analysing', manifest)

    _finish_manifest(manifest)


@bp.cli.command('init-db')
def init_db_command():
    """Initialize the run registry database."""
    db.create_all()
    click.echo("Database initialized successfully!")
