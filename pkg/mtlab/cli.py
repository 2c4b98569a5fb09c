"""Command-line interface for mtlab."""

import json
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from . import __version__
from .checkpoint import load_checkpoint
from .config import MTLabConfig, apply_overrides, setup_logging, validate_config
from .data import load_corpus
from .errors import ConfigValidationError
from .experiment import (
    evaluate_run,
    expand_matrix,
    prepare_data,
    run_experiment,
    train_experiment_tokenizer,
)
from .exporter import (
    RUN_RECORD_FILE,
    TOKENIZER_FILE,
    ReportExporter,
    aggregate_seeds,
    bucket_labels,
    collect_report_rows,
    load_config_snapshot,
    load_metric_reports,
    read_lines,
    table_cells,
    table_header,
)
from .generation import translate as translate_text
from .icl import DEFAULT_PATTERN, ExemplarStrategy, PromptTemplate, run_icl
from .metrics import SMOOTHING_METHODS, score_corpus
from .models import Architecture, ExperimentConfig, GenerationConfig, MetricReport, RunRecord
from .presets import PARITY_PRESETS, parity_configs, smoke_experiment
from .tokenizer import SubwordTokenizer, language_tag, train_bpe
from .toydata import write_toy_corpora
from .trainer import FINAL_CHECKPOINT
from .transformer import expected_parameter_count


console = Console()


def _spinner() -> Progress:
    return Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console)


def _fail(e: Exception) -> None:
    if isinstance(e, ConfigValidationError):
        console.print(f"[red]Error: {len(e.errors)} config error(s):[/red]")
        for error in e.errors:
            console.print(f"  • {error}", markup=False)
    else:
        console.print(f"[red]Error: {e}[/red]")
    raise click.Abort()


def _split_list(value: Optional[str]) -> List[str]:
    return [v.strip() for v in value.split(',') if v.strip()] if value else []


def _direction_file(value: str) -> Tuple[Tuple[str, str], str]:
    """Parse ``SRC-TGT=PATH``."""
    direction, sep, path = value.partition('=')
    src, dash, tgt = direction.partition('-')
    if not (sep and dash and src and tgt and path):
        raise click.BadParameter(f"expected SRC-TGT=PATH, got '{value}'")
    return (src, tgt), path


def _load_config(config_path: str, seed: Optional[int], out: Optional[str], jobs: Optional[int]) -> ExperimentConfig:
    env = MTLabConfig()
    config = validate_config(config_path)
    return apply_overrides(
        config,
        seed=seed,
        output_dir=out if out is not None else env.get('output_dir'),
        jobs=jobs if jobs is not None else env.get('jobs'),
    )


def _metrics_table(reports: Sequence[MetricReport], title: str) -> Table:
    table = Table(title=title)
    table.add_column("Direction", style="cyan")
    table.add_column("Segments", justify="right")
    table.add_column("BLEU", justify="right", style="green")
    table.add_column("chrF", justify="right", style="green")
    table.add_column("TER", justify="right", style="magenta")
    for report in reports:
        table.add_row(report.direction, str(report.n_segments), f"{report.bleu:.2f}",
                      f"{report.chrf:.2f}", f"{report.ter:.4f}")
    return table


def _runs_table(records: Sequence[RunRecord], title: str) -> Table:
    table = Table(title=title)
    table.add_column("Run", style="cyan")
    table.add_column("Architecture", style="green")
    table.add_column("Regime", style="yellow")
    table.add_column("Status", style="magenta")
    for record in records:
        status = record.status
        if record.failed_stage:
            status += f" ({record.failed_stage}: {record.error})"
        table.add_row(record.name, record.architecture, record.regime, status)
    return table


def _print_runs(records: Sequence[RunRecord], title: str) -> None:
    console.print(_runs_table(records, title))
    failed = [r for r in records if r.status == "failed"]
    if failed:
        console.print(f"[red]{len(failed)} of {len(records)} run(s) failed[/red]")
        raise click.Abort()


@click.group()
@click.version_option(version=__version__, prog_name="mtlab")
@click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
              help='Logging level (or set MTLAB_LOG_LEVEL)')
def main(log_level):
    """mtlab - Train and compare decoder-only and encoder-decoder translation models."""
    setup_logging(log_level or MTLabConfig().get('log_level'))


@main.command()
@click.argument('config_path', type=click.Path(exists=True, dir_okay=False))
def validate(config_path):
    """Validate an experiment config and show the cells it expands to."""

    try:
        config = validate_config(config_path)
        specs = expand_matrix(config)
        console.print(f"[green]Config '{config.name}' is valid with {len(specs)} cell(s):[/green]")

        table = Table(title="Experiment Matrix")
        table.add_column("Run", style="cyan")
        table.add_column("Architecture", style="green")
        table.add_column("Regime", style="yellow")
        table.add_column("Directions", style="magenta")
        for spec in specs:
            directions = ", ".join(f"{s}-{t}" for s, t in spec.directions.directions())
            table.add_row(spec.name, spec.architecture.value, spec.directions.regime.value, directions)
        console.print(table)

    except Exception as e:
        _fail(e)


@main.command('tokenizer-train')
@click.argument('files', nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help='Train on the training splits of an experiment config')
@click.option('--languages', help='Languages to register tags for (comma-separated), when training from FILES')
@click.option('--vocab-size', type=int, default=1000, help='Vocabulary size when training from FILES')
@click.option('--special', 'specials', multiple=True, help='Extra special token (repeatable)')
@click.option('--out', required=True, help='Tokenizer file to write')
def tokenizer_train(files, config_path, languages, vocab_size, specials, out):
    """Train the shared BPE tokenizer.

    FILES are text or TSV files; every TAB-separated field of every line is
    one training sentence.
    """

    try:
        if config_path:
            config = validate_config(config_path)
            with _spinner() as progress:
                progress.add_task("Preparing data and training tokenizer...", total=None)
                tokenizer = train_experiment_tokenizer(config, prepare_data(config))
        else:
            if not files:
                raise click.UsageError("give corpus FILES or --config")
            langs = _split_list(languages)
            if not langs:
                raise click.UsageError("--languages is required when training from FILES")
            texts = []
            for path in files:
                for line in read_lines(path):
                    texts.extend(field for field in line.split('\t') if field.strip())
            with _spinner() as progress:
                progress.add_task(f"Training tokenizer on {len(texts)} sentences...", total=None)
                tokenizer = train_bpe(texts, vocab_size, [language_tag(l) for l in langs] + list(specials))

        path = tokenizer.save(out)
        console.print(f"[green]Trained tokenizer with {tokenizer.vocab_size} tokens, "
                      f"languages: {', '.join(tokenizer.languages)}[/green]")
        console.print(f"  tokenizer: [blue]{path}[/blue]")

    except click.UsageError:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Experiment config file')
@click.option('--seed', type=int, help='Override the experiment seed')
@click.option('--out', help='Override the output directory')
@click.option('--jobs', type=int, help='Concurrent runs')
@click.option('--overwrite', is_flag=True, help='Replace existing run directories')
def train(config_path, seed, out, jobs, overwrite):
    """Train every cell of an experiment without evaluating it."""

    try:
        config = _load_config(config_path, seed, out, jobs)
        with _spinner() as progress:
            progress.add_task(f"Training '{config.name}'...", total=None)
            records = run_experiment(config, overwrite=overwrite, evaluate=False)
    except Exception as e:
        _fail(e)
    _print_runs(records, "Trained Runs")


@main.command()
@click.option('--run-dir', required=True, type=click.Path(exists=True, file_okay=False),
              help='Directory of a trained run')
@click.option('--test', 'tests', multiple=True,
              help='Evaluation corpus as SRC-TGT=PATH (repeatable); default is the run\'s own test split')
def evaluate(run_dir, tests):
    """Evaluate a trained run and write its metrics and segments."""

    try:
        pairs = None
        if tests:
            pairs = {}
            for value in tests:
                (src, tgt), path = _direction_file(value)
                pairs[(src, tgt)] = load_corpus(path, src, tgt)
        with _spinner() as progress:
            progress.add_task(f"Evaluating {run_dir}...", total=None)
            record = evaluate_run(run_dir, pairs)
        if record.status != "completed":
            raise RuntimeError(f"evaluation failed at stage '{record.failed_stage}': {record.error}")
        console.print(_metrics_table(list(load_metric_reports(run_dir).values()), f"Evaluation: {record.name}"))
        console.print(f"  metrics: [blue]{record.metrics_path}[/blue]")

    except Exception as e:
        _fail(e)


def _load_model(run_dir: Optional[str], checkpoint: Optional[str], tokenizer_path: Optional[str]):
    gc = GenerationConfig()
    if run_dir:
        run_dir = Path(run_dir)
        checkpoint = checkpoint or str(run_dir / "checkpoints" / FINAL_CHECKPOINT)
        tokenizer_path = tokenizer_path or str(run_dir / TOKENIZER_FILE)
        gc = ExperimentConfig.from_dict(load_config_snapshot(run_dir)).generation
    if not checkpoint or not tokenizer_path:
        raise click.UsageError("give --run-dir, or both --checkpoint and --tokenizer")
    model = load_checkpoint(checkpoint).build_model()
    tokenizer = SubwordTokenizer.load(tokenizer_path)
    return model, tokenizer, gc


def _generation_overrides(gc: GenerationConfig, beam: Optional[int], max_new_tokens: Optional[int]) -> GenerationConfig:
    if beam is not None:
        gc = replace(gc, beam_width=beam)
    if max_new_tokens is not None:
        gc = replace(gc, max_new_tokens=max_new_tokens)
    return gc


@main.command()
@click.argument('text')
@click.option('--tgt-lang', required=True, help='Target language code (selects the language tag)')
@click.option('--run-dir', type=click.Path(exists=True, file_okay=False), help='Use a run\'s final checkpoint')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), help='Checkpoint file')
@click.option('--tokenizer', 'tokenizer_path', type=click.Path(exists=True, dir_okay=False), help='Tokenizer file')
@click.option('--beam', type=int, help='Beam width (1 = greedy)')
@click.option('--max-new-tokens', type=int, help='Generation length limit')
def translate(text, tgt_lang, run_dir, checkpoint, tokenizer_path, beam, max_new_tokens):
    """Translate TEXT into the tagged language."""

    try:
        model, tokenizer, gc = _load_model(run_dir, checkpoint, tokenizer_path)
        gc = _generation_overrides(gc, beam, max_new_tokens)
        click.echo(translate_text(model, tokenizer, text, tgt_lang, gc))

    except click.UsageError:
        raise
    except Exception as e:
        _fail(e)


@main.command('icl-eval')
@click.option('--run-dir', type=click.Path(exists=True, file_okay=False), help='Use a run\'s final checkpoint')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False), help='Checkpoint file')
@click.option('--tokenizer', 'tokenizer_path', type=click.Path(exists=True, dir_okay=False), help='Tokenizer file')
@click.option('--pool', 'pools', multiple=True, required=True, help='Exemplar pool as SRC-TGT=PATH (repeatable)')
@click.option('--test', 'tests', multiple=True, required=True, help='Test corpus as SRC-TGT=PATH (repeatable)')
@click.option('-k', '--shots', default=3, show_default=True, help='Exemplars per prompt')
@click.option('--template', default=DEFAULT_PATTERN, show_default=True, help='Exemplar pattern')
@click.option('--strategy', default=ExemplarStrategy.FIRST_K.value,
              type=click.Choice([s.value for s in ExemplarStrategy]), help='Exemplar selection')
@click.option('--seed', type=int, default=0, help='Seed for random exemplar selection')
@click.option('--beam', type=int, help='Beam width (1 = greedy)')
@click.option('--max-new-tokens', type=int, help='Generation length limit')
@click.option('--audit-dir', type=click.Path(file_okay=False), help='Write prompts and outputs as JSONL here')
@click.option('--out', help='CSV file for the per-direction table')
def icl_eval(run_dir, checkpoint, tokenizer_path, pools, tests, shots, template, strategy, seed,
             beam, max_new_tokens, audit_dir, out):
    """Few-shot prompt a decoder-only model, one row per language pair."""

    try:
        model, tokenizer, gc = _load_model(run_dir, checkpoint, tokenizer_path)
        gc = _generation_overrides(gc, beam, max_new_tokens)
        prompt_template = PromptTemplate(template)
        pool_files = dict(_direction_file(v) for v in pools)

        results = []
        for value in tests:
            (src, tgt), test_path = _direction_file(value)
            if (src, tgt) not in pool_files:
                raise click.BadParameter(f"no --pool given for {src}-{tgt}")
            pool = load_corpus(pool_files[(src, tgt)], src, tgt)
            test_pairs = load_corpus(test_path, src, tgt)
            audit = Path(audit_dir) / f"icl.{src}-{tgt}.jsonl" if audit_dir else None
            with _spinner() as progress:
                progress.add_task(f"{shots}-shot prompting {src}-{tgt}...", total=None)
                results.append(run_icl(model, pool, test_pairs, shots, prompt_template, tokenizer, gc,
                                       strategy=strategy, seed=seed, audit_path=audit))

        table = _metrics_table([r.report for r in results], f"{shots}-shot Translation")
        console.print(table)
        for result in results:
            if result.dropped_exemplars or result.overflowed:
                console.print(f"[yellow]{result.report.direction}: dropped {result.dropped_exemplars} exemplar(s), "
                              f"{result.overflowed} prompt(s) overflowed[/yellow]")

        if out:
            rows = [[r.report.direction, shots, f"{r.report.bleu:.2f}", f"{r.report.chrf:.2f}",
                     f"{r.report.ter:.4f}", r.dropped_exemplars] for r in results]
            path = Path(out)
            path.parent.mkdir(parents=True, exist_ok=True)
            lines = ["direction,k,bleu,chrf,ter,dropped_exemplars"] + [",".join(map(str, row)) for row in rows]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            console.print(f"  table: [blue]{path}[/blue]")

    except click.UsageError:
        raise
    except Exception as e:
        _fail(e)


@main.command()
@click.option('--hyp', required=True, type=click.Path(exists=True, dir_okay=False), help='Hypotheses, one per line')
@click.option('--ref', required=True, type=click.Path(exists=True, dir_okay=False), help='References, one per line')
@click.option('--src', type=click.Path(exists=True, dir_okay=False), help='Sources, one per line (for length buckets)')
@click.option('--tokenizer', 'tokenizer_path', type=click.Path(exists=True, dir_okay=False),
              help='Measure source lengths in tokens of this tokenizer')
@click.option('--bucket-edges', help='Length bucket edges (comma-separated)')
@click.option('--smoothing', default='none', type=click.Choice(list(SMOOTHING_METHODS)), help='BLEU smoothing')
@click.option('--direction', default='', help='Direction label for the report')
@click.option('--out', help='Write the MetricReport JSON here')
def score(hyp, ref, src, tokenizer_path, bucket_edges, smoothing, direction, out):
    """Score stored hypotheses against references with BLEU, chrF and TER."""

    try:
        hyps = read_lines(hyp)
        refs = read_lines(ref)
        lengths = None
        if src:
            sources = read_lines(src)
            if tokenizer_path:
                tokenizer = SubwordTokenizer.load(tokenizer_path)
                lengths = [len(tokenizer.encode(s)) for s in sources]
            else:
                lengths = [len(s.split()) for s in sources]
        edges = [int(e) for e in _split_list(bucket_edges)]
        report = score_corpus(hyps, refs, source_lengths=lengths, bucket_edges=edges, direction=direction,
                              provenance=f"tokenize=nfc+whitespace; bleu_smoothing={smoothing}", smoothing=smoothing)

        console.print(_metrics_table([report], "Scores"))
        if report.buckets:
            table = Table(title="By Source Length")
            table.add_column("Bucket", style="cyan")
            table.add_column("Segments", justify="right")
            for metric in ("BLEU", "chrF", "TER"):
                table.add_column(metric, justify="right")
            for b in report.buckets:
                cells = ["" if v is None else f"{v:.4f}" if m == "ter" else f"{v:.2f}"
                         for m, v in (("bleu", b.bleu), ("chrf", b.chrf), ("ter", b.ter))]
                table.add_row(b.label, str(b.n_segments), *cells)
            console.print(table)
        if out:
            Path(out).write_text(report.to_json() + "\n", encoding="utf-8")
            console.print(f"  report: [blue]{out}[/blue]")

    except Exception as e:
        _fail(e)


def _expand_run_dirs(paths: Sequence[str]) -> List[Path]:
    run_dirs = []
    for path in map(Path, paths):
        if path.is_dir() and not (path / RUN_RECORD_FILE).exists():
            children = sorted(p for p in path.iterdir() if (p / RUN_RECORD_FILE).exists())
            run_dirs.extend(children or [path])
        else:
            run_dirs.append(path)
    return run_dirs


@main.command()
@click.argument('run_dirs', nargs=-1, required=True)
@click.option('--out', 'output_dir', default='reports', help='Directory for the CSV and Markdown tables')
@click.option('--prefix', default='report', help='Output filename prefix')
@click.option('--buckets', is_flag=True, help='Add per-length-bucket columns')
@click.option('--aggregate-seeds', 'merge_seeds', is_flag=True,
              help='Merge runs that differ only in seed (mean and range)')
def report(run_dirs, output_dir, prefix, buckets, merge_seeds):
    """Compare runs in one table; an experiment output directory expands to its runs."""

    try:
        rows = collect_report_rows(_expand_run_dirs(run_dirs))
        if merge_seeds:
            rows = aggregate_seeds(rows)
        labels = bucket_labels(rows) if buckets else []

        table = Table(title="Translation Results")
        for column in table_header(labels):
            numeric = column.split("[")[0] in ("bleu", "chrf", "ter", "seed")
            table.add_column(column, justify="right" if numeric else "left")
        for row in rows:
            style = None if row.status == "completed" else "yellow"
            table.add_row(*table_cells(row, labels), style=style)
        console.print(table)

        exported_files = ReportExporter(output_dir).export(rows, include_buckets=buckets, filename_prefix=prefix)
        console.print("\n[bold green]Exported files:[/bold green]")
        for format_name, filepath in exported_files.items():
            console.print(f"  {format_name}: [blue]{filepath}[/blue]")

    except Exception as e:
        _fail(e)


@main.command()
@click.option('--config', 'config_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='Experiment config file')
@click.option('--seed', type=int, help='Override the experiment seed')
@click.option('--out', help='Override the output directory')
@click.option('--jobs', type=int, help='Concurrent runs')
@click.option('--overwrite', is_flag=True, help='Replace existing run directories')
def run(config_path, seed, out, jobs, overwrite):
    """Run a full experiment: tokenizer, datasets, training and evaluation for every cell."""

    try:
        config = _load_config(config_path, seed, out, jobs)
        with _spinner() as progress:
            progress.add_task(f"Running '{config.name}'...", total=None)
            records = run_experiment(config, overwrite=overwrite)
    except Exception as e:
        _fail(e)
    _print_runs(records, f"Runs of '{config.name}'")
    console.print(f"\nCompare with: [blue]mtlab report {config.output_dir}[/blue]")


@main.command('toy-corpus')
@click.option('--out', 'output_dir', required=True, help='Directory for the src-tgt.tsv files')
@click.option('--pairs', 'n_pairs', type=int, default=32, show_default=True, help='Pairs per corpus')
@click.option('--langs', default='hi,mr', show_default=True, help='Cipher target languages (comma-separated)')
@click.option('--all-pairs', is_flag=True, help='Write every ordered language pair, not only en to each target')
@click.option('--seed', type=int, default=0, help='Random seed')
@click.option('--config-out', type=click.Path(dir_okay=False), help='Also write a smoke experiment config here')
def toy_corpus(output_dir, n_pairs, langs, all_pairs, seed, config_out):
    """Write synthetic cipher corpora for smoke runs."""

    try:
        written = write_toy_corpora(output_dir, n_pairs, _split_list(langs), seed=seed, all_pairs=all_pairs)
        console.print(f"[green]Wrote {len(written)} corpora of {n_pairs} pairs:[/green]")
        for (src, tgt), path in written.items():
            console.print(f"  {src}-{tgt}: [blue]{path}[/blue]")

        if config_out:
            english = {f"{s}-{t}": str(p.resolve()) for (s, t), p in written.items() if s == "en"}
            config = smoke_experiment(Path(config_out).stem.replace(' ', '_'), english)
            Path(config_out).write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
            console.print(f"  config: [blue]{config_out}[/blue]")

    except Exception as e:
        _fail(e)


@main.command()
@click.option('--vocab-size', type=int, default=1000, show_default=True, help='Vocabulary size')
def params(vocab_size):
    """Show parameter counts of the shipped parity configs."""

    try:
        configs = parity_configs(vocab_size)
        table = Table(title=f"Trainable Parameters (vocab {vocab_size})")
        table.add_column("Architecture", style="cyan")
        table.add_column("Layers", justify="right")
        table.add_column("d_model", justify="right")
        table.add_column("d_ff", justify="right")
        table.add_column("Parameters", justify="right", style="magenta")

        counts: Dict[Architecture, int] = {}
        for architecture in PARITY_PRESETS:
            config = configs[architecture]
            counts[architecture] = expected_parameter_count(config)
            layers = (f"{config.encoder_layers}+{config.decoder_layers}"
                      if architecture is Architecture.ENCODER_DECODER else str(config.decoder_layers))
            table.add_row(architecture.value, layers, str(config.d_model), str(config.d_ff),
                          f"{counts[architecture]:,}")
        console.print(table)

        ratio = counts[Architecture.DECODER_ONLY] / counts[Architecture.ENCODER_DECODER]
        colour = "green" if abs(ratio - 1) < 0.02 else "red"
        console.print(f"[{colour}]decoder-only / encoder-decoder = {ratio:.4f}[/{colour}]")

    except Exception as e:
        _fail(e)


if __name__ == '__main__':
    main()
