import functools
from pathlib import Path
from typing import Dict, List, Optional

import typer

from pocketdiff.api.dependencies.custom_exception import (
    BaseAppException,
    BinningMismatchError,
    CheckpointError,
    ConfigKeyError,
    CorpusError,
    DenoiserShapeError,
    EmptySetError,
    EmptyStatsError,
    ExperimentCheckError,
    NonFiniteError,
    OutputDirError,
    SamplingDivergedError,
    ScheduleError,
    TrainingDivergedError,
    XYZFormatError,
    add_exception_handler,
    create_exception_handler,
    dispatch_exception,
)
from pocketdiff.api.dependencies.response import success_response
from pocketdiff.core.config import Config, dump_key_values, load_key_value_file, parse_key_value_pairs
from pocketdiff.schemas.config import CorpusSpec, EvalConfig, ExperimentConfig, TrainConfig, resolve_config
from pocketdiff.schemas.schedule import AnnealSpec, parse_anneal
from pocketdiff.schemas.training import AtomCountStats
from pocketdiff.services.dataio import dataio_service
from pocketdiff.services.checkpoint import load_checkpoint
from pocketdiff.services.evalkit import eval_service
from pocketdiff.services.experiment import ARM_PRESETS, experiment_service
from pocketdiff.services.sampler import sampler_service
from pocketdiff.services.schedules import schedule_service
from pocketdiff.services.trainer import trainer_service
from pocketdiff.utils.logger import get_logger

logger = get_logger(__name__)

app = typer.Typer(
    name=Config.APP_NAME,
    help=Config.APP_DESCRIPTION,
    add_completion=False,
    no_args_is_help=True,
)


add_exception_handler(
    ConfigKeyError,
    create_exception_handler(exit_code=2, default_message="Invalid configuration"),
)
add_exception_handler(
    ScheduleError,
    create_exception_handler(exit_code=2, default_message="Invalid schedule"),
)
add_exception_handler(
    OutputDirError,
    create_exception_handler(exit_code=3, default_message="Output directory is not usable"),
)
add_exception_handler(
    CorpusError,
    create_exception_handler(exit_code=3, default_message="Corpus error"),
)
add_exception_handler(
    XYZFormatError,
    create_exception_handler(exit_code=3, default_message="Malformed XYZ file"),
)
add_exception_handler(
    CheckpointError,
    create_exception_handler(exit_code=3, default_message="Checkpoint error"),
)
add_exception_handler(
    DenoiserShapeError,
    create_exception_handler(exit_code=3, default_message="Checkpoint does not fit the inputs"),
)
add_exception_handler(
    TrainingDivergedError,
    create_exception_handler(exit_code=4, default_message="Training diverged"),
)
add_exception_handler(
    SamplingDivergedError,
    create_exception_handler(exit_code=4, default_message="Sampling diverged"),
)
add_exception_handler(
    NonFiniteError,
    create_exception_handler(exit_code=4, default_message="Non-finite value produced"),
)
add_exception_handler(
    EmptySetError,
    create_exception_handler(exit_code=5, default_message="Nothing to evaluate"),
)
add_exception_handler(
    EmptyStatsError,
    create_exception_handler(exit_code=5, default_message="No atom-count statistics"),
)
add_exception_handler(
    BinningMismatchError,
    create_exception_handler(exit_code=5, default_message="Histograms use different bins"),
)
add_exception_handler(
    ExperimentCheckError,
    create_exception_handler(exit_code=6, default_message="Experiment checks failed"),
)


def handle_app_errors(func):
    """Turn application exceptions into the registered exit codes."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except BaseAppException as exc:
            logger.debug("Command failed: %s", exc.message, exc_info=Config.DEBUG)
            raise typer.Exit(code=dispatch_exception(exc))
    return wrapper


def prepare_out_dir(path: Path, force: bool) -> Path:
    """Create ``path``; an existing non-empty directory needs ``force``."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise OutputDirError(f"{path} exists and is not a directory", errors={"path": str(path)})
    if path.is_dir() and any(path.iterdir()) and not force:
        raise OutputDirError(f"{path} is not empty; pass --force to write into it", errors={"path": str(path)})
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputDirError(f"Cannot create {path}: {e}", errors={"path": str(path)})
    return path


def merged_values(config_file: Optional[Path], overrides: Optional[List[str]]) -> Dict[str, str]:
    values = load_key_value_file(config_file)
    values.update(parse_key_value_pairs(overrides or [], source="--set"))
    return values


def write_echo(path: Path, values: Dict[str, object]) -> None:
    try:
        path.write_text(dump_key_values(values), encoding="utf-8")
    except OSError as e:
        raise OutputDirError(f"Cannot write {path}: {e}", errors={"path": str(path)})


@app.command("gen-data")
@handle_app_errors
def gen_data(
    spec: Optional[Path] = typer.Option(None, "--spec", help="key=value corpus spec file"),
    out: Path = typer.Option(..., "--out", help="Corpus directory to create"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Overrides the spec's seed"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Extra key=value overrides"),
    force: bool = typer.Option(False, "--force", help="Write into a non-empty directory"),
):
    """Generate a synthetic pocket/ligand corpus."""
    values = merged_values(spec, overrides)
    if seed is not None:
        values["seed"] = str(seed)
    corpus_spec = resolve_config(CorpusSpec, values)
    out = prepare_out_dir(out, force)

    complexes = dataio_service.filter_complexes(dataio_service.generate_corpus(corpus_spec), corpus_spec.max_rmsd)
    manifest = dataio_service.write_corpus(complexes, out)
    write_echo(out / "resolved_config.txt", corpus_spec.echo())
    success_response(
        message=f"Wrote corpus to {out}",
        data={
            "complexes": len(manifest),
            "ligand atoms": int(manifest["m"].sum()),
            "pocket atoms": int(manifest["n"].sum()),
            "templates": ", ".join(sorted(manifest["template"].astype(str).unique())),
        },
    )


@app.command("train")
@handle_app_errors
def train(
    config: Optional[Path] = typer.Option(None, "--config", help="key=value training config file"),
    data: Path = typer.Option(..., "--data", help="Corpus directory from gen-data"),
    out: Path = typer.Option(..., "--out", help="Run directory"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Extra key=value overrides"),
    force: bool = typer.Option(False, "--force", help="Write into a non-empty directory"),
):
    """Train the denoiser on a corpus."""
    train_config = resolve_config(TrainConfig, merged_values(config, overrides))
    complexes = dataio_service.load_corpus(data)
    out = prepare_out_dir(out, force)

    result = trainer_service.train(train_config, complexes, out)
    last = result.metrics.iloc[-1] if len(result.metrics) else None
    success_response(
        message=f"Training finished in {out}",
        data={
            "steps": train_config.total_steps,
            "final loss": f"{last['loss']:.5f}" if last is not None else "-",
            "checkpoint": result.checkpoint_path,
            "metrics": result.metrics_path,
        },
    )


@app.command("sample")
@handle_app_errors
def sample(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint written by train"),
    pocket: Path = typer.Option(..., "--pocket", help="Pocket XYZ file"),
    n: int = typer.Option(..., "--n", min=0, help="Number of ligands to sample"),
    seed: int = typer.Option(2021, "--seed", min=0),
    out: Path = typer.Option(..., "--out", help="Directory for sample XYZ files"),
    m: Optional[int] = typer.Option(None, "--m", min=1, help="Fixed atom count"),
    force: bool = typer.Option(False, "--force", help="Write into a non-empty directory"),
):
    """Sample ligands for a pocket with a trained checkpoint."""
    params, meta = load_checkpoint(checkpoint)
    protein = dataio_service.load_pocket(pocket)
    if protein.num_types != params.config.K_P:
        raise DenoiserShapeError(
            f"pocket has {protein.num_types} atom types, checkpoint expects {params.config.K_P}",
            errors={"pocket": str(pocket), "checkpoint": str(checkpoint)},
        )
    train_values = meta.get("train_config", {})
    schedule = schedule_service.build_noise_schedule(
        params.config.T,
        float(train_values.get("beta_start", 1e-4)),
        float(train_values.get("beta_end", 0.02)),
    )
    stats = AtomCountStats(counts=meta["atom_counts"]) if meta.get("atom_counts") else None
    out = prepare_out_dir(out, force)

    manifest = sampler_service.sample_many(
        protein, n, params, schedule, seed, out,
        stats=stats, fixed_m=m, pocket_id=pocket.stem,
        position_scale=float(train_values.get("position_scale", 1.0)),
    )
    write_echo(out / "resolved_config.txt", {
        "checkpoint": checkpoint, "pocket": pocket, "n": n, "seed": seed, "m": m if m is not None else "stats",
    })
    success_response(
        message=f"Wrote {len(manifest)} samples to {out}",
        data={"mean atoms": f"{manifest['m'].mean():.2f}" if len(manifest) else "-"},
    )


@app.command("eval")
@handle_app_errors
def evaluate(
    generated: Path = typer.Option(..., "--generated", help="Directory of generated ligands"),
    reference: Path = typer.Option(..., "--reference", help="Directory of reference ligands"),
    out: Path = typer.Option(..., "--out", help="Report CSV"),
    config: Optional[Path] = typer.Option(None, "--config", help="key=value evaluation config"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Extra key=value overrides"),
):
    """Compare bond-length and all-atom distance distributions."""
    eval_config = resolve_config(EvalConfig, merged_values(config, overrides))
    report = eval_service.evaluation_report(
        dataio_service.load_ligands(generated), dataio_service.load_ligands(reference), eval_config
    )
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out, index=False)
    except OSError as e:
        raise OutputDirError(f"Cannot write {out}: {e}", errors={"path": str(out)})
    write_echo(out.with_name(out.stem + "_config.txt"), {
        **eval_config.echo(), "generated": generated, "reference": reference,
    })
    success_response(
        message=f"Wrote report to {out}",
        data={row["class"]: f"{row['jsd']:.4f} {row['flag']}".strip() for _, row in report.iterrows()},
    )


@app.command("experiment")
@handle_app_errors
def experiment(
    out: Path = typer.Option(..., "--out", help="Experiment directory"),
    config: Optional[Path] = typer.Option(None, "--config", help="key=value experiment, eval and training config"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="Extra key=value overrides"),
    arm: Optional[List[str]] = typer.Option(None, "--arm", help="'classic' or kind[:key=value,...], repeatable"),
    preset: Optional[List[str]] = typer.Option(
        None, "--preset", help=f"Named arm grid: {', '.join(sorted(ARM_PRESETS))}; repeatable"
    ),
    force: bool = typer.Option(False, "--force", help="Write into a non-empty directory"),
):
    """Train several arms, sample held-out pockets and compare the JSD reports."""
    experiment_values, eval_values, train_values = experiment_service.split_values(merged_values(config, overrides))
    experiment_config = resolve_config(ExperimentConfig, experiment_values)
    eval_config = resolve_config(EvalConfig, eval_values)
    arms = experiment_service.resolve_arms(arm, preset)
    for item in arms:
        experiment_service.arm_config(experiment_config, train_values, item)
    out = prepare_out_dir(out, force)

    result = experiment_service.run(experiment_config, arms, out, train_values, eval_config)
    data = {
        row["arm"]: (
            f"loss x{row['loss_ratio']:.3f}  bond {row['mean_bond_jsd']:.4f}  "
            f"all-atom {row['all_atom_jsd']:.4f}  contained {row['containment']:.3f}"
        )
        for _, row in result.summary.iterrows()
    }
    data["split-half JSD"] = f"{result.consistency:.4f}"
    success_response(message=f"Experiment written to {out}", data=data)
    if not result.passed:
        failed = sorted(name for name, ok in result.checks.items() if not ok)
        raise ExperimentCheckError(
            f"experiment checks failed: {', '.join(failed)}",
            errors={"checks": result.checks, "summary": str(out / "summary.csv")},
        )


DEFAULT_CURVES = ("arc:r=2,lower_bound=0", "original:mu=12,lower_bound=0", "linear:slope=-0.005,lower_bound=0")


@app.command("schedule")
@handle_app_errors
def schedule(
    anneal: Optional[List[str]] = typer.Option(None, "--anneal", help="kind[:key=value,...], repeatable"),
    epochs: int = typer.Option(200, "--epochs", min=1),
    out: Path = typer.Option(..., "--out", help="Curve CSV"),
):
    """Tabulate annealing curves over epochs."""
    specs: List[AnnealSpec] = [parse_anneal(text) for text in (anneal or DEFAULT_CURVES)]
    frame = schedule_service.dump_curves(specs, epochs)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False)
    except OSError as e:
        raise OutputDirError(f"Cannot write {out}: {e}", errors={"path": str(out)})
    write_echo(out.with_name(out.stem + "_config.txt"), {
        "anneal": " | ".join(s.name for s in specs), "epochs": epochs,
    })
    final = frame.iloc[-1]
    success_response(
        message=f"Wrote {len(specs)} curves to {out}",
        data={name: f"{final[name]:.4f} at epoch {epochs}" for name in frame.columns[1:]},
    )


if __name__ == "__main__":
    app()
