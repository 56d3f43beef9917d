"""Command-line entry point: search, evaluate, count-space, export, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import csv
import dataclasses
import sys
from contextlib import contextmanager
from pathlib import Path

import click
from threadpoolctl import threadpool_limits

from .cell import CellGraph, Genotype, genotype_to_dot
from .config import ConfigError, load_config
from .ops import OP_SETS, VIDEO_ONLY_SETS
from .schedule import SCHEDULES, count_reachable

IMAGE_TYPES = ("normal", "reduction")
VIDEO_TYPES = ("normal", "st_reduction", "s_reduction")


class _Fail(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@contextmanager
def _errors():
    """Map library exceptions to exit codes."""
    try:
        yield
    except (ConfigError, FileNotFoundError) as exc:
        raise _Fail(str(exc), 2) from None
    except ValueError as exc:
        raise _Fail(str(exc), 2) from None
    except Exception as exc:  # runtime failure inside a workflow
        raise _Fail(f"{type(exc).__name__}: {exc}", 1) from None


def _load_genotype(path) -> Genotype:
    try:
        return Genotype.load(path)
    except FileNotFoundError:
        raise _Fail(f"genotype file {path} does not exist", 2) from None
    except ValueError as exc:
        raise _Fail(f"invalid genotype {path}: {exc}", 2) from None


@click.group()
def cli():
    """Scheduled differentiable architecture search."""


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--mode", type=click.Choice(["sdas", "das"]), default=None, help="Scheduled or one-shot discretization.")
@click.option("--schedule", type=click.Choice(list(SCHEDULES)), default=None, help="Schedule function A, B or C.")
@click.option("--opset", type=click.Choice(sorted(OP_SETS)), default=None, help="Candidate operation set.")
@click.option("--seed", type=int, default=None, help="Seed for weights, data split and batch order.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory (overrides output.dir).")
@click.option("--workers", type=int, default=None, help="Cap on BLAS threads used per step.")
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), default=None, help="Checkpoint to resume from.")
@click.option("--stop-after", type=int, default=None, help="Stop (and checkpoint) after this iteration.")
def search(config, mode, schedule, opset, seed, out, workers, resume, stop_after):
    """Run a search; writes genotype.json, disc_log.txt, metrics.csv, checkpoint.npz and figures."""
    from .report import search_figures
    from .search import run_search, write_outputs

    with _errors():
        cfg = load_config(config)
        overrides = {k: v for k, v in (("mode", mode), ("schedule", schedule), ("op_set", opset),
                                       ("seed", seed)) if v is not None}
        try:
            cfg.search = dataclasses.replace(cfg.search, **overrides)
        except ValueError as exc:
            raise ConfigError(f"search: {exc}") from None
        if out is not None:
            cfg.output.dir = out
        dataset = cfg.data.load()
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "resolved_config.yaml")
    with _errors(), threadpool_limits(limits=workers):
        result = run_search(cfg.search, dataset, resume_from=resume, stop_after=stop_after,
                            checkpoint=out_dir / "checkpoint.npz")
        paths = write_outputs(result, out_dir)
        figs = search_figures(result.metrics, out_dir, cfg.search.schedule)
    for name, p in list(paths.items()) + [("checkpoint", out_dir / "checkpoint.npz")]:
        click.echo(f"{name}\t{p}")
    for p in figs:
        click.echo(f"figure\t{p}")
    click.echo(f"iterations\t{result.t}/{result.T}")
    click.echo(f"reachable_count\t{result.metrics[-1]['reachable_count'] if result.metrics else result.log.initial_count}")


@cli.command()
@click.argument("genotype", type=click.Path(dir_okay=False))
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--epochs", type=int, default=None, help="Training epochs (overrides train.epochs).")
@click.option("--seed", type=int, default=None, help="Seed for weights and batch order.")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory (overrides output.dir).")
@click.option("--workers", type=int, default=None, help="Cap on BLAS threads.")
def evaluate(genotype, config, epochs, seed, out, workers):
    """Build a network from GENOTYPE and train/evaluate it per CONFIG."""
    from .network import NetworkPlan, StemConfig, build_network, count_params, train_eval
    from .report import training_figure

    geno = _load_genotype(genotype)
    with _errors():
        cfg = load_config(config)
        if epochs is not None:
            cfg.train.epochs = epochs
        if seed is not None:
            cfg.train.seed = seed
        if out is not None:
            cfg.output.dir = out
        dataset = cfg.data.load()
        net_cfg = cfg.network
        plan = NetworkPlan(geno, target=net_cfg.target or cfg.search.target, K=net_cfg.K, C1=net_cfg.C1,
                           C2=net_cfg.C2, num_classes=net_cfg.classes or dataset.num_classes,
                           in_channels=dataset.x.shape[1], reductions=net_cfg.reductions,
                           stem=StemConfig(stride=net_cfg.stem_stride, pool=net_cfg.stem_pool))
        model = build_network(plan, seed=cfg.train.seed)
    out_dir = Path(cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "resolved_config.yaml")
    with _errors(), threadpool_limits(limits=workers):
        t = cfg.train
        metrics = train_eval(model, dataset, t.epochs, t.batch_size, t.lr, t.momentum, t.weight_decay,
                             t.seed, augment=t.augmenter())
    rows = [("params", count_params(plan)), ("epochs", metrics["epochs"]),
            ("accuracy", metrics["accuracy"]), ("top1_error", metrics["top1_error"])]
    with open(out_dir / "eval_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerows(rows)
        w.writerows((f"train_loss_epoch{i}", v) for i, v in enumerate(metrics["train_losses"]))
    if metrics["train_losses"]:
        training_figure(metrics["train_losses"], out_dir / "training_loss.png")
    for k, v in rows:
        click.echo(f"{k}\t{v}")


@cli.command("count-space")
@click.option("--opset", type=click.Choice(sorted(OP_SETS)), default="o2d", show_default=True, help="Operation set.")
@click.option("--n-int", type=int, default=4, show_default=True, help="Intermediate nodes per cell.")
@click.option("--k", type=int, default=2, show_default=True, help="Inputs kept per node.")
@click.option("--cell-types", type=int, default=2, show_default=True, help="Number of distinct cell types.")
@click.option("--state", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Count what remains reachable from a search checkpoint instead.")
def count_space(opset, n_int, k, cell_types, state):
    """Print the exact number of reachable architectures."""
    with _errors():
        if state is not None:
            from .search import graphs_from_checkpoint

            graphs = graphs_from_checkpoint(state)
        else:
            video = opset in VIDEO_ONLY_SETS
            types = VIDEO_TYPES if video else IMAGE_TYPES
            if not 1 <= cell_types <= len(types):
                raise ValueError(f"--cell-types must be in 1..{len(types)} for {opset}")
            graphs = {ct: CellGraph(ct, opset, video, n_int, k) for ct in types[:cell_types]}
        for ct, g in graphs.items():
            click.echo(f"{ct}\t{count_reachable({ct: g})}")
        total = count_reachable(graphs)
    click.echo(f"count\t{total}")
    click.echo(f"scientific\t{float(total):.2e}")


@cli.command()
@click.argument("genotype", type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["dot", "json"]), default="dot", show_default=True,
              help="DOT graph per cell type, or normalized JSON.")
@click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True, help="Output directory.")
def export(genotype, fmt, out):
    """Export GENOTYPE as DOT files or normalized JSON."""
    geno = _load_genotype(genotype)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        paths = [out_dir / "genotype.json"]
        geno.save(paths[0])
    else:
        paths = []
        for ct in geno.cells:
            paths.append(out_dir / f"{ct}.dot")
            paths[-1].write_text(genotype_to_dot(geno, ct))
    for p in paths:
        click.echo(str(p))


@cli.command()
@click.option("--opset", type=click.Choice(sorted(OP_SETS)), default="o2d", show_default=True, help="Operation set.")
@click.option("--tol", type=float, default=1e-5, show_default=True, help="Maximum relative error.")
@click.option("--channels", type=int, default=2, show_default=True, help="Channel count of the test tensors.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for inputs and weights.")
@click.option("--mixed/--no-mixed", default=False, help="Also check a relaxed edge over the whole set.")
def gradcheck(opset, tol, channels, seed, mixed):
    """Finite-difference gradient check of every operation in the set."""
    from .gradcheck import check_mixed_edge, check_op_set

    with _errors():
        rows = check_op_set(opset, channels, seed, tol)
        if mixed:
            rows.append(("mixed_edge", check_mixed_edge(opset, channels, seed, tol)))
    click.echo("op\tmax_rel_error\tresult")
    for name, rep in rows:
        click.echo(f"{name}\t{rep.max_error:.3e}\t{'pass' if rep.passed else 'FAIL'}")
    if not all(rep.passed for _, rep in rows):
        sys.exit(1)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="sdas", standalone_mode=False)
    except _Fail as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except SystemExit:
        raise
    sys.exit(0)


if __name__ == "__main__":
    main()
