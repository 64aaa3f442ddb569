"""Main CLI entrypoint for FGO-SLAM."""

import sys
from pathlib import Path
from typing import NoReturn, Optional

import typer
from loguru import logger

from fgo_slam import __version__
from fgo_slam.core import evaluate_trajectories, extract_mesh_from_checkpoint, render_from_checkpoint, run_pipeline
from fgo_slam.errors import FgoError
from fgo_slam.utils import load_config

app = typer.Typer(
    name="fgo",
    help="Gaussian SLAM with an opacity field, global adjustment and direct mesh extraction",
    add_completion=False,
)


def version_callback(value: bool) -> None:
    """Print version and exit."""
    if value:
        typer.echo(f"FGO-SLAM CLI v{__version__}")
        raise typer.Exit()


def _fail(error: Exception) -> NoReturn:
    """Print the one-line error and exit non-zero."""
    if isinstance(error, FgoError):
        line = error.one_line()
    else:
        line = f"error: {type(error).__name__}: {' '.join(str(error).split())}"
    typer.echo(line, err=True)
    raise typer.Exit(1)


@app.callback()
def main(
    version: Optional[bool] = typer.Option(
        None,
        "--version",
        "-v",
        callback=version_callback,
        is_eager=True,
        help="Show version and exit",
    ),
    verbose: bool = typer.Option(
        False,
        "--verbose",
        help="Enable verbose logging",
    ),
) -> None:
    """FGO-SLAM CLI - track, map and mesh RGB-D or monocular sequences."""
    if verbose:
        logger.configure(
            handlers=[
                {
                    "sink": sys.stderr,
                    "level": "DEBUG",
                    "format": "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
                }
            ]
        )
    else:
        logger.configure(
            handlers=[
                {
                    "sink": sys.stderr,
                    "level": "INFO",
                    "format": "<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>",
                }
            ]
        )


@app.command()
def run(
    data: str = typer.Option(
        ...,
        "--data",
        "-d",
        help="Dataset directory (TUM or Replica layout) or synthetic:SHAPE[,gaussians=N,frames=N,seed=N]",
    ),
    mode: Optional[str] = typer.Option(
        None,
        "--mode",
        "-m",
        help="mono or rgbd (overrides the config file)",
    ),
    config: Optional[Path] = typer.Option(
        None,
        "--config",
        "-c",
        help="Path to configuration file",
        exists=True,
    ),
    out: Path = typer.Option(
        Path("out"),
        "--out",
        "-o",
        help="Output directory",
    ),
    workers: Optional[str] = typer.Option(
        None,
        "--workers",
        help="sequential or threaded tracking/mapping",
    ),
) -> None:
    """Track, map and extract a mesh; writes trajectory, checkpoint, mesh and metrics."""
    logger.info(f"Processing sequence: {data}")
    logger.info(f"Output will be saved to: {out}")

    try:
        run_config = load_config(config, mode=mode, workers=workers)
        artifacts = run_pipeline(data, run_config, out)
    except Exception as e:
        logger.error(f"Run failed: {e}")
        _fail(e)

    report = artifacts.report
    logger.success(f"ATE RMSE: {report.ate_rmse_m:.4f} m over {report.n_keyframes} keyframes")
    logger.success(report.image_summary())
    logger.success(f"Results saved to: {out}")


@app.command("extract-mesh")
def extract_mesh_command(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Map checkpoint file"),
    tau: Optional[float] = typer.Option(None, "--tau", help="Opacity level set in (0, 1)"),
    iterations: Optional[int] = typer.Option(None, "--iterations", help="Binary-search iterations"),
    ascii_ply: bool = typer.Option(False, "--ascii", help="Write an ascii PLY instead of binary"),
    out: Path = typer.Option(Path("mesh.ply"), "--out", "-o", help="Output PLY file"),
) -> None:
    """Extract the opacity level-set mesh from a saved map."""
    try:
        mesh = extract_mesh_from_checkpoint(checkpoint, out, tau, iterations, binary=False if ascii_ply else None)
    except Exception as e:
        logger.error(f"Mesh extraction failed: {e}")
        _fail(e)
    logger.success(f"Mesh with {mesh.num_vertices} vertices and {mesh.num_triangles} triangles saved to: {out}")


@app.command("eval")
def eval_command(
    est: Path = typer.Option(..., "--est", help="Estimated trajectory (TUM format)"),
    gt: Path = typer.Option(..., "--gt", help="Ground-truth trajectory (TUM format)"),
    similarity: bool = typer.Option(False, "--similarity", help="Align with scale (monocular runs)"),
    tolerance: float = typer.Option(0.02, "--tolerance", help="Timestamp association tolerance in seconds"),
) -> None:
    """Print the ATE RMSE of an estimated trajectory in meters."""
    try:
        value = evaluate_trajectories(est, gt, similarity, tolerance)
    except Exception as e:
        logger.error(f"Evaluation failed: {e}")
        _fail(e)
    typer.echo(f"ate_rmse_m {value!r}")


@app.command()
def render(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Map checkpoint file"),
    pose: str = typer.Option("0", "--pose", help="Keyframe index or TUM trajectory file"),
    out: Path = typer.Option(Path("render.png"), "--out", "-o", help="Output PNG"),
) -> None:
    """Render the saved map from a keyframe or a given pose."""
    try:
        path = render_from_checkpoint(checkpoint, pose, out)
    except Exception as e:
        logger.error(f"Render failed: {e}")
        _fail(e)
    logger.success(f"Render saved to: {path}")


if __name__ == "__main__":
    app()
