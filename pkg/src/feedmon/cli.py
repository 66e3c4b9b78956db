"""Batch entry points: corpus generation, detector training, ROC sweeps,
manifest replays, and the operator API server.

Every artifact-writing command drops a ``<artifact>.manifest.json`` beside
its output recording the fully resolved configuration; ``feedmon rerun``
replays a manifest and reproduces the artifact byte for byte.

Exit codes: 0 success (convergence warnings print a line and still exit 0),
2 invalid arguments or config, 3 I/O failure, 4 training diverged.
"""

import json
import warnings
from pathlib import Path

import click
from click.core import ParameterSource

from . import __version__
from .detector import (
    DynamicThresholdDetector,
    FixedThresholdDetector,
    HmmSvmDetector,
    load_detector_file,
    save_detector,
)
from .evaluation import METHODS, evaluate_roc
from .hmm import TrainingDivergedError
from .sequences import Task, generate_corpus, load_corpus, save_corpus
from .service import ServiceConfig, create_app
from .svm import ConvergenceWarning

EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

MANIFEST_FORMAT = "feedmon-manifest"
MANIFEST_VERSION = 1

DEFAULT_SWEEPS = {
    "hmm_svm": [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
    "fixed_threshold": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0],
    "dynamic_threshold": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0],
}

EXIT_CODE_HELP = (
    "Exit codes: 0 success (convergence warnings print a line and still exit "
    "0), 2 invalid arguments or config, 3 I/O failure, 4 training diverged. "
    "File formats are documented in docs/formats.md."
)


class CliError(click.ClickException):
    """ClickException carrying one of the documented exit codes."""

    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(f"i/o error: {err}", EXIT_IO) from err
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise CliError(
            f"{path}:{err.lineno}:{err.colno}: {err.msg}", EXIT_VALIDATION
        ) from err
    if not isinstance(doc, dict):
        raise CliError(f"{path}: top level must be a JSON object", EXIT_VALIDATION)
    return doc


def _overlay_config(ctx: click.Context, params: dict, config_path) -> dict:
    """Resolve effective parameters.

    Explicit command-line flags beat the config file; the config file beats
    option defaults.  Keys the command does not know are rejected rather
    than ignored so typos fail loudly.
    """
    resolved = dict(params)
    if config_path is None:
        return resolved
    doc = _load_json(config_path)
    unknown = sorted(set(doc) - set(resolved))
    if unknown:
        raise CliError(
            f"{config_path}: unknown config keys {unknown}; "
            f"expected a subset of {sorted(resolved)}",
            EXIT_VALIDATION,
        )
    for key, value in doc.items():
        if ctx.get_parameter_source(key) is not ParameterSource.COMMANDLINE:
            resolved[key] = value
    return resolved


def _write_manifest(command: str, config: dict, inputs, outputs) -> Path:
    target = Path(str(outputs[0]) + ".manifest.json")
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "command": command,
        "tool_version": __version__,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


# ------------------------------------------------------------ runners
#
# The click commands below only parse flags; these functions do the work
# from a plain parameter dict so `rerun` can invoke them from a manifest.


def run_simulate(params: dict) -> Path:
    corpus = generate_corpus(
        Task(params["task"]),
        params["n_nominal"],
        params["n_anomalous"],
        seed=params["seed"],
        duration_s=params["duration_s"],
        magnitude=params["magnitude"],
        onset_range=(params["onset_low"], params["onset_high"]),
    )
    out = Path(params["out"])
    save_corpus(corpus, out)
    _write_manifest("simulate", params, [], [out])
    click.echo(f"wrote {len(corpus)} records to {out}")
    return out


def _detector_for(method: str, n_states: int, seed: int, detector_params, hmm_params):
    kwargs = dict(detector_params or {})
    if method == "hmm_svm":
        return HmmSvmDetector(n_states=n_states, hmm_params=hmm_params, **kwargs)
    if method == "fixed_threshold":
        return FixedThresholdDetector(n_states=n_states, hmm_params=hmm_params, **kwargs)
    if method == "dynamic_threshold":
        kwargs.setdefault("seed", seed)
        return DynamicThresholdDetector(n_states=n_states, hmm_params=hmm_params, **kwargs)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def run_train(params: dict) -> Path:
    sequences = load_corpus(params["corpus"])
    detector = _detector_for(
        params["method"],
        params["n_states"],
        params["seed"],
        params["detector_params"],
        params["hmm_params"],
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        detector.fit(sequences)
    for entry in caught:
        if issubclass(entry.category, ConvergenceWarning):
            click.echo(f"warning: {entry.message}", err=True)
    trace = detector.hmm_.loglik_trace_
    click.echo(
        f"EM: {len(trace)} iterations, log-likelihood "
        f"{trace[0]:.3f} -> {trace[-1]:.3f}"
    )
    out = Path(params["out"])
    save_detector(detector, out)
    _write_manifest("train", params, [params["corpus"]], [out])
    click.echo(f"wrote {params['method']} model to {out}")
    return out


def run_evaluate(params: dict) -> Path:
    method = params["method"]
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    params = dict(params)
    if params["sweep"] is None:
        params["sweep"] = DEFAULT_SWEEPS[method]
    sequences = load_corpus(params["corpus"])
    result = evaluate_roc(
        sequences,
        method,
        params["sweep"],
        n_folds=params["k_folds"],
        seed=params["seed"],
        n_states=params["n_states"],
        subsample=params["subsample"],
        c_base=params["c_base"],
        n_clusters=params["n_clusters"],
        hmm_params=params["hmm_params"],
        svm_params=params["svm_params"],
    )
    click.echo(result.table())
    out = Path(params["out"])
    doc = {
        "format": "feedmon-roc",
        "version": 1,
        "method": result.method,
        "auc": result.auc,
        "k_folds": params["k_folds"],
        "seed": params["seed"],
        "points": [
            {
                "sweep_value": p.sweep_value,
                "tp": p.tp,
                "fp": p.fp,
                "tn": p.tn,
                "fn": p.fn,
                "tpr": p.tpr,
                "fpr": p.fpr,
            }
            for p in result.points
        ],
    }
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest("evaluate", params, [params["corpus"]], [out])
    return out


RUNNERS = {"simulate": run_simulate, "train": run_train, "evaluate": run_evaluate}


def _execute(command: str, params: dict) -> None:
    try:
        RUNNERS[command](params)
    except click.ClickException:
        raise
    except TrainingDivergedError as err:
        raise CliError(f"training diverged: {err}", EXIT_DIVERGED) from err
    except OSError as err:
        raise CliError(f"i/o error: {err}", EXIT_IO) from err
    except (ValueError, KeyError, TypeError) as err:
        raise CliError(f"invalid argument: {err}", EXIT_VALIDATION) from err


# ------------------------------------------------------------ commands


@click.group(epilog=EXIT_CODE_HELP)
@click.version_option(__version__, prog_name="feedmon")
def main():
    """Execution-monitor toolkit for robot-assisted feeding.

    Generate simulated sensor corpora, train anomaly detectors, run
    cross-validated ROC sweeps, replay run manifests, and serve the
    operator API.
    """


@main.command()
@click.option("--task", type=click.Choice([t.value for t in Task]), required=True)
@click.option("--n-nominal", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--n-anomalous", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--duration-s", type=float, default=None,
              help="Sequence length in seconds; the task profile's default when omitted.")
@click.option("--magnitude", type=float, default=2.0, show_default=True,
              help="Injected anomaly strength.")
@click.option("--onset-low", type=float, default=0.1, show_default=True)
@click.option("--onset-high", type=float, default=0.85, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file providing any of the above; explicit flags win.")
@click.pass_context
def simulate(ctx, config_path, **_ignored):
    """Generate a labeled corpus of simulated feeding sequences."""
    params = {k: v for k, v in ctx.params.items() if k != "config_path"}
    _execute("simulate", _overlay_config(ctx, params, config_path))


@main.command()
@click.option("--corpus", type=click.Path(dir_okay=False), required=True)
@click.option("--method", type=click.Choice(list(METHODS)), default="hmm_svm",
              show_default=True)
@click.option("--n-states", type=click.IntRange(min=2), default=20, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file; may also set detector_params and hmm_params objects.")
@click.pass_context
def train(ctx, config_path, **_ignored):
    """Train a detector on a corpus and save the model."""
    params = {k: v for k, v in ctx.params.items() if k != "config_path"}
    params.update({"detector_params": {}, "hmm_params": None})
    _execute("train", _overlay_config(ctx, params, config_path))


def _parse_sweep(_ctx, _param, value):
    if value is None:
        return None
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter("expected comma-separated numbers")


@main.command()
@click.option("--corpus", type=click.Path(dir_okay=False), required=True)
@click.option("--method", type=click.Choice(list(METHODS)), default="hmm_svm",
              show_default=True)
@click.option("--k-folds", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--sweep", callback=_parse_sweep, default=None,
              help="Comma-separated sweep values; the method's default sweep when omitted.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-states", type=click.IntRange(min=2), default=20, show_default=True)
@click.option("--subsample", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--c-base", type=float, default=1.0, show_default=True)
@click.option("--n-clusters", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON file; may also set hmm_params and svm_params objects.")
@click.pass_context
def evaluate(ctx, config_path, **_ignored):
    """Cross-validated ROC sweep for one method; prints the table."""
    params = {k: v for k, v in ctx.params.items() if k != "config_path"}
    params.update({"hmm_params": None, "svm_params": None})
    _execute("evaluate", _overlay_config(ctx, params, config_path))


@main.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
def rerun(manifest):
    """Re-execute a command from its manifest, reproducing outputs exactly."""
    doc = _load_json(manifest)
    for fieldname, expected in (("format", MANIFEST_FORMAT), ("version", MANIFEST_VERSION)):
        if doc.get(fieldname) != expected:
            raise CliError(
                f"{manifest}: {fieldname} must be {expected!r}, got {doc.get(fieldname)!r}",
                EXIT_VALIDATION,
            )
    command = doc.get("command")
    if command not in RUNNERS:
        raise CliError(f"{manifest}: unknown command {command!r}", EXIT_VALIDATION)
    config = doc.get("config")
    if not isinstance(config, dict):
        raise CliError(f"{manifest}: config must be an object", EXIT_VALIDATION)
    _execute(command, config)


SERVE_DEFAULTS = {
    "record_dir": None,
    "models": {},
    "host": "127.0.0.1",
    "port": 8000,
    "max_live_sessions": 1,
    "estimation_steps": 10,
    "retract_steps": 2,
    "step_delay_s": 0.0,
    "default_duration_s": None,
}


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True)
@click.option("--host", default=None, help="Override the config host.")
@click.option("--port", type=int, default=None, help="Override the config port.")
def serve(config_path, host, port):
    """Start the operator API server; stops cleanly on SIGINT/SIGTERM."""
    doc = _load_json(config_path)
    unknown = sorted(set(doc) - set(SERVE_DEFAULTS))
    if unknown:
        raise CliError(
            f"{config_path}: unknown config keys {unknown}; "
            f"expected a subset of {sorted(SERVE_DEFAULTS)}",
            EXIT_VALIDATION,
        )
    settings = {**SERVE_DEFAULTS, **doc}
    if settings["record_dir"] is None:
        raise CliError(f"{config_path}: record_dir is required", EXIT_VALIDATION)
    if host is not None:
        settings["host"] = host
    if port is not None:
        settings["port"] = port
    try:
        models = {
            task: load_detector_file(path)
            for task, path in settings["models"].items()
        }
        service_config = ServiceConfig(
            record_dir=settings["record_dir"],
            models=models,
            max_live_sessions=settings["max_live_sessions"],
            estimation_steps=settings["estimation_steps"],
            retract_steps=settings["retract_steps"],
            step_delay_s=settings["step_delay_s"],
            default_duration_s=settings["default_duration_s"],
        )
    except OSError as err:
        raise CliError(f"i/o error: {err}", EXIT_IO) from err
    except (ValueError, KeyError, TypeError, AttributeError) as err:
        raise CliError(f"invalid argument: {err}", EXIT_VALIDATION) from err
    app = create_app(service_config)

    import uvicorn

    click.echo(f"serving on http://{settings['host']}:{settings['port']}")
    uvicorn.run(app, host=settings["host"], port=settings["port"], log_level="warning")


if __name__ == "__main__":
    main()
