"""Command-line surface.

Every command resolves its settings (flags > --config JSON file > defaults),
funnels all randomness through one seed, and writes a run manifest before
exiting, success or failure. Exit codes: 0 ok, 2 validation/configuration
problem, 3 runtime abort.
"""

from __future__ import annotations

import datetime
import json
import sys
from pathlib import Path

import click

from . import __version__
from .backend.registry import available_backends, backend_for_bank_id, get_backend
from .bank import bank_load, bank_save
from .benchmark import (
    DatasetResult,
    SuiteEvaluation,
    evaluate_dataset,
    load_image,
    load_pairs_dir,
    load_suite,
    render_table,
    save_image,
)
from .editor import EditConfig, edit_image
from .errors import EditBankError, TrainingDivergedError, ValidationError
from .initializer import (
    DEFAULT_CAPTION_SIZE,
    DEFAULT_TRUNCATION,
    PhraseVocabulary,
    propose_instruction,
)
from .inversion import ExemplarSet, InversionConfig, run_inversion

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _apply_config_file(ctx: click.Context, params: dict, command: str, manifest_path) -> dict:
    """Fill parameters from --config JSON wherever the flag wasn't given.

    A bad config file is a validation failure: the manifest is still
    written and the process exits 2.
    """
    config_path = params.pop("config", None)
    if not config_path:
        return params
    try:
        try:
            overrides = json.loads(Path(config_path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config file {config_path}: {exc}") from exc
        for key, value in overrides.items():
            name = key.replace("-", "_")
            if name not in params:
                raise ValidationError(
                    f"config file {config_path}: unknown key {key!r}"
                )
            source = ctx.get_parameter_source(name)
            if source is not None and source.name == "DEFAULT":
                params[name] = value
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        manifest = _ManifestWriter(command, manifest_path, dict(params))
        manifest.finish("error", EXIT_VALIDATION, str(exc))
        sys.exit(EXIT_VALIDATION)
    return params


class _ManifestWriter:
    """Collects run facts and guarantees the manifest lands on disk."""

    def __init__(self, command: str, path: Path, config: dict):
        self.path = Path(path)
        self.doc = {
            "command": command,
            "tool_version": __version__,
            "config": config,
            "seed": config.get("seed"),
            "inputs": {},
            "outputs": {},
            "status": "running",
            "error": None,
            "started_at": _utc_now(),
            "finished_at": None,
            "exit_code": None,
        }

    def finish(self, status: str, exit_code: int, error: str | None = None) -> None:
        self.doc.update(
            status=status,
            exit_code=exit_code,
            error=error,
            finished_at=_utc_now(),
        )
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self.doc, indent=2, default=str), "utf-8")
        except OSError as exc:
            click.echo(f"warning: could not write manifest {self.path}: {exc}", err=True)


def _execute(command: str, manifest_path, config: dict, body) -> None:
    """Run a command body with manifest bookkeeping and exit-code mapping."""
    manifest = _ManifestWriter(command, manifest_path, config)
    try:
        body(manifest)
    except TrainingDivergedError as exc:
        click.echo(f"error: {exc}", err=True)
        manifest.finish("error", EXIT_RUNTIME, str(exc))
        sys.exit(EXIT_RUNTIME)
    except (ValidationError, EditBankError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        manifest.finish("error", EXIT_VALIDATION, str(exc))
        sys.exit(EXIT_VALIDATION)
    except Exception as exc:  # pragma: no cover - unexpected failures
        click.echo(f"error: {exc}", err=True)
        manifest.finish("error", EXIT_RUNTIME, str(exc))
        sys.exit(EXIT_RUNTIME)
    manifest.finish("ok", EXIT_OK)


@click.group(name="editbank")
@click.version_option(version=__version__)
def main():
    """Invert editing effects from image pairs and apply them to new images."""


@main.command("invert")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--init-text", default=None, help="Skip the initializer and seed from this text.")
@click.option("--no-init", is_flag=True, help="Seed from the empty instruction (fixed-length blocks).")
@click.option("--vocab", "vocab_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--j", "segments", default=5, show_default=True, type=int)
@click.option("--steps-per-segment", default=1000, show_default=True, type=int)
@click.option("--lr", "learning_rate", default=0.001, show_default=True, type=float)
@click.option("--batch-size", default=1, show_default=True, type=int)
@click.option("--optimizer", "optimizer_kind", default="adam", show_default=True,
              type=click.Choice(["adam", "sgd"]))
@click.option("--r", "caption_size", default=DEFAULT_CAPTION_SIZE, show_default=True, type=int)
@click.option("--eta", default=DEFAULT_TRUNCATION, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--backend", "backend_id", default="toy", show_default=True)
@click.option("--config", default=None, type=click.Path(exists=True, dir_okay=False),
              help="JSON file with flag defaults.")
@click.option("--manifest", "manifest_path", default=None, type=click.Path(dir_okay=False))
@click.pass_context
def cmd_invert(ctx, **params):
    """Learn an instruction bank from a directory of before/after pairs."""
    out_path = Path(params["out_path"])
    manifest_path = params.pop("manifest_path") or f"{out_path}.manifest.json"
    params = _apply_config_file(ctx, params, "invert", manifest_path)

    def body(manifest):
        if params["init_text"] is not None and params["no_init"]:
            raise ValidationError("--init-text and --no-init are mutually exclusive")
        manifest.doc["inputs"]["data"] = str(params["data_dir"])
        pairs = load_pairs_dir(params["data_dir"])
        images = [(load_image(b), load_image(a)) for b, a in pairs]
        backend = get_backend(params["backend_id"], params["seed"])

        if params["no_init"]:
            init_text = None
        elif params["init_text"] is not None:
            init_text = params["init_text"]
        else:
            vocab = (
                PhraseVocabulary.load(params["vocab_path"])
                if params["vocab_path"]
                else PhraseVocabulary.bundled()
            )
            outcome = propose_instruction(
                [b for b, _ in images],
                [a for _, a in images],
                vocab,
                backend.embedder,
                r=params["caption_size"],
                eta=params["eta"],
            )
            init_text = outcome.instruction_text
            manifest.doc["outputs"]["initializer"] = {
                "p_x": outcome.p_x,
                "p_y": outcome.p_y,
                "instruction_text": outcome.instruction_text,
            }
        manifest.doc["config"]["init_text"] = init_text

        config = InversionConfig(
            steps_per_segment=params["steps_per_segment"],
            learning_rate=params["learning_rate"],
            batch_size=params["batch_size"],
            segments=params["segments"],
            seed=params["seed"],
            optimizer_kind=params["optimizer_kind"],
        )
        exemplars = ExemplarSet(pairs=images)
        bank, trace = run_inversion(
            backend, exemplars, init_text, config,
            checkpoint_path=f"{out_path}.ckpt",
        )
        out_path.parent.mkdir(parents=True, exist_ok=True)
        bank_save(bank, out_path)
        trace_path = f"{out_path}.trace.jsonl"
        Path(trace_path).write_text(trace.to_jsonl() + "\n", "utf-8")
        manifest.doc["outputs"].update(
            bank=str(out_path),
            trace=trace_path,
            m=bank.token_count,
            final_loss=trace.records[-1].loss,
            wall_time_s=trace.wall_time,
        )
        click.echo(f"wrote {out_path} (m={bank.token_count}, j={bank.segment_count})")

    run_config = {k: v for k, v in params.items() if k not in ("out_path", "data_dir")}
    run_config["steps_total"] = params["steps_per_segment"] * params["segments"]
    _execute("invert", manifest_path, run_config, body)


@main.command("edit")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--switch-t", default=None, type=int,
              help="Apply the bank only at timesteps >= this value.")
@click.option("--s-t", "s_text", default=7.5, show_default=True, type=float)
@click.option("--s-i", "s_image", default=1.5, show_default=True, type=float)
@click.option("--steps", default=20, show_default=True, type=int)
@click.option("--sigma-min", default=None, type=float)
@click.option("--sigma-max", default=None, type=float)
@click.option("--rho", default=7.0, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", default=None, type=click.Path(dir_okay=False))
@click.pass_context
def cmd_edit(ctx, **params):
    """Apply a trained instruction bank to one image."""
    out_path = Path(params["out_path"])
    manifest_path = params.pop("manifest_path") or f"{out_path}.manifest.json"
    params = _apply_config_file(ctx, params, "edit", manifest_path)

    def body(manifest):
        manifest.doc["inputs"].update(
            bank=str(params["bank_path"]), image=str(params["image_path"])
        )
        bank = bank_load(params["bank_path"])
        backend = backend_for_bank_id(bank.backend_id, params["seed"])
        config = EditConfig(
            s_text=params["s_text"],
            s_image=params["s_image"],
            steps=params["steps"],
            sigma_min=params["sigma_min"],
            sigma_max=params["sigma_max"],
            rho=params["rho"],
            seed=params["seed"],
            switch_t=params["switch_t"],
        )
        resolved = config.resolved(backend)
        manifest.doc["config"].update(
            sigma_min=resolved.sigma_min, sigma_max=resolved.sigma_max
        )
        edited = edit_image(backend, bank, load_image(params["image_path"]), config)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        save_image(out_path, edited)
        manifest.doc["outputs"]["image"] = str(out_path)
        click.echo(f"wrote {out_path}")

    run_config = {k: v for k, v in params.items()
                  if k not in ("out_path", "bank_path", "image_path")}
    _execute("edit", manifest_path, run_config, body)


@main.command("evaluate")
@click.option("--bench", "bench_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--banks", "banks_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--strict", is_flag=True, help="Fail when any dataset lacks a bank.")
@click.option("--s-t", "s_text", default=7.5, show_default=True, type=float)
@click.option("--s-i", "s_image", default=1.5, show_default=True, type=float)
@click.option("--steps", default=20, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", default=None, type=click.Path(dir_okay=False))
@click.pass_context
def cmd_evaluate(ctx, **params):
    """Evaluate per-dataset banks over a benchmark suite."""
    report_path = Path(params["report_path"])
    manifest_path = params.pop("manifest_path") or f"{report_path}.manifest.json"
    params = _apply_config_file(ctx, params, "evaluate", manifest_path)

    def body(manifest):
        manifest.doc["inputs"].update(
            bench=str(params["bench_dir"]), banks=str(params["banks_dir"])
        )
        suite = load_suite(params["bench_dir"])
        banks_dir = Path(params["banks_dir"])
        evaluation = SuiteEvaluation()
        skipped = []
        for dataset in suite.datasets:
            bank_file = banks_dir / f"{dataset.name}.itb"
            if not bank_file.is_file():
                skipped.append(dataset.name)
                click.echo(f"warning: no bank for dataset {dataset.name!r}", err=True)
                continue
            bank = bank_load(bank_file)
            backend = backend_for_bank_id(bank.backend_id, params["seed"])
            config = EditConfig(
                s_text=params["s_text"],
                s_image=params["s_image"],
                steps=params["steps"],
                seed=params["seed"],
            )

            def edit_fn(image, _backend=backend, _bank=bank, _config=config):
                return edit_image(_backend, _bank, image, _config)

            try:
                report = evaluate_dataset(
                    dataset, edit_fn, backend.embedder, backend.feature_provider
                )
            except Exception as exc:
                evaluation.failures[dataset.name] = str(exc)
                continue
            evaluation.results.append(
                DatasetResult(dataset.name, dataset.category, report)
            )
        if skipped and params["strict"]:
            raise ValidationError(
                f"datasets without banks: {', '.join(sorted(skipped))}"
            )
        report_path.parent.mkdir(parents=True, exist_ok=True)
        doc = evaluation.as_dict()
        doc["skipped"] = sorted(skipped)
        report_path.write_text(json.dumps(doc, indent=2) + "\n", "utf-8")
        manifest.doc["outputs"].update(report=str(report_path), skipped=sorted(skipped))
        click.echo(render_table(evaluation))

    run_config = {k: v for k, v in params.items()
                  if k not in ("bench_dir", "banks_dir", "report_path")}
    _execute("evaluate", manifest_path, run_config, body)


@main.command("init-preview")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--vocab", "vocab_path", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--r", "caption_size", default=DEFAULT_CAPTION_SIZE, show_default=True, type=int)
@click.option("--eta", default=DEFAULT_TRUNCATION, show_default=True, type=float)
@click.option("--backend", "backend_id", default="toy", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--config", default=None, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", "manifest_path", default=None,
              type=click.Path(dir_okay=False),
              help="Defaults to ./editbank-init-preview.manifest.json")
@click.pass_context
def cmd_init_preview(ctx, **params):
    """Show the initializer's phrase audit trail for a pairs directory."""
    manifest_path = params.pop("manifest_path") or "editbank-init-preview.manifest.json"
    params = _apply_config_file(ctx, params, "init-preview", manifest_path)

    def body(manifest):
        manifest.doc["inputs"]["data"] = str(params["data_dir"])
        pairs = load_pairs_dir(params["data_dir"])
        images = [(load_image(b), load_image(a)) for b, a in pairs]
        backend = get_backend(params["backend_id"], params["seed"])
        vocab = (
            PhraseVocabulary.load(params["vocab_path"])
            if params["vocab_path"]
            else PhraseVocabulary.bundled()
        )
        outcome = propose_instruction(
            [b for b, _ in images],
            [a for _, a in images],
            vocab,
            backend.embedder,
            r=params["caption_size"],
            eta=params["eta"],
        )
        half = len(outcome.scores) // 2
        for label, scores in (
            ("before side", outcome.scores[:half]),
            ("after side", outcome.scores[half:]),
        ):
            click.echo(f"caption phrases ({label}):")
            for s in scores:
                click.echo(
                    f"  {s.phrase:<32} sim_before={s.similarity_x:+.4f} "
                    f"sim_after={s.similarity_y:+.4f} sensitivity={s.sensitivity:+.4f}"
                )
        click.echo(f"unique phrase (before side): {outcome.p_x or '-'}")
        click.echo(f"unique phrase (after side):  {outcome.p_y or '-'}")
        click.echo(f"instruction: {outcome.instruction_text or 'NONE'}")
        manifest.doc["outputs"].update(
            p_x=outcome.p_x, p_y=outcome.p_y,
            instruction_text=outcome.instruction_text,
        )

    run_config = {k: v for k, v in params.items() if k != "data_dir"}
    _execute("init-preview", manifest_path, run_config, body)


@main.command("backends")
def cmd_backends():
    """List registered backend ids."""
    for backend_id in available_backends():
        click.echo(backend_id)


if __name__ == "__main__":
    main()
