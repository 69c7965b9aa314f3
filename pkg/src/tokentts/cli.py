"""Command-line interface: ``tokentts <subcommand>``."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import torch

from .checkpoint import FormatError
from .config import RUN_DIR_ENV, build_train_config, get_preset, load_config_file
from .dsp import DatasetManifest, Waveform, build_synthetic_dataset, load_waveform, save_waveform
from .evaluate import ablate_quantizers, eval_reconstruction
from .pipeline import SamplingConfig, load_models, speech_to_tokens, synthesize, tokens_to_waveform
from .tokens import TokenFile, read_tokens, write_tokens
from .train import LAST, read_metrics, summarize_metrics, train_stage


def _run_dir(run_dir: str | None) -> Path:
    return Path(run_dir or os.environ.get(RUN_DIR_ENV, "runs/default"))


def _ckpt(explicit: str | None, run_dir: str | None, stage: str) -> Path:
    return Path(explicit) if explicit else _run_dir(run_dir) / stage / LAST


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=str))


@click.group()
def main():
    """Hierarchical speech-token TTS: codec training, tokenization and synthesis."""


def _train_options(f):
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="YAML file with any of the options below; explicit flags win."),
        click.option("--manifest", type=click.Path(dir_okay=False), help="Dataset manifest (JSONL)."),
        click.option("--run-dir", help=f"Output directory (default ${RUN_DIR_ENV} or runs/default)."),
        click.option("--preset", type=click.Choice(["toy", "full"]), default=None),
        click.option("--seed", type=int),
        click.option("--fine-ckpt", type=click.Path(dir_okay=False)),
        click.option("--coarse-ckpt", type=click.Path(dir_okay=False)),
        click.option("--steps", type=int),
        click.option("--batch-size", type=int),
        click.option("--segment-len", type=int, help="Training segment in samples (multiple of 600)."),
        click.option("--lr", type=float),
        click.option("--optimizer", type=click.Choice(["adam", "radam", "radam_lookahead"])),
        click.option("--disc-start", type=int, help="Step after which the discriminators train."),
        click.option("--checkpoint-every", type=int),
        click.option("--eval-every", type=int),
        click.option("--log-every", type=int),
        click.option("--lr-min", type=float),
        click.option("--decay-start", type=int),
        click.option("--decay-horizon", type=int),
    ]
    for opt in reversed(options):
        f = opt(f)
    return f


def _train(stage: str, config_file, **cli):
    file_values = load_config_file(config_file) if config_file else {}
    try:
        cfg = build_train_config(stage, file_values, **cli)
        result = train_stage(cfg, progress=lambda m: click.echo(m, err=True))
    except (FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    _echo_json({"stage": result.stage, "checkpoint": str(result.checkpoint), "metrics": str(result.metrics),
                "iterations": result.iterations, "final": result.final})


@main.command("train-fine")
@_train_options
def train_fine(config_file, **cli):
    """Train the waveform codec (stage 1)."""
    _train("fine", config_file, **cli)


@main.command("train-coarse")
@_train_options
def train_coarse(config_file, **cli):
    """Train the single-token codec on a frozen fine codec (stage 2)."""
    _train("coarse", config_file, **cli)


@main.command("train-lm")
@_train_options
def train_lm(config_file, **cli):
    """Train the prefix LM on coarse tokens (stage 3)."""
    _train("lm", config_file, **cli)


@main.command("make-dataset")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0)
@click.option("--preset", type=click.Choice(["toy", "full"]), default="toy")
@click.option("--wav/--recipe", default=False, help="Render WAV files instead of storing synthesis recipes.")
def make_dataset(out_dir, seed, preset, wav):
    """Write the synthetic harmonic-tone corpus and its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_synthetic_dataset(get_preset(preset).synth, seed)
    if wav:
        (out / "wav").mkdir(exist_ok=True)
        for e in manifest.entries:
            rel = f"wav/{e.id}.wav"
            save_waveform(manifest.load_audio(e), out / rel)
            e.source = rel
    manifest.save(out / "manifest.jsonl")
    click.echo(str(out / "manifest.jsonl"))


@main.command()
@click.argument("wav", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "prefix", required=True, help="Writes PREFIX.coarse.tok and PREFIX.fine.tok.")
@click.option("--run-dir")
@click.option("--fine-ckpt")
@click.option("--coarse-ckpt")
def encode(wav, prefix, run_dir, fine_ckpt, coarse_ckpt):
    """Waveform -> coarse token file and fine token grid file."""
    try:
        models = load_models(_ckpt(fine_ckpt, run_dir, "fine"), _ckpt(coarse_ckpt, run_dir, "coarse"))
        coarse, grid = speech_to_tokens(load_waveform(wav), models)
    except (FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    rate = models.frame_rate
    write_tokens(TokenFile(coarse.indices, rate, models.coarse.cfg.codebook_size), f"{prefix}.coarse.tok")
    write_tokens(TokenFile(grid, rate, models.fine.cfg.codebook_size), f"{prefix}.fine.tok")
    click.echo(f"{len(coarse)} frames -> {prefix}.coarse.tok, {prefix}.fine.tok")


@main.command()
@click.argument("tokens", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_wav", required=True)
@click.option("--run-dir")
@click.option("--fine-ckpt")
@click.option("--coarse-ckpt")
@click.option("--fine-mode", type=click.Choice(["argmax", "sample"]), default="argmax")
@click.option("--seed", type=int, default=0)
def decode(tokens, out_wav, run_dir, fine_ckpt, coarse_ckpt, fine_mode, seed):
    """Token file -> waveform. Single-layer files are treated as coarse tokens."""
    try:
        tf = read_tokens(tokens)
        if tf.n_q == 1:
            models = load_models(_ckpt(fine_ckpt, run_dir, "fine"), _ckpt(coarse_ckpt, run_dir, "coarse"))
            w, _ = tokens_to_waveform(tf.indices, models, fine_mode, seed)
        else:
            models = load_models(_ckpt(fine_ckpt, run_dir, "fine"))
            if tf.codebook_size != models.fine.cfg.codebook_size:
                raise ValueError(f"token file K={tf.codebook_size} does not match fine codec K={models.fine.cfg.codebook_size}")
            with torch.no_grad():
                w = Waveform(models.fine.decode_tokens(tf.indices[None])[0].numpy(), models.fine.cfg.sample_rate)
    except (FileNotFoundError, ValueError, FormatError) as exc:
        raise click.ClickException(str(exc)) from exc
    save_waveform(w, out_wav)
    click.echo(f"{len(w)} samples -> {out_wav}")


@main.command("synthesize")
@click.option("--text", required=True)
@click.option("--speaker", type=int, default=0)
@click.option("--out", "out_wav", required=True)
@click.option("--run-dir")
@click.option("--fine-ckpt")
@click.option("--coarse-ckpt")
@click.option("--lm-ckpt")
@click.option("--top-p", type=float, default=0.9)
@click.option("--temperature", type=float, default=1.0)
@click.option("--seed", type=int, default=0)
@click.option("--greedy", is_flag=True)
@click.option("--fine-mode", type=click.Choice(["argmax", "sample"]), default="argmax")
@click.option("--max-len", type=int, default=512)
def synthesize_cmd(text, speaker, out_wav, run_dir, fine_ckpt, coarse_ckpt, lm_ckpt, top_p, temperature, seed, greedy,
                   fine_mode, max_len):
    """Text -> waveform through all three stages."""
    try:
        models = load_models(_ckpt(fine_ckpt, run_dir, "fine"), _ckpt(coarse_ckpt, run_dir, "coarse"),
                             _ckpt(lm_ckpt, run_dir, "lm"))
        result = synthesize(text, speaker, models, SamplingConfig(top_p, temperature, seed, greedy, fine_mode, max_len))
    except (FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    save_waveform(result.waveform, out_wav)
    note = " (no end token before max-len)" if result.truncated else ""
    click.echo(f"{len(result.coarse)} tokens, {len(result.waveform)} samples -> {out_wav}{note}")


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="eval")
@click.option("--run-dir")
@click.option("--fine-ckpt")
@click.option("--coarse-ckpt")
@click.option("--fine-only", is_flag=True)
@click.option("--json", "json_out", type=click.Path(dir_okay=False))
def eval_cmd(manifest, split, run_dir, fine_ckpt, coarse_ckpt, fine_only, json_out):
    """Reconstruction metrics on a manifest split."""
    try:
        models = load_models(_ckpt(fine_ckpt, run_dir, "fine"),
                             None if fine_only else _ckpt(coarse_ckpt, run_dir, "coarse"))
        report = eval_reconstruction(models, DatasetManifest.load(manifest), split).to_dict()
    except (FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    if json_out:
        Path(json_out).write_text(json.dumps(report, indent=2, sort_keys=True))
    _echo_json({k: report[k] for k in ("mean", "perplexity", "bitrate_kbps")})


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="eval")
@click.option("--run-dir")
@click.option("--fine-ckpt")
@click.option("--n-active", default="1,2,4,8,16", help="Comma-separated quantizer counts.")
def ablate(manifest, split, run_dir, fine_ckpt, n_active):
    """Reconstruction error against the number of active fine quantizers."""
    try:
        counts = [int(n) for n in n_active.split(",")]
        models = load_models(_ckpt(fine_ckpt, run_dir, "fine"))
        m = DatasetManifest.load(manifest)
        table = ablate_quantizers(models.fine, [m.load_audio(e) for e in m.split(split)], counts)
    except (FileNotFoundError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(f"{'n_active':>8} {'kbps':>7} {'stft_dist':>10} {'snr_db':>8}")
    for row in table:
        click.echo(f"{row['n_active']:>8} {row['bitrate_kbps']:>7.3f} {row['mean_stft_distance']:>10.4f} "
                   f"{row['mean_snr_db']:>8.2f}")


@main.command()
@click.argument("metrics", type=click.Path(exists=True, dir_okay=False))
def report(metrics):
    """Summarise a metrics.jsonl log."""
    try:
        _echo_json(summarize_metrics(read_metrics(metrics)))
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc


if __name__ == "__main__":
    sys.exit(main())
