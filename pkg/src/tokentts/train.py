"""Stage-by-stage training: fine codec, then coarse codec, then the prefix LM."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, parameter_checksum, save_checkpoint
from .coarse_codec import CoarseCodec, constant_frame_error
from .config import Preset, StageHParams, TrainConfig, get_preset
from .dsp import FRAME_LEN, DatasetManifest, pad_to_frames, snr_db, tokenize_text
from .fine_codec import FineCodec
from .losses import (
    DiscriminatorBank,
    FrozenParametersError,
    coarse_codec_loss,
    discriminator_loss,
    fine_codec_loss,
    mrs_loss,
)
from .optim import lm_learning_rate, make_optimizer, set_lr
from .pipeline import (
    check_coarse_fits_fine,
    check_upstream,
    coarse_from_checkpoint,
    fine_from_checkpoint,
    freeze,
    upstream_record,
)
from .quantize import perplexity
from .prefix_lm import LMConfig, PrefixLM, lm_forward_loss, make_batch

METRICS_SCHEMA = 1
LAST = "last.ckpt"


class MissingPrerequisiteError(FileNotFoundError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


# --------------------------------------------------------------------------- metric log


class MetricLog:
    """Append-only JSON-lines log. Every record carries ``schema``, ``kind`` and ``time``."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, kind: str, **fields) -> dict:
        record = {"schema": METRICS_SCHEMA, "kind": kind, "time": round(time.time(), 3), **fields}
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        return record


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{n}: not JSON ({exc})") from exc
        if row.get("schema") != METRICS_SCHEMA:
            raise ValueError(f"{path}:{n}: unsupported metrics schema {row.get('schema')!r}")
        if "kind" not in row:
            raise ValueError(f"{path}:{n}: record without 'kind'")
        rows.append(row)
    return rows


def summarize_metrics(rows: list[dict]) -> dict:
    """First/last value of every numeric field, per record kind."""
    out: dict[str, dict] = {}
    for row in rows:
        kind = out.setdefault(row["kind"], {"count": 0})
        kind["count"] += 1
        for k, v in row.items():
            if k in ("schema", "kind", "time") or not isinstance(v, (int, float)) or isinstance(v, bool):
                continue
            kind.setdefault(f"{k}_first", v)
            kind[f"{k}_last"] = v
    return out


# --------------------------------------------------------------------------- helpers


@dataclass
class StageResult:
    stage: str
    checkpoint: Path
    metrics: Path
    iterations: int
    final: dict


def stage_dir(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / stage


def manifest_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _require(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise MissingPrerequisiteError(f"missing prerequisite: {what} checkpoint not found at {path}")
    return Path(path)


def _seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _finite(value: float, stage: str, step: int, log: MetricLog, last: Path) -> None:
    if not math.isfinite(value):
        log.write("abort", step=step, reason="non-finite loss")
        raise TrainingDivergedError(f"{stage} loss became {value} at step {step}; last good checkpoint kept at {last}")


def _clip(params, max_norm):
    if max_norm:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


class _Saver:
    def __init__(self, out: Path, stage: str, seed: int, config: dict):
        self.out, self.stage, self.seed, self.config = out, stage, seed, config
        self.last = out / LAST

    def save(self, iteration: int, state: dict, keep: bool = False) -> Path:
        ckpt = Checkpoint(self.stage, iteration, self.seed, self.config, state)
        if keep:
            save_checkpoint(ckpt, self.out / f"step_{iteration:07d}.ckpt")
        return save_checkpoint(ckpt, self.last)


def _load_split(manifest: DatasetManifest, split: str, min_len: int = FRAME_LEN) -> list[np.ndarray]:
    out = []
    for e in manifest.split(split):
        x, _ = pad_to_frames(manifest.load_audio(e).samples)
        if len(x) < min_len:
            x = np.pad(x, (0, min_len - len(x)))
        out.append(x)
    return out


def _frame_batch(rng, items: list[int], lengths: list[int], batch: int, n_frames: int):
    """(utterance index, first frame) pairs for ``batch`` windows of ``n_frames`` frames."""
    picks = []
    for _ in range(batch):
        i = items[int(rng.integers(len(items)))]
        picks.append((i, int(rng.integers(0, lengths[i] - n_frames + 1))))
    return picks


# --------------------------------------------------------------------------- fine stage


@torch.no_grad()
def fine_eval(codec: FineCodec, wavs: list[np.ndarray]) -> dict:
    was = codec.training
    codec.eval()
    snrs, dists = [], []
    for x in wavs:
        t = torch.from_numpy(x)[None]
        x_hat, _ = codec(t)
        snrs.append(snr_db(x, x_hat[0].numpy()))
        dists.append(float(mrs_loss(t, x_hat)) if len(x) >= 2048 else float("nan"))
    codec.train(was)
    return {"snr_db": float(np.mean(snrs)), "snr_db_min": float(np.min(snrs)), "mrs": float(np.nanmean(dists))}


def _train_fine(cfg: TrainConfig, hp: StageHParams, preset: Preset, manifest: DatasetManifest, out: Path,
                log: MetricLog, progress) -> StageResult:
    rng = _seed_all(cfg.seed)
    seg = hp.segment_len
    train = _load_split(manifest, "train", seg)
    evals = _load_split(manifest, "eval", seg)
    codec = FineCodec(preset.fine)
    bank = DiscriminatorBank(preset.disc)
    og = make_optimizer(codec.parameters(), hp.lr, hp.optimizer, hp.betas)
    od = make_optimizer(bank.parameters(), hp.disc_lr or hp.lr, hp.optimizer, hp.betas)
    config = {
        "stage": "fine",
        "preset": preset.name,
        "model": preset.fine.to_dict(),
        "disc": dataclasses.asdict(preset.disc),
        "hparams": hp.to_dict(),
        "manifest": manifest_digest(cfg.manifest),
    }
    saver = _Saver(out, "fine", cfg.seed, config)
    state = lambda: {"model": codec.state_dict(), "disc": bank.state_dict()}  # noqa: E731
    saver.save(0, state())
    log.write("eval", step=0, split="train", **fine_eval(codec, train))
    lengths = [len(x) // FRAME_LEN for x in train]
    n_frames = seg // FRAME_LEN

    for step in range(1, hp.steps + 1):
        picks = _frame_batch(rng, list(range(len(train))), lengths, hp.batch_size, n_frames)
        x = torch.from_numpy(np.stack([train[i][f * FRAME_LEN : f * FRAME_LEN + seg] for i, f in picks]))
        x_hat, q = codec(x)
        adversarial = step > hp.disc_start
        if adversarial:
            with torch.no_grad():
                real = bank(x)
            fake = bank(x_hat)
        else:
            real = fake = None
        rep = fine_codec_loss(x, x_hat, real, fake, q.commit_loss, hp.weights)
        _finite(rep.total, "fine", step, log, saver.last)
        og.zero_grad()
        rep.total_tensor.backward()
        _clip(codec.parameters(), hp.grad_clip)
        og.step()
        if adversarial:
            d_loss, parts = discriminator_loss(bank(x), bank(x_hat.detach()))
            _finite(d_loss.item(), "fine discriminator", step, log, saver.last)
            od.zero_grad()
            d_loss.backward()
            _clip(bank.parameters(), hp.grad_clip)
            od.step()
            rep.disc_mpd, rep.disc_msd = parts["mpd"].item(), parts["msd"].item()
        if step % hp.log_every == 0 or step == hp.steps:
            log.write("train", step=step, lr=hp.lr, **rep.row())
        if step % hp.eval_every == 0 or step == hp.steps:
            metrics = fine_eval(codec, train)
            log.write("eval", step=step, split="train", perplexity=codec.rvq.perplexities()[:4], **metrics)
            if progress:
                progress(f"fine step {step}: snr {metrics['snr_db']:.2f} dB")
        if step % hp.checkpoint_every == 0 or step == hp.steps:
            saver.save(step, state(), keep=step % hp.checkpoint_every == 0)
    final = {"train": fine_eval(codec, train)}
    if evals:
        final["eval"] = fine_eval(codec, evals)
        log.write("eval", step=hp.steps, split="eval", **final["eval"])
    return StageResult("fine", saver.last, log.path, hp.steps, final)


# --------------------------------------------------------------------------- coarse stage


@dataclass
class _FineView:
    """Frozen-fine products for one utterance."""

    feats: torch.Tensor  # (T, d) unquantized encoder output
    quantized: torch.Tensor  # (T, d)
    grid: torch.Tensor  # (T, n_q)
    wav: np.ndarray


@torch.no_grad()
def _fine_views(fine: FineCodec, wavs: list[np.ndarray]) -> list[_FineView]:
    views = []
    for x in wavs:
        feats = fine.encode(torch.from_numpy(x)[None])[0]
        q = fine.rvq(feats, update=False)
        views.append(_FineView(feats, q.quantized, q.indices, x))
    return views


def _coarse_forward(coarse: CoarseCodec, fine: FineCodec, feats: torch.Tensor):
    logits, q = coarse(feats)
    probs = torch.softmax(logits, dim=-1)
    estimate = fine.rvq.expected_decode(probs, check=False)
    return logits, estimate, fine.decode(estimate), q


@torch.no_grad()
def coarse_eval(coarse: CoarseCodec, fine: FineCodec, views: list[_FineView]) -> dict:
    was = coarse.training
    coarse.eval()
    mse, floor, snr_fine, snr_src, acc = [], [], [], [], []
    for v in views:
        logits, est, x_hat, _ = _coarse_forward(coarse, fine, v.feats[None])
        target = fine.decode(v.quantized[None])[0].numpy()
        mse.append(float(F.mse_loss(est[0], v.quantized)))
        floor.append(constant_frame_error(v.quantized))
        snr_fine.append(snr_db(target, x_hat[0].numpy()))
        snr_src.append(snr_db(v.wav, x_hat[0].numpy()))
        acc.append(float((logits[0].argmax(-1) == v.grid).float().mean()))
    coarse.train(was)
    return {
        "feature_mse": float(np.mean(mse)),
        "constant_frame_mse": float(np.mean(floor)),
        "snr_vs_fine_db": float(np.mean(snr_fine)),
        "snr_db": float(np.mean(snr_src)),
        "fine_token_acc": float(np.mean(acc)),
        "vq_perplexity": perplexity(coarse.vq.cluster_size),
    }


def _load_fine(path: Path) -> tuple[Checkpoint, FineCodec]:
    ckpt = load_checkpoint(path, expect_stage="fine")
    return ckpt, freeze(fine_from_checkpoint(ckpt))


def _train_coarse(cfg: TrainConfig, hp: StageHParams, preset: Preset, manifest: DatasetManifest, out: Path,
                  log: MetricLog, progress, fine_path: Path) -> StageResult:
    rng = _seed_all(cfg.seed)
    fine_ckpt, fine = _load_fine(fine_path)
    coarse_cfg = dataclasses.replace(
        preset.coarse, latent_dim=fine.cfg.latent_dim, fine_n_q=fine.cfg.n_q, fine_codebook_size=fine.cfg.codebook_size
    )
    check_coarse_fits_fine(coarse_cfg, fine.cfg)
    fine_record = upstream_record(fine_ckpt, fine, fine_path)
    seg = hp.segment_len
    train = _fine_views(fine, _load_split(manifest, "train", seg))
    evals = _fine_views(fine, _load_split(manifest, "eval", seg))
    coarse = CoarseCodec(coarse_cfg)
    bank = DiscriminatorBank(preset.disc)
    og = make_optimizer(coarse.parameters(), hp.lr, hp.optimizer, hp.betas)
    od = make_optimizer(bank.parameters(), hp.disc_lr or hp.lr, hp.optimizer, hp.betas)
    config = {
        "stage": "coarse",
        "preset": preset.name,
        "model": coarse_cfg.to_dict(),
        "disc": dataclasses.asdict(preset.disc),
        "hparams": hp.to_dict(),
        "manifest": manifest_digest(cfg.manifest),
        "fine": fine_record,
    }
    saver = _Saver(out, "coarse", cfg.seed, config)
    state = lambda: {"model": coarse.state_dict(), "disc": bank.state_dict()}  # noqa: E731
    saver.save(0, state())
    log.write("eval", step=0, split="train", **coarse_eval(coarse, fine, train))
    n_frames = seg // FRAME_LEN
    lengths = [len(v.feats) for v in train]

    for step in range(1, hp.steps + 1):
        picks = _frame_batch(rng, list(range(len(train))), lengths, hp.batch_size, n_frames)
        sl = lambda t, f: t[f : f + n_frames]  # noqa: E731
        feats = torch.stack([sl(train[i].feats, f) for i, f in picks])
        quantized = torch.stack([sl(train[i].quantized, f) for i, f in picks])
        grid = torch.stack([sl(train[i].grid, f) for i, f in picks])
        with torch.no_grad():
            target = fine.decode(quantized)
        logits, estimate, x_hat, q = _coarse_forward(coarse, fine, feats)
        adversarial = step > hp.disc_start
        if adversarial:
            with torch.no_grad():
                real = bank(target)
            fake = bank(x_hat)
        else:
            real = fake = None
        rep = coarse_codec_loss(
            target, x_hat, real, fake, q.commit_loss, hp.weights,
            feature_target=quantized, feature_estimate=estimate, token_logits=logits, token_target=grid,
        )
        _finite(rep.total, "coarse", step, log, saver.last)
        og.zero_grad()
        rep.total_tensor.backward()
        _clip(coarse.parameters(), hp.grad_clip)
        og.step()
        if adversarial:
            d_loss, parts = discriminator_loss(bank(target), bank(x_hat.detach()))
            _finite(d_loss.item(), "coarse discriminator", step, log, saver.last)
            od.zero_grad()
            d_loss.backward()
            _clip(bank.parameters(), hp.grad_clip)
            od.step()
            rep.disc_mpd, rep.disc_msd = parts["mpd"].item(), parts["msd"].item()
        if step % hp.log_every == 0 or step == hp.steps:
            log.write("train", step=step, lr=hp.lr, **rep.row())
        if step % hp.eval_every == 0 or step == hp.steps:
            _verify_frozen(fine, fine_record["checksum"], "fine codec")
            metrics = coarse_eval(coarse, fine, train)
            log.write("eval", step=step, split="train", fine_checksum_ok=True, **metrics)
            if progress:
                progress(f"coarse step {step}: feature mse {metrics['feature_mse']:.4f}, snr {metrics['snr_db']:.2f} dB")
        if step % hp.checkpoint_every == 0 or step == hp.steps:
            saver.save(step, state(), keep=step % hp.checkpoint_every == 0)
    _verify_frozen(fine, fine_record["checksum"], "fine codec")
    final = {"train": coarse_eval(coarse, fine, train), "fine_checksum": fine_record["checksum"]}
    if evals:
        final["eval"] = coarse_eval(coarse, fine, evals)
        log.write("eval", step=hp.steps, split="eval", **final["eval"])
    return StageResult("coarse", saver.last, log.path, hp.steps, final)


def _verify_frozen(model, checksum: str, what: str) -> None:
    if parameter_checksum(model) != checksum:
        raise FrozenParametersError(f"{what} parameters changed while frozen")


# --------------------------------------------------------------------------- lm stage


@torch.no_grad()
def _coarse_tokens(fine: FineCodec, coarse: CoarseCodec, wavs: list[np.ndarray]) -> list[list[int]]:
    out = []
    for x in wavs:
        feats = fine.encode(torch.from_numpy(x)[None])
        out.append(coarse.encode(feats, update=False).indices[0].tolist())
    return out


@torch.no_grad()
def lm_eval(model: PrefixLM, data: list[tuple[list[int], int, list[int]]]) -> dict:
    was = model.training
    model.eval()
    batch = make_batch([d[0] for d in data], [d[1] for d in data], [d[2] for d in data], model.cfg.eos)
    logits, loss = lm_forward_loss(model, batch)
    valid = batch.targets != -100
    acc = float((logits.argmax(-1)[valid] == batch.targets[valid]).float().mean())
    model.train(was)
    return {"loss": float(loss), "token_acc": acc}


def _train_lm(cfg: TrainConfig, hp: StageHParams, preset: Preset, manifest: DatasetManifest, out: Path,
              log: MetricLog, progress, fine_path: Path, coarse_path: Path) -> StageResult:
    rng = _seed_all(cfg.seed)
    coarse_ckpt = load_checkpoint(coarse_path, expect_stage="coarse")
    fine_ckpt, fine = _load_fine(fine_path)
    check_upstream(coarse_ckpt.config["fine"], fine_ckpt, fine, "fine codec")
    coarse = freeze(coarse_from_checkpoint(coarse_ckpt))
    check_coarse_fits_fine(coarse.cfg, fine.cfg)
    fine_record = upstream_record(fine_ckpt, fine, fine_path)
    coarse_record = upstream_record(coarse_ckpt, coarse, coarse_path)

    vocab = manifest.vocab()
    lm_cfg = LMConfig(
        speech_codebook_size=coarse.cfg.codebook_size,
        phoneme_vocab=vocab.size,
        speakers=max(manifest.speakers) + 1,
        **preset.lm,
    )

    def examples(split):
        entries = manifest.split(split)
        if not entries:
            return []
        toks = _coarse_tokens(fine, coarse, _load_split(manifest, split))
        return [(tokenize_text(e.text, vocab).tokens, e.speaker_id, t) for e, t in zip(entries, toks)]

    train, evals = examples("train"), examples("eval")
    model = PrefixLM(lm_cfg)
    opt = make_optimizer(model.parameters(), hp.lr, hp.optimizer, hp.betas)
    lr_min = hp.lr_min if hp.lr_min is not None else hp.lr
    config = {
        "stage": "lm",
        "preset": preset.name,
        "model": lm_cfg.to_dict(),
        "vocab": vocab.to_json(),
        "hparams": hp.to_dict(),
        "manifest": manifest_digest(cfg.manifest),
        "fine": fine_record,
        "coarse": coarse_record,
    }
    saver = _Saver(out, "lm", cfg.seed, config)
    saver.save(0, {"model": model.state_dict()})
    log.write("eval", step=0, split="train", **lm_eval(model, train))
    order: list[int] = []

    for step in range(1, hp.steps + 1):
        lr = lm_learning_rate(step - 1, hp.lr, lr_min, hp.decay_start, hp.decay_horizon) if lr_min < hp.lr else hp.lr
        set_lr(opt, lr)
        idx = []
        while len(idx) < min(hp.batch_size, len(train)):
            if not order:
                order = rng.permutation(len(train)).tolist()
            idx.append(order.pop())
        chosen = [train[i] for i in idx]
        batch = make_batch([c[0] for c in chosen], [c[1] for c in chosen], [c[2] for c in chosen], lm_cfg.eos)
        _, loss = lm_forward_loss(model, batch)
        _finite(loss.item(), "lm", step, log, saver.last)
        opt.zero_grad()
        loss.backward()
        _clip(model.parameters(), hp.grad_clip)
        opt.step()
        if step % hp.log_every == 0 or step == hp.steps:
            log.write("train", step=step, lr=lr, loss=loss.item())
        if step % hp.eval_every == 0 or step == hp.steps:
            _verify_frozen(fine, fine_record["checksum"], "fine codec")
            _verify_frozen(coarse, coarse_record["checksum"], "coarse codec")
            metrics = lm_eval(model, train)
            log.write("eval", step=step, split="train", frozen_checksums_ok=True, **metrics)
            if progress:
                progress(f"lm step {step}: loss {metrics['loss']:.4f}, acc {metrics['token_acc']:.3f}")
        if step % hp.checkpoint_every == 0 or step == hp.steps:
            saver.save(step, {"model": model.state_dict()}, keep=step % hp.checkpoint_every == 0)
    final = {"train": lm_eval(model, train), "fine_checksum": fine_record["checksum"],
             "coarse_checksum": coarse_record["checksum"]}
    if evals:
        final["eval"] = lm_eval(model, evals)
        log.write("eval", step=hp.steps, split="eval", **final["eval"])
    return StageResult("lm", saver.last, log.path, hp.steps, final)


# --------------------------------------------------------------------------- entry point


def resolve_prerequisites(cfg: TrainConfig) -> dict[str, Path]:
    """Locate upstream checkpoints; raises before anything is built or written."""
    run = cfg.resolved_run_dir()
    paths: dict[str, Path] = {}
    if cfg.stage == "coarse":
        paths["fine"] = _require(Path(cfg.fine_ckpt) if cfg.fine_ckpt else stage_dir(run, "fine") / LAST, "fine codec")
    elif cfg.stage == "lm":
        coarse = _require(
            Path(cfg.coarse_ckpt) if cfg.coarse_ckpt else stage_dir(run, "coarse") / LAST, "coarse codec"
        )
        paths["coarse"] = coarse
        if cfg.fine_ckpt:
            paths["fine"] = _require(Path(cfg.fine_ckpt), "fine codec")
        else:
            recorded = load_checkpoint(coarse, expect_stage="coarse").config["fine"]["path"]
            paths["fine"] = _require(Path(recorded), "fine codec (recorded in the coarse checkpoint)")
    return paths


def train_stage(cfg: TrainConfig, progress: Callable[[str], None] | None = None) -> StageResult:
    prereq = resolve_prerequisites(cfg)
    preset = get_preset(cfg.preset)
    hp = cfg.hparams(preset)
    if hp.segment_len % FRAME_LEN:
        raise ValueError(f"segment_len {hp.segment_len} is not a multiple of {FRAME_LEN}")
    manifest = DatasetManifest.load(cfg.manifest)
    if not manifest.split("train"):
        raise ValueError("manifest has no training entries")
    out = stage_dir(cfg.resolved_run_dir(), cfg.stage)
    out.mkdir(parents=True, exist_ok=True)
    log = MetricLog(out / "metrics.jsonl")
    log.write("start", stage=cfg.stage, preset=preset.name, seed=cfg.seed, hparams=hp.to_dict(),
              upstream={k: str(v) for k, v in prereq.items()})
    if cfg.stage == "fine":
        result = _train_fine(cfg, hp, preset, manifest, out, log, progress)
    elif cfg.stage == "coarse":
        result = _train_coarse(cfg, hp, preset, manifest, out, log, progress, prereq["fine"])
    else:
        result = _train_lm(cfg, hp, preset, manifest, out, log, progress, prereq["fine"], prereq["coarse"])
    log.write("end", stage=cfg.stage, step=result.iterations, checkpoint=str(result.checkpoint))
    return result
