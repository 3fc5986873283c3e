"""Training loop, checkpointing, and checkpoint evaluation.

A run directory holds a flat config copy (config.toml), a step log with one
key=value line per step, checkpoints/, and reports/. Checkpoints carry
model, optimizer, and RNG state plus the config hash, so a resumed run
reproduces the uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch.nn import functional as F

from . import data as data_mod
from .adversarial import (
    AdversarialSpec,
    Critic,
    NanLossError,
    StepReport,
    adversarial_train_step,
)
from .colorspace import (
    ColorSpace,
    ColorSpaceError,
    ImageBatch,
    assemble_output,
    compress_chroma_to_gamut,
    lab_to_rgb,
    replicate_gray,
    rgb_to_gray,
)
from .data import DatasetManifest, decode_rgb
from .losses import (
    FeatureExtractor,
    LpipsConfig,
    ToyFeatureExtractor,
    VggFeatureExtractor,
    huber_loss,
    lpips,
    mae_loss,
    mse_loss,
)
from .metrics import EvalConfig, MetricReport, evaluate_set
from .unet import Generator, NetworkConfig, build

log = logging.getLogger(__name__)


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """A named training objective: content term plus optional adversarial
    term. The five studied configurations live in LOSS_MENU."""

    name: str
    content: str  # l1 | l2 | huber | lpips
    adversarial: bool


LOSS_MENU = {
    "l1": LossSpec("l1", "l1", False),
    "l2": LossSpec("l2", "l2", False),
    "huber": LossSpec("huber", "huber", False),
    "lpips": LossSpec("lpips", "lpips", False),
    "wgan_l2": LossSpec("wgan_l2", "l2", True),
    "wgan_lpips": LossSpec("wgan_lpips", "lpips", True),
}

STUDIED_LOSSES = ("l1", "l2", "lpips", "wgan_l2", "wgan_lpips")


@dataclass
class TrainConfig:
    loss: str = "l2"
    color_space: str = "lab"  # lab predicts ab; rgb predicts all three
    learning_rate: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 16
    max_steps: int = 1000
    data_seed: int = 0
    init_seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    eval_every: int = 0  # 0: no validation during training
    crop_size: int = 256
    base_filters: int = 64
    head_activation: str = "bounded"
    huber_delta: float = 1.0
    # adversarial settings (used by wgan_* losses)
    gp_lambda: float = 10.0
    content_weight: float = 1.0
    adversarial_weight: float = 0.01
    critic_steps_per_gen_step: int = 5
    # optional archive with calibrated LPIPS weights / VGG features
    lpips_weights_archive: str = ""

    def validate(self) -> None:
        if self.loss not in LOSS_MENU:
            raise TrainerError(f"unknown loss {self.loss!r}; options: {sorted(LOSS_MENU)}")
        if self.color_space not in ("lab", "rgb"):
            raise TrainerError(f"color_space must be 'lab' or 'rgb', got {self.color_space!r}")
        if self.learning_rate <= 0:
            raise TrainerError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_steps < 1:
            raise TrainerError("batch_size and max_steps must be >= 1")
        if self.crop_size % 16:
            raise TrainerError("crop_size must be divisible by 16")

    @property
    def spec(self) -> LossSpec:
        return LOSS_MENU[self.loss]

    @property
    def target_space(self) -> ColorSpace:
        return ColorSpace.LAB if self.color_space == "lab" else ColorSpace.RGB

    @property
    def out_channels(self) -> int:
        return 2 if self.color_space == "lab" else 3

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            out_channels=self.out_channels,
            base_filters=self.base_filters,
            head_activation=self.head_activation,
        )

    def adversarial_spec(self) -> AdversarialSpec:
        return AdversarialSpec(
            kind="wgan_gp",
            gp_lambda=self.gp_lambda,
            content_weight=self.content_weight,
            adversarial_weight=self.adversarial_weight,
            critic_steps_per_gen_step=self.critic_steps_per_gen_step,
        )

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        lines = []
        for key, value in sorted(asdict(self).items()):
            if isinstance(value, bool):
                lines.append(f"{key} = {str(value).lower()}")
            elif isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            else:
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise TrainerError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.validate()
        return cfg


def default_extractor(cfg: TrainConfig) -> FeatureExtractor:
    """Extractor used by lpips losses: VGG features from the configured
    archive when given, else a deterministic toy extractor."""
    if cfg.lpips_weights_archive:
        from .archive import WeightArchive

        return VggFeatureExtractor(WeightArchive.load(cfg.lpips_weights_archive))
    return ToyFeatureExtractor()


def content_term_name(spec: LossSpec) -> str:
    return f"content_{spec.content}"


def _make_content_fn(cfg: TrainConfig, batch, extractor, lpips_cfg):
    """Content loss closure over a TrainingBatch; takes the prediction."""
    spec = cfg.spec
    if spec.content == "l1":
        return lambda pred: mae_loss(pred.values, batch.target.values, "l1")
    if spec.content == "l2":
        return lambda pred: mse_loss(pred.values, batch.target.values)
    if spec.content == "huber":
        return lambda pred: huber_loss(pred.values, batch.target.values, cfg.huber_delta)
    if spec.content == "lpips":
        # perceptual losses compare in RGB, so Lab predictions are assembled
        # (differentiably) before the extractor
        def fn(pred):
            rgb = assemble_output(batch.gray, pred, cfg.target_space)
            return lpips(rgb, batch.rgb, extractor, lpips_cfg)

        return fn
    raise TrainerError(f"unhandled content kind {spec.content!r}")


@dataclass
class RunState:
    step: int
    generator: Generator
    critic: Critic | None
    gen_opt: torch.optim.Adam
    critic_opt: torch.optim.Adam | None
    gp_rng: torch.Generator
    best_metric: float = math.inf


def _init_state(cfg: TrainConfig) -> RunState:
    torch.manual_seed(cfg.init_seed)
    gen = build(cfg.network_config())
    gen_opt = torch.optim.Adam(
        gen.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_epsilon
    )
    critic = critic_opt = None
    if cfg.spec.adversarial:
        critic = Critic(base_filters=min(cfg.base_filters, 64))
        critic_opt = torch.optim.Adam(
            critic.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_epsilon,
        )
    gp_rng = torch.Generator().manual_seed(cfg.init_seed + 1)
    return RunState(0, gen, critic, gen_opt, critic_opt, gp_rng)


def save_checkpoint(path: str | Path, cfg: TrainConfig, state: RunState) -> None:
    payload = {
        "step": state.step,
        "config": asdict(cfg),
        "config_hash": cfg.config_hash(),
        "generator": state.generator.state_dict(),
        "gen_opt": state.gen_opt.state_dict(),
        "critic": state.critic.state_dict() if state.critic else None,
        "critic_opt": state.critic_opt.state_dict() if state.critic_opt else None,
        "torch_rng": torch.get_rng_state(),
        "gp_rng": state.gp_rng.get_state(),
        "best_metric": state.best_metric,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[TrainConfig, RunState]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig.from_dict(payload["config"])
    if cfg.config_hash() != payload["config_hash"]:
        raise TrainerError("checkpoint config hash mismatch (corrupted or edited)")
    state = _init_state(cfg)
    state.step = payload["step"]
    state.generator.load_state_dict(payload["generator"])
    state.gen_opt.load_state_dict(payload["gen_opt"])
    if payload["critic"] is not None:
        state.critic.load_state_dict(payload["critic"])
        state.critic_opt.load_state_dict(payload["critic_opt"])
    torch.set_rng_state(payload["torch_rng"])
    state.gp_rng.set_state(payload["gp_rng"])
    state.best_metric = payload.get("best_metric", math.inf)
    return cfg, state


def _content_only_step(gen, batch, content_fn, optimizer, spec, step) -> StepReport:
    optimizer.zero_grad()
    pred = gen(batch.gray3)
    content = content_fn(pred)
    if not torch.isfinite(content):
        raise NanLossError(content_term_name(spec), float(content.detach()))
    content.backward()
    optimizer.step()
    value = float(content.detach())
    return StepReport(
        step=step,
        terms={content_term_name(spec): value, "total": value},
        gen_updates=1,
    )


def _run_loop(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    run_dir: Path,
    state: RunState,
    extractor: FeatureExtractor | None,
    val_manifest: DatasetManifest | None,
) -> Path:
    spec = cfg.spec
    if spec.content == "lpips" and extractor is None:
        extractor = default_extractor(cfg)
    lpips_cfg = LpipsConfig(taps=extractor.layer_taps) if extractor is not None else None
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(exist_ok=True)
    (run_dir / "config.toml").write_text(cfg.to_toml())
    bpe = data_mod.batches_per_epoch(manifest, cfg.batch_size)
    log_path = run_dir / "log.txt"
    mode = "a" if state.step else "w"
    with open(log_path, mode) as log_fh:
        while state.step < cfg.max_steps:
            step = state.step + 1
            epoch, offset = divmod(step - 1, bpe)
            chunks = data_mod.epoch_chunks(manifest, cfg.batch_size, cfg.data_seed, epoch)
            batch = data_mod.load_chunk(
                manifest, chunks[offset], cfg.data_seed, epoch, cfg.target_space, cfg.crop_size
            )
            content_fn = _make_content_fn(cfg, batch, extractor, lpips_cfg)
            try:
                if spec.adversarial:
                    report = adversarial_train_step(
                        state.generator,
                        state.critic,
                        batch,
                        content_fn,
                        cfg.adversarial_spec(),
                        state.gen_opt,
                        state.critic_opt,
                        state.gp_rng,
                        step=step,
                        assemble_fn=lambda pred: assemble_output(
                            batch.gray, pred, cfg.target_space
                        ).values,
                    )
                    report.terms[content_term_name(spec)] = report.terms.pop("content")
                else:
                    report = _content_only_step(
                        state.generator, batch, content_fn, state.gen_opt, spec, step
                    )
            except (NanLossError, ColorSpaceError):
                # divergence shows up either as a non-finite loss term or as
                # a non-finite network output failing batch validation
                save_checkpoint(ckpt_dir / "halt.pt", cfg, state)
                log.error("non-finite loss at step %d; halted with last-good checkpoint", step)
                raise
            state.step = step
            log_fh.write(report.as_log_line() + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_dir / f"step_{step:06d}.pt", cfg, state)
            if cfg.eval_every and val_manifest is not None and step % cfg.eval_every == 0:
                metric = _validation_lpips(cfg, state.generator, val_manifest, extractor, lpips_cfg)
                log_fh.write(f"step={step} val_lpips={metric:.6g}\n")
                if metric < state.best_metric:
                    state.best_metric = metric
                    save_checkpoint(ckpt_dir / "best.pt", cfg, state)
        save_checkpoint(ckpt_dir / "last.pt", cfg, state)
    return run_dir


def train(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    run_dir: str | Path,
    extractor: FeatureExtractor | None = None,
    val_manifest: DatasetManifest | None = None,
) -> Path:
    """Train from scratch per the config; returns the run directory."""
    cfg.validate()
    if not len(manifest):
        raise TrainerError("manifest has no usable entries")
    run_dir = Path(run_dir)
    state = _init_state(cfg)
    return _run_loop(cfg, manifest, run_dir, state, extractor, val_manifest)


def resume(
    checkpoint_path: str | Path,
    manifest: DatasetManifest,
    run_dir: str | Path,
    cfg: TrainConfig | None = None,
    extractor: FeatureExtractor | None = None,
    val_manifest: DatasetManifest | None = None,
) -> Path:
    """Continue a checkpointed run. A config, when supplied, must hash-match
    the checkpoint's (hyperparameters cannot change mid-run)."""
    stored_cfg, state = load_checkpoint(checkpoint_path)
    if cfg is not None and cfg.config_hash() != stored_cfg.config_hash():
        raise TrainerError("resume config does not match checkpoint config")
    return _run_loop(stored_cfg, manifest, Path(run_dir), state, extractor, val_manifest)


def _validation_lpips(cfg, gen, val_manifest, extractor, lpips_cfg) -> float:
    """Mean LPIPS of assembled predictions on the validation split."""
    if extractor is None:
        extractor = ToyFeatureExtractor()
        lpips_cfg = LpipsConfig(taps=extractor.layer_taps)
    was_training = gen.training
    gen.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in data_mod.batch_iterator(
            val_manifest, cfg.batch_size, cfg.data_seed, 0, cfg.target_space, cfg.crop_size
        ):
            pred = gen(batch.gray3)
            rgb = assemble_output(batch.gray, pred, cfg.target_space)
            total += float(lpips(rgb, batch.rgb, extractor, lpips_cfg)) * batch.rgb.batch_size
            count += batch.rgb.batch_size
    if was_training:
        gen.train()
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# Inference helpers shared with the CLI


def pad_to_multiple(t: torch.Tensor, multiple: int = 16) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad H and W up to the next multiple; returns the original
    size so predictions can be cropped back."""
    _, _, h, w = t.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        # reflect needs pad < dim; replicate covers tiny images
        mode = "reflect" if ph < h and pw < w else "replicate"
        t = F.pad(t, (0, pw, 0, ph), mode=mode)
    return t, (h, w)


def colorize_tensor(gen: Generator, rgb_or_gray: torch.Tensor, target_space: ColorSpace) -> ImageBatch:
    """Colorize one decoded image tensor (1 x 3 x H x W RGB in [0,1]) at its
    native resolution; color inputs are grayscaled first."""
    gray = rgb_to_gray(ImageBatch(rgb_or_gray, ColorSpace.RGB))
    gray3 = replicate_gray(gray)
    padded, (h, w) = pad_to_multiple(gray3.values)
    was_training = gen.training
    gen.eval()
    with torch.no_grad():
        pred = gen(ImageBatch(padded, ColorSpace.RGB))
    if was_training:
        gen.train()
    cropped = ImageBatch(pred.values[:, :, :h, :w], pred.space)
    if target_space is ColorSpace.LAB:
        # the original grayscale stays as the L channel; out-of-gamut chroma
        # is compressed toward neutral instead of clamped so the luminance
        # survives 8-bit output
        lab = ImageBatch(torch.cat([gray.values, cropped.values], dim=1), ColorSpace.LAB)
        return lab_to_rgb(compress_chroma_to_gamut(lab))
    return assemble_output(gray, cropped, target_space)


def evaluate(
    checkpoint_path: str | Path,
    manifest: DatasetManifest,
    embedder,
    out_dir: str | Path | None = None,
    extractor: FeatureExtractor | None = None,
    save_images: int = 0,
) -> MetricReport:
    """Run checkpoint inference over a split at original resolution and
    delegate to the metric suite; writes CSV + summary when out_dir given."""
    cfg, state = load_checkpoint(checkpoint_path)
    gen = state.generator.eval()
    if extractor is None:
        extractor = default_extractor(cfg)
    eval_cfg = EvalConfig(
        lpips_extractor=extractor, lpips_cfg=LpipsConfig(taps=extractor.layer_taps)
    )
    saved = 0
    out_dir = Path(out_dir) if out_dir else None

    def pairs():
        nonlocal saved
        for entry in manifest.active():
            gt = ImageBatch(decode_rgb(entry.path), ColorSpace.RGB)
            pred = colorize_tensor(gen, gt.values, cfg.target_space)
            if out_dir and saved < save_images:
                from .imageio import write_rgb_image

                img_dir = out_dir / "images"
                img_dir.mkdir(parents=True, exist_ok=True)
                write_rgb_image(pred, img_dir / f"{Path(entry.path).stem}.png")
                saved += 1
            yield pred, gt

    names = [Path(e.path).name for e in manifest.active()]
    report = evaluate_set(pairs(), embedder, eval_cfg, names=names)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_csv(out_dir / "per_image.csv")
        report.write_summary(out_dir / "summary.json")
    return report
