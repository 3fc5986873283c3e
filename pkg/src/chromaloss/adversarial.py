"""Adversarial objectives: vanilla GAN, WGAN, and WGAN with gradient penalty.

The critic scores assembled RGB images. It carries no batch-coupled
normalization anywhere (group/layer norm only), since the gradient penalty
is computed per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .colorspace import ImageBatch


class AdversarialError(ValueError):
    pass


class NanLossError(RuntimeError):
    """A training term went non-finite; carries the offending term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} (value {value})")
        self.term = term


@dataclass
class AdversarialSpec:
    kind: str = "wgan_gp"  # or "vanilla"
    gp_lambda: float = 10.0
    content_weight: float = 1.0
    adversarial_weight: float = 0.01
    critic_steps_per_gen_step: int = 5
    # Strict mode uses the original saturating generator term
    # log(1 - sigmoid(D(fake))) instead of the non-saturating -log sigmoid.
    vanilla_saturating: bool = False

    def validate(self) -> None:
        if self.kind not in ("vanilla", "wgan_gp"):
            raise AdversarialError(f"unknown adversarial kind {self.kind!r}")
        if self.gp_lambda < 0:
            raise AdversarialError("gp_lambda must be >= 0")
        if self.kind == "vanilla" and self.gp_lambda != 0:
            raise AdversarialError("gradient penalty applies to wgan_gp only")
        if self.critic_steps_per_gen_step < 1:
            raise AdversarialError("critic_steps_per_gen_step must be >= 1")


class Critic(nn.Module):
    """Five stride-2 3x3 convolutions (LeakyReLU 0.2, group norm) and a 1x1
    score head whose map is averaged into one scalar per image."""

    def __init__(self, in_channels: int = 3, base_filters: int = 64):
        super().__init__()
        widths = [base_filters, base_filters * 2, base_filters * 4, base_filters * 8, base_filters * 8]
        layers: list[nn.Module] = []
        c_in = in_channels
        for w in widths:
            layers.append(nn.Conv2d(c_in, w, 3, stride=2, padding=1))
            layers.append(nn.GroupNorm(1, w))
            layers.append(nn.LeakyReLU(0.2))
            c_in = w
        self.features = nn.Sequential(*layers)
        self.score = nn.Conv2d(c_in, 1, 1)

    def forward(self, rgb: Tensor) -> Tensor:
        """B x 3 x H x W -> per-image scalar scores (B,)."""
        patch_scores = self.score(self.features(rgb))
        return patch_scores.flatten(1).mean(dim=1)


def _as_tensor(x) -> Tensor:
    return x.values if isinstance(x, ImageBatch) else x


def vanilla_gan_losses(
    d_real: Tensor, d_fake: Tensor, saturating: bool = False
) -> tuple[Tensor, Tensor]:
    """Binary-cross-entropy adversarial losses from pre-sigmoid logits.

    Generator loss defaults to the non-saturating -log sigmoid(D(fake));
    ``saturating=True`` selects the original log(1 - sigmoid(D(fake))).
    """
    critic_loss = -(F.logsigmoid(d_real).mean() + F.logsigmoid(-d_fake).mean())
    if saturating:
        gen_loss = F.logsigmoid(-d_fake).mean()
    else:
        gen_loss = -F.logsigmoid(d_fake).mean()
    return critic_loss, gen_loss


def wgan_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Negated Wasserstein objective for minimization."""
    critic_loss = d_fake.mean() - d_real.mean()
    gen_loss = -d_fake.mean()
    return critic_loss, gen_loss


def interpolate_samples(real, fake, rng: torch.Generator) -> Tensor:
    """Per-sample convex combination t*real + (1-t)*fake, t ~ U[0,1]."""
    real, fake = _as_tensor(real), _as_tensor(fake)
    if real.shape != fake.shape:
        raise AdversarialError(f"shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    t = torch.rand(real.shape[0], 1, 1, 1, generator=rng, dtype=real.dtype)
    return t * real + (1.0 - t) * fake


def gradient_penalty_at(critic, u_hat: Tensor) -> Tensor:
    """Mean squared deviation of the critic's input-gradient norm from 1,
    evaluated at the given samples. Differentiable w.r.t. critic weights."""
    u_hat = u_hat.detach().requires_grad_(True)
    scores = critic(u_hat)
    (grads,) = torch.autograd.grad(
        scores, u_hat, grad_outputs=torch.ones_like(scores), create_graph=True
    )
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def gradient_penalty(critic, real, fake, rng: torch.Generator) -> Tensor:
    return gradient_penalty_at(critic, interpolate_samples(real, fake, rng))


@dataclass
class StepReport:
    """Scalar terms of one adversarial training step."""

    step: int
    terms: dict[str, float] = field(default_factory=dict)
    critic_updates: int = 0
    gen_updates: int = 0

    def as_log_line(self) -> str:
        parts = [f"step={self.step}"] + [f"{k}={v:.6g}" for k, v in sorted(self.terms.items())]
        return " ".join(parts)


def _check_finite(name: str, value: Tensor) -> Tensor:
    if not torch.isfinite(value).all():
        raise NanLossError(name, float(value.detach()))
    return value


def adversarial_train_step(
    gen,
    critic: Critic,
    batch,
    content_loss_fn,
    spec: AdversarialSpec,
    gen_optimizer,
    critic_optimizer,
    rng: torch.Generator,
    step: int = 0,
    assemble_fn=None,
) -> StepReport:
    """One adversarial round: several critic updates, then one generator
    update on content_weight * content + adversarial_weight * gen loss.

    ``content_loss_fn(prediction)`` returns the content term for a generator
    prediction; ``assemble_fn(prediction)`` maps it to the RGB tensor the
    critic scores (identity when None). ``batch`` provides ``gray3`` and
    ``rgb`` ImageBatches.
    """
    spec.validate()
    report = StepReport(step=step)
    real_rgb = batch.rgb.values

    # One fake batch serves all critic updates: the generator is fixed here.
    with torch.no_grad():
        fake_pred = gen(batch.gray3)
        fake_rgb = assemble_fn(fake_pred) if assemble_fn else fake_pred.values

    for _ in range(spec.critic_steps_per_gen_step):
        critic_optimizer.zero_grad()
        d_real = critic(real_rgb)
        d_fake = critic(fake_rgb)
        if spec.kind == "vanilla":
            critic_loss, _ = vanilla_gan_losses(d_real, d_fake, spec.vanilla_saturating)
        else:
            critic_loss, _ = wgan_losses(d_real, d_fake)
            if spec.gp_lambda > 0:
                gp = _check_finite("gp", gradient_penalty(critic, real_rgb, fake_rgb, rng))
                report.terms["gp"] = float(gp.detach())
                critic_loss = critic_loss + spec.gp_lambda * gp
        _check_finite("critic", critic_loss).backward()
        critic_optimizer.step()
        report.critic_updates += 1
        report.terms["critic"] = float(critic_loss.detach())

    gen_optimizer.zero_grad()
    pred = gen(batch.gray3)
    content = _check_finite("content", content_loss_fn(pred))
    report.terms["content"] = float(content.detach())
    total = spec.content_weight * content
    if spec.adversarial_weight != 0:
        fake_rgb = assemble_fn(pred) if assemble_fn else pred.values
        d_fake = critic(fake_rgb)
        if spec.kind == "vanilla":
            _, gen_loss = vanilla_gan_losses(d_fake.detach(), d_fake, spec.vanilla_saturating)
        else:
            _, gen_loss = wgan_losses(d_fake.detach(), d_fake)
        _check_finite("adv_gen", gen_loss)
        report.terms["adv_gen"] = float(gen_loss.detach())
        total = total + spec.adversarial_weight * gen_loss
    report.terms["total"] = float(_check_finite("total", total).detach())
    total.backward()
    gen_optimizer.step()
    report.gen_updates += 1
    return report


def assert_no_batch_norm(critic: nn.Module) -> None:
    """Structural check: batch-coupled normalization breaks the per-sample
    gradient penalty."""
    for name, module in critic.named_modules():
        if isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d, nn.BatchNorm3d, nn.SyncBatchNorm)):
            raise AdversarialError(f"critic must not contain batch norm (found at {name!r})")
