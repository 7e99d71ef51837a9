"""The co-training loop.

Each iteration both sub-networks predict the labeled and unlabeled
batches; whichever has the lower supervised loss acts as teacher and its
detached unlabeled prediction becomes the student's pseudo-label. The
generator step also minimizes the projection-adversarial loss with the
critic frozen; the critic then takes its own step on detached inputs.
A static mean-teacher baseline and a labeled-only baseline share the same
harness for comparison runs.
"""

from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.optim import AdamW

from dico.losses import (
    LossReport,
    LossWeights,
    adversarial_loss,
    discriminator_loss,
    seg_loss,
    unsup_loss,
)
from dico.networks import (
    BackboneConfig,
    Discriminator2D,
    MultiViewWrapper,
    build_backbone,
    fuse_for_discriminator,
)
from dico.volume import ViewGeometry, mip_project

VARIANTS = ("dico-ct", "dico-cc", "dico-tt", "mt-baseline", "supervised")


class TrainingDiverged(RuntimeError):
    """A loss term went non-finite; training aborts rather than skipping."""


@dataclass
class TrainConfig:
    total_iterations: int = 40000
    lr_base: float = 1e-2
    gamma: float = 0.9
    batch_size: int = 2  # split evenly labeled/unlabeled
    crop: tuple[int, int, int] = (96, 96, 96)
    seed: int = 0
    variant: str = "dico-ct"
    weight_decay: float = 1e-4
    ema_decay: float = 0.99  # mt-baseline only
    disc_start_iter: int = 0  # delay critic updates if training destabilizes
    hard_ce_pseudo: bool = True
    checkpoint_interval: int = 1000
    val_interval: int = 0  # 0 disables periodic validation
    crop_mode: str = "center"  # center | random

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if self.lr_base <= 0:
            raise ValueError("lr_base must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")


@dataclass
class RoleAssignment:
    teacher: str  # "M1" | "M2"
    student: str
    l1_sup: float
    l2_sup: float


@dataclass
class IterationState:
    iteration: int
    lr: float
    roles: RoleAssignment | None
    report: LossReport


def assign_roles(l1_sup: float, l2_sup: float) -> RoleAssignment:
    """Lower supervised loss teaches; M1 wins ties."""
    if not (math.isfinite(l1_sup) and math.isfinite(l2_sup)):
        raise TrainingDiverged(
            f"non-finite supervised loss: l1_sup={l1_sup}, l2_sup={l2_sup}"
        )
    if l1_sup <= l2_sup:
        return RoleAssignment("M1", "M2", l1_sup, l2_sup)
    return RoleAssignment("M2", "M1", l1_sup, l2_sup)


def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Polynomial decay from lr_base at t=0 to exactly 0 at t=T."""
    if t >= cfg.total_iterations:
        return 0.0
    return cfg.lr_base * (1.0 - t / cfg.total_iterations) ** cfg.gamma


def _check_finite(name: str, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"loss term {name} is non-finite ({float(value)})")


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def build_models(cfg: TrainConfig, m1_cfg: BackboneConfig, m2_cfg: BackboneConfig,
                 geometry: ViewGeometry | None = None,
                 disc_base_channels: int = 16, disc_layers: int = 4) -> dict:
    """Instantiate the networks a variant needs, seeded for reproducibility.

    The second network always carries the multi-view wrapper; variants only
    change the backbone kinds (conv+transformer, conv+conv, transformer+
    transformer). The mean-teacher baseline uses a single backbone plus an
    EMA copy, and the supervised baseline a single backbone.
    """
    torch.manual_seed(cfg.seed)
    kinds = {
        "dico-ct": ("conv", "transformer"),
        "dico-cc": ("conv", "conv"),
        "dico-tt": ("transformer", "transformer"),
    }
    models: dict[str, torch.nn.Module] = {}
    if cfg.variant in kinds:
        k1, k2 = kinds[cfg.variant]
        models["m1"] = build_backbone(_with_kind(m1_cfg, k1))
        models["m2"] = MultiViewWrapper(build_backbone(_with_kind(m2_cfg, k2)), geometry)
        models["disc"] = Discriminator2D(2, disc_base_channels, disc_layers)
    elif cfg.variant == "mt-baseline":
        models["m1"] = build_backbone(_with_kind(m1_cfg, "conv"))
        ema = copy.deepcopy(models["m1"])
        _set_requires_grad(ema, False)
        models["ema"] = ema
    else:  # supervised
        models["m1"] = build_backbone(_with_kind(m1_cfg, "conv"))
    return models


def _with_kind(cfg: BackboneConfig, kind: str) -> BackboneConfig:
    out = copy.deepcopy(cfg)
    out.kind = kind
    return out


class Trainer:
    def __init__(self, cfg: TrainConfig, models: dict, weights: LossWeights | None = None,
                 config_hash: str = ""):
        self.cfg = cfg
        self.models = models
        self.weights = weights if weights is not None else LossWeights()
        self.config_hash = config_hash
        self.iteration = 0
        self.rng = np.random.default_rng(cfg.seed)

        gen_params = list(models["m1"].parameters())
        if "m2" in models:
            gen_params += list(models["m2"].parameters())
        self.opt_g = AdamW(gen_params, lr=cfg.lr_base, weight_decay=cfg.weight_decay)
        self.opt_d = None
        if "disc" in models:
            self.opt_d = AdamW(models["disc"].parameters(), lr=cfg.lr_base,
                               weight_decay=cfg.weight_decay)

    # -- loss assembly -------------------------------------------------

    def compute_losses(self, img_l, mask_l, img_u):
        """Forward both sub-networks and assemble every loss term.

        Returns (terms, roles, fused) where ``terms`` holds live tensors so
        gradient-routing contracts can be probed before stepping; the critic
        is frozen while its outputs feed the adversarial term.
        """
        w = self.weights
        m1, m2 = self.models["m1"], self.models["m2"]
        logits1_l, logits1_u = m1(img_l), m1(img_u)
        logits2_l, logits2_u = m2(img_l), m2(img_u)

        l1_sup = seg_loss(logits1_l, mask_l, w)
        l2_sup = seg_loss(logits2_l, mask_l, w)
        _check_finite("l1_sup", l1_sup)
        _check_finite("l2_sup", l2_sup)
        roles = assign_roles(float(l1_sup.detach()), float(l2_sup.detach()))
        if roles.teacher == "M1":
            teacher_u, student_u = logits1_u, logits2_u
        else:
            teacher_u, student_u = logits2_u, logits1_u
        pseudo = torch.softmax(teacher_u, dim=1).detach()
        l_unsup = unsup_loss(student_u, pseudo, w, self.cfg.hard_ce_pseudo)
        _check_finite("l_unsup", l_unsup)

        terms = {"l1_sup": l1_sup, "l2_sup": l2_sup, "l_unsup": l_unsup}
        fused = None
        if "disc" in self.models:
            img_l2d = mip_project(img_l)
            img_u2d = mip_project(img_u)
            real = fuse_for_discriminator(img_l2d, mip_project(mask_l.to(img_l.dtype)))
            fake1 = fuse_for_discriminator(img_u2d, mip_project(torch.softmax(logits1_u, dim=1))[:, 1:2])
            fake2 = fuse_for_discriminator(img_u2d, mip_project(torch.softmax(logits2_u, dim=1))[:, 1:2])
            fused = {"real": real, "fake1": fake1, "fake2": fake2}
            disc = self.models["disc"]
            _set_requires_grad(disc, False)
            l_adv = adversarial_loss(disc(fake1), disc(fake2))
            _set_requires_grad(disc, True)
            _check_finite("l_adv", l_adv)
            terms["l_adv"] = l_adv
        return terms, roles, fused

    def discriminator_step_loss(self, fused):
        """Critic loss on detached fused images (no gradient into M1/M2)."""
        disc = self.models["disc"]
        l_disc = discriminator_loss(
            disc(fused["real"].detach()),
            disc(fused["fake1"].detach()),
            disc(fused["fake2"].detach()),
        )
        _check_finite("l_disc", l_disc)
        return l_disc

    # -- one iteration -------------------------------------------------

    def _set_lr(self, lr: float):
        for opt in (self.opt_g, self.opt_d):
            if opt is None:
                continue
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(self, batch_labeled, batch_unlabeled) -> IterationState:
        img_l, mask_l = batch_labeled
        img_u = batch_unlabeled[0] if isinstance(batch_unlabeled, tuple) else batch_unlabeled
        if img_l.shape[0] == 0 or img_u.shape[0] == 0:
            raise ValueError("both batches must be non-empty")
        lr = lr_schedule(self.iteration, self.cfg)
        self._set_lr(lr)

        if self.cfg.variant == "mt-baseline":
            return self._train_step_mt(img_l, mask_l, img_u, lr)
        if self.cfg.variant == "supervised":
            return self._train_step_supervised(img_l, mask_l, lr)

        terms, roles, fused = self.compute_losses(img_l, mask_l, img_u)
        w = self.weights
        total_g = (terms["l1_sup"] + terms["l2_sup"] + w.lambda_u * terms["l_unsup"])
        use_adv = "l_adv" in terms and self.iteration >= self.cfg.disc_start_iter
        if use_adv:
            total_g = total_g + w.lambda_adv * terms["l_adv"]
        self.opt_g.zero_grad(set_to_none=True)
        total_g.backward()
        self.opt_g.step()

        l_disc_val = 0.0
        if self.opt_d is not None and self.iteration >= self.cfg.disc_start_iter:
            l_disc = self.discriminator_step_loss(fused)
            self.opt_d.zero_grad(set_to_none=True)
            l_disc.backward()
            self.opt_d.step()
            l_disc_val = float(l_disc.detach())

        report = LossReport(
            l1_sup=float(terms["l1_sup"].detach()),
            l2_sup=float(terms["l2_sup"].detach()),
            l_unsup=float(terms["l_unsup"].detach()),
            l_adv=float(terms["l_adv"].detach()) if "l_adv" in terms else 0.0,
            l_disc=l_disc_val,
            l_total=float(total_g.detach()),
        )
        state = IterationState(self.iteration, lr, roles, report)
        self.iteration += 1
        return state

    def _train_step_supervised(self, img_l, mask_l, lr) -> IterationState:
        l_sup = seg_loss(self.models["m1"](img_l), mask_l, self.weights)
        _check_finite("l1_sup", l_sup)
        self.opt_g.zero_grad(set_to_none=True)
        l_sup.backward()
        self.opt_g.step()
        report = LossReport(l1_sup=float(l_sup.detach()), l_total=float(l_sup.detach()))
        state = IterationState(self.iteration, lr, None, report)
        self.iteration += 1
        return state

    def _train_step_mt(self, img_l, mask_l, img_u, lr) -> IterationState:
        """Static mean-teacher baseline: EMA teacher, MSE consistency."""
        student, teacher = self.models["m1"], self.models["ema"]
        l_sup = seg_loss(student(img_l), mask_l, self.weights)
        _check_finite("l1_sup", l_sup)
        with torch.no_grad():
            teacher_probs = torch.softmax(teacher(img_u), dim=1)
        student_probs = torch.softmax(student(img_u), dim=1)
        l_cons = torch.mean((student_probs - teacher_probs) ** 2)
        _check_finite("l_unsup", l_cons)
        total = l_sup + self.weights.lambda_u * l_cons
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        ema_update(teacher, student, self.cfg.ema_decay)
        report = LossReport(l1_sup=float(l_sup.detach()), l_unsup=float(l_cons.detach()),
                            l_total=float(total.detach()))
        state = IterationState(self.iteration, lr, None, report)
        self.iteration += 1
        return state

    # -- checkpointing -------------------------------------------------

    def save_checkpoint(self, ckpt_dir):
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for name, model in self.models.items():
            torch.save(model.state_dict(), ckpt_dir / f"{name}.pt")
        optim = {"opt_g": self.opt_g.state_dict()}
        if self.opt_d is not None:
            optim["opt_d"] = self.opt_d.state_dict()
        torch.save(optim, ckpt_dir / "optim.pt")
        manifest = {
            "config_hash": self.config_hash,
            "iteration": self.iteration,
            "variant": self.cfg.variant,
            "rng": {
                "numpy": self.rng.bit_generator.state,
                "torch": base64.b64encode(
                    torch.get_rng_state().numpy().tobytes()
                ).decode("ascii"),
            },
        }
        with open(ckpt_dir / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2)

    def load_checkpoint(self, ckpt_dir, expect_hash: bool = True):
        ckpt_dir = Path(ckpt_dir)
        with open(ckpt_dir / "manifest.json") as f:
            manifest = json.load(f)
        if expect_hash and self.config_hash and manifest["config_hash"] != self.config_hash:
            raise ValueError(
                "checkpoint/config mismatch: checkpoint hash "
                f"{manifest['config_hash']} vs current {self.config_hash}"
            )
        for name, model in self.models.items():
            model.load_state_dict(torch.load(ckpt_dir / f"{name}.pt", weights_only=True))
        optim = torch.load(ckpt_dir / "optim.pt", weights_only=False)
        self.opt_g.load_state_dict(optim["opt_g"])
        if self.opt_d is not None and "opt_d" in optim:
            self.opt_d.load_state_dict(optim["opt_d"])
        self.iteration = manifest["iteration"]
        self.rng.bit_generator.state = manifest["rng"]["numpy"]
        torch.set_rng_state(
            torch.frombuffer(
                bytearray(base64.b64decode(manifest["rng"]["torch"])), dtype=torch.uint8
            )
        )
        return manifest


def ema_update(teacher, student, decay: float):
    with torch.no_grad():
        for pt, ps in zip(teacher.parameters(), student.parameters()):
            pt.mul_(decay).add_(ps, alpha=1 - decay)
        for bt, bs in zip(teacher.buffers(), student.buffers()):
            bt.copy_(bs)


def format_log_line(state: IterationState) -> str:
    roles = state.roles.teacher if state.roles else "-"
    r = state.report
    return (
        f"t={state.iteration} lr={state.lr:.6g} teacher={roles} "
        f"l1_sup={r.l1_sup:.6f} l2_sup={r.l2_sup:.6f} l_unsup={r.l_unsup:.6f} "
        f"l_adv={r.l_adv:.6f} l_disc={r.l_disc:.6f} l_total={r.l_total:.6f}"
    )


def run_training(trainer: Trainer, labeled_stream, unlabeled_stream, out_dir,
                 log_name: str = "train.log", validate=None, stop_at: int | None = None):
    """Drive the trainer to completion, logging and checkpointing.

    ``validate`` is an optional callable (trainer, iteration) -> dict of
    scalar metrics, invoked every ``val_interval`` iterations. Resuming is
    the caller's job (load_checkpoint before calling); iterations continue
    from ``trainer.iteration``.
    """
    cfg = trainer.cfg
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / log_name
    val_path = out_dir / "val.log"
    half = max(1, cfg.batch_size // 2)
    stop = cfg.total_iterations if stop_at is None else min(stop_at, cfg.total_iterations)
    with open(log_path, "a") as log:
        while trainer.iteration < stop:
            batch_l = labeled_stream.sample(trainer.rng, half)
            batch_u = unlabeled_stream.sample(trainer.rng, half)
            state = trainer.train_step(batch_l, batch_u[0])
            log.write(format_log_line(state) + "\n")
            log.flush()
            t = trainer.iteration
            if cfg.val_interval and validate is not None and t % cfg.val_interval == 0:
                metrics = validate(trainer, t)
                with open(val_path, "a") as vf:
                    kv = " ".join(f"{k}={v:.6f}" for k, v in metrics.items())
                    vf.write(f"t={t} {kv}\n")
            if t % cfg.checkpoint_interval == 0 or t == cfg.total_iterations:
                trainer.save_checkpoint(out_dir / f"checkpoint_{t:06d}")
    final = out_dir / f"checkpoint_{trainer.iteration:06d}"
    if not final.exists():
        trainer.save_checkpoint(final)
    return final
