"""Training loops: self-supervised pretraining of the momentum pair and
supervised fine-tuning of the gaze regressor, with plateau-driven learning
rates, early stopping, resumable checkpoints, and the leave-one-subject-out
driver.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .augmentation import AugmentationConfig, Pipeline, TransformSpec, default_transforms
from .checkpoint import load_archive, save_archive, tree_to_state_dict, tree_to_tensors
from .config import ConfigError, RunConfig, config_from_dict
from .data import DatasetManifest, Sample, split_loso
from .losses import SslLossInputs, mae, negative_cosine, ssl_loss, sup_loss
from .networks import NetworkPair, build_network_pair, ema_update, tau_schedule
from .pmn import GazeRegressor


class TrainingError(RuntimeError):
    """Raised when a training run cannot proceed (NaN loss, bad checkpoint)."""


def set_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed torch and enable bitwise-reproducible kernels when requested."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


# --- schedule state machines -----------------------------------------------------


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` evaluations
    without an improvement of at least ``min_delta``; floor at ``min_lr``."""

    lr: float
    factor: float = 0.1
    patience: int = 1
    min_delta: float = 0.0
    min_lr: float = 1e-7
    best: float = math.inf
    wait: int = 0

    def step(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise TrainingError(f"plateau scheduler received non-finite metric {metric}")
        if metric < self.best - self.min_delta:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "wait": self.wait}

    def load_state(self, state: dict) -> None:
        self.lr, self.best, self.wait = state["lr"], state["best"], state["wait"]


@dataclass
class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations without improvement."""

    patience: int
    min_delta: float = 0.0
    best: float = math.inf
    count: int = 0

    def step(self, metric: float) -> bool:
        if metric < self.best - self.min_delta:
            self.best = metric
            self.count = 0
            return False
        self.count += 1
        return self.count >= self.patience

    def state(self) -> dict:
        return {"best": self.best, "count": self.count}

    def load_state(self, state: dict) -> None:
        self.best, self.count = state["best"], state["count"]


def lr_on_plateau(state: PlateauScheduler, metric: float) -> float:
    """Functional alias for one plateau-scheduler update; returns the new LR."""
    return state.step(metric)


# --- data helpers -------------------------------------------------------------------


def load_samples(
    manifest: DatasetManifest, indices: list[int], face_size: tuple[int, int] | None = None
) -> list[Sample]:
    return [manifest.load_sample(i, face_size) for i in indices]


def _stack_batch(samples: list[Sample], idxs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    faces = torch.as_tensor(np.stack([samples[i].face for i in idxs]))
    lefts = torch.as_tensor(np.stack([samples[i].left_patch for i in idxs]))
    rights = torch.as_tensor(np.stack([samples[i].right_patch for i in idxs]))
    labels = torch.as_tensor(
        np.stack([np.asarray(samples[i].label, dtype=np.float32) for i in idxs])
    )
    return faces, lefts, rights, labels


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7001, epoch])).permutation(n)


def _view_rngs(seed: int, epoch: int, index: int, parts: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence([seed, 7002, epoch, index]).spawn(parts)
    return [np.random.default_rng(c) for c in children]


def _nan_dump(out_dir: Path, stage: str, epoch: int, step: int, idxs) -> Path:
    path = Path(out_dir) / f"nan_dump_{stage}_epoch{epoch}_step{step}.npz"
    np.savez(path, indices=np.asarray(list(idxs)), epoch=epoch, step=step)
    return path


# --- pretraining ---------------------------------------------------------------------


@dataclass
class PretrainResult:
    encoder_path: Path
    history: list[dict]
    tau_trace: list[float]
    steps: int
    interrupted: bool = False
    pair: NetworkPair | None = None


def _build_pipelines(cfg: RunConfig) -> tuple[Pipeline, Pipeline]:
    probs = cfg.augmentation
    specs = default_transforms(
        flip_p=probs.horizontal_flip,
        blur_p=probs.gaussian_blur,
        affine_p=probs.random_affine,
        rotation_p=probs.random_rotation,
        crop_p=probs.random_crop,
        center_crop_p=probs.center_crop,
        grayscale_p=probs.random_grayscale,
        jitter_p=probs.color_jitter,
        invert_p=probs.random_invert,
        noise_p=probs.gaussian_noise,
        cutout_p=probs.cutout,
    )
    size = (cfg.architecture.face_size, cfg.architecture.face_size)
    face_pipe = Pipeline(AugmentationConfig(specs, size))
    patch_specs = [TransformSpec(t.name, t.p, t.params) for t in specs]
    patch_pipe = Pipeline(AugmentationConfig(patch_specs, (36, 60))).photometric()
    return face_pipe, patch_pipe


def build_pair(cfg: RunConfig, total_steps: int) -> NetworkPair:
    return build_network_pair(
        encoder_config=cfg.encoder_config(),
        proj_dims=cfg.architecture.proj_dims,
        pred_dims=cfg.architecture.pred_dims,
        tau_base=cfg.pretrain.tau_base,
        total_steps=total_steps,
    )


def pretrain(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path | str,
    indices: list[int] | None = None,
    interrupt_after_epoch: int | None = None,
    resume: Path | str | None = None,
    keep_pair: bool = False,
) -> PretrainResult:
    """Self-supervised pretraining; saves the encoder alone at completion.

    Two augmented views per sample feed the online/target pair; the decay
    rate follows the cosine schedule per optimizer step and the target is
    EMA-updated after every step.  Only the encoder weights survive into the
    final checkpoint; heads and target are discarded.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed, cfg.deterministic)

    samples = load_samples(manifest, indices if indices is not None else list(range(len(manifest))))
    if not samples:
        raise TrainingError("pretraining requires at least one sample")
    n = len(samples)
    batch = min(cfg.pretrain.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    total_steps = steps_per_epoch * cfg.pretrain.epochs

    pair = build_pair(cfg, total_steps)
    optimizer = torch.optim.SGD(
        pair.online.parameters(), lr=cfg.pretrain.lr, momentum=cfg.pretrain.momentum
    )

    start_epoch = 0
    history: list[dict] = []
    tau_trace = [tau_schedule(0, total_steps, cfg.pretrain.tau_base)]
    step = 0
    if resume is not None:
        tree = load_archive(resume)
        if tree.get("kind") != "pretrain-resume":
            raise TrainingError(f"{resume} is not a pretraining resume checkpoint")
        pair.online.load_state_dict(tree_to_state_dict(tree["online"]))
        pair.target.load_state_dict(tree_to_state_dict(tree["target"]))
        optimizer.load_state_dict(tree_to_tensors(tree["optimizer"]))
        torch.set_rng_state(torch.as_tensor(np.array(tree["torch_rng"]), dtype=torch.uint8))
        start_epoch = int(tree["epoch"]) + 1
        step = int(tree["step"])
        history = list(tree["history"])
        tau_trace = list(tree["tau_trace"])

    face_pipe, patch_pipe = _build_pipelines(cfg)
    four_term = cfg.ablation.use_mbyol_mods
    pair.online.train()
    pair.target.train()

    for epoch in range(start_epoch, cfg.pretrain.epochs):
        order = _epoch_order(cfg.seed, epoch, n)
        epoch_losses = []
        for lo in range(0, n, batch):
            idxs = order[lo : lo + batch]
            faces_v, faces_vp, lefts_v, lefts_vp, rights_v, rights_vp = [], [], [], [], [], []
            for i in idxs:
                s = samples[i]
                rngs = _view_rngs(cfg.seed, epoch, int(i), 6)
                faces_v.append(face_pipe.apply(s.face, rngs[0]))
                faces_vp.append(face_pipe.apply(s.face, rngs[1]))
                lefts_v.append(patch_pipe.apply(s.left_patch, rngs[2]))
                lefts_vp.append(patch_pipe.apply(s.left_patch, rngs[3]))
                rights_v.append(patch_pipe.apply(s.right_patch, rngs[4]))
                rights_vp.append(patch_pipe.apply(s.right_patch, rngs[5]))
            to_t = lambda arrs: torch.as_tensor(np.stack(arrs))

            _, z_on_v, q_v = pair.online(to_t(faces_v), to_t(lefts_v), to_t(rights_v))
            _, z_on_vp, q_vp = pair.online(to_t(faces_vp), to_t(lefts_vp), to_t(rights_vp))
            with torch.no_grad():
                _, z_t_v, _ = pair.target(to_t(faces_v), to_t(lefts_v), to_t(rights_v))
                _, z_t_vp, _ = pair.target(to_t(faces_vp), to_t(lefts_vp), to_t(rights_vp))

            if four_term:
                loss = ssl_loss(
                    SslLossInputs(
                        q_v=q_v, q_v_prime=q_vp,
                        z_on_v=z_on_v, z_on_v_prime=z_on_vp,
                        z_t_v=z_t_v, z_t_v_prime=z_t_vp,
                    )
                )
            else:
                loss = 0.5 * (negative_cosine(q_v, z_t_vp) + negative_cosine(q_vp, z_t_v))

            if not torch.isfinite(loss):
                dump = _nan_dump(out_dir, "pretrain", epoch, step, idxs)
                raise TrainingError(f"non-finite pretraining loss at step {step}; batch saved to {dump}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            tau = tau_schedule(step, total_steps, cfg.pretrain.tau_base)
            ema_update(pair, tau)
            tau_trace.append(tau)
            epoch_losses.append(float(loss.item()))

        history.append({"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))})

        if interrupt_after_epoch is not None and epoch == interrupt_after_epoch:
            resume_path = out_dir / "pretrain_resume.ckpt"
            save_archive(
                resume_path,
                {
                    "kind": "pretrain-resume",
                    "online": dict(pair.online.state_dict()),
                    "target": dict(pair.target.state_dict()),
                    "optimizer": optimizer.state_dict(),
                    "torch_rng": torch.get_rng_state(),
                    "epoch": epoch,
                    "step": step,
                    "history": history,
                    "tau_trace": tau_trace,
                    "config": cfg.to_dict(),
                    "config_hash": cfg.config_hash(),
                },
            )
            return PretrainResult(
                encoder_path=resume_path,
                history=history,
                tau_trace=tau_trace,
                steps=step,
                interrupted=True,
                pair=pair if keep_pair else None,
            )

    # Training done: the encoder survives, every other parameter is discarded.
    encoder_path = out_dir / "encoder.ckpt"
    save_archive(
        encoder_path,
        {
            "kind": "encoder",
            "encoder": dict(pair.online.encoder.state_dict()),
            "encoder_dim": pair.online.encoder.out_dim,
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "steps": step,
        },
    )
    return PretrainResult(
        encoder_path=encoder_path,
        history=history,
        tau_trace=tau_trace,
        steps=step,
        pair=pair if keep_pair else None,
    )


# --- fine-tuning -----------------------------------------------------------------------


@dataclass
class FinetuneResult:
    model_path: Path
    history: list[dict]
    best_val_error: float
    stopped_early: bool


def build_regressor(cfg: RunConfig) -> GazeRegressor:
    from .networks import Encoder

    encoder = Encoder(cfg.encoder_config())
    return GazeRegressor(
        encoder,
        use_pmn=cfg.ablation.use_pmn,
        bounded=cfg.architecture.bounded_head,
        dropout=cfg.architecture.dropout,
        ff_dim=cfg.architecture.ff_dim,
        freeze_encoder=cfg.ablation.freeze_backbone,
        head_hidden=cfg.architecture.head_hidden,
    )


def load_encoder_into(model: GazeRegressor, checkpoint: Path | str) -> None:
    """Load pretrained encoder weights, listing every dimension mismatch."""
    tree = load_archive(checkpoint)
    if tree.get("kind") != "encoder":
        raise ConfigError(f"{checkpoint} is not an encoder checkpoint")
    state = tree_to_state_dict(tree["encoder"])
    current = model.encoder.state_dict()
    problems = []
    for name, tensor in current.items():
        if name not in state:
            problems.append(f"missing parameter {name}")
        elif tuple(state[name].shape) != tuple(tensor.shape):
            problems.append(
                f"{name}: checkpoint {tuple(state[name].shape)} vs model {tuple(tensor.shape)}"
            )
    for name in state:
        if name not in current:
            problems.append(f"unexpected parameter {name}")
    if problems:
        raise ConfigError(
            "encoder checkpoint incompatible with configured architecture:\n  "
            + "\n  ".join(problems)
        )
    model.encoder.load_state_dict(state)


def _val_error(model: GazeRegressor, samples: list[Sample], batch_size: int) -> float:
    report = evaluation.evaluate(model, samples, ranges_deg=(180.0,), batch_size=batch_size)
    return report.mean_error


def finetune(
    cfg: RunConfig,
    train_samples: list[Sample],
    val_samples: list[Sample],
    out_dir: Path | str,
    ssl_checkpoint: Path | str | None = None,
    interrupt_after_epoch: int | None = None,
    resume: Path | str | None = None,
) -> FinetuneResult:
    """Supervised fine-tuning of the gaze regressor.

    Trains with the variance-weighted loss (or plain MAE when the
    inverse-explained-variance flag is off), reduces the learning rate on
    validation plateaus, stops early per the configured patience, and keeps
    the best-validation checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed, cfg.deterministic)

    if not train_samples or not val_samples:
        raise TrainingError("fine-tuning requires nonempty train and validation sets")

    model = build_regressor(cfg)
    if cfg.ablation.use_ssl_init:
        if ssl_checkpoint is None:
            raise ConfigError("use_ssl_init is on but no pretraining checkpoint was given")
        load_encoder_into(model, ssl_checkpoint)

    trainable = [p for p in model.parameters() if p.requires_grad]
    ft = cfg.finetune
    optimizer = torch.optim.Adam(trainable, lr=ft.lr)
    plateau = PlateauScheduler(
        lr=ft.lr,
        factor=ft.plateau_factor,
        patience=ft.plateau_patience,
        min_delta=ft.plateau_min_delta,
        min_lr=ft.min_lr,
    )
    stopper = EarlyStopping(patience=ft.early_stop_patience, min_delta=ft.early_stop_min_delta)

    n = len(train_samples)
    batch = min(ft.batch_size, n)
    best_val = math.inf
    history: list[dict] = []
    start_epoch = 0
    stopped_early = False
    model_path = out_dir / "model_best.ckpt"

    if resume is not None:
        tree = load_archive(resume)
        if tree.get("kind") != "finetune-resume":
            raise TrainingError(f"{resume} is not a fine-tuning resume checkpoint")
        model.load_state_dict(tree_to_state_dict(tree["model"]))
        optimizer.load_state_dict(tree_to_tensors(tree["optimizer"]))
        torch.set_rng_state(torch.as_tensor(np.array(tree["torch_rng"]), dtype=torch.uint8))
        plateau.load_state(tree["plateau"])
        stopper.load_state(tree["early_stop"])
        best_val = float(tree["best_val"])
        start_epoch = int(tree["epoch"]) + 1
        history = list(tree["history"])

    def _save_best(val_error: float) -> None:
        save_archive(
            model_path,
            {
                "kind": "gaze-model",
                "model": dict(model.state_dict()),
                "config": cfg.to_dict(),
                "config_hash": cfg.config_hash(),
                "val_error": val_error,
            },
        )

    for epoch in range(start_epoch, ft.epochs):
        model.train()
        order = _epoch_order(cfg.seed, 50_000 + epoch, n)
        epoch_losses = []
        for lo in range(0, n, batch):
            idxs = order[lo : lo + batch]
            faces, lefts, rights, labels = _stack_batch(train_samples, idxs)
            preds = model(faces, lefts, rights)
            targets = model.target_from_angles(labels)
            if cfg.ablation.use_inv_ev and len(idxs) >= 2:
                loss = sup_loss(
                    targets, preds, omega_max=ft.omega_max, omega_in_graph=ft.omega_in_graph
                ).total
            else:
                loss = mae(targets, preds)
            if not torch.isfinite(loss):
                dump = _nan_dump(out_dir, "finetune", epoch, lo // batch, idxs)
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}; batch saved to {dump}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.item()))

        val_error = _val_error(model, val_samples, batch_size=max(batch, 16))
        new_lr = plateau.step(val_error)
        for group in optimizer.param_groups:
            group["lr"] = new_lr
        if val_error < best_val:
            best_val = val_error
            _save_best(val_error)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_error": val_error,
                "lr": new_lr,
            }
        )
        if stopper.step(val_error):
            stopped_early = True
            break
        if interrupt_after_epoch is not None and epoch == interrupt_after_epoch:
            save_archive(
                out_dir / "finetune_resume.ckpt",
                {
                    "kind": "finetune-resume",
                    "model": dict(model.state_dict()),
                    "optimizer": optimizer.state_dict(),
                    "torch_rng": torch.get_rng_state(),
                    "plateau": plateau.state(),
                    "early_stop": stopper.state(),
                    "best_val": best_val,
                    "epoch": epoch,
                    "history": history,
                    "config": cfg.to_dict(),
                    "config_hash": cfg.config_hash(),
                },
            )
            break

    if not model_path.exists():
        _save_best(best_val if math.isfinite(best_val) else float("nan"))
    return FinetuneResult(
        model_path=model_path,
        history=history,
        best_val_error=best_val,
        stopped_early=stopped_early,
    )


def load_gaze_model(path: Path | str) -> tuple[GazeRegressor, RunConfig]:
    """Rebuild a fine-tuned regressor from its checkpoint."""
    tree = load_archive(path)
    if tree.get("kind") != "gaze-model":
        raise TrainingError(f"{path} is not a gaze-model checkpoint")
    cfg = config_from_dict(tree["config"])
    model = build_regressor(cfg)
    model.load_state_dict(tree_to_state_dict(tree["model"]))
    model.eval()
    return model, cfg


# --- leave-one-subject-out -----------------------------------------------------------


def run_loso(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path | str,
    ssl_checkpoint: Path | str | None = None,
    subjects: list[str] | None = None,
) -> dict:
    """One fine-tuning fold per held-out subject; reports per-fold and mean
    test angular error.  Failed folds are recorded and skipped in the mean."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    all_subjects = subjects if subjects is not None else manifest.subjects()
    if len(manifest.subjects()) < 2:
        raise TrainingError("leave-one-subject-out needs at least two subjects")
    face = (cfg.architecture.face_size, cfg.architecture.face_size)

    folds = []
    errors = []
    for subject in all_subjects:
        split = split_loso(manifest, subject, val_fraction=cfg.data.loso_val_fraction)
        fold_dir = out_dir / f"fold_{subject}"
        try:
            train = load_samples(manifest, split.train, face)
            val = load_samples(manifest, split.val, face)
            test = load_samples(manifest, split.test, face)
            result = finetune(cfg, train, val, fold_dir, ssl_checkpoint=ssl_checkpoint)
            model, _ = load_gaze_model(result.model_path)
            report = evaluation.evaluate(model, test, config_hash=cfg.config_hash())
            folds.append(
                {
                    "subject": subject,
                    "test_error": report.mean_error,
                    "test_count": report.count,
                    "best_val_error": result.best_val_error,
                    "status": "ok",
                }
            )
            errors.append(report.mean_error)
        except (TrainingError, ConfigError) as exc:
            warnings.warn(f"fold {subject} failed: {exc}")
            folds.append({"subject": subject, "status": "failed", "error": str(exc)})
    return {
        "folds": folds,
        "mean_error": float(np.mean(errors)) if errors else None,
        "completed": len(errors),
        "failed": len(folds) - len(errors),
        "config_hash": cfg.config_hash(),
    }
