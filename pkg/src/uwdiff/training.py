"""Joint training of the prior, implicit, and denoiser branches.

Determinism contract: parameter init, batch order, crops, timesteps, and
noise all flow from the config seed through explicit generators whose states
ride along in checkpoints, so a resumed run reproduces an uninterrupted one
bit for bit.
"""

from __future__ import annotations

import csv
import pickle
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import diffusion
from .diffusion import DiffusionSchedule, SkipPlan, make_schedule, make_skip_plan
from .denoiser import DenoiserConfig, UNetDenoiser
from .grids import ImageGrid
from .implicit import ImplicitRenderer
from .metrics import psnr
from .priors import (
    ConvPyramidFeatures,
    PriorGenerator,
    grid_to_tensor,
    prior_loss,
    tensor_to_grid,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and model-size settings; defaults are desk scale."""

    lr: float = 1e-4
    batch: int = 4
    crop: int = 64
    iterations: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_dm: float = 1.0
    weight_prior: float = 1.0
    weight_inr: float = 1.0
    lambda_rec: float = 1.0
    lambda_per: float = 0.1
    seed: int = 0
    grad_clip: float = 0.0
    # diffusion schedule + sampler
    timesteps: int = 2000
    beta_start: float = 1e-6
    beta_end: float = 1e-2
    sample_steps: int = 10
    skip_spacing: str = "uniform_t"
    loss_kind: str = "l1"
    # gradient routing and staging
    shared_condition_grads: bool = True
    freeze_priors: bool = False
    prior_pretrain_iters: int = 0
    # bookkeeping
    val_every: int = 500
    checkpoint_every: int = 1000
    # model sizes
    inner_channel: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_resolution: int = 16
    dropout: float = 0.0
    norm_groups: int = 8
    blocks_per_stage: int = 1
    prior_channels: int = 16
    prior_layers: int = 4
    prior_kernels: int = 4
    inr_features: int = 16
    inr_hidden: int = 64
    inr_bands: int = 10

    def __post_init__(self) -> None:
        positives = {
            "lr": self.lr, "batch": self.batch, "crop": self.crop,
            "timesteps": self.timesteps, "sample_steps": self.sample_steps,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        for name in ("weight_dm", "weight_prior", "weight_inr",
                     "lambda_rec", "lambda_per"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            inner_channel=self.inner_channel,
            channel_multipliers=tuple(self.channel_multipliers),
            attention_resolution=self.attention_resolution,
            dropout=self.dropout,
            norm_groups=self.norm_groups,
            blocks_per_stage=self.blocks_per_stage,
            image_size=self.crop,
        )


def full_scale_train_config() -> TrainConfig:
    """Published-scale profile: 256 px crops, batch 6, full-width model.

    Prior/implicit widths here are calibrated to the published branch
    parameter budgets (about 0.03M and 0.15M).
    """
    return TrainConfig(
        batch=6,
        crop=256,
        iterations=1_050_000,
        inner_channel=48,
        channel_multipliers=(1, 2, 4, 8, 8),
        dropout=0.2,
        norm_groups=24,
        blocks_per_stage=2,
        prior_channels=10,
        prior_layers=4,
        prior_kernels=4,
        inr_features=48,
        inr_hidden=210,
        inr_bands=10,
    )


class EnhancementModel(nn.Module):
    """The three trainable branches plus the frozen perceptual extractor."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.priors = PriorGenerator(
            channels=cfg.prior_channels,
            num_layers=cfg.prior_layers,
            num_kernels=cfg.prior_kernels,
        )
        self.implicit = ImplicitRenderer(
            feature_channels=cfg.inr_features,
            hidden=cfg.inr_hidden,
            num_bands=cfg.inr_bands,
        )
        self.denoiser = UNetDenoiser(cfg.denoiser_config())
        self.extractor = ConvPyramidFeatures()


@dataclass
class TrainState:
    model: EnhancementModel
    optimizer: torch.optim.Adam
    schedule: DiffusionSchedule
    plan: SkipPlan
    config: TrainConfig
    iteration: int = 0
    noise_gen: torch.Generator = field(default_factory=torch.Generator)
    data_rng: np.random.Generator = field(
        default_factory=lambda: np.random.default_rng(0)
    )


def _trainable_parameters(model: EnhancementModel, cfg: TrainConfig):
    params = []
    if not cfg.freeze_priors:
        params += list(model.priors.parameters())
    params += list(model.implicit.parameters())
    params += list(model.denoiser.parameters())
    return [p for p in params if p.requires_grad]


def init_state(config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    model = EnhancementModel(config)
    if config.freeze_priors:
        for p in model.priors.parameters():
            p.requires_grad_(False)
    optimizer = torch.optim.Adam(
        _trainable_parameters(model, config),
        lr=config.lr,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end)
    plan = make_skip_plan(schedule, config.sample_steps, config.skip_spacing)
    noise_gen = torch.Generator()
    noise_gen.manual_seed(config.seed + 7)
    data_rng = np.random.default_rng(config.seed + 13)
    return TrainState(
        model=model,
        optimizer=optimizer,
        schedule=schedule,
        plan=plan,
        config=config,
        noise_gen=noise_gen,
        data_rng=data_rng,
    )


def q_sample_batch(
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Per-sample forward noising; matches the scalar-t engine op."""
    ab = torch.as_tensor(
        sched.alpha_bars, dtype=x0.dtype, device=x0.device
    )[t - 1]
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def train_step(
    state: TrainState,
    degraded: torch.Tensor,
    clean: torch.Tensor,
    loss_weights: tuple[float, float, float] | None = None,
) -> dict[str, float]:
    """One joint optimization step on a [0, 1] image batch.

    Returns the three loss components and the weighted total.
    ``loss_weights`` overrides the config's (dm, prior, inr) weighting, which
    the two-phase schedule uses for its prior-only warmup.
    """
    cfg = state.config
    model = state.model
    if degraded.shape != clean.shape or degraded.dim() != 4:
        raise ValueError(
            f"expected matching B x C x H x W batches, got "
            f"{tuple(degraded.shape)} vs {tuple(clean.shape)}"
        )
    model.train()

    t_map, b_map = model.priors(degraded)
    recon = clean * t_map + (1.0 - t_map) * b_map
    loss_prior, loss_rec, loss_per = prior_loss(
        recon, degraded, model.extractor, cfg.lambda_rec, cfg.lambda_per
    )

    degraded_s = degraded * 2.0 - 1.0
    clean_s = clean * 2.0 - 1.0
    rendered = model.implicit(degraded_s)
    loss_inr = (rendered - clean_s).abs().mean()
    condition = rendered + degraded_s

    cond_t, cond_b, cond_x = t_map, b_map * 2.0 - 1.0, condition
    if not cfg.shared_condition_grads:
        cond_t, cond_b, cond_x = (
            cond_t.detach(), cond_b.detach(), cond_x.detach()
        )

    batch = clean.shape[0]
    t = torch.randint(
        1, cfg.timesteps + 1, (batch,), generator=state.noise_gen
    )
    eps = torch.randn(clean_s.shape, generator=state.noise_gen)
    x_t = q_sample_batch(clean_s, t, eps, state.schedule)
    eps_hat = model.denoiser(x_t, cond_x, cond_b, cond_t, t)
    loss_dm = diffusion.diffusion_loss(eps, eps_hat, cfg.loss_kind)

    w_dm, w_prior, w_inr = (
        loss_weights
        if loss_weights is not None
        else (cfg.weight_dm, cfg.weight_prior, cfg.weight_inr)
    )
    total = w_dm * loss_dm + w_prior * loss_prior + w_inr * loss_inr
    state.optimizer.zero_grad()
    total.backward()
    if cfg.grad_clip > 0.0:
        torch.nn.utils.clip_grad_norm_(
            _trainable_parameters(model, cfg), cfg.grad_clip
        )
    state.optimizer.step()
    state.iteration += 1
    return {
        "total": float(total.detach()),
        "loss_dm": float(loss_dm.detach()),
        "loss_prior": float(loss_prior.detach()),
        "loss_inr": float(loss_inr.detach()),
    }


def sample(
    model: EnhancementModel,
    degraded: torch.Tensor,
    sched: DiffusionSchedule,
    plan: SkipPlan,
    generator: torch.Generator,
) -> torch.Tensor:
    """Enhance a [0, 1] batch via the skip sampler; returns [0, 1] images."""
    model.eval()
    with torch.no_grad():
        t_map, b_map = model.priors(degraded)
        degraded_s = degraded * 2.0 - 1.0
        condition = model.implicit(degraded_s) + degraded_s
        b_signed = b_map * 2.0 - 1.0
        x = torch.randn(degraded_s.shape, generator=generator)

        def predict(x_t, _cond, t):
            return model.denoiser(x_t, condition, b_signed, t_map, t)

        x0 = diffusion.skip_sample(
            predict, x, None, plan, sched, x0_clip=(-1.0, 1.0)
        )
    return ((x0 + 1.0) / 2.0).clamp(0.0, 1.0)


def enhance_image(state: TrainState, image: ImageGrid, seed: int = 0) -> ImageGrid:
    """Single-image inference convenience around :func:`sample`."""
    gen = torch.Generator()
    gen.manual_seed(seed)
    out = sample(
        state.model, grid_to_tensor(image), state.schedule, state.plan, gen
    )
    return tensor_to_grid(out, check_range=True)


Pairs = list[tuple[ImageGrid, ImageGrid]]


def _stack_pairs(pairs: Pairs) -> tuple[torch.Tensor, torch.Tensor]:
    deg = torch.stack(
        [torch.from_numpy(d.data.astype(np.float32)).permute(2, 0, 1)
         for d, _ in pairs]
    )
    clean = torch.stack(
        [torch.from_numpy(c.data.astype(np.float32)).permute(2, 0, 1)
         for _, c in pairs]
    )
    return deg, clean


def _draw_batch(
    deg: torch.Tensor, clean: torch.Tensor, cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    n = deg.shape[0]
    take = min(cfg.batch, n)
    idx = rng.permutation(n)[:take]
    d = deg[idx]
    c = clean[idx]
    h, w = d.shape[-2:]
    if h > cfg.crop and w > cfg.crop:
        top = int(rng.integers(0, h - cfg.crop + 1))
        left = int(rng.integers(0, w - cfg.crop + 1))
        d = d[..., top : top + cfg.crop, left : left + cfg.crop]
        c = c[..., top : top + cfg.crop, left : left + cfg.crop]
    return d, c


def validation_psnr(
    state: TrainState, pairs: Pairs, seed: int = 0
) -> float:
    gen = torch.Generator()
    gen.manual_seed(seed)
    deg, clean = _stack_pairs(pairs)
    out = sample(state.model, deg, state.schedule, state.plan, gen)
    scores = [
        psnr(
            tensor_to_grid(out[i : i + 1], check_range=True),
            tensor_to_grid(clean[i : i + 1], check_range=True),
        )
        for i in range(out.shape[0])
    ]
    return float(np.mean(scores))


def fit(
    dataset: Pairs,
    config: TrainConfig,
    val_dataset: Pairs | None = None,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict[str, float]]]:
    """Run the optimization loop, optionally resuming from ``state``.

    Writes a checkpoint every ``checkpoint_every`` iterations when a path is
    given and logs one CSV row per step.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if state is None:
        state = init_state(config)
    cfg = state.config
    deg, clean = _stack_pairs(dataset)
    log: list[dict[str, float]] = []
    log_file = None
    writer = None
    if log_path is not None:
        fresh = not Path(log_path).exists() or state.iteration == 0
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(
            log_file,
            fieldnames=["iteration", "loss_dm", "loss_prior", "loss_inr",
                        "val_psnr"],
        )
        if fresh:
            writer.writeheader()
    pretrain_until = cfg.prior_pretrain_iters
    try:
        while state.iteration < cfg.iterations:
            weights = None
            if pretrain_until > 0:
                if state.iteration < pretrain_until:
                    # phase one: supervise the prior branch alone
                    weights = (0.0, cfg.weight_prior, 0.0)
                else:
                    # phase two: priors stay frozen from here on
                    for p in state.model.priors.parameters():
                        p.requires_grad_(False)
            d, c = _draw_batch(deg, clean, cfg, state.data_rng)
            losses = train_step(state, d, c, loss_weights=weights)
            row: dict[str, float] = {
                "iteration": state.iteration, **{
                    k: losses[k] for k in ("loss_dm", "loss_prior", "loss_inr")
                },
                "val_psnr": float("nan"),
            }
            if val_dataset and state.iteration % cfg.val_every == 0:
                row["val_psnr"] = validation_psnr(state, val_dataset)
            log.append(row)
            if writer is not None:
                writer.writerow(row)
            if (
                checkpoint_path is not None
                and state.iteration % cfg.checkpoint_every == 0
            ):
                save_checkpoint(checkpoint_path, state)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    return state, log


def _tree_to_numpy(obj):
    # Canonical key order and interned strings keep the pickle byte stream
    # identical across save -> load -> save round trips.
    if isinstance(obj, torch.Tensor):
        return {"__tensor__": obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {
            _tree_to_numpy(k): _tree_to_numpy(obj[k])
            for k in sorted(obj, key=repr)
        }
    if isinstance(obj, (list, tuple)):
        return [_tree_to_numpy(v) for v in obj]
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _tree_to_torch(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj and len(obj) == 1:
            return torch.from_numpy(np.array(obj["__tensor__"]))
        return {k: _tree_to_torch(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_tree_to_torch(v) for v in obj]
    return obj


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": _tree_to_numpy(asdict(state.config)),
        "model": _tree_to_numpy(state.model.state_dict()),
        "optimizer": _tree_to_numpy(state.optimizer.state_dict()),
        "schedule": _tree_to_numpy(state.schedule.record()),
        "plan": [int(s) for s in state.plan.steps],
        "torch_rng": torch.get_rng_state().numpy(),
        "noise_rng": state.noise_gen.get_state().numpy(),
        "data_rng": _tree_to_numpy(state.data_rng.bit_generator.state),
    }
    blob = pickle.dumps(payload, protocol=4)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = pickle.loads(path.read_bytes())
    except Exception as exc:  # corrupt or foreign file
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    raw_cfg = dict(payload["config"])
    raw_cfg["channel_multipliers"] = tuple(raw_cfg["channel_multipliers"])
    config = TrainConfig(**raw_cfg)
    state = init_state(config)
    state.model.load_state_dict(_tree_to_torch(payload["model"]))
    state.optimizer.load_state_dict(_tree_to_torch(payload["optimizer"]))
    state.schedule = DiffusionSchedule.from_record(payload["schedule"])
    state.plan = SkipPlan(steps=tuple(payload["plan"]))
    state.iteration = payload["iteration"]
    torch.set_rng_state(torch.from_numpy(np.array(payload["torch_rng"])))
    state.noise_gen.set_state(torch.from_numpy(np.array(payload["noise_rng"])))
    state.data_rng = np.random.default_rng()
    state.data_rng.bit_generator.state = payload["data_rng"]
    return state
