"""Forward noising, reverse sampling and the epsilon-prediction training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .denoiser import DenoiserConfig, DenoiserState, UNet3D, forward
from .errors import NumericalError
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lnddpm-denoiser/1"


def _coef(sched: NoiseSchedule, values: np.ndarray, t, like):
    """Gather 1-based ``t`` from ``values`` and shape it to broadcast against ``like``."""
    sched.check_t(t)
    if isinstance(like, torch.Tensor):
        t_idx = torch.as_tensor(t, dtype=torch.long) - 1
        c = torch.as_tensor(values, dtype=torch.float64)[t_idx].to(like.dtype)
        if c.ndim == 1 and like.ndim > 1:
            c = c.reshape(-1, *([1] * (like.ndim - 1)))
        return c
    c = np.asarray(values)[np.asarray(t) - 1]
    if np.ndim(c) == 1 and np.ndim(like) > 1:
        c = c.reshape(-1, *([1] * (np.ndim(like) - 1)))
    return c


def _check_shapes(**arrays):
    shapes = {k: tuple(v.shape) for k, v in arrays.items()}
    if len(set(shapes.values())) > 1:
        raise ValueError(f"shape mismatch: {shapes}")


def q_sample(x0, t, epsilon, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_shapes(x0=x0, epsilon=epsilon)
    a = _coef(sched, np.sqrt(sched.alpha_bar), t, x0)
    b = _coef(sched, np.sqrt(1.0 - sched.alpha_bar), t, x0)
    return a * x0 + b * epsilon


def q_step(x_prev, t, noise, sched: NoiseSchedule):
    """One forward transition x_{t-1} -> x_t with the step-t variance."""
    _check_shapes(x_prev=x_prev, noise=noise)
    a = _coef(sched, np.sqrt(sched.alpha), t, x_prev)
    b = _coef(sched, np.sqrt(sched.beta), t, x_prev)
    return a * x_prev + b * noise


def posterior_mean(x_t, x0, t, sched: NoiseSchedule):
    """Mean of q(x_{t-1} | x_t, x0)."""
    _check_shapes(x_t=x_t, x0=x0)
    ab = sched.alpha_bar
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    c0 = _coef(sched, np.sqrt(ab_prev) * sched.beta / (1.0 - ab), t, x0)
    ct = _coef(sched, np.sqrt(sched.alpha) * (1.0 - ab_prev) / (1.0 - ab), t, x0)
    return c0 * x0 + ct * x_t


def p_sample_step(x_t, eps_hat, t, z, sched: NoiseSchedule):
    """x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z.

    The noise term is dropped wherever t == 1.
    """
    _check_shapes(x_t=x_t, eps_hat=eps_hat, z=z)
    inv_sqrt_a = _coef(sched, 1.0 / np.sqrt(sched.alpha), t, x_t)
    eps_c = _coef(sched, (1.0 - sched.alpha) / np.sqrt(1.0 - sched.alpha_bar), t, x_t)
    sigma = sched.sigma.copy()
    sigma[0] = 0.0
    sig = _coef(sched, sigma, t, x_t)
    return inv_sqrt_a * (x_t - eps_c * eps_hat) + sig * z


def training_loss(epsilon, eps_hat):
    """Mean absolute error over all elements."""
    _check_shapes(epsilon=epsilon, eps_hat=eps_hat)
    if isinstance(epsilon, torch.Tensor) or isinstance(eps_hat, torch.Tensor):
        return (torch.as_tensor(epsilon) - torch.as_tensor(eps_hat)).abs().mean()
    return float(np.mean(np.abs(np.asarray(epsilon) - np.asarray(eps_hat))))


EpsFn = Callable[[torch.Tensor, object, int], torch.Tensor]


def clip_eps(x_t, eps_hat, t, sched: NoiseSchedule, bound: float):
    """Noise estimate consistent with the implied x0 clipped to [-bound, bound].

    Feeding the result to ``p_sample_step`` gives the posterior mean around the
    clipped x0, so a bad noise estimate at large t cannot blow the sample up.
    """
    ab = float(sched.alpha_bar[t - 1])
    x0 = ((x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)).clamp(-bound, bound)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def sample_loop(denoiser, condition, sched: NoiseSchedule, rng_seed: int, use_ema: bool = True,
                shape=None, clip_x0: float | None = None) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``denoiser`` is a DenoiserState or any callable ``eps_fn(x_t, condition, t)``.
    Noise is drawn from one generator seeded with ``rng_seed``: first x_T, then one
    z per step for t = T..2 (no draw at t = 1). With ``clip_x0`` each noise
    estimate is first passed through ``clip_eps``.
    """
    if isinstance(denoiser, DenoiserState):
        cfg = denoiser.config
        grid = tuple(condition.shape)
        if grid != cfg.patch_shape:
            raise ValueError(f"condition grid {grid} != configured patch {cfg.patch_shape}")
        net = denoiser.network(use_ema)
        dtype = next(net.parameters()).dtype

        def eps_fn(x, cond, t):
            return forward(net, x, cond, t)
    else:
        eps_fn = denoiser
        dtype = torch.float32
        grid = tuple(condition.shape) if shape is None else tuple(shape)

    gen = torch.Generator().manual_seed(int(rng_seed))
    full = (1, 1, *grid)
    x = torch.randn(full, generator=gen, dtype=dtype)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = eps_fn(x, condition, t)
            if clip_x0 is not None:
                eps_hat = clip_eps(x, eps_hat, t, sched, clip_x0)
            z = torch.randn(full, generator=gen, dtype=dtype) if t > 1 else torch.zeros(full, dtype=dtype)
            x = p_sample_step(x, eps_hat, t, z, sched)
    out = x[0, 0].cpu().numpy()
    if not np.isfinite(out).all():
        raise NumericalError("sampling produced non-finite values")
    return out


# --- training -------------------------------------------------------------------

@dataclass
class TrainOptions:
    iterations: int = 45000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1
    ema_decay: float = 0.995
    checkpoint_every: int = 1000
    seed: int = 0


@torch.no_grad()
def ema_update(ema: torch.nn.Module, model: torch.nn.Module, decay: float) -> None:
    for pe, p in zip(ema.parameters(), model.parameters()):
        pe.mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def _collate(items, dtype):
    x0 = torch.stack([torch.as_tensor(np.asarray(x), dtype=dtype).reshape(1, *np.shape(x)[-3:]) for x, _ in items])
    anatomy = torch.stack([torch.as_tensor(c.anatomy_onehot, dtype=dtype) for _, c in items])
    ln = torch.stack([torch.as_tensor(c.ln_mask, dtype=dtype)[None] for _, c in items])
    return x0, anatomy, ln


def train(dataset: Iterator, state: DenoiserState, sched: NoiseSchedule, opts: TrainOptions,
          out_dir=None, run_config: dict | None = None) -> DenoiserState:
    """Epsilon-prediction training with an L1 objective.

    ``dataset`` yields ``(x0, ConditionStack)`` patches indefinitely. Writes
    ``train_log.csv`` (iteration, loss, lr, wall_ms), ``run.log`` and periodic
    checkpoints to ``out_dir`` when given.
    """
    if opts.iterations <= 0:
        return state
    model = state.model
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=opts.lr, betas=(opts.beta1, opts.beta2))
    if state.optimizer_state:
        opt.load_state_dict(state.optimizer_state)
    gen = torch.Generator().manual_seed(opts.seed + state.iteration)

    log_file = run_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        new_log = not (out_dir / "train_log.csv").exists()
        log_file = open(out_dir / "train_log.csv", "a")
        if new_log:
            log_file.write("iteration,loss,lr,wall_ms\n")
        run_log = open(out_dir / "run.log", "a")
        run_log.write(f"optimizer=Adam beta1={opts.beta1} beta2={opts.beta2} lr={opts.lr} "
                      f"batch_size={opts.batch_size} ema_decay={opts.ema_decay}\n")
        run_log.write(f"train_options={asdict(opts)}\n")
        run_log.flush()

    model.train()
    start = state.iteration
    try:
        for it in range(start + 1, start + opts.iterations + 1):
            tick = time.perf_counter()
            items = [next(dataset) for _ in range(opts.batch_size)]
            x0, anatomy, ln = _collate(items, dtype)
            t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=dtype)
            x_t = q_sample(x0, t, eps, sched)
            eps_hat = forward(model, x_t, (anatomy, ln), t)
            loss = training_loss(eps, eps_hat)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss.item()} at iteration {it}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_update(state.ema_model, model, opts.ema_decay)
            state.iteration = it
            wall_ms = (time.perf_counter() - tick) * 1000.0
            if log_file:
                log_file.write(f"{it},{loss.item():.6f},{opts.lr:g},{wall_ms:.1f}\n")
                log_file.flush()
            if it % 100 == 0:
                log.info("iter %d loss %.4f (%.0f ms)", it, loss.item(), wall_ms)
            if out_dir is not None and opts.checkpoint_every and it % opts.checkpoint_every == 0:
                state.optimizer_state = opt.state_dict()
                save_checkpoint(out_dir / "checkpoint_latest.pt", state, run_config)
    finally:
        if log_file:
            log_file.close()
            run_log.close()
    state.optimizer_state = opt.state_dict()
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_latest.pt", state, run_config)
    return state


def save_checkpoint(path, state: DenoiserState, run_config: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "ema": state.ema_model.state_dict(),
        "optimizer": state.optimizer_state,
        "iteration": state.iteration,
        "run_config": run_config,
    }, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[DenoiserState, dict | None]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a denoiser checkpoint")
    cfg = DenoiserConfig(**blob["config"])
    dtype = next(iter(blob["model"].values())).dtype
    model = UNet3D(cfg).to(dtype)
    ema = UNet3D(cfg).to(dtype)
    model.load_state_dict(blob["model"])
    ema.load_state_dict(blob["ema"])
    for p in ema.parameters():
        p.requires_grad_(False)
    state = DenoiserState(cfg, model, ema, iteration=blob["iteration"], optimizer_state=blob["optimizer"])
    return state, blob.get("run_config")
