"""Optimization-based latent recovery: adaptive-moment descent on z with optional clipping.

Each iteration evaluates the reconstruction loss at the current z, records it,
takes one bias-corrected adaptive-moment step and then applies the configured
clip. Clipping acts on z after the step, never on the gradient, and the moment
estimates are carried through clipping unchanged.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from .errors import ConfigurationError, GanInvertError, NumericalError, ShapeError
from .generator import loss_and_gradient
from .latent import LatentPrior, hard_clip, sample_prior, stochastic_clip
from .losses import pixel_l2, pixel_mae

logger = logging.getLogger(__name__)

LOSS_KINDS = {"mae": pixel_mae, "l2": pixel_l2}
CLIP_MODES = ("none", "hard", "stochastic")
TERMINATIONS = ("max_iters", "threshold", "numerical_error", "error")


@dataclass
class OptimizerState:
    first_moment: torch.Tensor
    second_moment: torch.Tensor
    step_count: int = 0

    @classmethod
    def zeros(cls, dim: int, dtype=torch.float32) -> "OptimizerState":
        return cls(torch.zeros(dim, dtype=dtype), torch.zeros(dim, dtype=dtype), 0)


def adaptive_step(state: OptimizerState, gradient: torch.Tensor, learning_rate: float,
                  beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
    """One bias-corrected adaptive-moment step.

    Returns ``(new_state, update)``; the caller applies ``z - update``. The
    input state is not modified.
    """
    if gradient.shape != state.first_moment.shape:
        raise ShapeError(f"gradient shape {tuple(gradient.shape)} != state shape {tuple(state.first_moment.shape)}")
    if not torch.isfinite(gradient).all():
        raise NumericalError("non-finite gradient passed to adaptive_step", state.step_count)
    gradient = gradient.to(state.first_moment.dtype)
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * gradient
    v = beta2 * state.second_moment + (1.0 - beta2) * gradient * gradient
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    update = learning_rate * m_hat / (v_hat.sqrt() + epsilon)
    return OptimizerState(m, v, t), update


@dataclass
class InversionConfig:
    iterations: int = 200
    learning_rate: float = 0.01
    loss_kind: str = "mae"
    clip_mode: str = "none"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    stop_threshold: Optional[float] = None
    seed: int = 0
    restarts: int = 1
    init: str = "prior"

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss_kind must be one of {tuple(LOSS_KINDS)}")
        if self.clip_mode not in CLIP_MODES:
            raise ConfigurationError(f"clip_mode must be one of {CLIP_MODES}")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")
        if self.init not in ("prior", "encoder"):
            raise ConfigurationError("init must be 'prior' or 'encoder'")


@dataclass
class InversionResult:
    z_final: Optional[torch.Tensor]
    loss_trace: List[float]
    wall_time_s: float
    iterations_run: int
    termination: str
    target_id: Optional[str] = None
    error: Optional[str] = None
    # carried so a later call can resume exactly where this one stopped
    optimizer_state: Optional[OptimizerState] = field(default=None, repr=False, compare=False)
    rng_state: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_record(self) -> dict:
        record = {
            "target_id": self.target_id,
            "z_final": [] if self.z_final is None else [float(v) for v in self.z_final],
            "loss_trace": [float(v) for v in self.loss_trace],
            "wall_time_s": self.wall_time_s,
            "iterations_run": self.iterations_run,
            "termination": self.termination,
        }
        if self.error is not None:
            record["error"] = self.error
        return record

    @classmethod
    def from_record(cls, record: dict) -> "InversionResult":
        z = record["z_final"]
        return cls(
            z_final=torch.tensor(z, dtype=torch.float32) if z else None,
            loss_trace=list(record["loss_trace"]),
            wall_time_s=float(record["wall_time_s"]),
            iterations_run=int(record["iterations_run"]),
            termination=record["termination"],
            target_id=record.get("target_id"),
            error=record.get("error"),
        )


def write_results(path, results: Sequence[InversionResult]) -> None:
    """One JSON object per line; written to a temp file then renamed."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record()) + "\n")
    os.replace(tmp, path)


def read_results(path) -> List[InversionResult]:
    with open(path, encoding="utf-8") as fh:
        return [InversionResult.from_record(json.loads(line)) for line in fh if line.strip()]


def _prepare_target(model, target: torch.Tensor) -> torch.Tensor:
    target = torch.as_tensor(target)
    if target.dim() == 4 and target.shape[0] == 1:
        target = target[0]
    h, w, c = model.image_shape
    if tuple(target.shape) != (c, h, w):
        raise ShapeError(f"target shape {tuple(target.shape)} does not match generator output {(c, h, w)}")
    return target.to(next(model.parameters()).dtype)


def _restart_seed(seed: int, k: int) -> int:
    return seed if k == 0 else seed * 1_000_003 + k


def invert(model, target: torch.Tensor, prior: LatentPrior, config: InversionConfig, *,
           encoder=None, resume: Optional[InversionResult] = None,
           callback: Optional[Callable[[int, torch.Tensor, float], None]] = None,
           target_id: Optional[str] = None) -> InversionResult:
    """Recover a latent for ``target`` by descent on the reconstruction loss.

    ``resume`` continues a previous result (z, moments and clip RNG) for
    ``config.iterations`` further steps; the returned trace then covers only
    the new steps. ``callback(iteration, z, loss)`` sees z after each clip.
    With ``restarts > 1`` the run with the lowest last recorded loss wins.
    """
    if prior.dim != model.latent_dim:
        raise ShapeError(f"prior dim {prior.dim} != generator latent_dim {model.latent_dim}")
    target = _prepare_target(model, target)
    if resume is not None or config.restarts == 1:
        return _run(model, target, prior, config, 0, encoder, resume, callback, target_id)

    start = time.perf_counter()
    best = None
    for k in range(config.restarts):
        result = _run(model, target, prior, config, k, encoder, None, callback, target_id)
        last = result.loss_trace[-1] if result.loss_trace else math.inf
        if best is None or (result.termination != "numerical_error" and last < best[0]):
            best = (last, result)
    result = best[1]
    result.wall_time_s = time.perf_counter() - start
    return result


def _run(model, target, prior, config, restart, encoder, resume, callback, target_id) -> InversionResult:
    start = time.perf_counter()
    dtype = target.dtype
    loss_fn = LOSS_KINDS[config.loss_kind]
    if resume is not None:
        if resume.z_final is None or resume.optimizer_state is None or resume.rng_state is None:
            raise ConfigurationError("resume requires a result produced by invert() in this process")
        rng = torch.Generator()
        rng.set_state(resume.rng_state)
        z = resume.z_final.clone().to(dtype)
        state = resume.optimizer_state
    else:
        rng = torch.Generator().manual_seed(_restart_seed(config.seed, restart))
        if config.init == "encoder":
            if encoder is None:
                raise ConfigurationError("init='encoder' requires an encoder")
            from .encoder import encode
            z = encode(encoder, target).to(dtype)
            if restart:
                z = z + 0.1 * sample_prior(prior, 1, generator=rng, dtype=dtype)[0]
        else:
            z = sample_prior(prior, 1, generator=rng, dtype=dtype)[0]
        state = OptimizerState.zeros(prior.dim, dtype)

    trace: List[float] = []
    termination = "max_iters"
    for it in range(config.iterations):
        try:
            loss, grad = loss_and_gradient(model, z, lambda img: loss_fn(img, target), iteration=it)
        except NumericalError as exc:
            logger.warning("inversion stopped: %s", exc)
            termination = "numerical_error"
            break
        trace.append(loss)
        if config.stop_threshold is not None and loss < config.stop_threshold:
            termination = "threshold"
            break
        state, update = adaptive_step(state, grad, config.learning_rate, config.beta1, config.beta2, config.epsilon)
        z = z - update
        if config.clip_mode == "stochastic":
            z = stochastic_clip(z, prior.bounds, rng)
        elif config.clip_mode == "hard":
            z = hard_clip(z, prior.bounds)
        if callback is not None:
            callback(it, z, loss)

    return InversionResult(
        z_final=z.detach(),
        loss_trace=trace,
        wall_time_s=time.perf_counter() - start,
        iterations_run=len(trace),
        termination=termination,
        target_id=target_id,
        optimizer_state=state,
        rng_state=rng.get_state(),
    )


def invert_batch(model, targets: Sequence[torch.Tensor], prior: LatentPrior, config: InversionConfig, *,
                 seeds: Optional[Sequence[int]] = None, target_ids: Optional[Sequence[str]] = None,
                 encoder=None) -> List[InversionResult]:
    """Independent runs per target, seeded ``config.seed + index`` unless ``seeds`` is given.

    A failing target yields a result with ``termination="error"`` instead of
    aborting the batch.
    """
    n = len(targets)
    if seeds is not None and len(seeds) != n:
        raise ConfigurationError("seeds must align with targets")
    results = []
    for i in range(n):
        seed = seeds[i] if seeds is not None else config.seed + i
        tid = target_ids[i] if target_ids is not None else str(i)
        try:
            results.append(invert(model, targets[i], prior, dataclasses.replace(config, seed=seed),
                                  encoder=encoder, target_id=tid))
        except GanInvertError as exc:
            logger.warning("target %s failed: %s", tid, exc)
            results.append(InversionResult(None, [], 0.0, 0, "error", target_id=tid, error=str(exc)))
    return results
