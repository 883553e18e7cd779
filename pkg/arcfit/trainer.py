"""
Gradient descent on the transformed stage parameters.

Adam with a staircase learning rate ``lr0 * decay_factor ** (step // decay_every)``.
The trainer keeps the lowest-loss parameters seen and returns those.
"""
import dataclasses
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DivergedTrainingError, IntegrationError, InvalidInputError
from .esdirk import Tolerances
from .helper import frozen_array
from .kinetics import ADIABATIC, AmbientModel, ReactionSystem
from .sensitivity import LOG_ENTRIES, N_PER_STAGE, LossReport, ParamVector, grad_loss
from .trace import ArcTrace


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    lr0: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    tol: Optional[Tolerances] = None
    seed: int = 0
    #: retry a step whose prediction fails with halved learning rates
    rollback: bool = True
    max_halvings: int = 5
    #: stop when the best loss did not improve by ``min_delta`` for ``patience`` steps
    early_stop: bool = False
    patience: int = 1000
    min_delta: float = 1e-8
    resample_dt: Optional[float] = None
    max_integrator_steps: int = 10 ** 6
    checkpoint_every: int = 0
    restarts: int = 1
    restart_noise: float = 0.05

    def __post_init__(self):
        if int(self.steps) < 1:
            raise InvalidInputError(f"steps must be >= 1, got {self.steps}")
        if not self.lr0 > 0:
            raise InvalidInputError(f"lr0 must be positive, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise InvalidInputError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if int(self.decay_every) < 1:
            raise InvalidInputError(f"decay_every must be >= 1, got {self.decay_every}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.max_halvings) < 0 or int(self.patience) < 1 or int(self.restarts) < 1:
            raise InvalidInputError("max_halvings must be >= 0, patience and restarts >= 1")
        if self.restart_noise < 0:
            raise InvalidInputError(f"restart_noise must be >= 0, got {self.restart_noise}")
        for name in ("steps", "decay_every", "seed", "max_halvings", "patience",
                     "max_integrator_steps", "checkpoint_every", "restarts"):
            object.__setattr__(self, name, int(getattr(self, name)))

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["tol"] = self.tol.to_dict() if self.tol else None
        return data


def lr_schedule(config: TrainConfig, step: int) -> float:
    if step < 0:
        raise InvalidInputError(f"step must be >= 0, got {step}")
    return config.lr0 * config.decay_factor ** (step // config.decay_every)


@dataclass(frozen=True, eq=False)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", frozen_array(self.m))
        object.__setattr__(self, "v", frozen_array(self.v))

    @classmethod
    def zeros(cls, size: int) -> "AdamMoments":
        return cls(np.zeros(size), np.zeros(size))

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist()}


def adam_step(
        params: ParamVector,
        grad: Sequence[float],
        moments: AdamMoments,
        step: int,
        lr: float,
        config: TrainConfig,
        best: Optional[ParamVector] = None,
) -> Tuple[ParamVector, AdamMoments]:
    """
    One bias-corrected Adam update, ``step`` counts from 1.

    Frozen entries keep their exact value and zero moments; updated values
    are lifted to the parameter's lower bound.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.values.shape or moments.m.shape != params.values.shape:
        raise InvalidInputError(
            f"gradient {grad.shape} and moments {moments.m.shape} must match parameters {params.values.shape}"
        )
    if step < 1:
        raise InvalidInputError(f"Adam steps count from 1, got {step}")
    mask = params.mask
    if not np.all(np.isfinite(grad[mask])):
        bad = [params.names[i] for i in np.nonzero(mask & ~np.isfinite(grad))[0]]
        raise DivergedTrainingError(f"non-finite gradient for {', '.join(bad)}", best=best, step=step)

    g = np.where(mask, grad, 0.)
    m = np.where(mask, config.beta1 * moments.m + (1. - config.beta1) * g, 0.)
    v = np.where(mask, config.beta2 * moments.v + (1. - config.beta2) * g * g, 0.)
    m_hat = m / (1. - config.beta1 ** step)
    v_hat = v / (1. - config.beta2 ** step)
    values = params.values - lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    values = params.clamp(np.where(mask, values, params.values))
    return params.with_values(values), AdamMoments(m, v)


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    wall_times: List[float] = field(default_factory=list)
    best_loss: float = math.inf
    best_step: int = -1
    best_params: Optional[ParamVector] = None
    #: (step, number of halvings) of the steps that needed a smaller learning rate
    rejected: List[Tuple[int, int]] = field(default_factory=list)
    last_improvement: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.losses)

    def record(self, step: int, loss: float, lr: float, params: ParamVector, wall_time: float, min_delta: float = 0.):
        self.losses.append(loss)
        self.lrs.append(lr)
        self.wall_times.append(wall_time)
        if loss < self.best_loss - min_delta:
            self.last_improvement = step
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_step = step
            self.best_params = params

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else math.nan

    @property
    def rmse(self) -> float:
        """Root mean square temperature error in K of the best snapshot"""
        return math.sqrt(self.best_loss)

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.array(self.losses)) if self.losses else np.zeros(0)

    def to_dict(self) -> dict:
        return {
            "n_steps": len(self.losses),
            "initial_loss": self.initial_loss,
            "final_loss": self.losses[-1] if self.losses else None,
            "best_loss": self.best_loss,
            "best_step": self.best_step,
            "rmse": self.rmse,
            "rejected": [list(r) for r in self.rejected],
            "stopped_early": self.stopped_early,
        }


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Training state from which ``Trainer.fit`` can resume at ``step``"""
    step: int
    values: np.ndarray
    mask: np.ndarray
    moments: AdamMoments
    best_loss: float
    best_step: int
    best_values: Optional[np.ndarray]

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "values": np.asarray(self.values).tolist(),
            "mask": np.asarray(self.mask, dtype=bool).tolist(),
            "moments": self.moments.to_dict(),
            "best_loss": self.best_loss,
            "best_step": self.best_step,
            "best_values": None if self.best_values is None else np.asarray(self.best_values).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Checkpoint":
        try:
            return cls(
                step=int(data["step"]),
                values=np.array(data["values"], dtype=float),
                mask=np.array(data["mask"], dtype=bool),
                moments=AdamMoments(data["moments"]["m"], data["moments"]["v"]),
                best_loss=float(data["best_loss"]),
                best_step=int(data["best_step"]),
                best_values=None if data.get("best_values") is None else np.array(data["best_values"], dtype=float),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidInputError(f"malformed checkpoint: {e!r}")


class Trainer:
    """
    Fits a ReactionSystem to an ArcTrace.

    :param config: TrainConfig
    :param ambient: AmbientModel of the experiment, adiabatic for ARC data
    :param verbose: bool, print progress to stderr
    :param log_every: int, steps between progress lines
    """

    def __init__(
            self,
            config: Optional[TrainConfig] = None,
            ambient: AmbientModel = ADIABATIC,
            verbose: bool = False,
            log_every: int = 100,
    ):
        self.config = config or TrainConfig()
        self.ambient = ambient
        self.verbose = verbose
        self.log_every = max(1, int(log_every))

    def fit(
            self,
            data: ArcTrace,
            init: ReactionSystem,
            mask: Optional[Sequence[bool]] = None,
            resume: Optional[Checkpoint] = None,
            on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
    ) -> Tuple[ReactionSystem, TrainHistory]:
        """
        Run ``config.steps`` loss evaluations with an Adam update after each but the last.

        :return: tuple of (lowest-loss ReactionSystem, TrainHistory)
        """
        config = self.config
        params = ParamVector.from_system(init, mask)
        moments = AdamMoments.zeros(len(params))
        history = TrainHistory()
        start = 0
        if resume is not None:
            params = ParamVector(resume.values, resume.mask, init.stages)
            moments = resume.moments
            start = resume.step
            history.best_loss = resume.best_loss
            history.best_step = resume.best_step
            history.last_improvement = max(0, resume.best_step)
            if resume.best_values is not None:
                history.best_params = params.with_values(resume.best_values)
            self._log(f"resuming at step {start}")

        wall = time.perf_counter()
        try:
            report = self._evaluate(init, data, params)
        except IntegrationError as e:
            raise DivergedTrainingError(
                f"the initial parameters can not be integrated: {e}", step=start, history=history,
            ) from e

        step = start
        while True:
            lr = lr_schedule(config, step)
            now = time.perf_counter()
            history.record(step, report.loss, lr, params, now - wall, config.min_delta)
            wall = now

            if step % self.log_every == 0:
                self._log(f"step {step}: loss {report.loss:.6g} K², best {history.best_loss:.6g} at {history.best_step}, lr {lr:.3g}")

            if step >= config.steps - 1:
                break
            if config.early_stop and step - history.last_improvement >= config.patience:
                history.stopped_early = True
                self._log(f"no improvement since step {history.last_improvement}, stopping at {step}")
                break

            previous = params, moments
            try:
                params, moments = adam_step(params, report.gradient, moments, step + 1, lr, config, history.best_params)
                report = self._evaluate(init, data, params)
            except IntegrationError as e:
                if not config.rollback:
                    raise DivergedTrainingError(
                        f"integration failed at step {step + 1}: {e}",
                        best=history.best_params, step=step + 1, history=history,
                    ) from e
                params, moments, report = self._retry(init, data, previous, report.gradient, step, lr, history, e)

            step += 1
            if on_checkpoint and config.checkpoint_every and step % config.checkpoint_every == 0:
                on_checkpoint(self.checkpoint(step, params, moments, history))

        if history.best_params is None:
            history.best_params = params
        return history.best_params.to_system(init.cell), history

    def checkpoint(self, step: int, params: ParamVector, moments: AdamMoments, history: TrainHistory) -> Checkpoint:
        return Checkpoint(
            step=step,
            values=params.values,
            mask=params.mask,
            moments=moments,
            best_loss=history.best_loss,
            best_step=history.best_step,
            best_values=None if history.best_params is None else history.best_params.values,
        )

    def fit_multistart(
            self,
            data: ArcTrace,
            init: ReactionSystem,
            mask: Optional[Sequence[bool]] = None,
    ) -> Tuple[ReactionSystem, TrainHistory]:
        """
        ``config.restarts`` fits, the first from ``init``, the others from ``init``
        with seeded Gaussian noise of ``config.restart_noise`` on log A and log h.
        Returns the run with the lowest loss.
        """
        config = self.config
        rng = np.random.default_rng(config.seed)
        base = ParamVector.from_system(init, mask)
        best = None
        last_error = None
        for run in range(config.restarts):
            start = init
            if run:
                noise = rng.normal(0., config.restart_noise, len(base))
                perturbed = np.zeros(len(base), dtype=bool)
                for i in range(base.n_stages):
                    perturbed[i * N_PER_STAGE + LOG_ENTRIES[0]] = True
                    perturbed[i * N_PER_STAGE + LOG_ENTRIES[2]] = True
                values = np.where(perturbed & base.mask, base.values + noise, base.values)
                start = base.with_values(values).to_system(init.cell)
            try:
                system, history = self.fit(data, start, mask)
            except DivergedTrainingError as e:
                self._log(f"restart {run}: {e}")
                last_error = e
                continue
            self._log(f"restart {run}: best loss {history.best_loss:.6g} K²")
            if best is None or history.best_loss < best[1].best_loss:
                best = system, history
        if best is None:
            raise last_error
        return best

    def _evaluate(self, init: ReactionSystem, data: ArcTrace, params: ParamVector) -> LossReport:
        config = self.config
        return grad_loss(
            init, data, params,
            tol=config.tol,
            ambient=self.ambient,
            resample_dt=config.resample_dt,
            max_steps=config.max_integrator_steps,
        )

    def _retry(self, init, data, previous, gradient, step, lr, history, error):
        params, moments = previous
        config = self.config
        for halving in range(1, config.max_halvings + 1):
            self._log(f"step {step + 1} failed ({error}), retrying with lr/{2 ** halving}")
            try:
                new_params, new_moments = adam_step(
                    params, gradient, moments, step + 1, lr / 2 ** halving, config, history.best_params,
                )
                report = self._evaluate(init, data, new_params)
            except IntegrationError as e:
                error = e
                continue
            history.rejected.append((step + 1, halving))
            return new_params, new_moments, report

        raise DivergedTrainingError(
            f"integration failed at step {step + 1} after {config.max_halvings} learning rate halvings: {error}",
            best=history.best_params, step=step + 1, history=history,
        ) from error

    def _log(self, *args):
        if self.verbose:
            print(*args, file=sys.stderr)
