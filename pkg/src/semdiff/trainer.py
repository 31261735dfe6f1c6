"""Adam optimization of the noise-prediction objective with gradient accumulation."""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .condmaps import assemble_guidance
from .diffusion import cosine_schedule, q_sample
from .exceptions import ConfigError, ContractError
from .text import encode_metadata

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 5
    accumulation_steps: int = 5
    total_steps: int = 2000
    learning_rate: float = 1e-4
    seed: int = 0
    validation_interval: int = 100
    validation_fraction: float = 0.1
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    @property
    def effective_batch(self):
        return self.batch_size * self.accumulation_steps

    def to_dict(self):
        return asdict(self)


def new_adam_state():
    return {"t": 0, "m": {}, "v": {}}


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update, applied in place.

    Args:
        params: name -> ndarray, updated in place.
        grads: name -> ndarray (missing or None entries count as zero).
        state: dict from :func:`new_adam_state`, updated in place.

    Returns:
        ``(params, state)``.
    """
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.shape(g) != p.shape:
            raise ContractError(f"{name}: gradient shape {np.shape(g)} != parameter shape {p.shape}")
        m = state["m"].get(name)
        v = state["v"].get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise ContractError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state["m"][name], state["v"][name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass
class TrainingArrays:
    """Model-ready arrays for a list of FOVs."""

    x0: np.ndarray        # (N, 3, H, W) in [-1, 1]
    guidance: np.ndarray  # (N, 16, H, W)
    text: np.ndarray      # (N, L, D)

    def __len__(self):
        return len(self.x0)

    def take(self, idx):
        return TrainingArrays(self.x0[idx], self.guidance[idx], self.text[idx])


def prepare_arrays(fovs, text_dim):
    if not fovs:
        raise ConfigError("empty dataset")
    x0 = np.stack([2.0 * f.image - 1.0 for f in fovs])
    guidance = np.stack([assemble_guidance(f.cells, f.nuclei, f.image) for f in fovs])
    text = np.stack([encode_metadata(f.assay, f.indication, text_dim) for f in fovs])
    return TrainingArrays(x0, guidance, text)


def train_step(batch, denoiser, schedule, rng, loss_scale=1.0, t=None, eps=None):
    """Forward + backward for one micro-batch; gradients accumulate on the parameters.

    Draws a uniform timestep and unit Gaussian noise per item unless ``t`` /
    ``eps`` are given. The backpropagated loss is multiplied by
    ``loss_scale`` (1 / accumulation steps in :func:`fit`); the unscaled MSE
    is returned.
    """
    n = len(batch)
    if t is None:
        t = rng.integers(0, schedule.T, size=n)
    if eps is None:
        eps = rng.standard_normal(batch.x0.shape)
    x_t = q_sample(batch.x0, t, eps, schedule)
    eps_hat = denoiser(x_t, t, batch.guidance, batch.text)
    loss = ad.mse(eps_hat, eps)
    (loss * loss_scale).backward() if loss_scale != 1.0 else loss.backward()
    return loss.item()


class FixedValidation:
    """Validation loss with timesteps and noise frozen once, so values are comparable over training."""

    def __init__(self, arrays, schedule, seed, chunk=32):
        rng = np.random.default_rng([seed, 0xA11])
        self.arrays = arrays
        self.t = rng.integers(0, schedule.T, size=len(arrays))
        self.eps = rng.standard_normal(arrays.x0.shape)
        self.x_t = q_sample(arrays.x0, self.t, self.eps, schedule)
        self.chunk = chunk

    def __call__(self, denoiser):
        total = 0.0
        for s in range(0, len(self.arrays), self.chunk):
            sl = slice(s, s + self.chunk)
            pred = denoiser.predict(self.x_t[sl], self.t[sl], self.arrays.guidance[sl], self.arrays.text[sl])
            total += float(((pred - self.eps[sl]) ** 2).sum())
        return total / self.eps.size


def split_indices(n, fraction, seed):
    """Disjoint (train, validation) index arrays; depends only on (n, fraction, seed)."""
    if n < 2:
        raise ConfigError("need at least two FOVs to split train/validation")
    n_val = min(max(1, int(round(n * fraction))), n - 1)
    perm = np.random.default_rng([seed, 0x5917]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainResult:
    train_steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_step: int = 0
    best_val: float = float("inf")
    best_state: dict = None
    train_index: np.ndarray = None
    val_index: np.ndarray = None
    seconds: float = 0.0

    def curve_rows(self):
        """(step, train_loss, val_loss) rows; val is blank where not evaluated."""
        val = dict(zip(self.val_steps, self.val_loss))
        rows = [(0, "", val.get(0, ""))] if 0 in val else []
        rows += [(s, tl, val.get(s, "")) for s, tl in zip(self.train_steps, self.train_loss)]
        return rows


def fit(arrays, denoiser, config, schedule=None, callback=None):
    """Run ``config.total_steps`` optimizer steps.

    Each step accumulates ``accumulation_steps`` micro-batches of
    ``batch_size`` before one Adam update. Validation loss is measured on a
    seed-fixed held-out split at step 0, every ``validation_interval`` steps
    and at the end; the best-validation parameters are kept.
    """
    if len(arrays) == 0:
        raise ConfigError("empty dataset")
    if config.batch_size < 1 or config.accumulation_steps < 1 or config.total_steps < 0:
        raise ConfigError(f"invalid training sizes in {config}")
    schedule = schedule or cosine_schedule(1000)
    train_idx, val_idx = split_indices(len(arrays), config.validation_fraction, config.seed)
    train, val = arrays.take(train_idx), arrays.take(val_idx)
    validate = FixedValidation(val, schedule, config.seed)
    rng = np.random.default_rng([config.seed, 0x7EA1])
    state = new_adam_state()
    names = list(denoiser.params)
    res = TrainResult(train_index=train_idx, val_index=val_idx)

    def record_val(step):
        v = validate(denoiser)
        res.val_steps.append(step)
        res.val_loss.append(v)
        if v < res.best_val:
            res.best_val, res.best_step, res.best_state = v, step, denoiser.state_dict()
        logger.info("step %d val_loss %.6f", step, v)

    start = time.time()
    record_val(0)
    order, cursor = rng.permutation(len(train)), 0
    for step in range(1, config.total_steps + 1):
        denoiser.zero_grad()
        window = 0.0
        for _ in range(config.accumulation_steps):
            if cursor + config.batch_size > len(order):
                order, cursor = rng.permutation(len(train)), 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
            window += train_step(train.take(idx), denoiser, schedule, rng,
                                 loss_scale=1.0 / config.accumulation_steps)
        params = {k: denoiser.params[k].data for k in names}
        grads = {k: denoiser.params[k].grad for k in names}
        adam_step(params, grads, state, config.learning_rate, config.adam_betas, config.adam_eps)
        res.train_steps.append(step)
        res.train_loss.append(window / config.accumulation_steps)
        if step % config.validation_interval == 0 or step == config.total_steps:
            record_val(step)
        if callback is not None:
            callback(step, res)
    denoiser.zero_grad()
    res.seconds = time.time() - start
    return res
