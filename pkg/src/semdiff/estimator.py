"""Estimator-style wrapper around the denoiser, trainer and sampler."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import cosine_schedule, ddim_sample, respace
from .exceptions import ConfigError, DimensionError
from .text import encode_metadata
from .trainer import FixedValidation, TrainConfig, fit, prepare_arrays

FORMAT = "semdiff-checkpoint/1"


class SemanticDiffusionModel(BaseEstimator):
    """Guidance- and metadata-conditioned diffusion model.

    ``fit`` takes a list of :class:`~semdiff.dataio.Fov` records; ``sample``
    turns guidance maps and metadata tokens into RGB images in [0, 1].

    Parameters
    ----------
    base_channels, channel_multipliers, heads, head_dim, text_embed_dim, spade_hidden :
        Denoiser architecture, see :class:`~semdiff.denoiser.DenoiserConfig`.
    timesteps : int
        Length T of the cosine noise schedule.
    sampling_steps : int
        Respaced DDIM steps used by ``sample``.
    batch_size, accumulation_steps, max_steps, learning_rate :
        Optimizer settings; one step consumes ``batch_size * accumulation_steps`` images.
    validation_interval, validation_fraction :
        Held-out split and how often its loss is measured.
    clip_denoised : bool
        Clip x0 estimates to [-1, 1] while sampling.
    sample_batch : int
        Images denoised together in ``sample``.
    random_state : int
        Seeds initialization, the split and all training draws.
    """

    def __init__(self, base_channels=32, channel_multipliers=(1, 2, 4), heads=8, head_dim=16,
                 text_embed_dim=32, spade_hidden=32, timesteps=1000, sampling_steps=40,
                 batch_size=5, accumulation_steps=5, max_steps=2000, learning_rate=1e-4,
                 validation_interval=100, validation_fraction=0.1, clip_denoised=True,
                 sample_batch=32, random_state=0):
        self.base_channels = base_channels
        self.channel_multipliers = channel_multipliers
        self.heads = heads
        self.head_dim = head_dim
        self.text_embed_dim = text_embed_dim
        self.spade_hidden = spade_hidden
        self.timesteps = timesteps
        self.sampling_steps = sampling_steps
        self.batch_size = batch_size
        self.accumulation_steps = accumulation_steps
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.validation_interval = validation_interval
        self.validation_fraction = validation_fraction
        self.clip_denoised = clip_denoised
        self.sample_batch = sample_batch
        self.random_state = random_state

    def _denoiser_config(self):
        return DenoiserConfig(base_channels=self.base_channels,
                              channel_multipliers=tuple(self.channel_multipliers),
                              heads=self.heads, head_dim=self.head_dim,
                              text_embed_dim=self.text_embed_dim, spade_hidden=self.spade_hidden)

    def _train_config(self):
        return TrainConfig(batch_size=self.batch_size, accumulation_steps=self.accumulation_steps,
                           total_steps=self.max_steps, learning_rate=self.learning_rate,
                           seed=self.random_state, validation_interval=self.validation_interval,
                           validation_fraction=self.validation_fraction)

    def _init_model(self):
        self.schedule_ = cosine_schedule(self.timesteps)
        self.denoiser_ = Denoiser(self._denoiser_config(), seed=self.random_state)

    def fit(self, X, y=None, callback=None):
        if len(X) == 0:
            raise ConfigError("cannot fit on an empty dataset")
        self._init_model()
        arrays = prepare_arrays(list(X), self.text_embed_dim)
        self.result_ = fit(arrays, self.denoiser_, self._train_config(), self.schedule_, callback)
        self.steps_ = self.max_steps
        self.train_index_ = self.result_.train_index
        self.val_index_ = self.result_.val_index
        return self

    def use_best(self):
        """Swap in the best-validation parameters seen during ``fit``."""
        check_is_fitted(self, "result_")
        if self.result_.best_state is not None:
            self.denoiser_.load_state_dict(self.result_.best_state)
        return self

    def encode(self, assay, indication):
        return encode_metadata(assay, indication, self.text_embed_dim)

    def denoising_loss(self, X, seed=0):
        """MSE of the noise prediction on ``X`` with frozen timesteps/noise."""
        check_is_fitted(self, "denoiser_")
        arrays = prepare_arrays(list(X), self.text_embed_dim)
        return FixedValidation(arrays, self.schedule_, seed)(self.denoiser_)

    def score(self, X, y=None):
        return -self.denoising_loss(X)

    def sample(self, guidance, text, seeds, steps=None):
        """Generate images by respaced deterministic DDIM.

        Args:
            guidance: ``(N, 16, H, W)`` guidance maps.
            text: ``(N, L, D)`` tokens (or one ``(L, D)`` matrix for all).
            seeds: N integer seeds; image i starts from noise drawn with seed i.
            steps: respacing length (defaults to ``sampling_steps``).

        Returns:
            ``(N, 3, H, W)`` images in [0, 1].
        """
        check_is_fitted(self, "denoiser_")
        guidance = np.asarray(guidance, dtype=np.float64)
        if guidance.ndim == 3:
            guidance = guidance[None]
        n, _, h, w = guidance.shape
        text = np.asarray(text, dtype=np.float64)
        if text.ndim == 2:
            text = np.broadcast_to(text, (n,) + text.shape)
        seeds = list(np.atleast_1d(seeds))
        if len(seeds) != n or len(text) != n:
            raise DimensionError(f"{n} guidance maps but {len(text)} token sets and {len(seeds)} seeds")
        respaced = respace(self.schedule_, steps or self.sampling_steps)
        clip = 1.0 if self.clip_denoised else None
        out = np.empty((n, self.denoiser_.config.image_channels, h, w))
        for s in range(0, n, self.sample_batch):
            sl = slice(s, min(n, s + self.sample_batch))
            noise = np.stack([np.random.default_rng(int(sd)).standard_normal((3, h, w)) for sd in seeds[sl]])
            g, tok = guidance[sl], text[sl]

            def eps_fn(x, t, g=g, tok=tok):
                with ad.no_grad():
                    return self.denoiser_.forward(x, np.full(len(x), t), g, tok).data

            out[sl] = ddim_sample(eps_fn, noise, respaced, clip_x0=clip)
        return np.clip((out + 1.0) / 2.0, 0.0, 1.0)

    # -- persistence

    def save(self, path, state=None, dtype="f64", extra=None):
        check_is_fitted(self, "denoiser_")
        header = {
            "format": FORMAT,
            "estimator": self.get_params(),
            "denoiser": self.denoiser_.config.to_dict(),
            "schedule": {"T": self.timesteps, "steps": self.sampling_steps, "s": self.schedule_.offset},
            "step": int(getattr(self, "steps_", 0)),
        }
        header["estimator"]["channel_multipliers"] = list(self.channel_multipliers)
        if extra:
            header.update(extra)
        save_checkpoint(path, state if state is not None else self.denoiser_.state_dict(), header, dtype)

    @classmethod
    def load(cls, path):
        state, header = load_checkpoint(path)
        params = dict(header["estimator"])
        params["channel_multipliers"] = tuple(params["channel_multipliers"])
        model = cls(**params)
        model._init_model()
        model.denoiser_.load_state_dict(state)
        model.steps_ = header.get("step", 0)
        model.header_ = header
        return model
