"""Alternating adversarial training of the denoiser and discriminator."""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .autodiff import Tensor, backward
from .checkpoint import (
    CheckpointError,
    assign_network,
    network_meta,
    network_tensors,
    read_checkpoint,
    write_checkpoint,
)
from .imageio import AUGMENTATIONS, augment
from .losses import LossReport, LossWeights, denoiser_loss, discriminator_loss, multiscale_references
from .metrics import psnr, ssim
from .noise import NoiseSpec, sample_training_spec, substream
from .unet import Network, NetworkConfig

log = logging.getLogger(__name__)

RNG_SCHEME = "philox-substream-v1"


@dataclass
class TrainConfig:
    # data
    batch_size: int = 8
    patch_size: int = 64
    epochs: int = 20
    n_patches: int = 500
    val_patches: int = 32
    augment: bool = True
    # optimisation
    lr: float = 1e-4
    d_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-7
    min_delta: float = 1e-3
    # objective
    lambda_l1: float = 1.0
    lambda_pyr: float = 1.0
    lambda_hist: float = 1.0
    lambda_adv: float = 0.01
    adv_form: str = "hinge"
    atw_levels: int = 4
    hist_bins: int = 64
    n_scales: int = 3
    # degradation (8-bit units)
    noise_mode: str = "2d"
    train_sigma: float = -1.0  # < 0: draw from the training intervals
    val_sigma: float = 25.0
    # networks
    channels: int = 1
    rank: int = 2
    denoiser_filters: tuple = (16, 24, 32, 40)
    discriminator_filters: tuple = (8, 12, 16, 20)
    # run
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        self.denoiser_filters = tuple(int(f) for f in self.denoiser_filters)
        self.discriminator_filters = tuple(int(f) for f in self.discriminator_filters)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patch_size % 4:
            raise ValueError("patch size must be divisible by 4")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.lr_patience < 1:
            raise ValueError("lr_patience must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.n_scales != 3:
            raise ValueError("the denoiser emits exactly three scales")
        self.weights  # validates adv_form
        if self.noise_mode not in ("2d", "3d"):
            raise ValueError("noise_mode must be 2d or 3d")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.lambda_pyr, self.lambda_hist, self.lambda_adv, self.adv_form)

    def denoiser_config(self) -> NetworkConfig:
        return NetworkConfig("denoiser", self.denoiser_filters, self.channels, self.rank)

    def discriminator_config(self) -> NetworkConfig:
        return NetworkConfig("discriminator", self.discriminator_filters, self.channels, self.rank)


def config_to_strings(cfg) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            out[f.name] = "true" if v else "false"
        elif isinstance(v, (tuple, list)):
            out[f.name] = ",".join(str(i) for i in v)
        elif isinstance(v, float):
            out[f.name] = repr(v)
        else:
            out[f.name] = str(v)
    return out


def parse_field(cls, name: str, text: str):
    """Parse ``text`` into the type of ``cls``'s default for ``name``."""
    default = {f.name: f.default for f in dataclasses.fields(cls)}[name]
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(i) for i in text.replace(" ", "").split(",") if i)
    return text


def config_from_strings(values: dict[str, str]) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown training keys: {', '.join(sorted(unknown))}")
    return TrainConfig(**{k: parse_field(TrainConfig, k, v) for k, v in values.items()})


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} does not match {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ------------------------------------------------------- plateau schedule


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    epoch_step: int = 0
    lr: float = 1e-4
    best_psnr: float = -math.inf
    plateau_count: int = 0
    reductions: int = 0
    adam_g: AdamState = field(default_factory=AdamState)
    adam_d: AdamState = field(default_factory=AdamState)


def reduce_lr_on_plateau(
    state: TrainState, val_psnr: float, factor: float = 0.5, patience: int = 5, min_lr: float = 0.0, min_delta: float = 1e-3
) -> TrainState:
    """Scale ``state.lr`` by ``factor`` after ``patience`` validations without a ``min_delta`` gain."""
    if val_psnr > state.best_psnr + min_delta:
        state.best_psnr = val_psnr
        state.plateau_count = 0
        return state
    state.plateau_count += 1
    if state.plateau_count >= patience:
        new_lr = max(state.lr * factor, min_lr)
        if new_lr < state.lr:
            state.reductions += 1
        state.lr = new_lr
        state.plateau_count = 0
    return state


# --------------------------------------------------------------- engine


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, report: LossReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass
class ValidationResult:
    psnr: float
    ssim: float
    psnr_noisy: float
    ssim_noisy: float


@dataclass
class DiagnosticRow:
    sigma: float  # 8-bit units
    mean_correlation: float
    correlations: list[float]


class Engine:
    """Owns both networks, their Adam moments and the schedule."""

    def __init__(self, config: TrainConfig | None = None, init: bool = True):
        self.config = config or TrainConfig()
        cfg = self.config
        self.denoiser = Network(cfg.denoiser_config(), substream(cfg.seed, "init", "denoiser") if init else None)
        self.discriminator = Network(cfg.discriminator_config(), substream(cfg.seed, "init", "discriminator") if init else None)
        self.state = TrainState(lr=cfg.lr)
        self.log_hook: Callable[[dict], None] | None = None

    # -------------------------------------------------------------- noise

    def degrade(self, x: np.ndarray, stream) -> np.ndarray:
        """Noisy copies of a batch; one spec and one field per item, seeded from ``stream`` labels."""
        cfg = self.config
        y = np.empty_like(x)
        for i in range(x.shape[0]):
            rng = substream(cfg.seed, *stream, i)
            if cfg.train_sigma >= 0:
                spec = NoiseSpec("gaussian", cfg.train_sigma / 255.0)
            else:
                spec = sample_training_spec(rng, cfg.noise_mode)
            y[i] = spec.apply(x[i], seed=rng)
        return y

    # --------------------------------------------------------------- step

    def _emit(self, record: dict):
        if self.log_hook is not None:
            self.log_hook(record)

    def train_step(self, x: np.ndarray, y: np.ndarray | None = None) -> tuple[LossReport, LossReport]:
        """One discriminator update followed by one denoiser update."""
        cfg = self.config
        dtype = self.denoiser.parameters()["encoder.0.conv1.weight"].dtype
        x = np.asarray(x, dtype=dtype)
        if y is None:
            y = self.degrade(x, ("noise", "step", self.state.step))
        y = np.asarray(y, dtype=dtype)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise NonFiniteLossError("non-finite values in the training batch")
        G, D = self.denoiser, self.discriminator
        lr = self.state.lr

        out = G(Tensor(y))
        xhat = out.image
        clean = Tensor(x)

        # discriminator step: the denoised image is a constant here
        real = D(clean).maps()
        fake = D(xhat.detach()).maps()
        d_report = discriminator_loss(real, fake)
        if not math.isfinite(d_report.total):
            raise NonFiniteLossError("non-finite discriminator loss", d_report)
        for p in D.parameters().values():
            p.grad = None
        backward(d_report.tensor)
        d_grads = {k: p.grad for k, p in D.parameters().items()}
        adam_step(D.parameters(), d_grads, self.state.adam_d, lr * cfg.d_lr_scale, cfg.beta1, cfg.beta2, cfg.eps)

        # denoiser step: gradients flow through the (frozen) discriminator
        D.set_trainable(False)
        fake_maps = D(xhat).maps() if cfg.lambda_adv else None
        refs = multiscale_references(clean, cfg.n_scales)
        g_report = denoiser_loss(
            zip(out.scales, refs), cfg.weights, cfg.atw_levels, cfg.hist_bins, fake_maps, expected_scales=cfg.n_scales
        )
        D.set_trainable(True)
        if not math.isfinite(g_report.total):
            raise NonFiniteLossError("non-finite denoiser loss", g_report)
        for p in G.parameters().values():
            p.grad = None
        backward(g_report.tensor)
        g_grads = {k: p.grad for k, p in G.parameters().items()}
        adam_step(G.parameters(), g_grads, self.state.adam_g, lr, cfg.beta1, cfg.beta2, cfg.eps)

        for net in (G, D):
            for k, p in net.parameters().items():
                if not np.all(np.isfinite(p.data)):
                    raise NonFiniteLossError(f"non-finite parameter {net.role}/{k} after update")
        self.state.step += 1
        self._emit({"kind": "step", "step": self.state.step, "epoch": self.state.epoch, "lr": lr, "g": g_report, "d": d_report})
        return d_report, g_report

    # --------------------------------------------------------- data loop

    def _batch(self, data: np.ndarray, indices: np.ndarray, epoch: int) -> np.ndarray:
        items = []
        for i in indices:
            patch = data[i]
            if self.config.augment:
                rng = substream(self.config.seed, "augment", epoch, int(i))
                patch = augment(patch, AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))])
            items.append(patch)
        return np.stack(items)

    def steps_per_epoch(self, n: int) -> int:
        return max(1, n // self.config.batch_size)

    def run(
        self,
        train: np.ndarray,
        val_clean: np.ndarray | None = None,
        val_noisy: np.ndarray | None = None,
        max_steps: int | None = None,
        on_epoch_end: Callable[[Engine, ValidationResult | None], None] | None = None,
    ) -> list[ValidationResult]:
        """Train until ``config.epochs`` is reached or ``max_steps`` more steps have run.

        The data order, augmentation and noise of every sample are derived
        from ``(seed, epoch, sample index)``, so a run resumed from a
        checkpoint continues exactly where it stopped.
        """
        cfg = self.config
        n = len(train)
        if n < cfg.batch_size:
            raise ValueError(f"need at least one full batch ({cfg.batch_size}) of patches, got {n}")
        spe = self.steps_per_epoch(n)
        history = []
        done = 0
        while self.state.epoch < cfg.epochs:
            perm = substream(cfg.seed, "shuffle", self.state.epoch).permutation(n)
            while self.state.epoch_step < spe:
                if max_steps is not None and done >= max_steps:
                    return history
                b = self.state.epoch_step
                idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                x = self._batch(train, idx, self.state.epoch)
                y = self.degrade(x, ("noise", self.state.epoch, b))
                self.train_step(x, y)
                self.state.epoch_step += 1
                done += 1
            result = None
            if val_clean is not None and len(val_clean):
                result = self.validate(val_clean, val_noisy)
                history.append(result)
                reduce_lr_on_plateau(self.state, result.psnr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr, cfg.min_delta)
                self._emit({"kind": "val", "step": self.state.step, "epoch": self.state.epoch, "lr": self.state.lr, "val": result})
            self.state.epoch += 1
            self.state.epoch_step = 0
            if on_epoch_end is not None:
                on_epoch_end(self, result)
        return history

    # ---------------------------------------------------------- evaluate

    def make_validation_set(self, clean: np.ndarray) -> np.ndarray:
        """Frozen noisy copies at ``val_sigma``; identical on every call."""
        sigma = self.config.val_sigma / 255.0
        return np.stack(
            [NoiseSpec("gaussian", sigma).apply(c, seed=substream(self.config.seed, "val", i)) for i, c in enumerate(clean)]
        ).astype(clean.dtype)

    def denoise(self, y: np.ndarray, batch: int = 8) -> np.ndarray:
        dtype = self.denoiser.parameters()["encoder.0.conv1.weight"].dtype
        return denoise_array(self.denoiser, y.astype(dtype), batch)

    def validate(self, val_clean: np.ndarray, val_noisy: np.ndarray) -> ValidationResult:
        if len(val_clean) == 0:
            raise ValueError("empty validation set")
        xhat = self.denoise(val_noisy)
        ps, ss, pn, sn = [], [], [], []
        for c, d, y in zip(val_clean, xhat, val_noisy):
            ps.append(psnr(d, c))
            ss.append(ssim(d, c, channel_axis=0))
            pn.append(psnr(y, c))
            sn.append(ssim(y, c, channel_axis=0))
        return ValidationResult(float(np.mean(ps)), float(np.mean(ss)), float(np.mean(pn)), float(np.mean(sn)))

    def content_enhancer_diagnostic(self, image: np.ndarray, sigmas=(0, 5, 10, 15, 25, 35, 50), n_filters: int = 4):
        if self.state.step == 0:
            warnings.warn("content-enhancer diagnostic on an untrained denoiser", RuntimeWarning, stacklevel=2)
        return content_enhancer_diagnostic(self.denoiser, image, sigmas, self.config.seed, n_filters)

    # -------------------------------------------------------- persistence

    def save(self, path) -> Path:
        cfg = self.config
        st = self.state
        tensors = {}
        tensors.update(network_tensors(self.denoiser, "denoiser"))
        tensors.update(network_tensors(self.discriminator, "discriminator"))
        for tag, adam in (("adam_g", st.adam_g), ("adam_d", st.adam_d)):
            for k in adam.m:
                tensors[f"{tag}.m/{k}"] = adam.m[k]
                tensors[f"{tag}.v/{k}"] = adam.v[k]
        meta = {"tool_version": __version__}
        meta.update({f"train.{k}": v for k, v in config_to_strings(cfg).items()})
        meta.update(network_meta(self.denoiser, "denoiser"))
        meta.update(network_meta(self.discriminator, "discriminator"))
        meta.update(
            {
                "state.step": str(st.step),
                "state.epoch": str(st.epoch),
                "state.epoch_step": str(st.epoch_step),
                "state.lr": repr(st.lr),
                "state.best_psnr": repr(st.best_psnr),
                "state.plateau_count": str(st.plateau_count),
                "state.reductions": str(st.reductions),
                "state.adam_g_t": str(st.adam_g.t),
                "state.adam_d_t": str(st.adam_d.t),
                "rng.scheme": RNG_SCHEME,
                "rng.root_seed": str(cfg.seed),
            }
        )
        return write_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> Engine:
        tensors, meta = read_checkpoint(path)
        if meta.get("rng.scheme") != RNG_SCHEME:
            raise CheckpointError(f"{path}: unknown RNG scheme {meta.get('rng.scheme')!r}")
        cfg = config_from_strings({k[6:]: v for k, v in meta.items() if k.startswith("train.")})
        eng = cls(cfg, init=False)
        assign_network(eng.denoiser, tensors, "denoiser")
        assign_network(eng.discriminator, tensors, "discriminator")
        st = eng.state
        st.step = int(meta["state.step"])
        st.epoch = int(meta["state.epoch"])
        st.epoch_step = int(meta["state.epoch_step"])
        st.lr = float(meta["state.lr"])
        st.best_psnr = float(meta["state.best_psnr"])
        st.plateau_count = int(meta["state.plateau_count"])
        st.reductions = int(meta["state.reductions"])
        for tag, adam in (("adam_g", st.adam_g), ("adam_d", st.adam_d)):
            adam.t = int(meta[f"state.{tag}_t"])
            for key, arr in tensors.items():
                if key.startswith(f"{tag}.m/"):
                    adam.m[key[len(tag) + 3 :]] = arr.copy()
                elif key.startswith(f"{tag}.v/"):
                    adam.v[key[len(tag) + 3 :]] = arr.copy()
        return eng


def denoise_array(denoiser: Network, y: np.ndarray, batch: int = 8) -> np.ndarray:
    """Full-resolution denoiser output for ``[N, C, *S]`` inputs with extents divisible by 4."""
    outs = []
    for i in range(0, len(y), batch):
        outs.append(denoiser(Tensor(y[i : i + batch])).image.data)
    return np.concatenate(outs)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return 0.0
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def content_enhancer_diagnostic(
    denoiser: Network, image: np.ndarray, sigmas=(0, 5, 10, 15, 25, 35, 50), seed: int = 0, n_filters: int = 4
) -> list[DiagnosticRow]:
    """Correlation between content-enhancer filter responses and the denoised image per noise level.

    ``image`` is a clean ``[C, *S]`` array. The ``n_filters`` enhancer
    outputs that correlate best at the first probe level are tracked across
    all levels.
    """
    if denoiser.enhancer is None:
        raise ValueError("only the denoiser has a content enhancer")
    image = np.asarray(image, dtype=denoiser.parameters()["encoder.0.conv1.weight"].dtype)
    responses = []
    for s in sigmas:
        y = NoiseSpec("gaussian", s / 255.0).apply(image, seed=substream(seed, "diagnose", repr(float(s))))
        yt = Tensor(y[None])
        ce = denoiser.enhancer(yt).data[0]
        xhat = denoiser(yt).image.data[0].mean(axis=0)
        responses.append([_pearson(ch, xhat) for ch in ce])
    first = np.array(responses[0])
    chosen = np.argsort(-first, kind="stable")[:n_filters]
    return [DiagnosticRow(float(s), float(np.mean([r[c] for c in chosen])), [r[c] for c in chosen]) for s, r in zip(sigmas, responses)]
