"""beta-VAE proposal model.

The encoder maps a state ``x`` to ``(mu, log_sigma)`` of a diagonal Gaussian
posterior; the decoder maps a latent ``z`` to a reconstruction.  With a sum of
squared errors reconstruction loss and a standard normal prior, the model
density of a trained VAE is proportional to

    Gamma(x) = N(mu(x); 0, I) * prod_m sigma_m(x),

which is what the SLMC acceptance ratio uses (see :meth:`VaeModel.log_gamma`).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, TrainingError
from .nn import AdamState, Network, adam_step, read_weights, save_weights

logger = logging.getLogger(__name__)

ENCODER_HIDDEN = (256, 256, 128, 128, 64, 32)
DECODER_HIDDEN = (32, 64, 128, 128, 256, 256)


class VaeModel:
    """Gaussian encoder plus deterministic-mean decoder.

    Parameters
    ----------
    encoder : Network
        ``D -> 2M``.  The first ``M`` outputs are ``mu``, the last ``M`` are
        ``log sigma`` (clamped to ``logsigma_clamp`` before use).
    decoder : Network
        ``M -> D``.
    beta_vae : float
        Weight of the KL term.
    """

    def __init__(self, encoder: Network, decoder: Network, beta_vae: float, logsigma_clamp=(-10.0, 10.0)):
        if encoder.output_dim % 2:
            raise DimensionError("encoder output dim must be 2M")
        m = encoder.output_dim // 2
        if decoder.input_dim != m:
            raise DimensionError(f"decoder input dim {decoder.input_dim} != latent dim {m}")
        if decoder.output_dim != encoder.input_dim:
            raise DimensionError("decoder output dim must equal encoder input dim")
        if not beta_vae > 0:
            raise ValueError("beta_vae must be positive")
        lo, hi = logsigma_clamp
        if not lo < hi:
            raise ValueError("logsigma_clamp needs lo < hi")
        self.encoder = encoder
        self.decoder = decoder
        self.beta_vae = float(beta_vae)
        self.logsigma_clamp = (float(lo), float(hi))

    @property
    def dim(self) -> int:
        return self.encoder.input_dim

    @property
    def latent_dim(self) -> int:
        return self.decoder.input_dim

    def copy(self):
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.beta_vae, self.logsigma_clamp)

    def params(self):
        return self.encoder.params() + self.decoder.params()

    def encode(self, x):
        """Return ``(mu, log_sigma)`` with ``log_sigma`` already clamped."""
        h = self.encoder.forward(x)
        m = self.latent_dim
        return h[..., :m], np.clip(h[..., m:], *self.logsigma_clamp)

    def decode(self, z):
        return self.decoder.forward(z)

    def log_gamma(self, x):
        """``log Gamma(x)`` without its additive normalizing constant."""
        mu, log_sigma = self.encode(x)
        return -0.5 * np.sum(mu * mu, axis=-1) + np.sum(log_sigma, axis=-1)

    def sample(self, n, rng):
        """Draw ``n`` proposals ``Dec(z)``, ``z ~ N(0, I_M)``; shape ``(n, D)``.

        The output depends only on the weights and the generator state.
        """
        z = rng.standard_normal((n, self.latent_dim))
        x = self.decode(z)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("decoder produced non-finite proposals")
        return x

    def sample_proposal(self, rng):
        return self.sample(1, rng)[0]


def build_vae(dim, latent_dim=None, beta_vae=1.0, rng=None, encoder_hidden=ENCODER_HIDDEN,
              decoder_hidden=DECODER_HIDDEN, logsigma_clamp=(-10.0, 10.0)):
    """Fresh VAE with gelu hidden layers and linear output heads.

    ``latent_dim`` defaults to ``dim``.  Hidden sizes default to the
    256-256-128-128-64-32 stack (mirrored in the decoder).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    m = dim if latent_dim is None else latent_dim
    enc = Network.mlp([dim, *encoder_hidden, 2 * m], rng)
    dec = Network.mlp([m, *decoder_hidden, dim], rng)
    return VaeModel(enc, dec, beta_vae, logsigma_clamp)


def elbo_loss(model: VaeModel, x, rng=None, xi=None, grad=True):
    """Negated beta-VAE objective on a batch, with exact gradients.

    Per datum the loss is ``SSE(x, Dec(z)) + beta_vae * KL(q(z|x) || N(0, I))``
    with ``z = mu + sigma * xi``.  The returned loss is the batch mean and the
    gradients are those of that mean.  Pass ``xi`` to freeze the noise.

    Returns
    -------
    loss : float
    grads : list of arrays or None
        Ordered like ``model.params()``.
    parts : dict
        Batch-mean ``sse`` and ``kl``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    m = model.latent_dim
    lo, hi = model.logsigma_clamp
    h = model.encoder.forward(x, keep=grad)
    mu, raw = h[:, :m], h[:, m:]
    log_sigma = np.clip(raw, lo, hi)
    sigma = np.exp(log_sigma)
    if xi is None:
        xi = rng.standard_normal((n, m))
    xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), (n, m))
    z = mu + sigma * xi
    xhat = model.decoder.forward(z, keep=grad)
    resid = xhat - x
    sse = np.sum(resid * resid, axis=1)
    kl = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - 2.0 * log_sigma, axis=1)
    beta = model.beta_vae
    loss = float(np.mean(sse + beta * kl))
    parts = {"sse": float(np.mean(sse)), "kl": float(np.mean(kl))}
    if not np.isfinite(loss):
        raise TrainingError("non-finite ELBO loss")
    if not grad:
        return loss, None, parts
    dec_grads, g_z = model.decoder.backward(2.0 * resid / n)
    g_mu = g_z + beta * mu / n
    inside = (raw >= lo) & (raw <= hi)
    g_ls = (g_z * sigma * xi + beta * (sigma * sigma - 1.0) / n) * inside
    enc_grads, _ = model.encoder.backward(np.concatenate([g_mu, g_ls], axis=1))
    return loss, enc_grads + dec_grads, parts


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 516
    learning_rate: float = 1e-3
    beta_vae: float | None = None
    rng_seed: int = 0
    logsigma_clamp: tuple | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.logsigma_clamp is not None and not self.logsigma_clamp[0] < self.logsigma_clamp[1]:
            raise ValueError("logsigma_clamp needs lo < hi")


@dataclass
class TrainTrace:
    epoch_losses: list = field(default_factory=list)
    steps: int = 0

    @property
    def initial(self):
        return self.epoch_losses[0] if self.epoch_losses else float("nan")

    @property
    def final(self):
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def train(model: VaeModel, dataset, cfg: TrainConfig):
    """Minibatch Adam on :func:`elbo_loss`, warm-started from ``model``.

    ``model`` itself is not modified; training starts from an exact copy of
    its weights and the trained copy is returned with the per-epoch mean loss.
    The result is a deterministic function of ``(model, dataset, cfg)``.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("dataset must be a non-empty (n, D) array")
    if data.shape[1] != model.dim:
        raise DimensionError(f"dataset dim {data.shape[1]} != model dim {model.dim}")
    if not np.all(np.isfinite(data)):
        raise ValueError("dataset contains non-finite values")
    out = model.copy()
    if cfg.beta_vae is not None:
        out.beta_vae = float(cfg.beta_vae)
    if cfg.logsigma_clamp is not None:
        out.logsigma_clamp = tuple(float(v) for v in cfg.logsigma_clamp)
    rng = np.random.Generator(np.random.Philox(cfg.rng_seed))
    params = out.params()
    opt = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    trace = TrainTrace()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = data[order[start:start + cfg.batch_size]]
            try:
                loss, grads, _ = elbo_loss(out, batch, rng)
                adam_step(params, grads, opt)
            except TrainingError as exc:
                raise TrainingError(
                    f"epoch {epoch}, batch {b}: {exc}", param_index=exc.param_index, epoch=epoch, batch=b
                ) from exc
            total += loss * len(batch)
            trace.steps += 1
        trace.epoch_losses.append(total / n)
    if trace.final > trace.initial:
        logger.warning("training loss rose from %.6g to %.6g", trace.initial, trace.final)
    return out, trace


def isometric_factor(model: VaeModel, samples, delta=1e-3):
    """Per-latent-dimension isometric factor, averaged over ``samples``.

    For each sample the factor is ``sqrt(2 sigma_m^2 / beta_vae)`` times the
    finite-difference norm ``||Dec(mu) - Dec(mu + delta e_m)|| / delta``.
    Values near 1 mean ``Gamma`` is a faithful model density.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("need at least one sample")
    if not delta > 0:
        raise ValueError("delta must be positive")
    mu, log_sigma = model.encode(x)
    scale = np.sqrt(2.0 * np.exp(2.0 * log_sigma) / model.beta_vae)
    base = model.decode(mu)
    iso = np.empty(model.latent_dim)
    for m in range(model.latent_dim):
        shifted = mu.copy()
        shifted[:, m] += delta
        step = np.linalg.norm(model.decode(shifted) - base, axis=1) / delta
        iso[m] = np.mean(scale[:, m] * step)
    return iso


def latent_importance(model: VaeModel, samples):
    """``kappa_m = (beta_vae / 2) * mean(1 / sigma_m^2)`` over ``samples``."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("need at least one sample")
    _, log_sigma = model.encode(x)
    return 0.5 * model.beta_vae * np.mean(np.exp(-2.0 * log_sigma), axis=0)


def save_model(model: VaeModel, directory, provenance=None):
    """Write ``encoder.bin``, ``decoder.bin`` and ``model.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_weights(model.encoder, d / "encoder.bin")
    save_weights(model.decoder, d / "decoder.bin")
    meta = {
        "format": "vaeslmc-vae",
        "version": 1,
        "D": model.dim,
        "M": model.latent_dim,
        "beta_vae": model.beta_vae,
        "logsigma_clamp": list(model.logsigma_clamp),
        "provenance": provenance or {},
    }
    (d / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(directory) -> VaeModel:
    d = Path(directory)
    meta = json.loads((d / "model.json").read_text())
    model = VaeModel(
        read_weights(d / "encoder.bin"),
        read_weights(d / "decoder.bin"),
        meta["beta_vae"],
        tuple(meta.get("logsigma_clamp", (-10.0, 10.0))),
    )
    if model.dim != meta["D"] or model.latent_dim != meta["M"]:
        raise DimensionError(
            f"checkpoint sidecar says D={meta['D']}, M={meta['M']} but weights are "
            f"D={model.dim}, M={model.latent_dim}"
        )
    return model


def load_provenance(directory) -> dict:
    return json.loads((Path(directory) / "model.json").read_text()).get("provenance", {})
