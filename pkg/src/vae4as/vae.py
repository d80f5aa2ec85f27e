"""Variational autoencoder with hand-derived gradients.

The encoder is an MLP trunk followed by two linear heads emitting the
latent mean and log-variance; the decoder mirrors the trunk and ends in a
sigmoid.  Per-instance losses are summed over features, batch losses are
the mean over instances.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, NumericalError
from .nn import (LEAKY_SLOPE, SIGMOID_EPS, AdamState, DenseLayer, adam_step, backward,
                 forward, gradient_check as _gradient_check, he_normal_init, layer_params)

LOGVAR_CLAMP = 10.0
LOSS_KINDS = ("binary_cross_entropy", "squared_error")
CHECKPOINT_VERSION = 1


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


def default_architecture(d: int) -> tuple[tuple[int, ...], int]:
    """Hidden sizes and latent dimension used when none are configured."""
    if d < 10:
        return (8,), 2
    if d < 29:
        return (16,), 4
    return (64,), 8


def kl_loss(mu, logvar) -> float | np.ndarray:
    """KL divergence of N(mu, exp(logvar)) from N(0, I), summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ContractViolation("mu and logvar shapes differ")
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)


def reconstruction_loss(x, xhat, loss_kind: str) -> float | np.ndarray:
    """Feature-summed reconstruction loss; ``xhat`` is clamped away from 0 and 1."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ContractViolation(f"shape mismatch {x.shape} vs {xhat.shape}")
    if loss_kind == "squared_error":
        diff = x - xhat
        return np.sum(diff * diff, axis=-1)
    if loss_kind == "binary_cross_entropy":
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ContractViolation("binary cross-entropy needs inputs in [0, 1]")
        xh = np.clip(xhat, SIGMOID_EPS, 1.0 - SIGMOID_EPS)
        return -np.sum(x * np.log(xh) + (1.0 - x) * np.log(1.0 - xh), axis=-1)
    raise ContractViolation(f"unknown loss kind {loss_kind!r}")


def reparameterize(mu, logvar, rng: np.random.Generator) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.clip(np.asarray(logvar, dtype=np.float64), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    if mu.shape != logvar.shape:
        raise ContractViolation("mu and logvar shapes differ")
    eps = rng.standard_normal(mu.shape)
    return mu + eps * np.exp(0.5 * logvar)


class VaeModel:
    """Encoder trunk + (mu, logvar) heads + decoder, with its Adam state."""

    def __init__(self, encoder: Sequence[DenseLayer], mu_head: DenseLayer,
                 logvar_head: DenseLayer, decoder: Sequence[DenseLayer], beta: float = 1.0,
                 loss_kind: str = "binary_cross_entropy", lr: float = 1e-3,
                 slope: float = LEAKY_SLOPE, optimizer_state: AdamState | None = None):
        if beta < 0:
            raise ContractViolation("beta must be >= 0")
        if loss_kind not in LOSS_KINDS:
            raise ContractViolation(f"unknown loss kind {loss_kind!r}")
        self.encoder = list(encoder)
        self.mu_head = mu_head
        self.logvar_head = logvar_head
        self.decoder = list(decoder)
        self.beta = float(beta)
        self.loss_kind = loss_kind
        self.lr = float(lr)
        self.slope = slope
        d_in = self.encoder[0].fan_in if self.encoder else mu_head.fan_in
        if self.decoder[-1].fan_out != d_in:
            raise ContractViolation("decoder output dimension differs from encoder input")
        if mu_head.fan_out != logvar_head.fan_out or mu_head.fan_in != logvar_head.fan_in:
            raise ContractViolation("mu and logvar heads differ in size")
        if self.decoder[0].fan_in != mu_head.fan_out:
            raise ContractViolation("decoder input dimension differs from latent size")
        self.optimizer_state = optimizer_state or AdamState.zeros_like(self.parameters())

    @classmethod
    def build(cls, d: int, rng: np.random.Generator, hidden: Sequence[int] | None = None,
              k: int | None = None, **kwargs) -> "VaeModel":
        """Fresh He-normal model; the decoder mirrors the encoder trunk."""
        default_hidden, default_k = default_architecture(d)
        hidden = tuple(default_hidden if hidden is None else hidden)
        k = default_k if k is None else k
        sizes = (d,) + hidden
        encoder = [he_normal_init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        mu_head = he_normal_init(sizes[-1], k, rng, "linear")
        logvar_head = he_normal_init(sizes[-1], k, rng, "linear")
        dec_sizes = (k,) + hidden[::-1] + (d,)
        decoder = [he_normal_init(a, b, rng) for a, b in zip(dec_sizes[:-1], dec_sizes[1:])]
        decoder[-1].activation = "sigmoid"
        return cls(encoder, mu_head, logvar_head, decoder, **kwargs)

    @property
    def d(self) -> int:
        return self.decoder[-1].fan_out

    @property
    def k(self) -> int:
        return self.mu_head.fan_out

    def layers(self) -> list[DenseLayer]:
        return [*self.encoder, self.mu_head, self.logvar_head, *self.decoder]

    def parameters(self) -> list[np.ndarray]:
        return layer_params(self.layers())

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        layers = self.layers()
        if len(params) != 2 * len(layers):
            raise ContractViolation("parameter list length does not match the architecture")
        for i, layer in enumerate(layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weights.shape or b.shape != layer.biases.shape:
                raise ContractViolation(f"shape mismatch for layer {i}")
            layer.weights, layer.biases = w, b

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    # -- forward ---------------------------------------------------------

    def _trunk(self, X):
        if self.encoder:
            cache = forward(self.encoder, X, self.slope)
            return cache, cache.output
        return None, X

    def encode(self, x) -> LatentCode:
        """Deterministic encoding: ``z`` is the mean."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise ContractViolation(f"expected {self.d} features, got {x.shape[-1]}")
        _, h = self._trunk(x)
        mu = h @ self.mu_head.weights.T + self.mu_head.biases
        logvar = np.clip(h @ self.logvar_head.weights.T + self.logvar_head.biases,
                         -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return LatentCode(mu, logvar, mu.copy())

    def encode_mean(self, X) -> np.ndarray:
        """Latent means for a batch ``(n, d)``; the fast path used by drift scans."""
        X = np.asarray(X, dtype=np.float64)
        h = X
        for layer in self.encoder:
            a = h @ layer.weights.T + layer.biases
            h = np.where(a > 0, a, self.slope * a)
        return h @ self.mu_head.weights.T + self.mu_head.biases

    def decode(self, z) -> np.ndarray:
        return forward(self.decoder, z, self.slope).output

    def _check_inputs(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise ContractViolation(f"expected {self.d} features, got {X.shape[1]}")
        if self.loss_kind == "binary_cross_entropy" and (np.any(X < 0.0) or np.any(X > 1.0)):
            raise ContractViolation("binary cross-entropy needs inputs in [0, 1]")
        return X

    def _forward_full(self, X, noise):
        trunk_cache, h = self._trunk(X)
        mu = h @ self.mu_head.weights.T + self.mu_head.biases
        lv_raw = h @ self.logvar_head.weights.T + self.logvar_head.biases
        lv = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
        std = np.exp(0.5 * lv)
        z = mu if noise is None else mu + noise * std
        dec_cache = forward(self.decoder, z, self.slope)
        return trunk_cache, h, mu, lv_raw, lv, std, dec_cache

    def instance_losses(self, X, noise=None) -> np.ndarray:
        """Total loss per row of ``X``.

        ``noise`` (shape ``(n, k)``) selects training mode; ``None`` is the
        deterministic evaluation mode with ``z = mu``.
        """
        X = self._check_inputs(X)
        _, _, mu, _, lv, _, dec_cache = self._forward_full(X, noise)
        recon = reconstruction_loss(X, dec_cache.output, self.loss_kind)
        return recon + self.beta * kl_loss(mu, lv)

    def total_loss(self, x, rng: np.random.Generator | None = None) -> float:
        """Loss of one instance; stochastic ``z`` when ``rng`` is given."""
        x = np.asarray(x, dtype=np.float64)
        noise = None if rng is None else rng.standard_normal((1, self.k))
        return float(self.instance_losses(x.reshape(1, -1), noise)[0])

    def loss_and_grads(self, X, noise=None):
        """Mean total loss over the batch and its gradient for every parameter."""
        X = self._check_inputs(X)
        n = X.shape[0]
        trunk_cache, h, mu, lv_raw, lv, std, dec_cache = self._forward_full(X, noise)
        xhat = dec_cache.output
        recon = reconstruction_loss(X, xhat, self.loss_kind)
        kl = kl_loss(mu, lv)
        loss = float(np.mean(recon + self.beta * kl))

        if self.loss_kind == "squared_error":
            g_xhat = 2.0 * (xhat - X)
        else:
            g_xhat = (1.0 - X) / (1.0 - xhat) - X / xhat
        g_xhat /= n
        dec_grads, g_z = backward(self.decoder, dec_cache, g_xhat, self.slope)

        g_mu = g_z + (self.beta / n) * mu
        g_lv = (self.beta / n) * 0.5 * (np.exp(lv) - 1.0)
        if noise is not None:
            g_lv = g_lv + g_z * noise * 0.5 * std
        g_lv = np.where(np.abs(lv_raw) > LOGVAR_CLAMP, 0.0, g_lv)

        head_grads = [(g_mu.T @ h, g_mu.sum(axis=0)), (g_lv.T @ h, g_lv.sum(axis=0))]
        g_h = g_mu @ self.mu_head.weights + g_lv @ self.logvar_head.weights
        enc_grads = backward(self.encoder, trunk_cache, g_h, self.slope)[0] if self.encoder else []

        grads = []
        for dw, db in (*enc_grads, *head_grads, *dec_grads):
            grads.extend((dw, db))
        return loss, grads

    # -- training --------------------------------------------------------

    def apply_gradients(self, grads) -> None:
        params, self.optimizer_state = adam_step(self.parameters(), grads,
                                                 self.optimizer_state, self.lr)
        self.set_parameters(params)

    def copy(self) -> "VaeModel":
        return VaeModel([l.copy() for l in self.encoder], self.mu_head.copy(),
                        self.logvar_head.copy(), [l.copy() for l in self.decoder],
                        self.beta, self.loss_kind, self.lr, self.slope,
                        self.optimizer_state.copy())


def encode(model: VaeModel, x) -> LatentCode:
    return model.encode(x)


def total_loss(model: VaeModel, x, rng: np.random.Generator | None = None) -> float:
    return model.total_loss(x, rng)


def train_on_window(model: VaeModel, window, epochs: int, batch_size: int,
                    rng: np.random.Generator) -> VaeModel:
    """Shuffle, split into mini-batches, one Adam step per batch, ``epochs`` times.

    Training mode draws a fresh reparameterization noise per batch.  The
    model is updated in place (optimizer state persists) and returned.
    """
    X = np.atleast_2d(np.asarray(window, dtype=np.float64))
    n = X.shape[0]
    if n == 0 or X.size == 0:
        raise ContractViolation("cannot train on an empty window")
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = X[order[start:start + batch_size]]
            noise = rng.standard_normal((batch.shape[0], model.k))
            loss, grads = model.loss_and_grads(batch, noise)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss at epoch {epoch}, batch offset {start} "
                    f"(batch size {batch.shape[0]})"
                )
            model.apply_gradients(grads)
    return model


def gradient_check(model: VaeModel, x, eps: float = 1e-5, noise=None) -> float:
    """Compare analytic gradients with central differences on ``x``.

    With ``noise`` the check runs in training mode using that fixed
    reparameterization draw.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if noise is not None:
        noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    _, analytic = model.loss_and_grads(X, noise)
    probe = model.copy()

    def loss_fn(params):
        probe.set_parameters(params)
        return float(np.mean(probe.instance_losses(X, noise)))

    return _gradient_check(loss_fn, model.parameters(), analytic, eps)


# -- checkpoints ---------------------------------------------------------

def save_checkpoint(path, model: VaeModel, normalizer=None) -> None:
    """Write all parameters, Adam state, loss settings and normalization bounds."""
    layers = model.layers()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "n_encoder": len(model.encoder),
        "n_decoder": len(model.decoder),
        "activations": [l.activation for l in layers],
        "beta": model.beta,
        "loss_kind": model.loss_kind,
        "lr": model.lr,
        "slope": model.slope,
        "adam": {
            "step_count": model.optimizer_state.step_count,
            "beta1": model.optimizer_state.beta1,
            "beta2": model.optimizer_state.beta2,
            "epsilon": model.optimizer_state.epsilon,
        },
        "has_normalizer": normalizer is not None,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for i, p in enumerate(model.parameters()):
        arrays[f"param_{i}"] = p
        arrays[f"adam_m_{i}"] = model.optimizer_state.first_moment[i]
        arrays[f"adam_v_{i}"] = model.optimizer_state.second_moment[i]
    if normalizer is not None:
        arrays["norm_min"] = normalizer.minimum
        arrays["norm_max"] = normalizer.maximum
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, normalizer_or_None)``."""
    from .datagen import Normalizer

    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(data["meta"].tobytes().decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {meta.get('format_version')}")
        acts = meta["activations"]
        n_params = 2 * len(acts)
        params = [data[f"param_{i}"].copy() for i in range(n_params)]
        first = [data[f"adam_m_{i}"].copy() for i in range(n_params)]
        second = [data[f"adam_v_{i}"].copy() for i in range(n_params)]
        normalizer = None
        if meta["has_normalizer"]:
            normalizer = Normalizer(data["norm_min"].copy(), data["norm_max"].copy())
    layers = [DenseLayer(params[2 * i], params[2 * i + 1], a) for i, a in enumerate(acts)]
    ne, nd = meta["n_encoder"], meta["n_decoder"]
    adam = meta["adam"]
    state = AdamState(first, second, adam["step_count"], adam["beta1"], adam["beta2"],
                      adam["epsilon"])
    model = VaeModel(layers[:ne], layers[ne], layers[ne + 1], layers[ne + 2:ne + 2 + nd],
                     meta["beta"], meta["loss_kind"], meta["lr"], meta["slope"], state)
    return model, normalizer
