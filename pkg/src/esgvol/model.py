"""Bayesian volatility regressor: residual fusion network + pSGLD posterior.

Two dense encoders (sentiment branch, embedding branch) feed a fused stack
of residual blocks ending in a scalar head that predicts log-volatility.
Training samples the parameter posterior with preconditioned stochastic
gradient Langevin dynamics (RMSprop-style diagonal preconditioner); the
likelihood is Gaussian on y = ln(v + eps) with a learnable noise scale, so
each posterior sample predicts E[v] = exp(yhat + sigma_n^2 / 2) and the
ensemble forecast is the average of those per-sample means.

All arithmetic is float64; randomness comes from numpy's counter-based
Philox generator so fixed seeds reproduce bit-exactly across platforms.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import IO, Callable, Optional, Sequence

import numpy as np

from .features import PooledFeatures
from .hashing import crc64, fnv1a64
from .market import Example

ENSEMBLE_MAGIC = b"E2RM"
ENSEMBLE_VERSION = 1
DECAY_EXPONENT = 0.55  # step-size schedule eps_t = eps0 * (1 + t/t_decay)^-0.55

# name -> (f, df) with df taking (pre-activation, activation) arrays.
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda u, a: 1.0 - a * a),
    "atan": (np.arctan, lambda u, a: 1.0 / (1.0 + u * u)),
}


@dataclass(frozen=True)
class ModelConfig:
    sent_dim: int = 6
    embed_dim: int = 256
    width: int = 64
    encoder_blocks: int = 2
    fusion_blocks: int = 2
    activation: str = "tanh"
    prior_sigma: float = 1.0
    noise_sigma_init: float = 0.5
    target_floor: float = 1e-8
    use_embedding: bool = True  # False ablates the embedding branch (Senti baseline)

    def __post_init__(self) -> None:
        if min(self.sent_dim, self.embed_dim, self.width) < 1:
            raise ValueError("dimensions and width must be >= 1")
        if self.encoder_blocks < 0 or self.fusion_blocks < 0:
            raise ValueError("block counts must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.prior_sigma <= 0 or self.noise_sigma_init <= 0:
            raise ValueError("prior_sigma and noise_sigma_init must be > 0")


@dataclass(frozen=True)
class Layout:
    """Name -> (offset, shape) map for the flat parameter vector."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...]
    size: int

    def __post_init__(self) -> None:
        slots = {}
        for name, offset, shape in zip(self.names, self.offsets, self.shapes):
            size = 1
            for dim in shape:
                size *= dim
            slots[name] = (offset, shape, size)
        object.__setattr__(self, "_slots", slots)

    def slot(self, name: str) -> tuple[int, tuple[int, ...]]:
        offset, shape, _ = self._slots[name]  # type: ignore[attr-defined]
        return offset, shape

    def slot_span(self, name: str) -> tuple[int, int]:
        offset, _, size = self._slots[name]  # type: ignore[attr-defined]
        return offset, size

    @property
    def layout_hash(self) -> int:
        desc = ";".join(f"{n}:{s}" for n, s in zip(self.names, self.shapes))
        return fnv1a64(desc.encode("utf-8"))


def _block_entries(prefix: str, width: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.W1", (width, width)),
        (f"{prefix}.b1", (width,)),
        (f"{prefix}.W2", (width, width)),
        (f"{prefix}.b2", (width,)),
    ]


@lru_cache(maxsize=None)
def layout_for(config: ModelConfig) -> Layout:
    w = config.width
    entries: list[tuple[str, tuple[int, ...]]] = [
        ("enc_s.proj.W", (w, config.sent_dim)),
        ("enc_s.proj.b", (w,)),
    ]
    for i in range(config.encoder_blocks):
        entries += _block_entries(f"enc_s.block{i}", w)
    if config.use_embedding:
        entries += [("enc_e.proj.W", (w, config.embed_dim)), ("enc_e.proj.b", (w,))]
        for i in range(config.encoder_blocks):
            entries += _block_entries(f"enc_e.block{i}", w)
    fused_in = 2 * w if config.use_embedding else w
    entries += [("fusion.proj.W", (w, fused_in)), ("fusion.proj.b", (w,))]
    for i in range(config.fusion_blocks):
        entries += _block_entries(f"fusion.block{i}", w)
    entries += [("head.W", (1, w)), ("head.b", (1,)), ("log_noise", ())]
    names, shapes = zip(*entries)
    offsets = []
    total = 0
    for shape in shapes:
        offsets.append(total)
        total += int(np.prod(shape)) if shape else 1
    return Layout(names=names, shapes=shapes, offsets=tuple(offsets), size=total)


@dataclass(frozen=True)
class Params:
    """One realization of the model: flat float64 vector plus its config."""

    values: np.ndarray
    config: ModelConfig

    def __post_init__(self) -> None:
        layout = layout_for(self.config)
        if self.values.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} parameters, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameter values")
        views = {}
        for name in layout.names:
            offset, size = layout.slot_span(name)
            views[name] = self.values[offset : offset + size].reshape(layout.slot(name)[1])
        object.__setattr__(self, "_views", views)

    def view(self, name: str) -> np.ndarray:
        return self._views[name]  # type: ignore[attr-defined]

    @property
    def log_noise(self) -> float:
        return float(self.view("log_noise"))


def n_params(config: ModelConfig) -> int:
    return layout_for(config).size


def init_params(config: ModelConfig, seed: int | np.random.SeedSequence) -> Params:
    """Weights ~ N(0, 1/fan_in), biases zero, log_noise = ln(noise_sigma_init)."""
    layout = layout_for(config)
    rng = np.random.Generator(np.random.Philox(seed))
    values = np.zeros(layout.size)
    for name, shape, offset in zip(layout.names, layout.shapes, layout.offsets):
        if name == "log_noise":
            values[offset] = np.log(config.noise_sigma_init)
        elif name.rsplit(".", 1)[-1].startswith("W"):
            fan_in = shape[1]
            size = int(np.prod(shape))
            values[offset : offset + size] = rng.standard_normal(size) / np.sqrt(fan_in)
        # biases stay zero
    return Params(values=values, config=config)


def _forward_cached(params: Params, S: np.ndarray, E: np.ndarray | None) -> tuple[np.ndarray, dict]:
    """Batched forward pass keeping intermediates for backprop."""
    cfg = params.config
    act, _ = ACTIVATIONS[cfg.activation]
    cache: dict = {"branches": {}}

    def run_branch(prefix: str, x: np.ndarray, blocks: int) -> np.ndarray:
        h = x @ params.view(f"{prefix}.proj.W").T + params.view(f"{prefix}.proj.b")
        steps = []
        for i in range(blocks):
            w1 = params.view(f"{prefix}.block{i}.W1")
            b1 = params.view(f"{prefix}.block{i}.b1")
            w2 = params.view(f"{prefix}.block{i}.W2")
            b2 = params.view(f"{prefix}.block{i}.b2")
            u = h @ w1.T + b1
            a = act(u)
            steps.append({"h_in": h, "u": u, "a": a})
            h = h + a @ w2.T + b2
        cache["branches"][prefix] = {"x": x, "steps": steps, "h_out": h}
        return h

    hs = run_branch("enc_s", S, cfg.encoder_blocks)
    if cfg.use_embedding:
        if E is None:
            raise ValueError("embedding features required but missing")
        he = run_branch("enc_e", E, cfg.encoder_blocks)
        fused = np.concatenate([hs, he], axis=1)
    else:
        fused = hs
    cache["fused"] = fused
    run_branch("fusion", fused, cfg.fusion_blocks)
    z = cache["branches"]["fusion"]["h_out"]
    yhat = z @ params.view("head.W")[0] + params.view("head.b")[0]
    return yhat, cache


def forward(params: Params, features: PooledFeatures) -> float:
    """Predicted mean of log-volatility for one pooled feature row."""
    yhat, _ = _forward_cached(
        params,
        features.s_pooled[None, :],
        features.e_pooled[None, :] if params.config.use_embedding else None,
    )
    return float(yhat[0])


def forward_batch(params: Params, S: np.ndarray, E: np.ndarray | None) -> np.ndarray:
    yhat, _ = _forward_cached(params, S, E)
    return yhat


def _backward(params: Params, cache: dict, dyhat: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of sum(dyhat * yhat) w.r.t. the flat vector."""
    cfg = params.config
    _, dact = ACTIVATIONS[cfg.activation]
    layout = layout_for(cfg)
    grad = np.zeros(layout.size)

    def acc(name: str, value: np.ndarray | float) -> None:
        offset, size = layout.slot_span(name)
        grad[offset : offset + size] += np.asarray(value, dtype=float).ravel()

    def back_branch(prefix: str, g: np.ndarray) -> np.ndarray:
        branch = cache["branches"][prefix]
        for i in reversed(range(len(branch["steps"]))):
            step = branch["steps"][i]
            w1 = params.view(f"{prefix}.block{i}.W1")
            w2 = params.view(f"{prefix}.block{i}.W2")
            acc(f"{prefix}.block{i}.b2", g.sum(axis=0))
            acc(f"{prefix}.block{i}.W2", g.T @ step["a"])
            du = (g @ w2) * dact(step["u"], step["a"])
            acc(f"{prefix}.block{i}.b1", du.sum(axis=0))
            acc(f"{prefix}.block{i}.W1", du.T @ step["h_in"])
            g = g + du @ w1
        acc(f"{prefix}.proj.b", g.sum(axis=0))
        acc(f"{prefix}.proj.W", g.T @ branch["x"])
        return g @ params.view(f"{prefix}.proj.W")

    z = cache["branches"]["fusion"]["h_out"]
    acc("head.W", dyhat @ z)
    acc("head.b", dyhat.sum())
    g = np.outer(dyhat, params.view("head.W")[0])
    g = back_branch("fusion", g)
    w = cfg.width
    if cfg.use_embedding:
        back_branch("enc_s", g[:, :w])
        back_branch("enc_e", g[:, w:])
    else:
        back_branch("enc_s", g)
    return grad


def _batch_arrays(batch: Sequence[Example], config: ModelConfig) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    S = np.stack([ex.features.s_pooled for ex in batch]).astype(float)
    E = (
        np.stack([ex.features.e_pooled for ex in batch]).astype(float)
        if config.use_embedding
        else None
    )
    y = np.log(np.array([ex.target.v for ex in batch]) + config.target_floor)
    return S, E, y


def _log_posterior_arrays(
    params: Params, S: np.ndarray, E: np.ndarray | None, y: np.ndarray, n_total: int
) -> float:
    cfg = params.config
    yhat = forward_batch(params, S, E)
    s = params.log_noise
    resid = y - yhat
    loglik = -0.5 * np.log(2 * np.pi) - s - resid**2 / (2 * np.exp(2 * s))
    scale = n_total / len(y)
    prior = -0.5 * np.sum(params.values**2) / cfg.prior_sigma**2 - 0.5 * len(
        params.values
    ) * np.log(2 * np.pi * cfg.prior_sigma**2)
    return float(scale * loglik.sum() + prior)


def _grad_log_posterior_arrays(
    params: Params, S: np.ndarray, E: np.ndarray | None, y: np.ndarray, n_total: int
) -> np.ndarray:
    cfg = params.config
    yhat, cache = _forward_cached(params, S, E)
    s = params.log_noise
    inv_var = np.exp(-2 * s)
    resid = y - yhat
    scale = n_total / len(y)
    grad = _backward(params, cache, scale * resid * inv_var)
    offset, _ = layout_for(cfg).slot("log_noise")
    grad[offset] += scale * np.sum(-1.0 + resid**2 * inv_var)
    grad -= params.values / cfg.prior_sigma**2
    return grad


def log_posterior(params: Params, batch: Sequence[Example], n_total: int) -> float:
    """Minibatch-rescaled log posterior (up to the evidence constant).

    (N/|B|) * sum_batch log N(y | yhat, sigma_n^2) + sum_theta log N(theta | 0, prior_sigma^2)
    with y = ln(v + floor) and sigma_n = exp(log_noise). The noise parameter
    itself is included in the prior term.
    """
    if not batch:
        raise ValueError("empty batch")
    S, E, y = _batch_arrays(batch, params.config)
    return _log_posterior_arrays(params, S, E, y, n_total)


def grad_log_posterior(params: Params, batch: Sequence[Example], n_total: int) -> np.ndarray:
    """Exact reverse-mode gradient of :func:`log_posterior` w.r.t. the flat vector."""
    if not batch:
        raise ValueError("empty batch")
    S, E, y = _batch_arrays(batch, params.config)
    return _grad_log_posterior_arrays(params, S, E, y, n_total)


@dataclass(frozen=True)
class SamplerConfig:
    eps0: float = 1e-3
    t_decay: float = 1000.0
    alpha: float = 0.99
    damping: float = 1e-5
    burn_in: int = 1000
    thin: int = 10
    ensemble_size: int = 20
    batch_size: int = 128
    seed: int = 0
    n_total: int = 0  # 0 -> filled in from the training split

    def __post_init__(self) -> None:
        if self.eps0 <= 0 or self.t_decay <= 0:
            raise ValueError("eps0 and t_decay must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.burn_in < 0 or self.thin < 1 or self.ensemble_size < 1:
            raise ValueError("need burn_in >= 0, thin >= 1, ensemble_size >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class SamplerState:
    params: Params
    v: np.ndarray  # RMSprop-style second-moment estimate of grad/N
    step: int


def step_size(cfg: SamplerConfig, step: int) -> float:
    return cfg.eps0 * (1.0 + step / cfg.t_decay) ** (-DECAY_EXPONENT)


def psgld_step(
    state: SamplerState,
    grad: np.ndarray,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> SamplerState:
    """One preconditioned SGLD update.

    V <- alpha V + (1 - alpha) (grad/N)^2 elementwise, G = 1/(sqrt(V) + damping),
    theta <- theta + (eps_t/2) G grad + N(0, eps_t G).
    """
    if not np.all(np.isfinite(grad)):
        bad = int(np.argmax(~np.isfinite(grad)))
        raise ValueError(f"non-finite gradient at step {state.step} (first at index {bad})")
    if cfg.n_total < 1:
        raise ValueError("sampler config has no dataset size (n_total)")
    gbar = grad / cfg.n_total
    v = cfg.alpha * state.v + (1.0 - cfg.alpha) * gbar * gbar
    precond = 1.0 / (np.sqrt(v) + cfg.damping)
    eps = step_size(cfg, state.step)
    noise = np.sqrt(eps * precond) * rng.standard_normal(len(grad))
    values = state.params.values + 0.5 * eps * precond * grad + noise
    return SamplerState(
        params=replace(state.params, values=values),
        v=v,
        step=state.step + 1,
    )


@dataclass(frozen=True)
class PosteriorEnsemble:
    """A set of posterior parameter samples plus the configs that produced them."""

    samples: tuple[Params, ...]
    model_config: ModelConfig
    sampler_config: SamplerConfig
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.samples:
            raise ValueError("ensemble has no samples")
        if any(s.config != self.model_config for s in self.samples):
            raise ValueError("sample layouts disagree with the ensemble config")


def sample_posterior(
    train: Sequence[Example],
    mcfg: ModelConfig,
    scfg: SamplerConfig,
    validation: Sequence[Example] = (),
    log_sink: Optional[IO[str]] = None,
) -> PosteriorEnsemble:
    """Run pSGLD over the training split and collect a posterior ensemble.

    Minibatches are drawn by seeded shuffling per epoch; after ``burn_in``
    steps one sample is kept every ``thin`` steps until ``ensemble_size``
    samples exist. The preconditioner is primed with the initial full-batch
    gradient so the first steps are already well scaled. Fully deterministic
    for a fixed sampler seed.
    """
    if not train:
        raise ValueError("empty training split")
    n = len(train)
    if scfg.n_total == 0:
        scfg = replace(scfg, n_total=n)
    seeds = np.random.SeedSequence(scfg.seed).spawn(3)
    params = init_params(mcfg, seeds[0])
    noise_rng = np.random.Generator(np.random.Philox(seeds[1]))
    batch_rng = np.random.Generator(np.random.Philox(seeds[2]))

    S_all, E_all, y_all = _batch_arrays(train, mcfg)
    g0 = _grad_log_posterior_arrays(params, S_all, E_all, y_all, scfg.n_total) / scfg.n_total
    state = SamplerState(params=params, v=g0 * g0, step=0)
    total_steps = scfg.burn_in + scfg.ensemble_size * scfg.thin
    samples: list[Params] = []
    if log_sink is not None:
        log_sink.write("step,epoch,train_logpost,val_rmse\n")
    epoch = 0
    while len(samples) < scfg.ensemble_size:
        epoch += 1
        perm = batch_rng.permutation(n)
        for start in range(0, n, scfg.batch_size):
            rows = perm[start : start + scfg.batch_size]
            grad = _grad_log_posterior_arrays(
                state.params,
                S_all[rows],
                E_all[rows] if E_all is not None else None,
                y_all[rows],
                scfg.n_total,
            )
            state = psgld_step(state, grad, scfg, noise_rng)
            if state.step > scfg.burn_in and (state.step - scfg.burn_in) % scfg.thin == 0:
                samples.append(state.params)
            if len(samples) >= scfg.ensemble_size:
                break
        if log_sink is not None:
            logpost = _log_posterior_arrays(state.params, S_all, E_all, y_all, n)
            if not np.isfinite(logpost):
                raise ValueError(f"non-finite training log posterior at epoch {epoch}")
            val_rmse = ""
            if validation:
                preds = _point_predictions(state.params, validation)
                truth = np.array([ex.target.v for ex in validation])
                val_rmse = repr(float(np.sqrt(np.mean((preds - truth) ** 2))))
            log_sink.write(f"{state.step},{epoch},{logpost!r},{val_rmse}\n")
    return PosteriorEnsemble(
        samples=tuple(samples),
        model_config=mcfg,
        sampler_config=scfg,
        provenance={"seed": scfg.seed, "steps": total_steps, "epochs": epoch},
    )


def _point_predictions(params: Params, rows: Sequence[Example]) -> np.ndarray:
    S = np.stack([ex.features.s_pooled for ex in rows]).astype(float)
    E = (
        np.stack([ex.features.e_pooled for ex in rows]).astype(float)
        if params.config.use_embedding
        else None
    )
    yhat = forward_batch(params, S, E)
    return np.exp(yhat + 0.5 * np.exp(2 * params.log_noise))


@dataclass(frozen=True)
class Prediction:
    ticker: str
    t: int
    v_hat: float  # ensemble-mean volatility forecast, > 0
    ensemble_std: float  # population std of per-sample predictive means


def predict_ensemble(ensemble: PosteriorEnsemble, features: PooledFeatures) -> Prediction:
    """Ensemble forecast for one feature row.

    Each posterior sample contributes its predictive mean under the
    log-normal observation model, m_c = exp(yhat_c + sigma_c^2 / 2); the
    forecast is the average of the m_c and the dispersion their population
    std.
    """
    means = np.array(
        [
            np.exp(forward(p, features) + 0.5 * np.exp(2 * p.log_noise))
            for p in ensemble.samples
        ]
    )
    return Prediction(
        ticker=features.ticker,
        t=features.t,
        v_hat=float(means.mean()),
        ensemble_std=float(means.std()),
    )


def predict_many(ensemble: PosteriorEnsemble, rows: Sequence[PooledFeatures]) -> list[Prediction]:
    """Vectorized :func:`predict_ensemble` over many feature rows."""
    if not rows:
        return []
    cfg = ensemble.model_config
    S = np.stack([r.s_pooled for r in rows]).astype(float)
    E = np.stack([r.e_pooled for r in rows]).astype(float) if cfg.use_embedding else None
    means = np.stack(
        [
            np.exp(forward_batch(p, S, E) + 0.5 * np.exp(2 * p.log_noise))
            for p in ensemble.samples
        ]
    )
    v_hat = means.mean(axis=0)
    std = means.std(axis=0)
    return [
        Prediction(ticker=r.ticker, t=r.t, v_hat=float(v_hat[i]), ensemble_std=float(std[i]))
        for i, r in enumerate(rows)
    ]


def _config_to_dict(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def save_ensemble(ensemble: PosteriorEnsemble, path: str | Path) -> None:
    """Write the binary sample block plus a JSON sidecar with configs/provenance.

    Binary layout: magic ``E2RM``, u32 version, u64 layout hash, u32 C,
    u64 P, C*P little-endian float64, trailing CRC-64 of all prior bytes.
    """
    path = Path(path)
    layout = layout_for(ensemble.model_config)
    header = ENSEMBLE_MAGIC + struct.pack(
        "<IQIQ",
        ENSEMBLE_VERSION,
        layout.layout_hash,
        len(ensemble.samples),
        layout.size,
    )
    body = b"".join(np.asarray(p.values, dtype="<f8").tobytes() for p in ensemble.samples)
    checksum = crc64(header + body)
    path.write_bytes(header + body + struct.pack("<Q", checksum))
    sidecar = {
        "model_config": _config_to_dict(ensemble.model_config),
        "sampler_config": _config_to_dict(ensemble.sampler_config),
        "provenance": ensemble.provenance,
    }
    path.with_name(path.name + ".manifest.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n"
    )


def load_ensemble(path: str | Path) -> PosteriorEnsemble:
    """Read an ensemble written by :func:`save_ensemble`, validating everything."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 36 or raw[:4] != ENSEMBLE_MAGIC:
        raise ValueError("not an ensemble file (bad magic)")
    version, layout_hash, count, size = struct.unpack("<IQIQ", raw[4:28])
    if version != ENSEMBLE_VERSION:
        raise ValueError(f"unsupported ensemble version {version}")
    expected_len = 28 + count * size * 8 + 8
    if len(raw) != expected_len:
        raise ValueError(f"ensemble file length {len(raw)} != expected {expected_len}")
    (stored_crc,) = struct.unpack("<Q", raw[-8:])
    if crc64(raw[:-8]) != stored_crc:
        raise ValueError("ensemble file checksum mismatch")
    sidecar_path = path.with_name(path.name + ".manifest.json")
    if not sidecar_path.exists():
        raise ValueError(f"missing ensemble sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    mcfg = ModelConfig(**sidecar["model_config"])
    scfg = SamplerConfig(**sidecar["sampler_config"])
    layout = layout_for(mcfg)
    if layout.layout_hash != layout_hash:
        raise ValueError("ensemble layout hash does not match its model config")
    if layout.size != size:
        raise ValueError("parameter count does not match the model config")
    flat = np.frombuffer(raw[28:-8], dtype="<f8").astype(float).reshape(count, size)
    samples = tuple(Params(values=flat[i].copy(), config=mcfg) for i in range(count))
    return PosteriorEnsemble(
        samples=samples,
        model_config=mcfg,
        sampler_config=scfg,
        provenance=sidecar.get("provenance", {}),
    )
