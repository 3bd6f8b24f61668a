"""Adversarial training engine with optional flow-transported noise.

Baseline mode draws generator noise from N(0, I) every step.  fis mode
starts identically, then every ``refresh_t`` batches converts the last
batch's per-example Jacobian norms into an importance-weighted latent
dataset, fits a fresh flow to it by maximum likelihood, and draws all
subsequent noise through the flow's inverse.

Batch indexing: the warm-start batch is index 0; adversarial batches are
1..max_iters.  ``TrainState.iteration`` counts completed batches, so it
always equals the index of the next adversarial batch.  A refresh fires
after batch i exactly when i % refresh_t == 0, and metric rows are
emitted at batch 0 and every eval_interval batches.

Randomness is split across three independent streams so that runs remain
comparable and resumable: a model stream (weights, noise, flow fitting),
a data stream (real-batch indices; identical across ablation variants),
and per-evaluation child streams keyed by (seed, iteration) that never
touch the training streams.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import flows, importance, metrics, nn, norms
from .data import Dataset, MetricRow
from .errors import ConfigError, DegenerateBatchError, TrainError

log = logging.getLogger(__name__)

MODES = ("baseline", "fis")
GEN_LOSSES = ("nonsaturating", "saturating")

G_HIDDEN = (128, 256)
D_HIDDEN = (256, 128)

_MODEL_STREAM = 1
_DATA_STREAM = 2
_EVAL_STREAM = 3


@dataclass
class TrainConfig:
    """Full experiment description; every field has a working default."""

    latent_dim: int = 64
    refresh_t: int = 10
    flow_epochs: int = 5
    flow_batch: int = 128
    augment_N: int = 512  # 8 x batch_size
    norm_kind: str = "frobenius"
    flow_kind: str = "realnvp"
    lr_g: float = 1e-3
    lr_d: float = 1e-4
    lr_flow: float = 1e-3
    batch_size: int = 64
    max_iters: int = 1000
    seed: int = 0
    mode: str = "fis"
    augment_cov: str = "identity"
    gen_loss: str = "nonsaturating"
    flow_warm_start: bool = False
    flow_depth: int = 6
    flow_hidden: int = 64

    def validate(self):
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be at least 2")
        if self.refresh_t < 1:
            raise ConfigError("refresh_t must be at least 1")
        if min(self.lr_g, self.lr_d, self.lr_flow) <= 0:
            raise ConfigError("all learning rates must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.norm_kind not in norms.NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.norm_kind!r}")
        if self.flow_kind not in flows.FLOW_KINDS:
            raise ConfigError(f"unknown flow kind {self.flow_kind!r}")
        if self.augment_cov not in importance.AUGMENT_COVS:
            raise ConfigError(f"unknown augment covariance {self.augment_cov!r}")
        if self.gen_loss not in GEN_LOSSES:
            raise ConfigError(f"unknown generator loss {self.gen_loss!r}")
        if self.batch_size < 1 or self.max_iters < 0 or self.augment_N < 1:
            raise ConfigError("batch_size/augment_N must be positive, max_iters >= 0")
        return self


@dataclass
class EvalOptions:
    interval: int = 100
    samples: int = 2048
    extractor: str = "pca"
    pca_k: int = 32
    ridge: float = 1e-6
    grid_count: int = 64
    grid_cols: int = 8

    def validate(self):
        if self.interval < 1 or self.samples < 2:
            raise ConfigError("eval interval must be >= 1 and samples >= 2")
        if self.extractor not in metrics.EXTRACTOR_KINDS:
            raise ConfigError(f"unknown extractor kind {self.extractor!r}")
        return self


@dataclass
class TrainState:
    config: TrainConfig
    gen: nn.MlpNet
    disc: nn.MlpNet
    adam_g: nn.AdamState
    adam_d: nn.AdamState
    model_rng: np.random.Generator
    data_rng: np.random.Generator
    out_mid: float
    out_half: float
    iteration: int = 0
    flow: flows.FlowModel | None = None
    flow_adam: nn.AdamState | None = None
    last_latents: np.ndarray | None = None
    refresh_count: int = 0
    refresh_ms_total: float = 0.0


@dataclass
class RunSummary:
    rows: list
    iterations: int
    refresh_count: int
    refresh_ms_total: float
    state: TrainState


def _log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


def _sigmoid(u):
    return nn.stable_sigmoid(np.asarray(u, dtype=np.float64))


def init_state(config: TrainConfig, dataset: Dataset) -> TrainState:
    config.validate()
    lo, hi = dataset.pixel_range
    model_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _MODEL_STREAM])
    )
    data_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _DATA_STREAM])
    )
    gen = nn.build_mlp(
        model_rng,
        [config.latent_dim, *G_HIDDEN, dataset.dim],
        ["leaky_relu", "leaky_relu", "tanh"],
    )
    disc = nn.build_mlp(
        model_rng,
        [dataset.dim, *D_HIDDEN, 1],
        ["leaky_relu", "leaky_relu", "identity"],
    )
    return TrainState(
        config=config,
        gen=gen,
        disc=disc,
        adam_g=nn.init_adam(gen.parameters(), lr=config.lr_g),
        adam_d=nn.init_adam(disc.parameters(), lr=config.lr_d),
        model_rng=model_rng,
        data_rng=data_rng,
        out_mid=(hi + lo) / 2.0,
        out_half=(hi - lo) / 2.0,
    )


def eval_rng(seed, iteration):
    """Per-evaluation stream, independent of the training streams."""
    return np.random.default_rng(np.random.SeedSequence([seed, _EVAL_STREAM, iteration]))


def gen_forward(state: TrainState, z):
    """Generator output in pixel range, plus the net cache."""
    raw, cache = nn.forward(state.gen, z)
    return state.out_mid + state.out_half * raw, cache


def sample_noise(state: TrainState, n):
    """Latent noise under the current law: the fitted flow when present
    (fis mode after a refresh), otherwise N(0, I)."""
    if n < 1:
        raise ValueError("need at least one noise row")
    if state.flow is not None:
        return flows.sample(state.flow, n, state.model_rng)
    return state.model_rng.standard_normal((n, state.config.latent_dim))


def draw_real_batch(state: TrainState, dataset: Dataset):
    idx = state.data_rng.integers(0, dataset.rows, size=state.config.batch_size)
    return dataset.samples[idx]


def _update_discriminator(state: TrainState, x_real, x_fake):
    n = x_real.shape[0]
    stacked = np.vstack([x_real, x_fake])
    logits, cache = nn.forward(state.disc, stacked)
    u = logits[:, 0]
    u_real, u_fake = u[:n], u[n:]
    # -log s(u) = softplus(-u) and -log(1 - s(u)) = softplus(u)
    d_loss = float(np.logaddexp(0.0, -u_real).mean() + np.logaddexp(0.0, u_fake).mean())
    # gradient of the two batch means w.r.t. the logits
    upstream = np.empty((2 * n, 1))
    upstream[:n, 0] = (_sigmoid(u_real) - 1.0) / n
    upstream[n:, 0] = _sigmoid(u_fake) / n
    grads, _ = nn.backward(state.disc, cache, upstream)
    nn.adam_step(state.disc.parameters(), grads, state.adam_d)
    return d_loss


def _update_generator(state: TrainState, z):
    cfg = state.config
    x_fake, g_cache = gen_forward(state, z)
    logits, d_cache = nn.forward(state.disc, x_fake)
    u = logits[:, 0]
    n = z.shape[0]
    if cfg.gen_loss == "nonsaturating":
        g_loss = float(np.logaddexp(0.0, -u).mean())
        d_up = (_sigmoid(u) - 1.0)[:, None] / n
    else:
        # saturating: minimize mean log(1 - D) = -softplus(u)
        g_loss = float(-np.logaddexp(0.0, u).mean())
        d_up = (-_sigmoid(u))[:, None] / n
    _, g_x = nn.backward(state.disc, d_cache, d_up)
    grads, _ = nn.backward(state.gen, g_cache, g_x * state.out_half)
    nn.adam_step(state.gen.parameters(), grads, state.adam_g)
    return g_loss


def _step(state: TrainState, real_batch, latents):
    x_fake, _ = gen_forward(state, latents)
    d_loss = _update_discriminator(state, real_batch, x_fake)
    g_loss = _update_generator(state, latents)
    if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
        raise TrainError(
            f"non-finite loss at iteration {state.iteration}: "
            f"d={d_loss} g={g_loss}",
            iteration=state.iteration,
        )
    state.last_latents = latents
    state.iteration += 1
    return d_loss, g_loss


def warm_start_step(state: TrainState, real_batch):
    """Batch 0: one D and one G update with standard-normal noise."""
    if state.iteration != 0:
        raise TrainError("warm start requires iteration == 0",
                         iteration=state.iteration)
    z = state.model_rng.standard_normal(
        (state.config.batch_size, state.config.latent_dim)
    )
    return _step(state, real_batch, z)


def adversarial_step(state: TrainState, real_batch):
    """One D update and one G update on the same noise batch."""
    if state.iteration < 1:
        raise TrainError("adversarial steps require a completed warm start",
                         iteration=state.iteration)
    z = sample_noise(state, state.config.batch_size)
    return _step(state, real_batch, z)


def flow_refresh(state: TrainState, clock=time.perf_counter):
    """Re-fit the noise flow from the last batch's Jacobian norms.

    Fires after batch i when i % refresh_t == 0 (state.iteration has
    already advanced past i).  A degenerate batch (all-zero norms) logs a
    warning and leaves the previous flow in place.
    """
    cfg = state.config
    if cfg.mode != "fis":
        raise TrainError("flow refresh is a fis-mode operation",
                         iteration=state.iteration)
    completed = state.iteration - 1
    if completed < 1 or completed % cfg.refresh_t != 0:
        raise TrainError(
            f"refresh not scheduled after batch {completed}",
            iteration=state.iteration,
        )
    if state.last_latents is None:
        raise TrainError("no recorded batch to refresh from",
                         iteration=state.iteration)
    start = clock()
    raw = norms.batch_norms(state.gen, state.last_latents, cfg.norm_kind)
    batch = importance.LatentBatch(
        latents=state.last_latents, norms=raw * state.out_half
    )
    try:
        train_set = importance.build_flow_dataset(
            batch, cfg.augment_N, state.model_rng, cov=cfg.augment_cov
        )
    except DegenerateBatchError:
        log.warning(
            "batch %d has all-zero Jacobian norms; refresh skipped", completed
        )
        return state
    if state.flow is None or not cfg.flow_warm_start:
        state.flow = flows.build_flow(
            cfg.flow_kind,
            cfg.latent_dim,
            state.model_rng,
            depth=cfg.flow_depth,
            hidden=cfg.flow_hidden,
        )
        state.flow_adam = flows.flow_adam(state.flow, lr=cfg.lr_flow)
    flows.fit(
        state.flow,
        train_set,
        epochs=cfg.flow_epochs,
        batch_size=min(cfg.flow_batch, train_set.shape[0]),
        adam=state.flow_adam,
        rng=state.model_rng,
    )
    state.refresh_count += 1
    state.refresh_ms_total += (clock() - start) * 1000.0
    return state


@dataclass
class EvalContext:
    extractor: metrics.FeatureExtractor
    real_subset: np.ndarray
    options: EvalOptions
    grid_side: int | None


def build_eval_context(config: TrainConfig, dataset: Dataset,
                       options: EvalOptions) -> EvalContext:
    """Fit the frozen feature extractor and pick the fixed real eval set."""
    options.validate()
    rng = eval_rng(config.seed, 0)
    extractor = metrics.fit_extractor(
        options.extractor,
        dataset.samples,
        rng,
        pca_k=options.pca_k,
        labels=dataset.labels,
    )
    n = min(options.samples, dataset.rows)
    if dataset.rows > n:
        idx = rng.choice(dataset.rows, size=n, replace=False)
        subset = dataset.samples[idx]
    else:
        subset = dataset.samples
    side = math.isqrt(dataset.dim)
    grid_side = side if side * side == dataset.dim else None
    return EvalContext(extractor=extractor, real_subset=subset,
                        options=options, grid_side=grid_side)


def evaluate(state: TrainState, ctx: EvalContext, iteration):
    """Proxy Frechet distance at this iteration, on eval-only randomness."""
    rng = eval_rng(state.config.seed, iteration)
    n = ctx.real_subset.shape[0]
    if state.flow is not None:
        z = flows.sample(state.flow, n, rng)
    else:
        z = rng.standard_normal((n, state.config.latent_dim))
    samples, _ = gen_forward(state, z)
    fid = metrics.proxy_fid(samples, ctx.real_subset, ctx.extractor,
                            ridge=ctx.options.ridge)
    return fid, samples


def train(config: TrainConfig, dataset: Dataset, metrics_sink=None,
          image_sink=None, eval_options: EvalOptions | None = None,
          clock=None, state: TrainState | None = None) -> RunSummary:
    """Warm start plus max_iters adversarial batches with scheduled
    refreshes and periodic metric emission.

    metrics_sink receives each MetricRow; image_sink, when given and the
    data is square-image shaped, receives (iteration, samples, side).
    Passing a prepared ``state`` (from a checkpoint) resumes mid-run.
    """
    if dataset.rows == 0:
        raise ConfigError("dataset is empty")
    config.validate()
    eval_options = (eval_options or EvalOptions()).validate()
    clock = clock or time.perf_counter
    if state is None:
        state = init_state(config, dataset)
    ctx = build_eval_context(config, dataset, eval_options)
    start = clock()
    rows = []

    def emit(iteration, d_loss, g_loss):
        fid, samples = evaluate(state, ctx, iteration)
        row = MetricRow(
            iteration=iteration,
            mode=config.mode,
            flow_kind=config.flow_kind,
            norm_kind=config.norm_kind,
            seed=config.seed,
            proxy_fid=fid,
            d_loss=d_loss,
            g_loss=g_loss,
            wall_ms=(clock() - start) * 1000.0,
        )
        rows.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        if image_sink is not None and ctx.grid_side is not None:
            count = min(ctx.options.grid_count, samples.shape[0])
            image_sink(iteration, samples[:count], ctx.grid_side)

    if state.iteration == 0:
        d_loss, g_loss = warm_start_step(state, draw_real_batch(state, dataset))
        emit(0, d_loss, g_loss)
    while state.iteration <= config.max_iters:
        i = state.iteration
        d_loss, g_loss = adversarial_step(state, draw_real_batch(state, dataset))
        if config.mode == "fis" and i % config.refresh_t == 0:
            flow_refresh(state, clock=clock)
        if i % eval_options.interval == 0:
            emit(i, d_loss, g_loss)
    return RunSummary(
        rows=rows,
        iterations=state.iteration - 1,
        refresh_count=state.refresh_count,
        refresh_ms_total=state.refresh_ms_total,
        state=state,
    )
