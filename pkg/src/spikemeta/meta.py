"""Bi-level optimization: inner error-triggered adaptation, outer ADAM.

The outer loop optimizes a weight initialization so that one-shot inner
adaptation of the final layer succeeds on unseen classes.  During training
the inner loop runs in its differentiable form on the tape; at test time or
deployment it runs the bit-exact integer form (hard spike counts, offset
encoding, stochastic re-rounding of updated rows).  Classification reads out
the output neuron with the highest spike count over the sample, ties going
to the lowest index.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffsim
from . import tape as tp
from .data import Episode, build_episode
from .dynamics import (
    NetworkTopology,
    NeuronConfig,
    zero_layer_state,
    zero_trace_state,
    step_cuba_layer,
    update_presyn_trace,
)
from .plasticity import SoelConfig, SoelState, learning_epoch_step
from .quantize import (
    LOIHI_WEIGHTS,
    QuantizationScheme,
    RandomSource,
    WeightMatrix,
    quantize_array,
)
from .surrogate import SurrogateConfig

__all__ = [
    "InnerLoopConfig",
    "OuterLoopConfig",
    "MetaModel",
    "EpisodeResult",
    "MetricsRow",
    "AdamState",
    "adam_step",
    "init_model",
    "inner_adapt",
    "run_inference",
    "meta_test_trial",
    "evaluate_trials",
    "outer_loss",
    "meta_train",
    "TrainResult",
]


@dataclass(frozen=True)
class InnerLoopConfig:
    """Inner-loop adaptation: rate alpha, number of passes over the shots."""

    alpha: float = 0.1
    steps: int = 1
    plastic_layers: frozenset[int] | None = None  # None = final layer only
    blank_steps: int = 0
    reset_between_shots: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("need at least one adaptation step")
        if self.plastic_layers is not None and not self.plastic_layers:
            raise ValueError("plastic_layers must be nonempty")


@dataclass(frozen=True)
class OuterLoopConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    meta_batch: int = 8
    iterations: int = 100
    first_order: bool = False

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    cfg: OuterLoopConfig,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected ADAM update, applied in place to the parameter arrays."""
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params, state


@dataclass
class MetaModel:
    """A deployable initialization: topology plus every relevant config."""

    topology: NetworkTopology
    soel: SoelConfig
    surrogate: SurrogateConfig
    inner: InnerLoopConfig
    scheme: QuantizationScheme = LOIHI_WEIGHTS
    quantized: bool = True
    seed: int = 0
    iteration: int = 0

    def copy(self) -> "MetaModel":
        return replace(self, topology=self.topology.copy())

    @property
    def plastic_index(self) -> int:
        idx = self.topology.plastic_index
        if self.inner.plastic_layers is not None and self.inner.plastic_layers != frozenset({idx}):
            raise NotImplementedError("only final-layer plasticity is supported")
        return idx

    def forward_views(self) -> list[np.ndarray]:
        """Weight views the deployed forward reads (never raw shadow values)."""
        if self.quantized:
            return [w.quantized.astype(np.float64) for w in self.topology.weights]
        return [w.shadow.copy() for w in self.topology.weights]

    def refresh_quantized(self, rng: np.random.Generator) -> None:
        for w in self.topology.weights:
            w.quantized = quantize_array(w.shadow, self.scheme, rng)


@dataclass
class EpisodeResult:
    accuracy: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray
    inner_updates: int
    ties: int


@dataclass
class MetricsRow:
    iteration: int
    loss: float
    val_accuracy: float | None
    wall_time_s: float
    inner_updates: int


def _smooth_rows(shadow: np.ndarray, grid: tuple[int, int], sigma: float) -> np.ndarray:
    """Blur each row over the input grid, making units local spatial pools."""
    h, w = grid
    radius = max(1, int(np.ceil(2 * sigma)))
    kernel = np.exp(-np.arange(-radius, radius + 1) ** 2 / (2 * sigma**2))
    kernel /= kernel.sum()

    def conv_same(row: np.ndarray) -> np.ndarray:
        full = np.convolve(row, kernel, mode="full")
        start = (len(kernel) - 1) // 2
        return full[start : start + len(row)]

    fields = shadow.reshape(shadow.shape[0], h, w)
    fields = np.apply_along_axis(conv_same, 1, fields)
    fields = np.apply_along_axis(conv_same, 2, fields)
    flat = fields.reshape(shadow.shape[0], h * w)
    return flat * (shadow.std() / max(flat.std(), 1e-12))


def init_model(
    input_dim: int,
    hidden: tuple[int, ...],
    way: int,
    neuron_hidden: NeuronConfig,
    neuron_out: NeuronConfig,
    soel: SoelConfig,
    surrogate: SurrogateConfig,
    inner: InnerLoopConfig,
    seed: int,
    weight_std: float = 48.0,
    quantized: bool = True,
    scheme: QuantizationScheme = LOIHI_WEIGHTS,
    input_grid: tuple[int, int] | None = None,
    rf_sigma: float = 0.0,
) -> MetaModel:
    """Random hidden layers at integer scale, zero-initialized output head.

    The zero head makes an unadapted model classify at exact chance (all
    counts zero, ties to index 0) while adaptation writes rows from scratch.
    With `rf_sigma` > 0 the first layer's random fields are spatially
    smoothed over `input_grid`, seeding shift-tolerant local pooling that
    the outer loop can refine.
    """
    rng = RandomSource(seed)
    sizes = (input_dim,) + tuple(hidden) + (way,)
    weights = []
    for i in range(len(sizes) - 2):
        shadow = rng.stream(f"init/{i}").normal(0.0, weight_std, size=(sizes[i + 1], sizes[i]))
        if (
            i == 0
            and rf_sigma > 0
            and input_grid is not None
            and input_grid[0] * input_grid[1] == input_dim
        ):
            shadow = _smooth_rows(shadow, input_grid, rf_sigma)
        weights.append(
            WeightMatrix(
                shadow=shadow,
                quantized=quantize_array(shadow, scheme, rng.stream(f"init-q/{i}")),
            )
        )
    weights.append(WeightMatrix.zeros(way, sizes[-2]))
    cfgs = [neuron_hidden] * len(hidden) + [neuron_out]
    topo = NetworkTopology(layer_sizes=sizes, neuron_configs=cfgs, weights=weights)
    return MetaModel(
        topology=topo,
        soel=soel,
        surrogate=surrogate,
        inner=inner,
        scheme=scheme,
        quantized=quantized,
        seed=seed,
    )


def _forward_step_states(model, views, states, x):
    """One deployed network step over all layers; returns spikes per layer."""
    spikes = []
    s = x
    for li, (st, w, cfg) in enumerate(zip(states, views, model.topology.neuron_configs)):
        _, s = step_cuba_layer(st, s, w, cfg)
        spikes.append(s)
    return spikes


def inner_adapt(
    model: MetaModel,
    train_frames: np.ndarray,
    train_outputs: np.ndarray,
    rng: np.random.Generator,
    journal: list | None = None,
    use_engine: bool = False,
) -> NetworkTopology:
    """Hardware-form adaptation of the plastic layer; other layers untouched.

    Presents the shots in sequence for `inner.steps` passes, triggering the
    learning-epoch program every window.  Deltas are scaled by alpha, applied
    to shadow weights, and updated rows are re-quantized.  Returns an adapted
    copy of the topology.
    """
    topo = model.topology.copy()
    plastic = model.plastic_index
    w = topo.weights[plastic]
    inner = model.inner
    n_pre = model.topology.layer_sizes[plastic]
    frozen_views = [
        (wm.quantized.astype(np.float64) if model.quantized else wm.shadow.copy())
        for wm in topo.weights[:plastic]
    ]

    states = [zero_layer_state(n) for n in topo.layer_sizes[1:]]
    trace = zero_trace_state(n_pre)
    soel_state = SoelState.zeros(topo.layer_sizes[-1])
    n_steps = train_frames.shape[1]
    blank_steps = 0 if inner.reset_between_shots else inner.blank_steps

    for _ in range(inner.steps):
        for shot in range(train_frames.shape[0]):
            if inner.reset_between_shots:
                states = [zero_layer_state(n) for n in topo.layer_sizes[1:]]
                trace = zero_trace_state(n_pre)
                soel_state = SoelState.zeros(topo.layer_sizes[-1])
            label = int(train_outputs[shot])
            for t in range(n_steps + blank_steps):
                blank = t >= n_steps
                x = (
                    np.zeros(topo.layer_sizes[0])
                    if blank
                    else train_frames[shot, t].astype(np.float64)
                )
                pre = x
                for li in range(topo.n_layers):
                    view = (
                        frozen_views[li]
                        if li < plastic
                        else (w.quantized.astype(np.float64) if model.quantized else w.shadow)
                    )
                    if li == plastic:
                        update_presyn_trace(trace, pre, topo.neuron_configs[li])
                    _, pre = step_cuba_layer(states[li], pre, view, topo.neuron_configs[li])
                learning_epoch_step(
                    soel_state,
                    trace,
                    pre,
                    label,
                    blank,
                    model.soel,
                    w,
                    model.scheme,
                    rng,
                    scale=inner.alpha,
                    journal=journal,
                    use_engine=use_engine,
                )
    return topo


def run_inference(
    model: MetaModel, topo: NetworkTopology, frames: np.ndarray
) -> np.ndarray:
    """Batched quantized-forward spike counts (no learning): (B, n_out)."""
    frames = np.asarray(frames, dtype=np.float64)
    batch = frames.shape[0]
    views = [
        (w.quantized.astype(np.float64) if model.quantized else w.shadow.copy())
        for w in topo.weights
    ]
    states = [zero_layer_state(n, batch=(batch,)) for n in topo.layer_sizes[1:]]
    counts = np.zeros((batch, topo.layer_sizes[-1]))
    for t in range(frames.shape[1]):
        s = frames[:, t]
        for st, w, cfg in zip(states, views, topo.neuron_configs):
            _, s = step_cuba_layer(st, s, w, cfg)
        counts += s
    return counts


def classify_counts(counts: np.ndarray) -> tuple[np.ndarray, int]:
    """Argmax readout with ties to the lowest index; returns (labels, tie count)."""
    preds = counts.argmax(axis=1)
    ties = int(((counts == counts.max(axis=1, keepdims=True)).sum(axis=1) > 1).sum())
    return preds, ties


def meta_test_trial(
    model: MetaModel, episode: Episode, rng: np.random.Generator
) -> EpisodeResult:
    """One trial: adapt on the episode's shots, classify its query shots."""
    journal: list = []
    adapted = inner_adapt(
        model, episode.train_frames, episode.train_outputs, rng, journal=journal
    )
    counts = run_inference(model, adapted, episode.test_frames)
    preds, ties = classify_counts(counts)
    correct = preds == episode.test_outputs
    per_class_correct = np.zeros(episode.way, dtype=np.int64)
    per_class_total = np.zeros(episode.way, dtype=np.int64)
    for out, ok in zip(episode.test_outputs, correct):
        per_class_total[out] += 1
        per_class_correct[out] += int(ok)
    updates = sum(len(entry["rows"]) for entry in journal)
    return EpisodeResult(
        accuracy=float(correct.mean()),
        per_class_correct=per_class_correct,
        per_class_total=per_class_total,
        inner_updates=updates,
        ties=ties,
    )


def _trial_range(payload) -> list[EpisodeResult]:
    model, source, part, way, shot, queries, rng, stream_prefix, indices = payload
    out = []
    for k in indices:
        episode = build_episode(
            source, part, way, shot, queries, rng.stream(f"{stream_prefix}/episode/{k}")
        )
        out.append(meta_test_trial(model, episode, rng.stream(f"{stream_prefix}/adapt/{k}")))
    return out


def evaluate_trials(
    model: MetaModel,
    source,
    part: str,
    trials: int,
    way: int,
    shot: int,
    queries: int,
    rng: RandomSource,
    stream_prefix: str = "trial",
    workers: int = 1,
) -> tuple[float, float, list[EpisodeResult]]:
    """Mean and standard deviation of accuracy over seeded trials.

    Every trial draws from streams keyed by its index, so results do not
    depend on the worker count and repeat exactly for a fixed seed.
    """
    if workers <= 1 or trials < 4:
        results = _trial_range(
            (model, source, part, way, shot, queries, rng, stream_prefix, range(trials))
        )
    else:
        from concurrent.futures import ProcessPoolExecutor

        chunks = np.array_split(np.arange(trials), workers)
        payloads = [
            (model, source, part, way, shot, queries, rng, stream_prefix, list(chunk))
            for chunk in chunks
            if len(chunk)
        ]
        results = []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part_results in pool.map(_trial_range, payloads):
                results.extend(part_results)
    accs = np.array([r.accuracy for r in results])
    return float(accs.mean()), float(accs.std()), results


def _episode_batch_arrays(episodes: list[Episode]):
    train = np.stack([e.train_frames for e in episodes]).astype(np.float64)
    test = np.stack([e.test_frames for e in episodes]).astype(np.float64)
    test_labels = np.stack([e.test_outputs for e in episodes])
    shot_outputs = episodes[0].train_outputs
    return train, shot_outputs, test, test_labels


def outer_loss(
    model: MetaModel,
    episodes: list[Episode],
    rng: np.random.Generator | None,
    spike_mode: str = "hard",
    first_order: bool = False,
) -> tuple[tp.Tape, tp.Node, dict]:
    """Record the summed test cross entropy of the adapted model on a tape."""
    plastic = model.plastic_index
    hidden_shadows = [w.shadow for w in model.topology.weights[:plastic]]
    out_shadow = model.topology.weights[plastic].shadow
    train, shot_outputs, test, test_labels = _episode_batch_arrays(episodes)
    return diffsim.record_bilevel(
        hidden_shadows,
        out_shadow,
        model.topology.neuron_configs,
        model.surrogate,
        model.soel,
        model.inner.alpha,
        model.inner.steps,
        train,
        shot_outputs,
        test,
        test_labels,
        quantized=model.quantized,
        scheme=model.scheme,
        rng=rng,
        spike_mode=spike_mode,
        first_order=first_order,
        blank_steps=model.inner.blank_steps,
        reset_between_shots=model.inner.reset_between_shots,
    )


@dataclass
class TrainResult:
    model: MetaModel  # best-validation snapshot
    final_model: MetaModel
    metrics: list[MetricsRow]
    best_val_accuracy: float
    best_iteration: int
    adam: AdamState


def meta_train(
    source,
    model: MetaModel,
    outer: OuterLoopConfig,
    way: int,
    shot: int,
    train_queries: int,
    val_every: int = 25,
    val_episodes: int = 20,
    val_queries: int = 10,
    adam: AdamState | None = None,
    start_iteration: int | None = None,
    on_iteration=None,
) -> TrainResult:
    """Outer ADAM over sampled task batches with validation-based selection.

    Fully deterministic given (seed, configs): episode sampling, rounding,
    and the fixed validation set all draw from streams keyed by iteration,
    so a run resumed from a checkpoint continues bit-exactly.
    """
    rng = RandomSource(model.seed)
    params = [w.shadow for w in model.topology.weights]
    if adam is None:
        adam = AdamState.zeros_like(params)
    start = model.iteration if start_iteration is None else start_iteration

    best_val = -1.0
    best_iter = start
    best_model = model.copy()
    metrics: list[MetricsRow] = []
    t0 = time.perf_counter()

    def validate(it: int) -> float:
        snap = model.copy()
        snap.refresh_quantized(rng.stream(f"deploy/{it}"))
        acc, _, _ = evaluate_trials(
            snap, source, "val", val_episodes, way, shot, val_queries,
            rng, stream_prefix="val",
        )
        return acc

    for it in range(start, outer.iterations):
        episodes = [
            build_episode(
                source, "train", way, shot, train_queries, rng.stream(f"episode/{it}/{k}")
            )
            for k in range(outer.meta_batch)
        ]
        t, loss, leaves = outer_loss(
            model, episodes, rng.stream(f"quant/{it}"), first_order=outer.first_order
        )
        leaf_list = leaves["hidden"] + [leaves["out"]]
        bundle = diffsim.backward_bundle(t, loss, leaf_list)
        adam_step(params, bundle.grads, adam, outer)
        model.iteration = it + 1

        val_acc = None
        if val_every and ((it + 1) % val_every == 0 or it + 1 == outer.iterations):
            val_acc = validate(it + 1)
            if val_acc > best_val:
                best_val = val_acc
                best_iter = it + 1
                best_model = model.copy()
                best_model.refresh_quantized(rng.stream(f"deploy/{it + 1}"))
        metrics.append(
            MetricsRow(
                iteration=it + 1,
                loss=bundle.loss,
                val_accuracy=val_acc,
                wall_time_s=time.perf_counter() - t0,
                inner_updates=leaves["inner_update_count"],
            )
        )
        if on_iteration is not None:
            on_iteration(metrics[-1], model, adam)

    model.refresh_quantized(rng.stream(f"deploy/final/{model.iteration}"))
    if best_val < 0:
        best_model = model.copy()
        best_iter = model.iteration
        best_val = float("nan")
    best_model.iteration = best_iter
    return TrainResult(
        model=best_model,
        final_model=model,
        metrics=metrics,
        best_val_accuracy=best_val,
        best_iteration=best_iter,
        adam=adam,
    )
