"""Differentiable twin of the deployed network, recorded on a tape.

Records the unrolled CUBA LIF dynamics, the presynaptic traces, the inner
error-triggered weight updates, quantization (straight-through), and a
cross-entropy loss on output spike counts.  Backward through the tape yields
outer-loop gradients for every layer's shadow weights, including the paths
through the inner updates (the adapted plastic weights are an explicit
function of the initialization).

Two spike modes exist.  "hard" runs the exact thresholded forward and
records surrogate adjoints; "smooth" substitutes the surrogate-consistent
soft spike so the whole forward is differentiable, which is what finite
difference checking needs.  The error-trigger gate is recorded as a
stop-gradient mask in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import NeuronConfig
from .plasticity import SoelConfig
from .quantize import QuantizationScheme, LOIHI_WEIGHTS, RandomSource
from .surrogate import SurrogateConfig
from . import tape as tp

__all__ = [
    "GradientBundle",
    "GradCheckResult",
    "record_classification",
    "record_bilevel",
    "backward_bundle",
    "make_toy_net",
    "grad_check",
    "meta_grad_check",
]


@dataclass
class GradientBundle:
    """Per-layer gradients aligned with the weight shapes, plus the loss."""

    grads: list[np.ndarray]
    loss: float

    def __post_init__(self) -> None:
        if not all(np.all(np.isfinite(g)) for g in self.grads):
            raise FloatingPointError("non-finite gradient entries")


class _FilterChain:
    """One layer's u/v filters plus spike and reset, as tape ops."""

    def __init__(self, t: tp.Tape, cfg: NeuronConfig, sur: SurrogateConfig, mode: str):
        self.t = t
        self.cfg = cfg
        self.sur = sur.scaled(cfg.threshold)
        self.mode = mode
        self.u: tp.Node | None = None
        self.v: tp.Node | None = None

    def reset_state(self) -> None:
        self.u = None
        self.v = None

    def step(self, drive: tp.Node) -> tp.Node:
        t, cfg = self.t, self.cfg
        if self.u is None:
            self.u = t.mul_const(1.0 - cfg.alpha_u, drive)
        else:
            self.u = t.decay_add(self.u, drive, cfg.alpha_u)
        if self.v is None:
            v = t.mul_const(1.0 - cfg.alpha_v, self.u)
        else:
            v = t.decay_add(self.v, self.u, cfg.alpha_v)
        if self.mode == "smooth":
            s = t.spike_soft(v, cfg.threshold, self.sur)
        else:
            s = t.spike(v, cfg.threshold, self.sur)
        self.v = t.reset(v, s, cfg.reset_mode, cfg.threshold)
        return s


class _TraceChain:
    """Presynaptic q/p filter pair on the plastic layer's input spikes."""

    def __init__(self, t: tp.Tape, cfg: NeuronConfig):
        self.t = t
        self.cfg = cfg
        self.q: tp.Node | None = None
        self.p: tp.Node | None = None

    def reset_state(self) -> None:
        self.q = None
        self.p = None

    def step(self, spikes: tp.Node) -> None:
        t, cfg = self.t, self.cfg
        if self.q is None:
            self.q = t.mul_const(1.0 - cfg.alpha_u, spikes)
        else:
            self.q = t.decay_add(self.q, spikes, cfg.alpha_u)
        if self.p is None:
            self.p = t.mul_const(1.0 - cfg.alpha_v, self.q)
        else:
            self.p = t.decay_add(self.p, self.q, cfg.alpha_v)


def _forward_chain(t, chains, w_nodes, x_const, trace: _TraceChain | None, plastic_idx):
    """One network step; x_const is the input frame array for this step."""
    s = None
    for li, (chain, w) in enumerate(zip(chains, w_nodes)):
        if li == plastic_idx and trace is not None and s is not None:
            trace.step(s)
        if s is None:
            z = t.linear_const_input(x_const, w)
        else:
            z = t.linear(s, w)
        s = chain.step(z)
    return s


def record_classification(
    weights: list[np.ndarray],
    neuron_cfgs: list[NeuronConfig],
    surrogate: SurrogateConfig,
    frames: np.ndarray,
    labels: np.ndarray,
    spike_mode: str = "hard",
    quantized: bool = False,
    scheme: QuantizationScheme = LOIHI_WEIGHTS,
    rng: np.random.Generator | None = None,
) -> tuple[tp.Tape, tp.Node, tp.Node, list[tp.Node]]:
    """Record a plain batched forward pass and its count-based cross entropy.

    frames is (B, T, input); labels is (B,).  Returns (tape, loss node,
    counts node, weight leaves).
    """
    frames = np.asarray(frames, dtype=np.float64)
    t = tp.Tape()
    leaves = [t.leaf(w) for w in weights]
    fwd = [
        t.quantize_st(w, scheme, rng) if quantized else w for w in leaves
    ]
    chains = [
        _FilterChain(t, cfg, surrogate, spike_mode) for cfg in neuron_cfgs
    ]
    counts = None
    for step in range(frames.shape[1]):
        s = _forward_chain(t, chains, fwd, frames[:, step], None, -1)
        counts = s if counts is None else t.add(counts, s)
    loss = t.cross_entropy_on_counts(counts, labels)
    return t, loss, counts, leaves


def record_bilevel(
    hidden_shadows: list[np.ndarray],
    out_shadow: np.ndarray,
    neuron_cfgs: list[NeuronConfig],
    surrogate: SurrogateConfig,
    soel: SoelConfig,
    inner_alpha: float,
    inner_steps: int,
    train_frames: np.ndarray,
    shot_outputs: np.ndarray,
    test_frames: np.ndarray,
    test_labels: np.ndarray,
    quantized: bool = True,
    scheme: QuantizationScheme = LOIHI_WEIGHTS,
    rng: np.random.Generator | None = None,
    spike_mode: str = "hard",
    first_order: bool = False,
    blank_steps: int = 0,
    reset_between_shots: bool = True,
) -> tuple[tp.Tape, tp.Node, dict]:
    """Record inner adaptation plus the outer test loss for a batch of tasks.

    Episodes run in lockstep along a leading axis E: train_frames is
    (E, S, T, input) with the S shots presented sequentially (labeled output
    index per shot in `shot_outputs`), test_frames (E, Q, T, input).  The
    plastic layer's shadow weights gain a per-episode copy that the recorded
    epoch updates modify; hidden layers stay shared.  Returns (tape, loss,
    {"hidden": leaves, "out": leaf}).
    """
    if not hidden_shadows:
        raise ValueError("bilevel recording needs at least one hidden layer")
    train_frames = np.asarray(train_frames, dtype=np.float64)
    test_frames = np.asarray(test_frames, dtype=np.float64)
    n_episodes, n_shots, n_steps, _ = train_frames.shape
    n_out = out_shadow.shape[0]
    out_cfg = neuron_cfgs[-1]

    t = tp.Tape()
    hidden_leaves = [t.leaf(w) for w in hidden_shadows]
    out_leaf = t.leaf(out_shadow)
    hidden_fwd = [
        t.quantize_st(w, scheme, rng) if quantized else w for w in hidden_leaves
    ]
    w_shadow = t.tile(out_leaf, n_episodes)
    w_fwd = t.tile(
        t.quantize_st(out_leaf, scheme, rng) if quantized else out_leaf, n_episodes
    )

    chains = [_FilterChain(t, cfg, surrogate, spike_mode) for cfg in neuron_cfgs]
    trace = _TraceChain(t, out_cfg)
    plastic_idx = len(neuron_cfgs) - 1
    eta_eff = inner_alpha * soel.eta
    update_count = 0

    def epoch_update(counts_node, target_row, w_shadow, w_fwd):
        nonlocal update_count
        counts2d = t.reshape(counts_node, (n_episodes, n_out))
        e = t.sub_from_const(target_row, counts2d)
        mask = (np.abs(e.value) >= soel.theta).astype(np.float64)
        update_count += int(mask.sum())
        e_gated = t.mul_const(mask, e)
        p2d = t.reshape(trace.p, (n_episodes, out_shadow.shape[1]))
        delta = t.rowcol_outer(e_gated, p2d)
        if first_order:
            delta = t.stopgrad(delta)
        w_shadow = t.axpy(w_shadow, delta, eta_eff)
        if quantized:
            wq = t.quantize_st(w_shadow, scheme, rng)
            row_mask = mask[..., None]
            w_fwd = t.add(t.mul_const(row_mask, wq), t.mul_const(1.0 - row_mask, w_fwd))
        else:
            w_fwd = w_shadow
        return w_shadow, w_fwd

    # Inner adaptation: shots in sequence, epoch updates at window boundaries.
    step_in_window = 0
    counts = None
    segments = []
    for _ in range(inner_steps):
        for s in range(n_shots):
            segments.append(("shot", s))
            if blank_steps > 0:
                segments.append(("blank", None))

    for kind, shot in segments:
        if reset_between_shots:
            for chain in chains:
                chain.reset_state()
            trace.reset_state()
            counts = None
            step_in_window = 0
        if kind == "shot":
            seg_steps = n_steps
            target_row = np.full(n_out, float(soel.off_target_spikes))
            target_row[shot_outputs[shot]] = float(soel.target_spikes)
        else:
            seg_steps = blank_steps
            target_row = None
        for step in range(seg_steps):
            if kind == "shot":
                x = train_frames[:, shot, step][:, None, :]
            else:
                x = np.zeros((n_episodes, 1, train_frames.shape[-1]))
            s_out = _forward_chain(t, chains, hidden_fwd + [w_fwd], x, trace, plastic_idx)
            counts = s_out if counts is None else t.add(counts, s_out)
            step_in_window += 1
            if step_in_window == soel.window:
                if kind == "shot" and trace.p is not None:
                    w_shadow, w_fwd = epoch_update(counts, target_row, w_shadow, w_fwd)
                counts = None
                step_in_window = 0

    # Outer evaluation: adapted weights on the query shots, no plasticity.
    for chain in chains:
        chain.reset_state()
    counts = None
    for step in range(test_frames.shape[2]):
        x = test_frames[:, :, step]
        s_out = _forward_chain(t, chains, hidden_fwd + [w_fwd], x, None, -1)
        counts = s_out if counts is None else t.add(counts, s_out)
    loss = t.cross_entropy_on_counts(counts, np.asarray(test_labels, dtype=np.int64))
    return t, loss, {
        "hidden": hidden_leaves,
        "out": out_leaf,
        "counts": counts,
        "inner_update_count": update_count,
    }


def backward_bundle(t: tp.Tape, loss: tp.Node, leaves: list[tp.Node]) -> GradientBundle:
    """Reverse pass to all given leaves; raises on non-finite entries."""
    grads = tp.gradients(t, loss, leaves)
    return GradientBundle(grads=grads, loss=float(loss.value))


def make_toy_net(
    sizes: tuple[int, ...],
    seed: int = 0,
    scale: float = 1.0,
    alpha_u: float = 0.7,
    alpha_v: float = 0.8,
    threshold: float = 1.0,
    reset_mode: str = "hard",
) -> tuple[list[np.ndarray], list[NeuronConfig]]:
    """Small O(1)-scale network for verification runs."""
    gen = RandomSource(seed).stream("toy-net")
    weights = [
        gen.normal(0.0, scale / np.sqrt(sizes[i]), size=(sizes[i + 1], sizes[i]))
        for i in range(len(sizes) - 1)
    ]
    cfgs = [
        NeuronConfig(alpha_u=alpha_u, alpha_v=alpha_v, threshold=threshold, reset_mode=reset_mode)
        for _ in range(len(sizes) - 1)
    ]
    return weights, cfgs


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    surrogate_forward: bool  # hard threshold forward: FD mismatch is expected

    def __str__(self) -> str:
        note = " (surrogate forward, mismatch expected)" if self.surrogate_forward else ""
        return f"max relative error {self.max_rel_error:.3e} over {self.checked} weights{note}"


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-10)
    return abs(a - b) / denom


def _sample_coords(weights, n_samples, gen):
    """Weight coordinates to probe, interleaved so every layer is covered."""
    per_layer = int(np.ceil(n_samples / len(weights)))
    groups = [
        [(li, int(gen.integers(w.shape[0])), int(gen.integers(w.shape[1])))
         for _ in range(per_layer)]
        for li, w in enumerate(weights)
    ]
    coords = [c for row in zip(*groups) for c in row]
    return coords[: max(n_samples, len(weights))]


def grad_check(
    weights: list[np.ndarray],
    neuron_cfgs: list[NeuronConfig],
    surrogate: SurrogateConfig,
    frames: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-4,
    n_samples: int = 120,
    seed: int = 0,
    spike_mode: str = "smooth",
) -> GradCheckResult:
    """Tape gradients vs central finite differences on sampled weights.

    Runs the smoothed forward by default so the loss is differentiable;
    `spike_mode="hard"` reports the (expected) surrogate mismatch instead.
    """

    def loss_of(ws: list[np.ndarray]) -> float:
        _, loss, _, _ = record_classification(
            ws, neuron_cfgs, surrogate, frames, labels, spike_mode=spike_mode
        )
        return float(loss.value)

    t, loss, _, leaves = record_classification(
        weights, neuron_cfgs, surrogate, frames, labels, spike_mode=spike_mode
    )
    grads = tp.gradients(t, loss, leaves)

    coords = _sample_coords(weights, n_samples, RandomSource(seed).stream("grad-check"))

    max_err = 0.0
    for li, i, j in coords:
        perturbed = [w.copy() for w in weights]
        perturbed[li][i, j] += epsilon
        up = loss_of(perturbed)
        perturbed[li][i, j] -= 2 * epsilon
        down = loss_of(perturbed)
        fd = (up - down) / (2 * epsilon)
        max_err = max(max_err, _rel_err(float(grads[li][i, j]), fd))
    return GradCheckResult(
        max_rel_error=max_err, checked=len(coords), surrogate_forward=(spike_mode == "hard")
    )


def meta_grad_check(
    hidden_shadows: list[np.ndarray],
    out_shadow: np.ndarray,
    neuron_cfgs: list[NeuronConfig],
    surrogate: SurrogateConfig,
    soel: SoelConfig,
    inner_alpha: float,
    train_frames: np.ndarray,
    shot_outputs: np.ndarray,
    test_frames: np.ndarray,
    test_labels: np.ndarray,
    epsilon: float = 1e-4,
    n_samples: int = 60,
    seed: int = 0,
) -> GradCheckResult:
    """FD check of the outer-loss gradient through a 1-step inner loop.

    Uses the smoothed forward with theta = 0 (gate always open) and no
    quantization, so the bilevel loss is differentiable end to end.
    """
    smooth_soel = SoelConfig(
        theta=0.0,
        eta=soel.eta,
        window=soel.window,
        offset=soel.offset,
        target_spikes=soel.target_spikes,
        off_target_spikes=soel.off_target_spikes,
    )

    def loss_of(hws: list[np.ndarray], ow: np.ndarray) -> float:
        _, loss, _ = record_bilevel(
            hws, ow, neuron_cfgs, surrogate, smooth_soel, inner_alpha, 1,
            train_frames, shot_outputs, test_frames, test_labels,
            quantized=False, spike_mode="smooth",
        )
        return float(loss.value)

    t, loss, leaves = record_bilevel(
        hidden_shadows, out_shadow, neuron_cfgs, surrogate, smooth_soel, inner_alpha, 1,
        train_frames, shot_outputs, test_frames, test_labels,
        quantized=False, spike_mode="smooth",
    )
    all_leaves = leaves["hidden"] + [leaves["out"]]
    grads = tp.gradients(t, loss, all_leaves)
    all_weights = hidden_shadows + [out_shadow]

    coords = _sample_coords(
        all_weights, n_samples, RandomSource(seed).stream("meta-grad-check")
    )

    max_err = 0.0
    for li, i, j in coords:
        ws = [w.copy() for w in all_weights]
        ws[li][i, j] += epsilon
        up = loss_of(ws[:-1], ws[-1])
        ws[li][i, j] -= 2 * epsilon
        down = loss_of(ws[:-1], ws[-1])
        fd = (up - down) / (2 * epsilon)
        max_err = max(max_err, _rel_err(float(grads[li][i, j]), fd))
    return GradCheckResult(max_rel_error=max_err, checked=len(coords), surrogate_forward=False)
