"""Cycle-accurate CUBA LIF layer dynamics and presynaptic eligibility traces.

A layer advances once per 1 ms step:

    u(t) = alpha_u * u(t-1) + (1 - alpha_u) * W @ x(t)
    v(t) = alpha_v * v(t-1) + (1 - alpha_v) * u(t)
    s(t) = v(t) >= threshold
    hard reset: v(t) <- v(t) * (1 - s(t));  soft reset: v(t) <- v(t) - threshold * s(t)

The per-pre-neuron eligibility trace is the same pair of first-order filters
applied to the raw input spikes (no weights), so one trace per pre-neuron
suffices and learning state stays linear in neuron count:

    q(t) = alpha_u * q(t-1) + (1 - alpha_u) * x(t)
    p(t) = alpha_v * p(t-1) + (1 - alpha_v) * q(t)

State arrays may carry leading batch dimensions; weights are (post, pre).
An optional fixed-point mode snaps states to a 2^-bits grid after every
update (truncation toward minus infinity) with decay constants rounded to
the same grid, emulating shift-based integer arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantize import WeightMatrix

__all__ = [
    "NeuronConfig",
    "LayerState",
    "TraceState",
    "NetworkTopology",
    "RunRecord",
    "zero_layer_state",
    "zero_trace_state",
    "step_cuba_layer",
    "update_presyn_trace",
    "run_network",
]


@dataclass(frozen=True)
class NeuronConfig:
    alpha_u: float
    alpha_v: float
    threshold: float
    reset_mode: str = "hard"
    fixed_point_bits: int | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.alpha_u < 1.0 and 0.0 <= self.alpha_v < 1.0):
            raise ValueError("decay constants must lie in [0, 1)")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")
        if self.reset_mode not in ("hard", "soft"):
            raise ValueError(f"unknown reset mode {self.reset_mode!r}")
        if self.fixed_point_bits is not None and self.fixed_point_bits <= 0:
            raise ValueError("fixed_point_bits must be positive when set")

    def effective_alphas(self) -> tuple[float, float]:
        """Decay constants, snapped to the fixed-point grid when enabled."""
        if self.fixed_point_bits is None:
            return self.alpha_u, self.alpha_v
        scale = float(2**self.fixed_point_bits)
        return round(self.alpha_u * scale) / scale, round(self.alpha_v * scale) / scale


def _snap(x: np.ndarray, bits: int | None) -> np.ndarray:
    if bits is None:
        return x
    scale = float(2**bits)
    return np.floor(x * scale) / scale


@dataclass
class LayerState:
    """Per-neuron dynamic state: synaptic current u, potential v, spikes s."""

    u: np.ndarray
    v: np.ndarray
    s: np.ndarray


@dataclass
class TraceState:
    """Per-pre-neuron filtered spike history: first-order q, second-order p."""

    q: np.ndarray
    p: np.ndarray

    def copy(self) -> "TraceState":
        return TraceState(q=self.q.copy(), p=self.p.copy())


def zero_layer_state(n: int, batch: tuple[int, ...] = ()) -> LayerState:
    shape = batch + (n,)
    return LayerState(u=np.zeros(shape), v=np.zeros(shape), s=np.zeros(shape))


def zero_trace_state(n: int, batch: tuple[int, ...] = ()) -> TraceState:
    shape = batch + (n,)
    return TraceState(q=np.zeros(shape), p=np.zeros(shape))


def step_cuba_layer(
    state: LayerState,
    input_spikes: np.ndarray,
    w_values: np.ndarray,
    cfg: NeuronConfig,
) -> tuple[LayerState, np.ndarray]:
    """Advance one layer by one step; mutates `state`, returns (state, spikes).

    `w_values` is the weight view to simulate with: the integer image for
    deployment, the shadow for differentiation.  `input_spikes` has shape
    (..., pre) matching the state's leading batch dimensions.
    """
    input_spikes = np.asarray(input_spikes, dtype=np.float64)
    if input_spikes.shape[-1] != w_values.shape[-1]:
        raise ValueError(
            f"input size {input_spikes.shape[-1]} != weight fan-in {w_values.shape[-1]}"
        )
    au, av = cfg.effective_alphas()
    bits = cfg.fixed_point_bits
    drive = input_spikes @ np.swapaxes(w_values, -1, -2)
    state.u = _snap(au * state.u + (1.0 - au) * drive, bits)
    state.v = _snap(av * state.v + (1.0 - av) * state.u, bits)
    spikes = (state.v >= cfg.threshold).astype(np.float64)
    if cfg.reset_mode == "hard":
        state.v = state.v * (1.0 - spikes)
    else:
        state.v = state.v - cfg.threshold * spikes
    state.s = spikes
    return state, spikes


def update_presyn_trace(
    tr: TraceState, input_spikes: np.ndarray, cfg: NeuronConfig
) -> TraceState:
    """Advance the eligibility trace pair by one step; mutates and returns `tr`."""
    input_spikes = np.asarray(input_spikes, dtype=np.float64)
    if input_spikes.shape != tr.q.shape:
        raise ValueError(f"input shape {input_spikes.shape} != trace shape {tr.q.shape}")
    au, av = cfg.effective_alphas()
    bits = cfg.fixed_point_bits
    tr.q = _snap(au * tr.q + (1.0 - au) * input_spikes, bits)
    tr.p = _snap(av * tr.p + (1.0 - av) * tr.q, bits)
    return tr


@dataclass
class NetworkTopology:
    """Feed-forward stack of CUBA LIF layers with per-layer weights.

    `layer_sizes` is (input, hidden..., output); `neuron_configs`, `weights`
    and `plastic` each have one entry per non-input layer.  By default only
    the final layer is plastic.
    """

    layer_sizes: tuple[int, ...]
    neuron_configs: list[NeuronConfig]
    weights: list[WeightMatrix]
    plastic: list[bool] = field(default_factory=list)

    def __post_init__(self) -> None:
        n_layers = len(self.layer_sizes) - 1
        if n_layers < 1:
            raise ValueError("need at least one weighted layer")
        if len(self.neuron_configs) != n_layers or len(self.weights) != n_layers:
            raise ValueError("one neuron config and weight matrix per layer required")
        for i, w in enumerate(self.weights):
            expect = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expect:
                raise ValueError(f"layer {i} weight shape {w.shape} != {expect}")
        if not self.plastic:
            self.plastic = [False] * (n_layers - 1) + [True]
        if len(self.plastic) != n_layers:
            raise ValueError("plastic flags must match layer count")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def plastic_index(self) -> int:
        idx = [i for i, p in enumerate(self.plastic) if p]
        if len(idx) != 1:
            raise ValueError("expected exactly one plastic layer")
        return idx[0]

    def copy(self) -> "NetworkTopology":
        return NetworkTopology(
            layer_sizes=self.layer_sizes,
            neuron_configs=list(self.neuron_configs),
            weights=[w.copy() for w in self.weights],
            plastic=list(self.plastic),
        )


@dataclass
class RunRecord:
    """Outputs of a forward run: spikes, per-window counts, trace snapshots."""

    out_spikes: np.ndarray  # (steps, n_out)
    window_counts: np.ndarray  # (n_windows, n_out)
    boundary_traces: np.ndarray  # (n_windows, n_pre_plastic)
    final_trace: TraceState


def run_network(
    net: NetworkTopology,
    frames: np.ndarray,
    window: int,
    use_quantized: bool = True,
) -> RunRecord:
    """Feed a (steps, input) binary frame sequence through the whole stack.

    Accumulates output spike counts per window of `window` steps and snapshots
    the plastic layer's presynaptic trace at every window boundary.  Only
    complete windows are reported.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != net.layer_sizes[0]:
        raise ValueError(
            f"frames shape {frames.shape} incompatible with input size {net.layer_sizes[0]}"
        )
    steps = frames.shape[0]
    if steps <= 0:
        raise ValueError("need at least one time step")

    states = [zero_layer_state(n) for n in net.layer_sizes[1:]]
    plastic = net.plastic_index
    trace = zero_trace_state(net.layer_sizes[plastic])
    w_views = [
        (w.quantized.astype(np.float64) if use_quantized else w.shadow)
        for w in net.weights
    ]

    n_out = net.layer_sizes[-1]
    out_spikes = np.zeros((steps, n_out))
    counts: list[np.ndarray] = []
    boundary_traces: list[np.ndarray] = []
    acc = np.zeros(n_out)

    for t in range(steps):
        x = frames[t]
        for li in range(net.n_layers):
            if li == plastic:
                update_presyn_trace(trace, x, net.neuron_configs[li])
            _, x = step_cuba_layer(states[li], x, w_views[li], net.neuron_configs[li])
        out_spikes[t] = x
        acc = acc + x
        if (t + 1) % window == 0:
            counts.append(acc)
            boundary_traces.append(trace.p.copy())
            acc = np.zeros(n_out)

    return RunRecord(
        out_spikes=out_spikes,
        window_counts=np.array(counts).reshape(len(counts), n_out),
        boundary_traces=np.array(boundary_traces).reshape(len(counts), -1),
        final_trace=trace,
    )
