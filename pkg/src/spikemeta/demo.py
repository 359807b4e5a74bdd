"""Single plastic neuron driven by Poisson input, regulated to a target rate.

One output neuron receives a bundle of Poisson spike trains.  Every window
the learning-epoch program compares the output count against the target and
nudges the synaptic weights when the error magnitude reaches theta.  The run
converges once the error stays below theta for a configured number of
consecutive windows; the trajectory (input activity, output spikes, weight
views, encoded error) is emitted as CSV rows for plotting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .dynamics import NeuronConfig, zero_layer_state, zero_trace_state, step_cuba_layer, update_presyn_trace
from .plasticity import SoelConfig, SoelState, learning_epoch_step
from .quantize import LOIHI_WEIGHTS, RandomSource, WeightMatrix, quantize_array

__all__ = ["DemoResult", "run_single_neuron_demo", "convergence_study", "write_trajectory"]

CSV_HEADER = [
    "step",
    "input_spikes",
    "output_spike",
    "weight_shadow_mean",
    "weight_quantized_mean",
    "encoded_error",
]


@dataclass
class DemoResult:
    rows: list[list]
    converged_window: int | None  # first window of the sustained quiet stretch
    windows_run: int
    updates: int


def _demo_configs(cfg: ExperimentConfig) -> tuple[NeuronConfig, SoelConfig]:
    neuron = NeuronConfig(
        alpha_u=cfg.net_alpha_u,
        alpha_v=cfg.net_alpha_v,
        threshold=cfg.demo_threshold,
        reset_mode=cfg.net_reset,
    )
    soel = SoelConfig(
        theta=cfg.demo_theta,
        eta=cfg.demo_eta,
        window=cfg.demo_window,
        offset=cfg.soel_offset,
        target_spikes=cfg.demo_target,
        off_target_spikes=0,
    )
    return neuron, soel


def run_single_neuron_demo(
    cfg: ExperimentConfig, seed: int | None = None, collect_rows: bool = True
) -> DemoResult:
    """Run one seeded trajectory until sustained convergence or the budget."""
    seed = cfg.seed if seed is None else seed
    rng = RandomSource(seed).derive("single-neuron")
    neuron, soel = _demo_configs(cfg)
    n_in = cfg.demo_inputs

    shadow = np.full((1, n_in), float(cfg.demo_init_weight))
    w = WeightMatrix(
        shadow=shadow, quantized=quantize_array(shadow, LOIHI_WEIGHTS, rng.stream("init"))
    )
    state = zero_layer_state(1)
    trace = zero_trace_state(n_in)
    soel_state = SoelState.zeros(1)
    quant_rng = rng.stream("requant")
    input_gen = rng.stream("poisson")

    rows: list[list] = []
    quiet = 0
    converged_at: int | None = None
    max_steps = cfg.demo_max_windows * soel.window

    for t in range(max_steps):
        x = (input_gen.random(n_in) < cfg.demo_rate).astype(np.float64)
        update_presyn_trace(trace, x, neuron)
        _, s = step_cuba_layer(state, x, w.quantized.astype(np.float64), neuron)
        boundary = soel_state.steps_into_window + 1 == soel.window
        learning_epoch_step(
            soel_state, trace, s, 0, False, soel, w, LOIHI_WEIGHTS, quant_rng
        )
        if collect_rows:
            y = int(soel_state.last_encoded_error[0]) if boundary else ""
            rows.append(
                [
                    t,
                    int(x.sum()),
                    int(s[0]),
                    float(w.shadow.mean()),
                    float(w.quantized.mean()),
                    y,
                ]
            )
        if boundary:
            if int(soel_state.last_encoded_error[0]) == 0:
                quiet += 1
                if quiet >= cfg.demo_hold and converged_at is None:
                    converged_at = soel_state.windows_seen - cfg.demo_hold + 1
                    break
            else:
                quiet = 0
    return DemoResult(
        rows=rows,
        converged_window=converged_at,
        windows_run=soel_state.windows_seen,
        updates=soel_state.updates_applied,
    )


def convergence_study(cfg: ExperimentConfig, n_seeds: int = 100) -> tuple[float, list]:
    """Fraction of seeds whose error settles within the window budget."""
    outcomes = []
    for k in range(n_seeds):
        res = run_single_neuron_demo(cfg, seed=cfg.seed + k, collect_rows=False)
        outcomes.append(res.converged_window)
    rate = sum(1 for w in outcomes if w is not None) / n_seeds
    return rate, outcomes


def write_trajectory(path: str, result: DemoResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        writer.writerows(result.rows)
