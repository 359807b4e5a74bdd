"""Error-triggered synaptic plasticity (SOEL) and its on-core emulation.

The rule compares each output neuron's spike count over a fixed window of
T steps against a target.  The error passes only when its magnitude reaches
the threshold theta; gated errors are offset-encoded into a nonnegative
post-trace value (0 is reserved as the "no learning" sentinel) and the
weight change for synapse (i, j) is

    dw_ij = eta * p_j(T) * (y_i(T) - c)

with p the second-order presynaptic trace and c the offset.  Deltas
accumulate on shadow weights; the integer view of updated rows is refreshed
by stochastic rounding.  A generic sum-of-products engine evaluates rules of
the form dw = sum_k C_k * prod_l V_kl, which must reproduce the direct
implementation bit-exactly when configured for this rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import TraceState
from .quantize import QuantizationScheme, WeightMatrix

__all__ = [
    "SoelConfig",
    "SoelState",
    "FactorRef",
    "SumOfProductsRule",
    "compute_window_error",
    "gate_errors",
    "encode_posttrace",
    "encode_errors",
    "soel_update",
    "eval_sum_of_products",
    "soel_rule",
    "soel_update_via_engine",
    "parse_rule",
    "format_rule",
    "learning_epoch_step",
]


@dataclass(frozen=True)
class SoelConfig:
    """Plasticity hyperparameters for one plastic layer.

    `target_spikes` is the per-window target for the labeled neuron,
    `off_target_spikes` for all others.  `offset` must exceed the largest
    possible error magnitude so encoded values stay strictly positive.
    """

    theta: float = 1.0
    eta: float = 1.0
    window: int = 20
    offset: int = 64
    target_spikes: int = 2
    off_target_spikes: int = 0

    def __post_init__(self) -> None:
        if self.theta < 0:
            raise ValueError("theta must be nonnegative")
        if not (1 <= self.window <= 63):
            raise ValueError("window must lie in {1, ..., 63}")
        if self.offset <= 0:
            raise ValueError("offset must be positive")
        max_err = max(self.target_spikes, self.off_target_spikes, self.window)
        if self.offset <= max_err:
            raise ValueError(
                f"offset {self.offset} too small: errors can reach +-{max_err}"
            )


@dataclass
class SoelState:
    """Running counters for one simulation's plastic layer."""

    spike_counter: np.ndarray  # per output neuron, current window
    steps_into_window: int = 0
    last_encoded_error: np.ndarray | None = None  # y per neuron, 0 = no learning
    updates_applied: int = 0  # neuron-rows written, cumulative
    windows_seen: int = 0

    @classmethod
    def zeros(cls, n_out: int) -> "SoelState":
        return cls(
            spike_counter=np.zeros(n_out, dtype=np.int64),
            last_encoded_error=np.zeros(n_out, dtype=np.int64),
        )


def compute_window_error(target: int, count: int, theta: float) -> float:
    """Windowed spike-count error, zeroed below the trigger threshold."""
    if count < 0:
        raise ValueError("spike count cannot be negative")
    e = float(target - count)
    return e if abs(e) >= theta else 0.0


def gate_errors(targets: np.ndarray, counts: np.ndarray, theta: float) -> np.ndarray:
    """Vectorized `compute_window_error` over all output neurons."""
    e = np.asarray(targets, dtype=np.float64) - np.asarray(counts, dtype=np.float64)
    return np.where(np.abs(e) >= theta, e, 0.0)


def encode_posttrace(e_gated: float, offset: int) -> int:
    """Offset-encode a gated error into the nonnegative post-trace value.

    0 is the sentinel for "no learning"; nonzero errors map to
    round(offset + e), which must stay >= 1.  Decoding is value - offset.
    """
    if e_gated == 0.0:
        return 0
    encoded = round(offset + e_gated)
    if encoded < 1:
        raise ValueError(
            f"offset {offset} cannot represent error {e_gated}: encoding must stay positive"
        )
    return int(encoded)


def encode_errors(e_gated: np.ndarray, offset: int) -> np.ndarray:
    """Vectorized `encode_posttrace`."""
    e_gated = np.asarray(e_gated, dtype=np.float64)
    encoded = np.rint(offset + e_gated).astype(np.int64)
    if np.any((e_gated != 0.0) & (encoded < 1)):
        raise ValueError(f"offset {offset} too small for errors {e_gated}")
    return np.where(e_gated == 0.0, 0, encoded)


def soel_update(p: np.ndarray, y_encoded: int, cfg: SoelConfig) -> np.ndarray:
    """Weight delta row for one output neuron given its encoded error."""
    p = np.asarray(p, dtype=np.float64)
    if y_encoded == 0:
        return np.zeros_like(p)
    return cfg.eta * (p * float(y_encoded - cfg.offset))


@dataclass(frozen=True)
class FactorRef:
    """One factor of a product term: a named variable plus an additive constant.

    `source` is one of pre_trace, post_trace, pre_spike, post_spike, const.
    For const factors the addend itself is the value.
    """

    source: str
    addend: float = 0.0

    VALID = ("pre_trace", "post_trace", "pre_spike", "post_spike", "const")

    def __post_init__(self) -> None:
        if self.source not in self.VALID:
            raise ValueError(f"unknown factor source {self.source!r}")


@dataclass(frozen=True)
class SumOfProductsRule:
    """Programmable plasticity rule: dw = sum_k scale_k * prod_l factor_kl."""

    terms: tuple[tuple[float, tuple[FactorRef, ...]], ...]


def eval_sum_of_products(rule: SumOfProductsRule, ctx: dict[str, np.ndarray | float]):
    """Evaluate a rule against variable bindings.

    Factors multiply left to right and the scale is applied last, so a rule
    configured as eta * pre_trace * (post_trace - c) reproduces
    `soel_update` bit-exactly.  Raises KeyError for unbound variables.
    """
    total: np.ndarray | float = 0.0
    for scale, factors in rule.terms:
        prod: np.ndarray | float | None = None
        for ref in factors:
            if ref.source == "const":
                val = ref.addend
            else:
                if ref.source not in ctx:
                    raise KeyError(f"unbound rule variable {ref.source!r}")
                val = ctx[ref.source]
                if ref.addend != 0.0:
                    val = val + ref.addend
            prod = val if prod is None else prod * val
        if prod is None:
            continue
        total = total + scale * prod
    return total


def soel_rule(eta: float, offset: int) -> SumOfProductsRule:
    """The error-triggered rule expressed in sum-of-products form."""
    return SumOfProductsRule(
        terms=(
            (eta, (FactorRef("pre_trace"), FactorRef("post_trace", addend=-float(offset)))),
        )
    )


def soel_update_via_engine(p: np.ndarray, y_encoded: int, cfg: SoelConfig) -> np.ndarray:
    """Scheduler-gated rule-engine path; must match `soel_update` bit-exactly."""
    p = np.asarray(p, dtype=np.float64)
    if y_encoded == 0:
        return np.zeros_like(p)
    rule = soel_rule(cfg.eta, cfg.offset)
    return eval_sum_of_products(rule, {"pre_trace": p, "post_trace": float(y_encoded)})


def parse_rule(text: str) -> SumOfProductsRule:
    """Parse a plain-text rule: one `scale * factor * ...` term per line.

    Factors are variable names, optionally with an additive constant in
    parentheses, or bare numbers.  Example:

        2.0 * pre_trace * (post_trace - 64)
        1.0 * pre_spike * post_spike
    """
    terms = []
    for raw_line in text.splitlines():
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split("*")]
        if len(parts) < 1:
            raise ValueError(f"empty rule term: {raw_line!r}")
        try:
            scale = float(parts[0])
        except ValueError:
            raise ValueError(f"rule term must start with a numeric scale: {raw_line!r}")
        factors = []
        for tok in parts[1:]:
            factors.append(_parse_factor(tok, raw_line))
        terms.append((scale, tuple(factors)))
    return SumOfProductsRule(terms=tuple(terms))


def _parse_factor(tok: str, context: str) -> FactorRef:
    tok = tok.strip()
    if tok.startswith("(") and tok.endswith(")"):
        tok = tok[1:-1].strip()
    try:
        return FactorRef("const", addend=float(tok))
    except ValueError:
        pass
    for sep, sign in (("+", 1.0), ("-", -1.0)):
        if sep in tok:
            name, _, num = tok.partition(sep)
            name = name.strip()
            if name in FactorRef.VALID:
                return FactorRef(name, addend=sign * float(num.strip()))
    if tok not in FactorRef.VALID:
        raise ValueError(f"unknown factor {tok!r} in rule term {context!r}")
    return FactorRef(tok)


def format_rule(rule: SumOfProductsRule) -> str:
    """Inverse of `parse_rule` (canonical formatting)."""
    lines = []
    for scale, factors in rule.terms:
        parts = [repr(scale)]
        for ref in factors:
            if ref.source == "const":
                parts.append(repr(ref.addend))
            elif ref.addend == 0.0:
                parts.append(ref.source)
            else:
                sign = "+" if ref.addend >= 0 else "-"
                parts.append(f"({ref.source} {sign} {abs(ref.addend)!r})")
        lines.append(" * ".join(parts))
    return "\n".join(lines)


def learning_epoch_step(
    state: SoelState,
    traces: TraceState,
    out_spikes: np.ndarray,
    label: int | None,
    blank: bool,
    cfg: SoelConfig,
    w: WeightMatrix,
    scheme: QuantizationScheme,
    rng: np.random.Generator,
    scale: float = 1.0,
    journal: list | None = None,
    use_engine: bool = False,
) -> tuple[SoelState, WeightMatrix]:
    """One simulation step of the on-core learning-epoch program.

    Accumulates output spikes every step.  At window boundaries: blank time
    writes 0 to all post-traces and skips learning; absent labels mean
    inference only; otherwise per-neuron errors are gated, encoded, and the
    plastic rows with nonzero encodings are updated (labeled neuron target =
    target_spikes, all others = off_target_spikes).  Deltas are scaled by
    `scale` (the inner-loop rate), added to shadow weights, and updated rows
    are re-quantized.  Counters reset at every boundary.
    """
    n_out = w.shape[0]
    if label is not None and not (0 <= label < n_out):
        raise IndexError(f"label {label} out of range for {n_out} outputs")
    state.spike_counter += np.asarray(out_spikes).astype(np.int64).reshape(n_out)
    state.steps_into_window += 1
    if state.steps_into_window < cfg.window:
        return state, w

    state.windows_seen += 1
    window_index = state.windows_seen
    if blank or label is None:
        state.last_encoded_error = np.zeros(n_out, dtype=np.int64)
    else:
        targets = np.full(n_out, cfg.off_target_spikes, dtype=np.int64)
        targets[label] = cfg.target_spikes
        e = gate_errors(targets, state.spike_counter, cfg.theta)
        y = encode_errors(e, cfg.offset)
        state.last_encoded_error = y
        rows = np.flatnonzero(y != 0)
        if rows.size:
            update_fn = soel_update_via_engine if use_engine else soel_update
            for i in rows:
                delta = update_fn(traces.p.reshape(-1), int(y[i]), cfg)
                w.shadow[i] += scale * delta
            w.requantize_rows(rows, scheme, rng)
            state.updates_applied += int(rows.size)
            if journal is not None:
                journal.append(
                    {
                        "window": window_index,
                        "rows": rows.copy(),
                        "y": y[rows].copy(),
                    }
                )
    state.spike_counter = np.zeros(n_out, dtype=np.int64)
    state.steps_into_window = 0
    return state, w
