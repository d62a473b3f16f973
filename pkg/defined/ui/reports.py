from typing import Any, Dict, List

from defined.config.run_configs import ModelConfig
from defined.data.models import EvalCurve, TracePoint


def format_model_description(config: ModelConfig, parameter_count: int, phase: str, meta: Dict[str, Any]) -> str:
    """Format the `describe` output for a checkpoint.

    Args:
        config: Model shape stored in the checkpoint.
        parameter_count: Exact number of learnable scalars.
        phase: Training phase the checkpoint was written in.
        meta: Free-form checkpoint metadata.
    """
    lines = [
        f"scheme: {config.scheme.value}",
        f"antennas: {config.n_t}x{config.n_r} (N_t x N_r)",
        f"phase: {phase}",
        f"d_e: {config.d_e}",
        f"layers: {config.n_layers}",
        f"heads: {config.n_heads}",
        f"d_ff: {config.d_ff}",
        f"T_max: {config.T_max}",
        f"D_s: {config.D_s}",
        f"classes: {config.n_classes}",
        f"parameters: {parameter_count}",
    ]
    lines.extend(f"{key}: {value}" for key, value in sorted(meta.items()))
    return "\n".join(lines)


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4g}"


def format_curve_summary(curve: EvalCurve) -> str:
    """One-paragraph summary of an evaluation curve."""
    first, last = curve.points[0], curve.points[-1]
    text = (
        f"{curve.method} {curve.modulation} @ {curve.snr_db:g} dB, k={curve.k}: "
        f"SER {first.ser:.4g} (length {first.length}) -> {last.ser:.4g} (length {last.length})"
    )
    extras = [f"gain_df {_fmt(curve.gain_df)}%"]
    if curve.reference_ser is not None:
        extras.append(f"pilot-only reference {_fmt(curve.reference_ser)}")
    extras.append(f"neighbour errors {_fmt(curve.neighbor_error_fraction)}")
    return text + "; " + ", ".join(extras)


def format_training_summary(trace: List[TracePoint], switch_step) -> str:
    """Loss at the start, at the phase switch and at the end of a run."""
    if not trace:
        return "no training steps recorded"
    parts = [f"steps: {len(trace)}", f"first loss: {trace[0].loss:.4f}"]
    if switch_step is not None and 0 < switch_step < len(trace):
        parts.append(f"switch at step {switch_step}: {trace[switch_step - 1].loss:.4f} -> {trace[switch_step].loss:.4f}")
    parts.append(f"final loss: {trace[-1].loss:.4f}")
    return ", ".join(parts)
