"""Multi-precision decoding toolkit: nested weight quantization, precision
schedules, Rouge-L fidelity and an analytical latency model."""

import json as _json

from . import _core
from ._core import (
    ConfigError,
    ContractViolation,
    Error,
    InputError,
    OverflowError,
    ParseError,
    QuantizedTensor,
    TrainingDiverged,
    count_schedules,
    lcs_length,
    quantize,
    rouge_l,
    run_cli,
    switch_grid,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "Error",
    "InputError",
    "OverflowError",
    "ParseError",
    "QuantizedTensor",
    "TrainingDiverged",
    "avg_bitwidth",
    "count_schedules",
    "lcs_length",
    "perf_report",
    "precision_at",
    "quantize",
    "rouge_l",
    "run_cli",
    "schedule_violations",
    "switch_grid",
    "two_level",
]


def two_level(high, low, switch_point, horizon, prefill=None):
    """Schedule dict: `high` for the first `switch_point` decode steps, then `low`."""
    return {
        "precisions": [high, low],
        "switch_points": [0, switch_point],
        "horizon": horizon,
        "prefill": high if prefill is None else prefill,
        "feasible": True,
    }


def _dump(schedule):
    return schedule if isinstance(schedule, str) else _json.dumps(schedule)


def precision_at(schedule, step):
    return _core.precision_at(_dump(schedule), step)


def avg_bitwidth(schedule, tokens_generated=None):
    if tokens_generated is None:
        tokens_generated = (_json.loads(schedule) if isinstance(schedule, str) else schedule)["horizon"]
    return _core.avg_bitwidth(_dump(schedule), tokens_generated)


def schedule_violations(schedule):
    return _core.schedule_violations(_dump(schedule))


def perf_report(model, hardware, schedule, prompt_len, gen_len):
    hw = hardware if isinstance(hardware, str) else _json.dumps(hardware)
    return _json.loads(_core.perf_report(model, hw, _dump(schedule), prompt_len, gen_len))
