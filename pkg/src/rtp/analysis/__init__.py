"""Memory formulas, cost model, timeline simulator, ledger runs and verification."""
from .cost import CostModel, eq1_compute_time, eq2_comm_time, ring_allgather_time, serial_compute_time
from .instrumented import (
    LedgerReport,
    activation_bytes,
    batch_sweep,
    boundary_activation_bytes,
    collinear,
    ledger_instrumented_run,
    model_bytes,
)
from .memory import TABLE1_STRATEGIES, table1_memory, table1_rows
from .timeline import SCHEDULES, Timeline, UnitCost, simulate_timeline, uniform_units, unit_costs
from .verify import compare_to_serial, gradcheck, rel_error

__all__ = [
    "CostModel",
    "LedgerReport",
    "SCHEDULES",
    "TABLE1_STRATEGIES",
    "Timeline",
    "UnitCost",
    "activation_bytes",
    "batch_sweep",
    "boundary_activation_bytes",
    "collinear",
    "compare_to_serial",
    "eq1_compute_time",
    "eq2_comm_time",
    "gradcheck",
    "ledger_instrumented_run",
    "model_bytes",
    "rel_error",
    "ring_allgather_time",
    "serial_compute_time",
    "simulate_timeline",
    "table1_memory",
    "table1_rows",
    "uniform_units",
    "unit_costs",
]
