"""Fixed-point solving of the stack's rate equations and convergence traces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 500
    tol: float = 1e-6
    damping: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class EquilibriumSolution:
    asr_star: list
    residual_history: list
    iters_used: int
    converged: bool
    sublayer_asr: dict = field(default_factory=dict)


class ConvergenceError(RuntimeError):
    def __init__(self, residual_history):
        self.residual_history = residual_history
        super().__init__(
            f"fixed-point iteration did not converge; last residual "
            f"{residual_history[-1]:.3e} after {len(residual_history)} iterations")


def solve_fixed_point_map(step_fn, state, cfg: SolverConfig):
    """Damped iteration of a generic state-update map.

    `step_fn(state, damping)` returns (new_state, residual) where residual
    is the sup-norm of the undamped update; iteration stops when it drops
    to cfg.tol.
    """
    history = []
    for it in range(1, cfg.max_iters + 1):
        state, residual = step_fn(state, cfg.damping)
        history.append(residual)
        if residual <= cfg.tol:
            return state, history, it, True
    raise ConvergenceError(history)


def solve_fixed_point(stack, tokens, cfg: SolverConfig) -> EquilibriumSolution:
    """Solve the stack's steady-state rate equations by damped Gauss-Seidel.

    Raises ConvergenceError (with the residual history attached) when the
    iteration budget is exhausted.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    state = stack.initial_state(len(tokens))

    def step(s, damping):
        return stack.sweep(tokens, s, damping=damping)

    state, history, iters, ok = solve_fixed_point_map(step, state, cfg)
    record = {}
    stack.sweep(tokens, state, damping=1.0, record=record)
    sol = EquilibriumSolution(asr_star=state, residual_history=history,
                              iters_used=iters, converged=ok,
                              sublayer_asr=record)
    return sol


def convergence_trace(stack, tokens, T: int, solver_cfg: SolverConfig | None = None):
    """Temporal simulation trace: (step, layer, mean rate, |mean - target|) rows.

    Targets are the per-layer mean equilibrium rates, so the residual column
    tracks how far each sub-layer still is from its fixed point.
    """
    solver_cfg = solver_cfg or SolverConfig(tol=1e-8)
    sol = solve_fixed_point(stack, tokens, solver_cfg)
    targets = {name: float(np.mean(v)) for name, v in sol.sublayer_asr.items()}
    rows = []
    stack.temporal_simulate(tokens, T, trace=rows, trace_targets=targets)
    return rows, sol


def write_trace_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,layer_name,mean_asr,residual\n")
        for step, layer, mean_asr, resid in rows:
            fh.write(f"{step},{layer},{mean_asr:.12g},{resid:.12g}\n")
