"""
``deqfuse`` command-line entry point.

Exit codes: 0 success, 1 invalid configuration or shapes, 2 numeric failure
(divergence, aborted training, failed gradient check), 3 file I/O.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deqfuse.baseSolver import SolverTrace
from deqfuse.checkpoint import Checkpoint
from deqfuse.config import (
    OPTIMIZERS,
    SOLVER_METHODS,
    TRACE_TARGETS,
    VARIANT_NAMES,
    EnvSettings,
    FusionConfig,
    RunConfig,
    SolverConfig,
    TrainConfig,
)
from deqfuse.equilibrium import solve
from deqfuse.errors import (
    ConfigurationError,
    DivergenceError,
    NumericError,
    TrainingAbortedError,
)
from deqfuse.implicitGrad import gradcheck, jacobian_reg
from deqfuse.layers import FusionParams, ModalityBundle
from deqfuse.logger import get_logger, setup_logging
from deqfuse.numCore import RngState, randn
from deqfuse.reports import (
    AblationRow,
    SolveBenchRow,
    TraceStatistics,
    ablation_table,
    convergence_summary,
    gradcheck_table,
    solvebench_table,
    write_ablation_csv,
    write_metrics_csv,
    write_solvebench_csv,
    write_trace_csv,
)
from deqfuse.syntheticTask import SyntheticTaskSpec, gen_signproduct
from deqfuse.training import ABLATION_ORDER, AblationVariant, TrainResult, train

logger = get_logger("deqfuse.cli")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

Command = Callable[[RunConfig, EnvSettings], int]


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _fusion_config(cfg: RunConfig) -> FusionConfig:
    assert cfg.n_modalities is not None and cfg.dim is not None
    return FusionConfig(
        width=cfg.dim,
        n_modalities=cfg.n_modalities,
        groups=cfg.groups or 1,
        gate_sigmoid=bool(cfg.gate_sigmoid),
        gate_uses_updated=cfg.gate_uses_updated is not False,
    )


def random_instance(
    cfg: RunConfig, seed: int
) -> Tuple[ModalityBundle, FusionParams, bool]:
    """
    Seeded fusion parameters (or the checkpoint's) and Gaussian inputs.

    The flag returned says whether the gate reads the updated modality states; a
    checkpoint's own setting wins over the flags.
    """
    assert cfg.n_modalities is not None and cfg.dim is not None
    assert cfg.batch is not None
    rng = RngState(seed)
    if cfg.checkpoint:
        checkpoint = Checkpoint.load(cfg.checkpoint)
        params, _ = checkpoint.to_params()
        if params.n_modalities != cfg.n_modalities or params.width != cfg.dim:
            raise ConfigurationError(
                f"Checkpoint is {params.n_modalities} x {params.width}, flags ask for "
                f"{cfg.n_modalities} x {cfg.dim}"
            )
        use_updated = checkpoint.gate_uses_updated
    else:
        fusion = _fusion_config(cfg)
        params = FusionParams.initialize(fusion, rng)
        use_updated = fusion.gate_uses_updated
    features = [randn(rng, cfg.batch, cfg.dim) for _ in range(cfg.n_modalities)]
    x = ModalityBundle(features)
    return x, params, use_updated


def _solver_config(cfg: RunConfig, **overrides: Any) -> SolverConfig:
    base = SolverConfig(
        method=cfg.solver or "anderson",
        memory=cfg.memory or 5,
        beta=cfg.beta if cfg.beta is not None else 1.0,
        ridge=cfg.ridge if cfg.ridge is not None else 1e-4,
        trace_target=cfg.trace_target or "joint",
    )
    return replace(base, **overrides)


def _sibling(path: str, suffix: str) -> str:
    return os.path.splitext(path)[0] + suffix


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_converge(cfg: RunConfig, env: EnvSettings) -> int:
    """Fixed-length convergence trace, averaged over ``runs`` consecutive seeds."""
    assert cfg.steps is not None and cfg.runs is not None and cfg.out is not None
    solver_cfg = _solver_config(cfg, max_steps=cfg.steps, early_stop=False)
    seed = cfg.seed or 0
    traces: List[SolverTrace] = []
    for run in range(cfg.runs):
        x, params, use_updated = random_instance(cfg, seed + run)
        try:
            eq = solve(x, params, solver_cfg, gate_uses_updated=use_updated)
        except DivergenceError as e:
            if e.trace is not None and e.trace.steps_taken:
                partial = TraceStatistics.from_traces([*traces, e.trace])
                write_trace_csv(cfg.out, partial)
            raise
        traces.append(eq.trace)

    stats = TraceStatistics.from_traces(traces)
    write_trace_csv(cfg.out, stats)
    print(f"{solver_cfg.method} solver, {cfg.runs} run(s), relative difference norm:")
    print(convergence_summary(stats))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, env: EnvSettings) -> int:
    assert cfg.seeds is not None and cfg.tol is not None
    assert cfg.unroll_steps is not None
    seed = cfg.seed or 0
    reports = []
    for s in range(seed, seed + cfg.seeds):
        x, params, use_updated = random_instance(cfg, s)
        cotangent = randn(RngState(s).spawn(7), x.batch, x.width)
        report = gradcheck(
            x,
            params,
            cotangent,
            seed=s,
            unroll_steps=cfg.unroll_steps,
            gate_uses_updated=use_updated,
        )
        reports.append(report)

    table = gradcheck_table(reports, cfg.tol)
    print(table)
    if cfg.out:
        with open(cfg.out, "w") as f:
            f.write(table + "\n")
    passed = all(r.passed(cfg.tol) for r in reports)
    print(f"gradcheck {'passed' if passed else 'FAILED'} at tol {cfg.tol:g}")
    return EXIT_OK if passed else EXIT_NUMERIC


def _train_config(cfg: RunConfig, variant: str, seed: int) -> TrainConfig:
    assert cfg.epochs is not None and cfg.batch is not None and cfg.lr is not None
    mask = None
    if cfg.drop_modality is not None:
        mask = tuple(i != cfg.drop_modality for i in range(cfg.n_modalities or 2))
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        lr=cfg.lr,
        optimizer=cfg.optimizer or "adam",
        jac_weight=cfg.gamma or 0.0,
        seed=seed,
        variant=variant,
        fusion_lr=cfg.fusion_lr,
        modality_mask=mask,
        solver=_solver_config(cfg),
    )


def _task(cfg: RunConfig) -> SyntheticTaskSpec:
    assert cfg.dim is not None and cfg.sigma is not None
    assert cfg.n_train is not None and cfg.n_test is not None
    return SyntheticTaskSpec(
        width=cfg.dim,
        sigma=cfg.sigma,
        n_train=cfg.n_train,
        n_test=cfg.n_test,
        n_modalities=cfg.n_modalities or 2,
        labeling=cfg.labeling or "parity",  # type: ignore[arg-type]
    )


def cmd_train(cfg: RunConfig, env: EnvSettings) -> int:
    assert cfg.out is not None
    seed = cfg.seed or 0
    dataset = gen_signproduct(_task(cfg), RngState(seed))
    train_cfg = _train_config(cfg, cfg.variant or "full", seed)
    fusion = _fusion_config(cfg)
    try:
        result = train(dataset, train_cfg, fusion)
    except TrainingAbortedError as e:
        path = _sibling(cfg.out, ".abort.json")
        with open(path, "w") as f:
            json.dump(e.snapshot, f, indent=1)
        logger.error(f"Training aborted; diagnostics written to {path}")
        raise

    write_metrics_csv(cfg.out, result.history)
    checkpoint = Checkpoint.from_params(
        result.params, result.head, seed, gate_uses_updated=fusion.gate_uses_updated
    )
    checkpoint.save(_sibling(cfg.out, ".checkpoint.json"))

    final = result.final
    print(
        f"{result.variant.display_name}: test acc {final.test_acc:.4f}, "
        f"macro-F1 {final.macro_f1:.4f}, weighted-F1 {final.weighted_f1:.4f}"
    )
    if result.unconverged_steps:
        print(f"unconverged steps skipped: {result.unconverged_steps}")
    if result.variant.solves_equilibrium:
        penalty = _final_jacobian(result, dataset.test.x, train_cfg, fusion)
        print(f"jacobian_reg at final params: {penalty:.6e}")
    return EXIT_OK


def _final_jacobian(
    result: TrainResult, x: ModalityBundle, cfg: TrainConfig, fusion: FusionConfig
) -> float:
    rows = np.arange(min(cfg.batch_size, x.batch))
    sample = x.select(rows)
    eq = solve(
        sample,
        result.params,
        cfg.solver,
        result.variant.layout,
        fusion.gate_uses_updated,
    )
    rng = RngState(cfg.seed).spawn(5)
    return jacobian_reg(result.params, sample, eq, rng, probes=16)


def _ablation_job(
    cfg: RunConfig, variant: AblationVariant, seed: int
) -> Optional[TrainResult]:
    dataset = gen_signproduct(_task(cfg), RngState(seed))
    try:
        return train(
            dataset, _train_config(cfg, variant.value, seed), _fusion_config(cfg)
        )
    except NumericError as e:
        logger.warning(f"{variant.display_name} seed {seed} failed: {e}")
        return None


def cmd_ablate(cfg: RunConfig, env: EnvSettings) -> int:
    """Train every ablation variant over the seed set, fanned out over threads."""
    assert cfg.seeds is not None and cfg.out is not None
    seed = cfg.seed or 0
    jobs = [(v, s) for v in ABLATION_ORDER for s in range(seed, seed + cfg.seeds)]
    with ThreadPoolExecutor(max_workers=env.threads) as pool:
        results = list(pool.map(lambda job: _ablation_job(cfg, *job), jobs))

    rows = []
    for variant in ABLATION_ORDER:
        row = AblationRow(variant.display_name, [], [], [])
        for (v, _), result in zip(jobs, results):
            if v is not variant:
                continue
            if result is None:
                row.failed += 1
                continue
            row.accuracy.append(result.final.test_acc)
            row.macro_f1.append(result.final.macro_f1)
            row.weighted_f1.append(result.final.weighted_f1)
        rows.append(row)

    write_ablation_csv(cfg.out, rows)
    print(ablation_table(rows))
    return EXIT_OK


def cmd_solvebench(cfg: RunConfig, env: EnvSettings) -> int:
    """Steps to reach ``target_resid`` for plain iteration and Anderson per seed."""
    assert cfg.seeds is not None and cfg.out is not None
    assert cfg.target_resid is not None and cfg.max_steps is not None
    limit = cfg.max_steps
    seed = cfg.seed or 0
    rows = []
    naive_traces, anderson_traces = [], []
    for s in range(seed, seed + cfg.seeds):
        x, params, use_updated = random_instance(cfg, s)
        steps: Dict[str, Optional[int]] = {}
        for method in SOLVER_METHODS:
            solver_cfg = _solver_config(
                cfg,
                method=method,
                tol=cfg.target_resid,
                max_steps=limit,
                early_stop=True,
            )
            try:
                trace = solve(
                    x, params, solver_cfg, gate_uses_updated=use_updated
                ).trace
            except DivergenceError as e:
                logger.warning(f"seed {s} {method} diverged: {e}")
                trace = e.trace or SolverTrace(method=method)
            steps[method] = trace.first_step_below(cfg.target_resid)
            (naive_traces if method == "naive" else anderson_traces).append(trace)
        rows.append(SolveBenchRow(s, steps["naive"], steps["anderson"]))

    write_solvebench_csv(cfg.out, rows, limit)
    print(solvebench_table(rows, limit))
    groups = (("weight-tied (naive)", naive_traces), ("anderson", anderson_traces))
    for label, traces in groups:
        usable = [t for t in traces if t.steps_taken]
        if usable:
            print(f"{label}, mean relative difference norm:")
            print(convergence_summary(TraceStatistics.from_traces(usable)))
    return EXIT_OK


COMMANDS: Dict[str, Command] = {
    "converge": cmd_converge,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "solvebench": cmd_solvebench,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with parameters; flags win over it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output file")
    parser.add_argument("--log-level", dest="log_level")
    parser.add_argument("--log-file", dest="log_file")


def _gate(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--gate-sigmoid", dest="gate_sigmoid", action="store_const", const=True
    )
    parser.add_argument(
        "--gate-from-previous",
        dest="gate_uses_updated",
        action="store_const",
        const=False,
        help="gate on the previous sweep's modality states",
    )


def _instance(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-modalities", dest="n_modalities", type=int)
    parser.add_argument("--dim", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--groups", type=int)
    _gate(parser)
    parser.add_argument("--checkpoint", help="load fusion parameters from a checkpoint")


def _solver(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--solver", choices=SOLVER_METHODS)
    parser.add_argument("--memory", type=int)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--ridge", type=float)


def _training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-modalities", dest="n_modalities", type=int)
    parser.add_argument("--dim", type=int)
    parser.add_argument("--groups", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--fusion-lr", dest="fusion_lr", type=float)
    parser.add_argument("--gamma", type=float, help="Jacobian regularisation weight")
    parser.add_argument("--optimizer", choices=OPTIMIZERS)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--n-train", dest="n_train", type=int)
    parser.add_argument("--n-test", dest="n_test", type=int)
    parser.add_argument("--labeling", choices=("parity", "quadrant"))
    parser.add_argument("--drop-modality", dest="drop_modality", type=int)
    _gate(parser)
    _solver(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deqfuse", description="Deep equilibrium multimodal fusion tools"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    converge = sub.add_parser("converge", help="trace convergence to the equilibrium")
    _common(converge)
    _instance(converge)
    _solver(converge)
    converge.add_argument("--steps", type=int)
    converge.add_argument("--runs", type=int)
    converge.add_argument("--trace-target", dest="trace_target", choices=TRACE_TARGETS)

    check = sub.add_parser("gradcheck", help="compare implicit gradients with oracles")
    _common(check)
    _instance(check)
    check.add_argument("--seeds", type=int)
    check.add_argument("--tol", type=float)
    check.add_argument("--unroll-steps", dest="unroll_steps", type=int)

    trainer = sub.add_parser("train", help="train on the synthetic sign-product task")
    _common(trainer)
    _training(trainer)
    trainer.add_argument("--variant", choices=VARIANT_NAMES)

    ablate = sub.add_parser("ablate", help="train every ablation variant over seeds")
    _common(ablate)
    _training(ablate)
    ablate.add_argument("--seeds", type=int)

    bench = sub.add_parser("solvebench", help="steps to target: naive vs Anderson")
    _common(bench)
    _instance(bench)
    bench.add_argument("--memory", type=int)
    bench.add_argument("--beta", type=float)
    bench.add_argument("--ridge", type=float)
    bench.add_argument("--seeds", type=int)
    bench.add_argument("--target-resid", dest="target_resid", type=float)
    bench.add_argument("--max-steps", dest="max_steps", type=int)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Command defaults, overridden by the config file, overridden by flags."""
    file_cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    flag_values = {
        f.name: getattr(args, f.name)
        for f in fields(RunConfig)
        if hasattr(args, f.name)
    }
    return file_cfg.overridden_by(RunConfig(**flag_values)).resolve(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        env = EnvSettings.from_env()
        setup_logging(args.log_level or env.log_level, args.log_file)
        cfg = resolve_config(args)
        logger.debug(f"Resolved {args.command} config: {cfg.to_dict()}")
        return COMMANDS[args.command](cfg, env)
    except NumericError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_NUMERIC
    except ValueError as e:
        # ConfigurationError and ShapeError are ValueErrors
        logger.error(f"{args.command}: invalid input: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"{args.command}: I/O error: {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
