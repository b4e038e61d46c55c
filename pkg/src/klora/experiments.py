"""Desk-scale experiment drivers behind the CLI.

Each driver returns an ExperimentReport whose aggregates are recomputable
from the per-seed entries; runs are deterministic per seed, and seeds can
execute concurrently because nothing is shared.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .allocation import BudgetSchedule, budget_at, parse_schedule_kind
from .config import ConfigError, RunConfig, apply_defaults, dataset_from, trainer_config_from
from .kernels import (
    KernelKind,
    KernelSpec,
    LowRankPair,
    mean_abs_factor_gradient,
    merge,
    numerical_rank,
    parse_kernel_kind,
)
from .model import Adam, RunTrace, fine_tune
from .reports import ExperimentReport, StopWatch, write_csv
from .tensor import Tensor, backward, reduce_mean, square, sub

DEFAULT_KERNELS = ("mix-k", "p-linear", "linear")


def make_fit_target(rng: np.random.Generator, m: int, n: int, rank: int,
                    density: float) -> np.ndarray:
    """Random fit target of the given rank, optionally sparsified by a mask."""
    if rank >= min(m, n):
        target = rng.normal(size=(m, n))
    else:
        target = rng.normal(size=(m, rank)) @ rng.normal(size=(rank, n)) / math.sqrt(rank)
    if density < 1.0:
        target = target * (rng.random((m, n)) < density)
    return target


def _fresh_pair(kind: KernelKind, rng: np.random.Generator, m: int, n: int, r: int,
                factor_std: float, scale: float | None = None) -> LowRankPair:
    """Fit-experiment factor init.

    Both factors start Gaussian; the linear kernel starts with B at zero
    (the classic zero-update init, and its only route to a zero merge since
    it has no coefficients). Every kernel's merge is therefore zero before
    the first step. `scale` switches to uniform [-scale, scale] draws for
    the gradient-evolution probes.
    """
    if scale is not None:
        a = rng.uniform(-scale, scale, size=(n, r))
        b = rng.uniform(-scale, scale, size=(m, r))
    else:
        a = factor_std * rng.normal(size=(n, r))
        b = factor_std * rng.normal(size=(m, r))
        if kind is KernelKind.LINEAR:
            b = np.zeros((m, r))
    return LowRankPair(A=Tensor(a, requires_grad=True), B=Tensor(b, requires_grad=True))


def _fit_once(kind: KernelKind, target: np.ndarray, r: int, steps: int, lr: float,
              pieces: int, factor_std: float, seed: int, record_points: int = 40,
              init_scale: float | None = None, canonical_coeffs: bool = False,
              piece_init_eps: float = 0.0):
    """One fitting run; divergence is recorded, not fatal.

    `piece_init_eps` > 0 starts the piece coefficients antisymmetric
    (+eps, -eps, ...), which keeps the merged values mean-centered and
    closes the offset-drift corridor (piece scales all one sign with the
    additive offset racing the other way) that can trap the mixed kernel
    at this step budget.
    """
    m, n = target.shape
    rng = np.random.default_rng([seed, 0xF1])
    pair = _fresh_pair(kind, rng, m, n, r, factor_std, scale=init_scale)
    if canonical_coeffs:
        spec = KernelSpec.canonical(kind, pieces=pieces, trainable=True)
    else:
        spec = KernelSpec.zero_init(kind, pieces=pieces)
        if piece_init_eps and spec.alpha_p is not None:
            signs = np.where(np.arange(spec.alpha_p.data.size) % 2 == 0, 1.0, -1.0)
            spec.alpha_p.data[:] = piece_init_eps * signs
    params = [pair.A, pair.B, *spec.coefficients()]
    opt = Adam(params, lr=lr)
    target_t = Tensor(target)
    record_every = max(1, steps // record_points) if steps else 1
    trace = []
    grad_trace = []
    diverged = False
    for step in range(steps):
        opt.zero_grad()
        loss = reduce_mean(square(sub(merge(spec, pair), target_t)))
        value = float(loss.data)
        if not math.isfinite(value):
            diverged = True
            break
        backward(loss)
        if step % record_every == 0:
            trace.append([step, value])
            ga = pair.A.grad
            gb = pair.B.grad
            mag = 0.0
            count = 0
            for g in (ga, gb):
                if g is not None:
                    mag += float(np.abs(g).sum())
                    count += g.size
            grad_trace.append([step, mag / max(count, 1)])
        opt.step()
    final = float(reduce_mean(square(sub(merge(spec, pair), target_t))).data)
    if not math.isfinite(final):
        diverged = True
    return {"final_mse": final, "diverged": diverged, "trace": trace,
            "grad_trace": grad_trace}


def fit_matrix_experiment(m: int = 32, n: int = 32, r: int = 4, target_rank: int | None = None,
                          kernels=DEFAULT_KERNELS, steps: int = 20000, lr: float = 1e-3,
                          seeds: int = 5, density: float = 0.1, pieces: int = 2,
                          factor_std: float = 1.0, piece_init_eps: float = 0.0,
                          seed_base: int = 0) -> ExperimentReport:
    """Fit random targets by gradient descent on the merged matrix.

    Per kernel and seed, minimizes the mean squared entrywise error between
    the merge and a fixed random target of the given rank and density,
    reporting the final error. Targets and factor draws are shared across
    kernels within a seed so comparisons are paired.
    """
    watch = StopWatch()
    if target_rank is None:
        target_rank = min(m, n)
    if target_rank > min(m, n):
        raise ValueError(f"target rank {target_rank} exceeds min(m, n)")
    kinds = [parse_kernel_kind(k) for k in kernels]
    seed_list = list(range(seed_base, seed_base + seeds))
    per_seed = []
    for seed in seed_list:
        target = make_fit_target(np.random.default_rng([seed, 0x7A]), m, n, target_rank, density)
        entry = {
            "seed": seed,
            "target_rank": int(numerical_rank(target, 1e-9)),
            "baseline_mse": float(np.mean(target * target)),
            "kernels": {},
        }
        for kind in kinds:
            entry["kernels"][kind.value] = _fit_once(
                kind, target, r, steps, lr, pieces, factor_std, seed,
                piece_init_eps=piece_init_eps,
            )
        per_seed.append(entry)
    aggregates = {
        "mean_final_mse": {
            kind.value: float(np.mean([s["kernels"][kind.value]["final_mse"] for s in per_seed]))
            for kind in kinds
        },
        "diverged_runs": int(
            sum(s["kernels"][k.value]["diverged"] for s in per_seed for k in kinds)
        ),
    }
    config = {"m": m, "n": n, "r": r, "target_rank": target_rank, "steps": steps,
              "lr": lr, "density": density, "pieces": pieces, "factor_std": factor_std,
              "piece_init_eps": piece_init_eps, "kernels": [k.value for k in kinds]}
    return ExperimentReport(name="fit-matrix", config=config, seeds=seed_list,
                            per_seed=per_seed, aggregates=aggregates,
                            duration_s=watch.elapsed())


def ordering_fraction(report: ExperimentReport, ordering) -> float:
    """Fraction of seeds where final MSEs strictly follow the given kernel order."""
    kinds = [parse_kernel_kind(k).value for k in ordering]
    wins = 0
    for entry in report.per_seed:
        values = [entry["kernels"][k]["final_mse"] for k in kinds]
        if all(a < b for a, b in zip(values, values[1:])):
            wins += 1
    return wins / max(len(report.per_seed), 1)


def grad_evolution_experiment(kernels=("mix-k", "rbf", "linear"), scale: float = 10.0,
                              steps: int = 300, m: int = 16, n: int = 16, r: int = 4,
                              seeds: int = 3, lr: float = 1e-3,
                              pieces: int = 2, seed_base: int = 0) -> ExperimentReport:
    """Record gradient-magnitude traces of the fitting loss per kernel.

    Factors start uniform in [-scale, scale] with canonical coefficients, the
    regime where a bare RBF merge loses its gradient signal. The report also
    carries the static sum-of-entries magnitude per kernel at that scale,
    and the RBF/mixed ratio when both kinds are present.
    """
    watch = StopWatch()
    if scale <= 0:
        raise ValueError("factor scale must be positive")
    kinds = [parse_kernel_kind(k) for k in kernels]
    seed_list = list(range(seed_base, seed_base + seeds))
    per_seed = []
    for seed in seed_list:
        target = make_fit_target(np.random.default_rng([seed, 0x7B]), m, n, min(m, n), 1.0)
        entry = {"seed": seed, "kernels": {}}
        for kind in kinds:
            run = _fit_once(kind, target, r, steps, lr, pieces, factor_std=1.0,
                            seed=seed, init_scale=scale, canonical_coeffs=True)
            rng = np.random.default_rng([seed, 0xC3])
            probe = LowRankPair(
                A=Tensor(rng.uniform(-scale, scale, size=(n, r)), requires_grad=True),
                B=Tensor(rng.uniform(-scale, scale, size=(m, r)), requires_grad=True),
            )
            static = mean_abs_factor_gradient(KernelSpec.canonical(kind, pieces=pieces), probe)
            run["static_mean_abs_gradient"] = static
            entry["kernels"][kind.value] = run
        per_seed.append(entry)
    aggregates = {
        "static_mean_abs_gradient": {
            kind.value: float(
                np.mean([s["kernels"][kind.value]["static_mean_abs_gradient"] for s in per_seed])
            )
            for kind in kinds
        }
    }
    static = aggregates["static_mean_abs_gradient"]
    if "rbf" in static and "mix-k" in static and static["mix-k"] > 0:
        aggregates["rbf_mixk_ratio"] = static["rbf"] / static["mix-k"]
    config = {"kernels": [k.value for k in kinds], "scale": scale, "steps": steps,
              "m": m, "n": n, "r": r, "lr": lr, "pieces": pieces}
    return ExperimentReport(name="grad-evolution", config=config, seeds=seed_list,
                            per_seed=per_seed, aggregates=aggregates,
                            duration_s=watch.elapsed())


def rank_sweep(m: int = 64, n: int = 64, r_values=(2, 4, 8), kernels=DEFAULT_KERNELS,
               seeds: int = 10, eps_rel: float = 1e-6, pieces: int = 2,
               seed_base: int = 0) -> ExperimentReport:
    """Numerical ranks of merges of random factor pairs per (kernel, r)."""
    watch = StopWatch()
    kinds = [parse_kernel_kind(k) for k in kernels]
    seed_list = list(range(seed_base, seed_base + seeds))
    per_seed = []
    for seed in seed_list:
        rng = np.random.default_rng([seed, 0xA4])
        entry = {"seed": seed, "ranks": {}}
        for r in r_values:
            pair = LowRankPair(
                A=Tensor(rng.normal(size=(n, r))), B=Tensor(rng.normal(size=(m, r)))
            )
            for kind in kinds:
                spec = KernelSpec.canonical(kind, pieces=min(pieces, r))
                rank = numerical_rank(merge(spec, pair).data, eps_rel)
                entry["ranks"][f"{kind.value}@r={r}"] = rank
        per_seed.append(entry)
    keys = per_seed[0]["ranks"].keys() if per_seed else []
    aggregates = {
        key: {
            "min": int(min(s["ranks"][key] for s in per_seed)),
            "max": int(max(s["ranks"][key] for s in per_seed)),
            "mean": float(np.mean([s["ranks"][key] for s in per_seed])),
        }
        for key in keys
    }
    config = {"m": m, "n": n, "r_values": list(r_values), "eps_rel": eps_rel,
              "kernels": [k.value for k in kinds], "pieces": pieces}
    return ExperimentReport(name="rank-sweep", config=config, seeds=seed_list,
                            per_seed=per_seed, aggregates=aggregates,
                            duration_s=watch.elapsed())


def rank_table(report: ExperimentReport):
    header = ["seed"] + sorted(report.per_seed[0]["ranks"]) if report.per_seed else ["seed"]
    rows = [
        [entry["seed"]] + [entry["ranks"][k] for k in header[1:]] for entry in report.per_seed
    ]
    return header, rows


def alloc_trace_table(trace: RunTrace):
    """Per-layer, per-epoch sparsity ratios (1 - budget / capacity) as a table."""
    if not trace.layer_caps:
        raise ValueError("trace has no layers")
    n_layers = len(trace.layer_caps)
    header = ["epoch"] + [f"layer_{i}" for i in range(n_layers)]
    rows = [[0] + [0.0] * n_layers]  # warm start: nothing sparsified yet
    for record in trace.epochs:
        rows.append([record.epoch + 1] + [float(x) for x in record.ratios])
    return header, rows


def schedule_table(b0: int = 1000, bT: int = 0, T: int = 10,
                   kinds=("constant", "linear", "quadratic", "cubic"),
                   points: int | None = None):
    """(t, budget) samples per schedule kind."""
    parsed = [parse_schedule_kind(k) for k in kinds]
    if points is None:
        steps = list(range(T + 1))
    else:
        steps = sorted({int(round(i * T / (points - 1))) for i in range(points)}) if points > 1 else [0]
    header = ["t"] + [k.value for k in parsed]
    rows = []
    for t in steps:
        row = [t]
        for kind in parsed:
            row.append(budget_at(BudgetSchedule(b0=b0, bT=bT, T=T, kind=kind), t))
        rows.append(row)
    return header, rows


_COEFF_COUNT = {
    KernelKind.LINEAR: 0,
    KernelKind.P_LINEAR: None,  # pieces
    KernelKind.MIX_K: None,  # pieces + 2
    KernelKind.SIGMOID: 3,
    KernelKind.RBF: 3,
    KernelKind.RBF_NORMALIZED: 3,
}


def kernel_coefficient_count(kind, pieces: int = 2) -> int:
    kind = parse_kernel_kind(kind)
    if kind is KernelKind.P_LINEAR:
        return pieces
    if kind is KernelKind.MIX_K:
        return pieces + 2
    return _COEFF_COUNT[kind]


MEMORY_MODES = ("full-ft", "low-rank", "low-rank-storing-delta")


def memory_footprint_estimate(layer_dims, r: int, mode: str,
                              kernel_kind="mix-k", pieces: int = 2) -> dict:
    """Analytic float counts for parameters and optimizer state.

    full-ft tracks every weight matrix entry; low-rank tracks the factor
    pairs plus kernel coefficients; low-rank-storing-delta additionally
    retains every merged update matrix between passes. Moment counts
    assume an adaptive-moment optimizer (two state floats per tracked
    parameter).
    """
    mode = str(mode).strip().lower()
    if mode not in MEMORY_MODES:
        raise ValueError(f"unknown memory mode {mode!r} (known: {', '.join(MEMORY_MODES)})")
    dims = [(int(m), int(n)) for m, n in layer_dims]
    if any(m <= 0 or n <= 0 for m, n in dims):
        raise ValueError("layer dimensions must be positive")
    if r < 0:
        raise ValueError("rank must be nonnegative")
    coeffs = kernel_coefficient_count(kernel_kind, pieces)
    weight_floats = sum(m * n for m, n in dims)
    if mode == "full-ft":
        params = weight_floats
        retained = 0
    else:
        params = sum((m + n) * r + coeffs for m, n in dims)
        retained = weight_floats if mode == "low-rank-storing-delta" else 0
    return {
        "mode": mode,
        "layers": len(dims),
        "rank": r,
        "optimizer_param_floats": params,
        "optimizer_moment_floats": 2 * params,
        "retained_merge_floats": retained,
        "total_floats": params + 2 * params + retained,
    }


def train_experiment(config: RunConfig) -> tuple:
    """Run the configured fine-tune; returns (report, trace)."""
    watch = StopWatch()
    dataset = dataset_from(config)
    trainer_cfg = trainer_config_from(config)
    trace = fine_tune(trainer_cfg, dataset)
    report = ExperimentReport(
        name="train",
        config=config.to_dict(),
        seeds=[trace.seed],
        per_seed=[{"seed": trace.seed, "initial_loss": trace.initial_loss,
                   "final_loss": trace.final_loss,
                   "epoch_losses": [e.mean_loss for e in trace.epochs]}],
        aggregates={"final_loss": trace.final_loss, "initial_loss": trace.initial_loss},
        duration_s=watch.elapsed(),
    )
    return report, trace


# -- run-all ------------------------------------------------------------------


class AssertionOutcome:
    def __init__(self):
        self.failures = []

    def check(self, name: str, condition: bool, detail: str) -> None:
        if not condition:
            self.failures.append(f"{name}: {detail}")


def _validate_experiment_entries(entries) -> None:
    known = {"fit-matrix", "grad-evolution", "rank-sweep", "train", "schedule", "memory-model"}
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"experiments[{i}] must be an object")
        etype = entry.get("type")
        if etype not in known:
            raise ConfigError(
                f"experiments[{i}].type {etype!r} unknown (known: {', '.join(sorted(known))})"
            )
        params = entry.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"experiments[{i}].params must be an object")
        for key in ("kernels",):
            if key in params:
                for k in params[key]:
                    try:
                        parse_kernel_kind(k)
                    except ValueError as err:
                        raise ConfigError(f"experiments[{i}].params.{key}: {err}") from None
        if "kernel" in params:
            try:
                parse_kernel_kind(params["kernel"])
            except ValueError as err:
                raise ConfigError(f"experiments[{i}].params.kernel: {err}") from None


def run_all(config: RunConfig, out_dir) -> tuple:
    """Execute every experiment in the config; returns (report paths, failures).

    All entries are validated before anything runs. Embedded `assert`
    blocks are evaluated against each experiment's aggregates; failures
    are collected, not fatal.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = config.experiments
    _validate_experiment_entries(entries)
    outcome = AssertionOutcome()
    paths = []
    for i, entry in enumerate(entries):
        etype = entry["type"]
        name = entry.get("name", f"{etype}-{i}")
        params = dict(entry.get("params", {}))
        checks = entry.get("assert", {})
        if etype == "fit-matrix":
            report = fit_matrix_experiment(**params)
            report.name = name
            if "mse_ordering" in checks:
                frac = ordering_fraction(report, checks["mse_ordering"])
                report.aggregates["ordering_fraction"] = frac
                need = float(checks.get("min_seed_fraction", 0.8))
                ordered = checks["mse_ordering"]
                means = [report.aggregates["mean_final_mse"][parse_kernel_kind(k).value]
                         for k in ordered]
                outcome.check(name, all(a < b for a, b in zip(means, means[1:])),
                              f"mean MSE not ordered {ordered}: {means}")
                outcome.check(name, frac >= need,
                              f"strict per-seed ordering fraction {frac} < {need}")
            if "max_final_mse" in checks:
                for k, bound in checks["max_final_mse"].items():
                    got = report.aggregates["mean_final_mse"][parse_kernel_kind(k).value]
                    outcome.check(name, got <= bound, f"{k} mean MSE {got} > {bound}")
        elif etype == "grad-evolution":
            report = grad_evolution_experiment(**params)
            report.name = name
            if "max_rbf_mixk_ratio" in checks:
                ratio = report.aggregates.get("rbf_mixk_ratio")
                bound = float(checks["max_rbf_mixk_ratio"])
                outcome.check(name, ratio is not None and ratio <= bound,
                              f"rbf/mix-k gradient ratio {ratio} > {bound}")
        elif etype == "rank-sweep":
            report = rank_sweep(**params)
            report.name = name
            header, rows = rank_table(report)
            csv_path = out_dir / f"{name}.csv"
            write_csv(csv_path, header, rows)
            paths.append(csv_path)
            for key, bound in checks.get("rank_at_most", {}).items():
                got = report.aggregates[key]["max"]
                outcome.check(name, got <= bound, f"{key} max rank {got} > {bound}")
            for key, bound in checks.get("rank_above", {}).items():
                got = report.aggregates[key]["min"]
                outcome.check(name, got > bound, f"{key} min rank {got} <= {bound}")
        elif etype == "schedule":
            header, rows = schedule_table(**params)
            csv_path = out_dir / f"{name}.csv"
            write_csv(csv_path, header, rows)
            paths.append(csv_path)
            report = ExperimentReport(name=name, config=params, seeds=[],
                                      per_seed=[], aggregates={"rows": len(rows)})
            for kind, t, expected in checks.get("values", []):
                kind_i = header.index(parse_schedule_kind(kind).value)
                row = next((r for r in rows if r[0] == t), None)
                outcome.check(name, row is not None and row[kind_i] == expected,
                              f"{kind} at t={t}: {None if row is None else row[kind_i]} != {expected}")
        elif etype == "memory-model":
            checks_only = {k: v for k, v in params.items()}
            estimates = {
                mode: memory_footprint_estimate(mode=mode, **checks_only)
                for mode in MEMORY_MODES
            }
            report = ExperimentReport(name=name, config=params, seeds=[], per_seed=[],
                                      aggregates=estimates)
            if "lowrank_fullft_ratio" in checks:
                target, rel = checks["lowrank_fullft_ratio"]
                got = (estimates["low-rank"]["optimizer_param_floats"]
                       / estimates["full-ft"]["optimizer_param_floats"])
                report.aggregates["lowrank_fullft_ratio"] = got
                outcome.check(name, abs(got - target) <= rel * target,
                              f"ratio {got} not within {rel} of {target}")
        else:  # train
            overrides = params.get("config", {})
            sub_config = apply_defaults(_merge_dicts(config.to_dict(), overrides))
            sub_config.experiments = []
            report, trace = train_experiment(sub_config)
            report.name = name
            header, rows = alloc_trace_table(trace)
            csv_path = out_dir / f"{name}-sparsity.csv"
            write_csv(csv_path, header, rows)
            paths.append(csv_path)
            if "max_final_loss" in checks:
                outcome.check(name, trace.final_loss <= checks["max_final_loss"],
                              f"final loss {trace.final_loss} > {checks['max_final_loss']}")
        paths.append(report.write(out_dir))
    return paths, outcome.failures


def _merge_dicts(base: dict, overrides: dict) -> dict:
    out = {k: (v.copy() if isinstance(v, dict) else v) for k, v in base.items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_dicts(out[key], value)
        else:
            out[key] = value
    return out


def default_run_config() -> RunConfig:
    """The bundled configuration exercised by `run-all` with no --config."""
    return apply_defaults(
        {
            "experiments": [
                {
                    "name": "schedule",
                    "type": "schedule",
                    "params": {"b0": 1000, "bT": 0, "T": 10},
                    "assert": {"values": [["cubic", 5, 125], ["quadratic", 5, 250],
                                           ["linear", 5, 500], ["cubic", 0, 1000],
                                           ["cubic", 10, 0]]},
                },
                {
                    "name": "memory-model",
                    "type": "memory-model",
                    "params": {"layer_dims": [[768, 768]] * 12, "r": 8,
                               "kernel_kind": "mix-k", "pieces": 2},
                    "assert": {"lowrank_fullft_ratio": [0.0208, 0.01]},
                },
                {
                    "name": "rank-sweep",
                    "type": "rank-sweep",
                    "params": {"m": 64, "n": 64, "r_values": [4], "seeds": 10},
                    "assert": {"rank_at_most": {"linear@r=4": 4},
                                "rank_above": {"mix-k@r=4": 4, "p-linear@r=4": 4}},
                },
                {
                    "name": "grad-evolution",
                    "type": "grad-evolution",
                    "params": {"scale": 10.0, "steps": 120, "seeds": 3},
                    "assert": {"max_rbf_mixk_ratio": 0.1},
                },
                {
                    "name": "fit-matrix",
                    "type": "fit-matrix",
                    "params": {"m": 32, "n": 32, "r": 4, "steps": 20000, "lr": 1e-3,
                               "seeds": 5, "density": 0.05, "piece_init_eps": 1.0},
                    "assert": {"mse_ordering": ["mix-k", "p-linear", "linear"],
                                "min_seed_fraction": 0.8},
                },
                {
                    "name": "train",
                    "type": "train",
                    "params": {"config": {"train": {"epochs": 10}}},
                    "assert": {},
                },
            ]
        }
    )
