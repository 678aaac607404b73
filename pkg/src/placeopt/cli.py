"""Command-line pipeline: one subcommand per stage.

Stages write deterministic JSON artifacts (schema version + config hash), so
an external evaluation harness can interleave between them and any rerun with
identical inputs and seed reproduces the artifacts byte for byte.

Exit codes: 0 success, 2 validation error, 3 infeasible optimization,
4 evaluator failure.
"""
from __future__ import annotations

import argparse
import json
import math
import shlex
import sys
from pathlib import Path

import numpy as np

from . import artifacts
from .acquisition import (
    AcquisitionConfig,
    EvaluatorError,
    SubprocessEvaluator,
    refinement_loop,
    sample_exploration,
)
from .cost import (
    allocation_cost,
    cost_model_from_dict,
    cost_model_to_dict,
    filter_singletons,
    fit_regression,
)
from .dp import (
    InfeasibleBudgetError,
    constrained_optimum,
    extract_potentials,
    pareto_frontier,
    solve_all_allocations,
)
from .features import ExpansionConfig, feature_count
from .placements import (
    Allocation,
    DEFAULT_CATALOG,
    MixerCatalog,
    Placement,
    allocation_of,
    derive_seed,
    sample_global,
    sample_local,
)
from .speculative import estimate_acceptance, load_traces, search_draft_placement
from .stability import Band, analyze, checkpoint_scores_from_records
from .surrogate import (
    EvaluationRecord,
    NIGPrior,
    default_expansion_candidates,
    fit,
    guard_allows,
    load_records,
    posterior_to_dict,
    save_records,
    select_expansion,
)
from .synthetic import SyntheticOracleEvaluator, landscape_from_dict


def _load_catalog(spec: str | None) -> MixerCatalog:
    if spec is None or spec == "default":
        return DEFAULT_CATALOG
    payload = json.loads(Path(spec).read_text())
    return MixerCatalog(tuple(payload["names"]), tuple(payload["short_codes"]))


def _load_cost_model(path: str, catalog: MixerCatalog):
    return cost_model_from_dict(artifacts.read_artifact(path, "cost-model"), catalog)


def _parse_expansions(spec: str | None) -> list[ExpansionConfig]:
    if not spec:
        return default_expansion_candidates()
    out = []
    for token in spec.split(","):
        token = token.strip()
        if ":" in token:
            order, rng = token.split(":")
            out.append(ExpansionConfig(order=int(order), range=int(rng)))
        else:
            out.append(ExpansionConfig(order=int(token)))
    return out


def _parse_band_range(spec: str | None) -> tuple[float, float] | None:
    if not spec:
        return None
    lo, hi = spec.split(":")
    return float(lo), float(hi)


def _make_evaluator(spec: str, catalog: MixerCatalog):
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        landscape = landscape_from_dict(artifacts.read_artifact(rest, "landscape"))
        return SyntheticOracleEvaluator(landscape)
    if kind == "subprocess":
        if not rest:
            raise ValueError("subprocess evaluator needs a command")
        return SubprocessEvaluator(shlex.split(rest), catalog)
    raise ValueError(f"unknown evaluator {spec!r}; expected synthetic:<path> or subprocess:<cmd>")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _frontier_payload(points, catalog: MixerCatalog) -> list[dict]:
    rows = []
    for p in points:
        row = {
            "cost": p.cost,
            "placement": p.placement.to_codes(catalog),
            "predicted_score": p.predicted_score,
        }
        if p.validated_score is not None:
            row["validated_score"] = p.validated_score
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# subcommands

def cmd_fit_cost(args) -> int:
    catalog = _load_catalog(args.catalog)
    records = _load_throughput_records(args.records, catalog)
    kept = filter_singletons(records, min_count=args.min_count)
    model = fit_regression(kept, intercept=args.intercept)
    stats = model.fit_stats
    print(
        f"fit {stats.n_records} of {len(records)} records: "
        f"R^2={stats.r_squared:.4f} mean|rel err|={stats.mean_abs_error_fraction:.4f}"
    )
    config = {
        "records": str(args.records), "min_count": args.min_count,
        "intercept": args.intercept, "catalog": list(catalog.names),
    }
    artifacts.write_artifact(args.out, "cost-model", cost_model_to_dict(model, catalog), config)
    return 0


def _load_throughput_records(path: str, catalog: MixerCatalog):
    from .cost import ThroughputRecord

    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            counts = tuple(int(row["counts"].get(name, 0)) for name in catalog.names)
            records.append(ThroughputRecord(Allocation(counts), float(row["throughput"])))
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise ValueError(f"bad throughput record on line {lineno}: {exc}") from exc
    return records


def cmd_explore(args) -> int:
    catalog = _load_catalog(args.catalog)
    M = catalog.num_types
    cost_model = _load_cost_model(args.cost_model, catalog) if args.cost_model else None
    band = _parse_band_range(args.cost_band)

    if args.scheme == "local":
        placements = [sample_local(derive_seed(args.seed, i), args.layers, M) for i in range(args.n)]
    elif args.scheme == "global":
        placements = [sample_global(derive_seed(args.seed, i), args.layers, M) for i in range(args.n)]
    elif args.scheme == "cost":
        placements = sample_exploration(
            args.n, args.layers, M, args.seed,
            cost_model=cost_model, cost_band=band, min_count=args.min_count,
        )
    else:
        raise ValueError(f"unknown sampling scheme {args.scheme!r}")

    if args.evaluator:
        evaluator = _make_evaluator(args.evaluator, catalog)
        scores = evaluator.evaluate(placements)
        records = [
            EvaluationRecord(
                placement=p, score=float(s),
                cost=allocation_cost(allocation_of(p), cost_model) if cost_model else None,
            )
            for p, s in zip(placements, scores)
        ]
        save_records(args.out, records, catalog)
    else:
        lines = []
        for p in placements:
            row = {"placement": p.to_codes(catalog)}
            if cost_model is not None:
                row["cost"] = allocation_cost(allocation_of(p), cost_model)
            lines.append(json.dumps(row, sort_keys=True))
        Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {args.n} placements to {args.out}")
    return 0


def _fit_from_records(records, candidates, prior, guard_ratio):
    L = records[0].placement.num_layers
    M = records[0].placement.num_types
    if not any(
        guard_allows(len(records), feature_count(c, L, M), guard_ratio) for c in candidates
    ):
        smallest = min(candidates, key=lambda c: feature_count(c, L, M))
        print(
            f"warning: {len(records)} records pass the feature guard for no candidate; "
            f"falling back to {smallest.label()}",
            file=sys.stderr,
        )
    expansion = select_expansion(records, candidates, prior, guard_ratio)
    return expansion, fit(records, expansion, prior)


def cmd_optimize(args) -> int:
    catalog = _load_catalog(args.catalog)
    records = load_records(args.records, catalog)
    cost_model = _load_cost_model(args.cost_model, catalog)
    prior = NIGPrior(alpha=args.alpha, a0=args.a0, b0=args.b0)
    candidates = _parse_expansions(args.expansions)

    expansion, posterior = _fit_from_records(records, candidates, prior, args.guard_ratio)
    print(f"selected expansion: {expansion.label()} on {len(records)} records")
    potentials = extract_potentials(posterior)
    config = {
        "records": str(args.records), "cost_model": str(args.cost_model),
        "prior": {"alpha": args.alpha, "a0": args.a0, "b0": args.b0},
        "guard_ratio": args.guard_ratio, "budget": args.budget,
        "expansions": args.expansions, "catalog": list(catalog.names),
    }
    posterior_hash = artifacts.config_hash(_jsonable(posterior_to_dict(posterior)))

    if args.budget is not None:
        point = constrained_optimum(potentials, cost_model, args.budget)
        payload = {
            "optimum": _frontier_payload([point], catalog)[0],
            "expansion": expansion.label(),
            "posterior_hash": posterior_hash,
        }
        artifacts.write_artifact(args.out, "optimum", payload, config)
        print(f"optimum at cost {point.cost:.2f}: score {point.predicted_score:.4f}")
    else:
        solutions = solve_all_allocations(potentials, k=1)
        frontier = pareto_frontier(solutions, cost_model)
        payload = {
            "frontier": _frontier_payload(frontier, catalog),
            "expansion": expansion.label(),
            "posterior_hash": posterior_hash,
        }
        artifacts.write_artifact(args.out, "frontier", payload, config)
        print(f"frontier with {len(frontier)} points written to {args.out}")
    if args.save_posterior:
        artifacts.write_artifact(
            args.save_posterior, "posterior", _jsonable(posterior_to_dict(posterior)), config
        )
    return 0


def cmd_campaign(args) -> int:
    catalog = _load_catalog(args.catalog)
    records = load_records(args.records, catalog)
    cost_model = _load_cost_model(args.cost_model, catalog)
    prior = NIGPrior(alpha=args.alpha, a0=args.a0, b0=args.b0)
    candidates = _parse_expansions(args.expansions)
    evaluator = _make_evaluator(args.evaluator, catalog)
    acq = AcquisitionConfig(
        beta=args.beta,
        safe_fraction=args.safe_fraction,
        mean_floor_quantile=args.mean_floor_quantile,
        pool_target=args.pool_target,
        candidate_min_count=args.min_count,
        rounds=args.rounds,
        evals_per_round=args.evals_per_round,
        cost_band=_parse_band_range(args.cost_band),
    )
    out_dir = Path(args.out_dir)
    result = refinement_loop(
        evaluator, records, prior, acq, cost_model,
        expansion_candidates=candidates, guard_ratio=args.guard_ratio,
        campaign_dir=out_dir, catalog=catalog,
    )
    config = {
        "records": str(args.records), "cost_model": str(args.cost_model),
        "evaluator": args.evaluator, "rounds": args.rounds,
        "evals_per_round": args.evals_per_round, "beta": args.beta,
        "safe_fraction": args.safe_fraction, "pool_target": args.pool_target,
        "min_count": args.min_count, "seed": args.seed,
        "prior": {"alpha": args.alpha, "a0": args.a0, "b0": args.b0},
        "catalog": list(catalog.names),
    }
    save_records(out_dir / "records_final.jsonl", result.records, catalog)
    artifacts.write_artifact(
        out_dir / "posterior_final.json", "posterior",
        _jsonable(posterior_to_dict(result.posterior)), config,
    )
    artifacts.write_artifact(
        out_dir / "frontier.json", "frontier",
        {
            "frontier": _frontier_payload(result.frontier, catalog),
            "expansion": result.expansion.label(),
        },
        config,
    )
    print(
        f"campaign finished: {len(result.records)} records, "
        f"{len(result.frontier)} frontier points, expansion {result.expansion.label()}"
    )
    return 0


def cmd_analyze_stability(args) -> int:
    catalog = _load_catalog(args.catalog)
    records = load_records(args.records, catalog)
    scores = checkpoint_scores_from_records(records, catalog)
    bands = []
    for token in args.bands.split(","):
        token = token.strip()
        if token == "all":
            bands.append(Band("all"))
        else:
            kind, delta = token.split(":")
            bands.append(Band(kind, float(delta)))
    tiers = tuple(float(t) for t in args.tiers.split(","))
    top_k = tuple(int(k) for k in args.top_k.split(","))
    report = analyze(
        scores, tiers=tiers, bands=tuple(bands),
        window=args.window, stride=args.stride, top_k=top_k,
    )
    payload = {
        "checkpoints": list(report.checkpoint_labels),
        "spearman_vs_final": _jsonable(report.spearman_vs_final),
        "tiers": list(report.tiers),
        "kendalls_w_by_tier": _jsonable(report.kendalls_w_by_tier),
        "top_k": list(report.top_k),
        "top_k_overlap_vs_final": _jsonable(report.top_k_overlap_vs_final),
        "windows": {
            name: {
                "starts": _jsonable(ws.window_starts),
                "costs": _jsonable(ws.window_costs),
                "rho": _jsonable(ws.rho),
            }
            for name, ws in report.window_stability.items()
        },
    }
    config = {
        "records": str(args.records), "window": args.window, "stride": args.stride,
        "bands": args.bands, "tiers": args.tiers, "top_k": args.top_k,
        "catalog": list(catalog.names),
    }
    artifacts.write_artifact(args.out, "stability-report", payload, config)
    print(f"stability report for {len(scores.placement_ids)} placements "
          f"x {len(scores.checkpoint_labels)} checkpoints written to {args.out}")
    return 0


def cmd_spec_decode(args) -> int:
    catalog = _load_catalog(args.catalog)
    if args.records:
        if not args.cost_model or args.target_cost is None:
            raise ValueError("draft search needs --cost-model and --target-cost")
        records = load_records(args.records, catalog)
        cost_model = _load_cost_model(args.cost_model, catalog)
        prior = NIGPrior(alpha=args.alpha, a0=args.a0, b0=args.b0)
        points = search_draft_placement(
            records, cost_model, args.target_cost, gamma=args.gamma, prior=prior,
            expansion_candidates=_parse_expansions(args.expansions),
            guard_ratio=args.guard_ratio,
        )
        payload = {
            "gamma": args.gamma,
            "target_cost": args.target_cost,
            "drafts": [
                {
                    "cost": p.cost,
                    "placement": p.placement.to_codes(catalog),
                    "predicted_acceptance": p.predicted_acceptance,
                    "predicted_speedup": p.predicted_speedup,
                }
                for p in points
            ],
        }
        config = {
            "records": str(args.records), "cost_model": str(args.cost_model),
            "target_cost": args.target_cost, "gamma": args.gamma,
            "catalog": list(catalog.names),
        }
        artifacts.write_artifact(args.out, "draft-frontier", payload, config)
        best = max(points, key=lambda p: p.predicted_speedup)
        print(
            f"{len(points)} draft candidates; best predicted speedup "
            f"{best.predicted_speedup:.3f}x at cost {best.cost:.2f}"
        )
    else:
        if not args.traces:
            raise ValueError("spec-decode needs --traces (estimate) or --records (search)")
        traces = load_traces(args.traces)
        estimate = estimate_acceptance(traces, gamma=args.gamma)
        payload = {
            "gamma": estimate.gamma,
            "n_bar": estimate.n_bar,
            "a": estimate.acceptance_rate,
            "stderr": estimate.stderr,
            "n_steps": estimate.n_steps,
        }
        config = {"traces": str(args.traces), "gamma": args.gamma}
        artifacts.write_artifact(args.out, "acceptance-estimate", payload, config)
        print(
            f"n_bar={estimate.n_bar:.4f} (a={estimate.acceptance_rate:.4f} "
            f"+- {estimate.stderr:.4f}) over {estimate.n_steps} steps"
        )
    return 0


# ---------------------------------------------------------------------------
# parser wiring

def _add_prior_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, default=1.0, help="ridge precision scale")
    p.add_argument("--a0", type=float, default=1e-3)
    p.add_argument("--b0", type=float, default=1e-3)
    p.add_argument("--guard-ratio", type=float, default=2.0,
                   help="max features per sample admitted by the feature guard")
    p.add_argument("--expansions", default=None,
                   help="comma list like '1,2:1,2:3,3:3' (order[:range])")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="placeopt",
        description="surrogate-guided mixer-placement optimization",
    )
    parser.add_argument("--config", default=None,
                        help="JSON file of flag defaults; explicit flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-cost", help="fit a linear cost model from throughput records")
    p.add_argument("--records", required=True)
    p.add_argument("--catalog", default=None)
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--intercept", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_cost)

    p = sub.add_parser("explore", help="sample placements for evaluation")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--catalog", default=None)
    p.add_argument("--scheme", choices=["local", "global", "cost"], default="global")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cost-model", default=None)
    p.add_argument("--cost-band", default=None, help="LO:HI in normalized cost units")
    p.add_argument("--min-count", type=int, default=0)
    p.add_argument("--evaluator", default=None,
                   help="synthetic:<landscape.json> or subprocess:<command>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("optimize", help="fit the surrogate and extract optima")
    p.add_argument("--records", required=True)
    p.add_argument("--catalog", default=None)
    p.add_argument("--cost-model", required=True)
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--save-posterior", default=None)
    _add_prior_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("campaign", help="run the explore/exploit refinement loop")
    p.add_argument("--records", required=True, help="seed evaluation records")
    p.add_argument("--catalog", default=None)
    p.add_argument("--cost-model", required=True)
    p.add_argument("--evaluator", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rounds", type=int, default=4)
    p.add_argument("--evals-per-round", type=int, default=500)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--safe-fraction", type=float, default=0.7)
    p.add_argument("--mean-floor-quantile", type=float, default=None)
    p.add_argument("--pool-target", type=int, default=1000)
    p.add_argument("--min-count", type=int, default=3)
    p.add_argument("--cost-band", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_prior_flags(p)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("analyze-stability", help="rank-stability report across checkpoints")
    p.add_argument("--records", required=True, help="evaluation records with checkpoint tags")
    p.add_argument("--catalog", default=None)
    p.add_argument("--window", type=int, default=200)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--bands", default="all", help="e.g. 'all,frontier:50,median:25'")
    p.add_argument("--tiers", default="1,0.5,0.25,0.1,0.05")
    p.add_argument("--top-k", default="10,50")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_stability)

    p = sub.add_parser("spec-decode", help="acceptance estimation / draft-placement search")
    p.add_argument("--traces", default=None, help="target-generated trace JSONL")
    p.add_argument("--records", default=None, help="acceptance-rate evaluation records")
    p.add_argument("--catalog", default=None)
    p.add_argument("--cost-model", default=None)
    p.add_argument("--target-cost", type=float, default=None)
    p.add_argument("--gamma", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_prior_flags(p)
    p.set_defaults(func=cmd_spec_decode)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()

    # two-phase parse so a config file supplies defaults but flags win
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    pre, _ = probe.parse_known_args(argv)
    if pre.config:
        defaults = json.loads(Path(pre.config).read_text())
        for action in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
            action.set_defaults(**{
                k.replace("-", "_"): v for k, v in defaults.items()
            })

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EvaluatorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
