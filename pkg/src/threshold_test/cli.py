"""Command-line entry point.

Exit codes: 0 ok, 2 input error, 3 data-quality error, 4 convergence
failure, 5 sampler failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classic import (
    RateTable,
    benchmark_test,
    concordance_report,
    concordance_rows,
    outcome_test,
    table_rows,
    threshold_verdicts,
    write_rate_table,
    write_scatter,
)
from .data import (
    COUNTS_COLUMNS,
    DataQualityError,
    FilterPolicy,
    SchemaError,
    aggregate,
    apply_policy,
    disaggregate,
    parse_records,
    placebo_relabel,
    read_counts,
    write_counts,
    write_records,
)
from .inference import FitResult, fit
from .model import AUTO, CENTERED, NONCENTERED, CountsTable, ThresholdModel
from .sampler import (
    RHAT_THRESHOLD,
    PosteriorDraws,
    SamplerConfig,
    SamplerInitError,
    read_draws_csv,
    summarize,
    write_draws_csv,
)
from .synthesis import (
    SynthSpec,
    aggregate_threshold_draws,
    aggregate_thresholds,
    generate,
    posterior_predictive,
    recovery_truth,
)

logger = logging.getLogger("threshold_test")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DATA_QUALITY = 3
EXIT_CONVERGENCE = 4
EXIT_SAMPLER = 5

OUTPUT_DIR_ENV = "THRESHOLD_TEST_OUTPUT_DIR"
ANALYSES = ("validate", "fit", "classic", "ppc", "synth", "placebo", "disaggregate", "report")
FAILED_MARKER = "FAILED"

SAMPLER_KEYS = ("chains", "warmup_iters", "sampling_iters", "target_accept", "max_tree_depth", "init_scale")
POLICY_KEYS = tuple(f.name for f in dataclasses.fields(FilterPolicy))


class InputError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one command.

    ``seed_generated`` is true when no seed was supplied and one was drawn
    from OS entropy; the value is written to the run metadata either way.
    """

    analysis: str
    input: str | None = None
    output_dir: str = "out"
    policy: FilterPolicy = field(default_factory=FilterPolicy)
    policy_name: str = "none"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reference_group: str | None = None
    seed: int = 0
    seed_generated: bool = False
    allow_single_chain: bool = False
    parameterization: str = AUTO
    axis: str | None = None
    draws: str | None = None

    def __post_init__(self):
        if self.analysis not in ANALYSES:
            raise InputError(f"unknown analysis {self.analysis!r}")

    def metadata(self) -> dict:
        return {
            "version": __version__,
            "analysis": self.analysis,
            "input": self.input,
            "policy": self.policy_name,
            "policy_settings": _policy_dict(self.policy),
            "sampler": dataclasses.asdict(self.sampler),
            "reference_group": self.reference_group,
            "seed": self.seed,
            "seed_generated": self.seed_generated,
            "parameterization": self.parameterization,
            "axis": self.axis,
        }


def _policy_dict(p: FilterPolicy) -> dict:
    sd = p.search_definition
    return {
        "excluded_groups": sorted(p.excluded_groups),
        "drop_missing_group": p.drop_missing_group,
        "exclude_state_patrol": p.exclude_state_patrol,
        "top_k_departments": p.top_k_departments,
        "search_definition": sd if isinstance(sd, str) else sorted(b.value for b in sd),
        "exclude_midnight": p.exclude_midnight,
        "age_bounds": list(p.age_bounds) if p.age_bounds else None,
    }


def _build_policy(spec) -> tuple[FilterPolicy, str]:
    if spec is None or spec == "none":
        return FilterPolicy(), "none"
    if spec == "primary":
        return FilterPolicy.primary_analysis(), "primary"
    if isinstance(spec, dict):
        unknown = set(spec) - set(POLICY_KEYS)
        if unknown:
            raise InputError(f"unknown policy key(s): {', '.join(sorted(unknown))}")
        kw = dict(spec)
        if kw.get("age_bounds") is not None:
            kw["age_bounds"] = tuple(kw["age_bounds"])
        if isinstance(kw.get("search_definition"), list):
            kw["search_definition"] = frozenset(kw["search_definition"])
        try:
            return FilterPolicy(**kw), "custom"
        except (TypeError, ValueError) as exc:
            raise InputError(f"invalid policy: {exc}") from exc
    raise InputError(f"policy must be 'none', 'primary' or an object, got {spec!r}")


def resolve_config(args: argparse.Namespace, env=None) -> RunConfig:
    """Merge defaults, config file, environment and flags (later wins)."""
    env = os.environ if env is None else env
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise InputError("config file must hold a JSON object")

    def pick(flag, key, default=None):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return file_cfg.get(key, default)

    output_dir = getattr(args, "output_dir", None) or env.get(OUTPUT_DIR_ENV) or file_cfg.get("output_dir", "out")

    policy, policy_name = _build_policy(pick("policy", "policy"))
    if getattr(args, "search_definition", None):
        policy = dataclasses.replace(policy, search_definition=args.search_definition)
        policy_name = policy_name if policy_name == "custom" else f"{policy_name}+{args.search_definition}"

    sampler_cfg = dict(file_cfg.get("sampler", {}))
    unknown = set(sampler_cfg) - set(SAMPLER_KEYS)
    if unknown:
        raise InputError(f"unknown sampler key(s): {', '.join(sorted(unknown))}")
    for key in SAMPLER_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            sampler_cfg[key] = v

    seed = pick("seed", "seed")
    generated = seed is None
    if generated:
        seed = int(np.random.SeedSequence().entropy % (2**31))
    threads = pick("threads", "threads", 1)
    try:
        sampler = SamplerConfig(**sampler_cfg, seed=int(seed), threads=int(threads))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid sampler settings: {exc}") from exc

    parameterization = pick("parameterization", "parameterization", AUTO)
    if parameterization not in (AUTO, CENTERED, NONCENTERED):
        raise InputError(f"unknown parameterization {parameterization!r}")

    return RunConfig(
        analysis=args.command,
        input=pick("input", "input"),
        output_dir=str(output_dir),
        policy=policy,
        policy_name=policy_name,
        sampler=sampler,
        reference_group=pick("reference_group", "reference_group"),
        seed=int(seed),
        seed_generated=generated,
        allow_single_chain=bool(getattr(args, "allow_single_chain", False) or file_cfg.get("allow_single_chain", False)),
        parameterization=parameterization,
        axis=pick("axis", "axis"),
        draws=pick("draws", "draws"),
    )


# ---------------------------------------------------------------------------
# input loading


def _read_text(path) -> str:
    if path is None:
        raise InputError("no input file given")
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _is_counts(text: str) -> bool:
    header = next(csv.reader(io.StringIO(text)), [])
    return set(COUNTS_COLUMNS) <= {h.strip() for h in header}


def load_records(cfg: RunConfig):
    """Parse and filter stop records; returns (records, parse report, exclusion report)."""
    text = _read_text(cfg.input)
    if _is_counts(text):
        raise InputError(f"{cfg.input} holds aggregated counts; this command needs stop records")
    records, parse_report = parse_records(text)
    records, excl = apply_policy(records, cfg.policy)
    return records, parse_report, excl


def load_counts(cfg: RunConfig) -> CountsTable:
    """Counts from either a counts CSV or a stop-records CSV (filtered, then aggregated)."""
    text = _read_text(cfg.input)
    if _is_counts(text):
        if cfg.policy_name != "none":
            logger.warning("filter policy ignored for pre-aggregated counts")
        counts = read_counts(text)
    else:
        records, _, _ = load_records(cfg)
        counts = aggregate(records)
    if counts.is_empty():
        raise InputError("input contains no stops")
    return counts


def _reference_group(cfg: RunConfig, counts: CountsTable) -> str:
    if cfg.reference_group is not None:
        if cfg.reference_group not in counts.groups:
            raise InputError(f"reference group {cfg.reference_group!r} not present in input")
        return cfg.reference_group
    totals = counts.n.sum(axis=1)
    return min(counts.groups, key=lambda g: (-totals[counts.groups.index(g)], g))


# ---------------------------------------------------------------------------
# writers


def _out(cfg: RunConfig, sub: str | None = None) -> Path:
    p = Path(cfg.output_dir) / sub if sub else Path(cfg.output_dir)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise InputError(f"output directory {p} is not writable")
    return p


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _clean(x):
    """Replace NaN/inf with None so JSON stays standard."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def write_fit_artifacts(out: Path, res: FitResult, cfg: RunConfig, extra_meta=None) -> bool:
    """Write draws, summaries, diagnostics and threshold scatter; return convergence status."""
    counts = res.counts
    diag = res.diagnostics
    with open(out / "counts.csv", "w", newline="", encoding="utf-8") as fh:
        write_counts(counts, fh)
    write_draws_csv(res.draws, out / "draws.csv")

    summ = summarize(res.draws)
    rhat = dict(zip(diag.names, diag.rhat))
    ess = dict(zip(diag.names, diag.ess_bulk))
    _write_csv(
        out / "summary.csv",
        ["name", "mean", "sd", "q2.5", "q50", "q97.5", "rhat", "ess_bulk"],
        ([n, s["mean"], s["sd"], s["q2.5"], s["q50"], s["q97.5"], rhat[n], ess[n]] for n, s in summ.items()),
    )
    _write_csv(out / "diagnostics.csv", ["name", "rhat", "ess_bulk"], zip(diag.names, diag.rhat, diag.ess_bulk))

    t = res.threshold_draws()
    ref_group = _reference_group(cfg, counts)
    ref = counts.groups.index(ref_group)
    t_mean = t.mean(axis=0)
    lo, hi = np.quantile(t, [0.025, 0.975], axis=0)
    _write_csv(
        out / "thresholds.csv",
        ["group", "dept", "n", "threshold_mean", "threshold_q2.5", "threshold_q97.5", "reference_threshold_mean"],
        (
            [g, d, int(counts.n[r, j]), t_mean[r, j], lo[r, j], hi[r, j], t_mean[ref, j]]
            for r, g in enumerate(counts.groups)
            for j, d in enumerate(counts.depts)
        ),
    )
    agg = aggregate_thresholds(t, counts.dept_stop_counts(), counts.groups)
    _write_csv(
        out / "aggregate_thresholds.csv",
        ["group", "mean", "q2.5", "q97.5"],
        ([g, a["mean"], a["q2.5"], a["q97.5"]] for g, a in agg.items()),
    )

    single = res.draws.n_chains < 2
    max_rhat = diag.max_rhat()
    if single:
        ok = cfg.allow_single_chain
        reason = None if ok else "single chain: R-hat unavailable (pass --allow-single-chain)"
    else:
        ok = diag.converged(RHAT_THRESHOLD)
        reason = None if ok else f"max R-hat {max_rhat:.4f} >= {RHAT_THRESHOLD}"
    meta = cfg.metadata()
    meta.update(
        {
            "status": "ok" if ok else "failed",
            "failure_reason": reason,
            "reference_group": ref_group,
            "reference_dept": counts.depts[res.model.ref],
            "parameterization": res.model.parameterization,
            "groups": counts.groups,
            "depts": counts.depts,
            "max_rhat": max_rhat,
            "divergences": res.draws.divergences.tolist(),
            "step_sizes": res.draws.step_sizes.tolist(),
            "mean_tree_depth": float(res.draws.tree_depth.mean()),
        }
    )
    meta.update(extra_meta or {})
    _write_json(out / "metadata.json", _clean(meta))
    marker = out / FAILED_MARKER
    if ok:
        if marker.exists():
            marker.unlink()
    else:
        marker.write_text(reason + "\n", encoding="utf-8")
        logger.error("convergence check failed: %s", reason)
    return ok


def _fit(cfg: RunConfig, counts: CountsTable) -> FitResult:
    logger.info(
        "fitting %d groups x %d departments: %d chains x (%d + %d)",
        *counts.shape,
        cfg.sampler.chains,
        cfg.sampler.warmup_iters,
        cfg.sampler.sampling_iters,
    )
    return fit(counts, cfg.sampler, parameterization=cfg.parameterization)


# ---------------------------------------------------------------------------
# commands


def cmd_validate(cfg: RunConfig) -> int:
    text = _read_text(cfg.input)
    if _is_counts(text):
        counts = read_counts(text)
        print(f"schema: ok (counts, {len(counts.groups)} groups x {len(counts.depts)} departments)")
        print(f"stops: {int(counts.n.sum())}  searches: {int(counts.searches.sum())}  hits: {int(counts.hits.sum())}")
        return EXIT_OK
    records, report = parse_records(text)
    print("schema: ok")
    print(f"rows: {report.rows}  parsed: {report.parsed}  malformed: {len(report.malformed)}")
    for line, msg in report.malformed[:20]:
        print(f"  line {line}: {msg}")
    kept, excl = apply_policy(records, cfg.policy)
    print(f"policy: {cfg.policy_name}")
    for rule, n in excl.removed.items():
        print(f"  excluded by {rule}: {n}")
    print(f"  searches redefined: {excl.redefined_searches}")
    print(f"records after filtering: {excl.output_records}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    counts = load_counts(cfg)
    res = _fit(cfg, counts)
    ok = write_fit_artifacts(_out(cfg), res, cfg)
    return EXIT_OK if ok else EXIT_CONVERGENCE


def _threshold_result(cfg, counts, draws_path, ref_group):
    model = ThresholdModel(counts)
    draws = read_draws_csv(draws_path)
    missing = [n for n in model.param_names() if n not in draws.names]
    if missing:
        raise InputError(f"draws file does not match input counts (missing {missing[0]})")
    idx = [draws.names.index(n) for n in model.param_names()]
    constrained = draws.draws[:, :, idx]
    t_start = model.param_names().index(f"t[{counts.groups[0]},{counts.depts[0]}]")
    t = constrained.reshape(-1, constrained.shape[2])[:, t_start:].reshape(-1, model.R, model.D)
    return model, constrained, t


def cmd_classic(cfg: RunConfig) -> int:
    counts = load_counts(cfg)
    ref = _reference_group(cfg, counts)
    out = _out(cfg)
    rates = RateTable(counts)
    bench = benchmark_test(counts, ref)
    outc = outcome_test(counts, ref)
    thr = None
    if cfg.draws:
        _, _, t = _threshold_result(cfg, counts, cfg.draws, ref)
        thr = threshold_verdicts(t, counts, ref)
    with open(out / "rates.csv", "w", newline="", encoding="utf-8") as fh:
        write_rate_table(rates, fh)
    with open(out / "benchmark_scatter.csv", "w", newline="", encoding="utf-8") as fh:
        write_scatter(bench, fh)
    with open(out / "outcome_scatter.csv", "w", newline="", encoding="utf-8") as fh:
        write_scatter(outc, fh)
    tests = [bench, outc] + ([thr] if thr is not None else [])
    _write_csv(
        out / "verdicts.csv",
        ["group", "dept"] + [r.kind for r in tests],
        (
            [g, d] + ["" if r.skipped[i, j] else int(r.verdicts[i, j]) for r in tests]
            for i, g in enumerate(counts.groups)
            if g != ref
            for j, d in enumerate(counts.depts)
        ),
    )
    _write_csv(
        out / "concordance.csv",
        ["group", "pair", "verdict_a", "verdict_b", "count"],
        concordance_rows(concordance_report(*tests)),
    )
    for row in table_rows(rates):
        print(",".join(str(x) for x in row))
    return EXIT_OK


def _unconstrained_draws(model: ThresholdModel, constrained: np.ndarray) -> PosteriorDraws:
    flat = constrained.reshape(-1, constrained.shape[2])
    v = np.array([model.unconstrain(model.params_from_vector(x)) for x in flat])
    c, i = constrained.shape[:2]
    return PosteriorDraws(
        draws=v.reshape(c, i, -1),
        log_density=np.zeros((c, i)),
        divergences=np.zeros(c, dtype=np.int64),
        step_sizes=np.full(c, math.nan),
        inv_metric=np.full((c, v.shape[1]), math.nan),
        accept_stat=np.full((c, i), math.nan),
        tree_depth=np.zeros((c, i), dtype=np.int64),
        names=model.param_names(),
        constrained=constrained,
    )


def _write_ppc(out: Path, report) -> dict:
    rows = list(report.rows())
    _write_csv(out / "ppc.csv", list(rows[0]), ([r[k] for k in rows[0]] for r in rows))
    summary = {
        "search_rmse": report.search_rmse,
        "hit_rmse": report.hit_rmse,
        "mean_weighted_search_residual": report.mean_weighted_search_residual,
    }
    _write_json(out / "ppc_summary.json", _clean(summary))
    return summary


def cmd_ppc(cfg: RunConfig) -> int:
    counts = load_counts(cfg)
    out = _out(cfg)
    code = EXIT_OK
    if cfg.draws:
        model, constrained, _ = _threshold_result(cfg, counts, cfg.draws, _reference_group(cfg, counts))
        draws = _unconstrained_draws(model, constrained)
    else:
        res = _fit(cfg, counts)
        if not write_fit_artifacts(out, res, cfg):
            code = EXIT_CONVERGENCE
        model, draws = res.model, res.draws
    summary = _write_ppc(out, posterior_predictive(draws, model))
    print(f"search RMSE {100 * summary['search_rmse']:.3f} pp, hit RMSE {100 * summary['hit_rmse']:.3f} pp")
    return code


def _parse_floats(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in s.split(","))
    except ValueError as exc:
        raise InputError(f"expected comma-separated numbers, got {s!r}") from exc


def cmd_synth(cfg: RunConfig, args) -> int:
    thresholds = _parse_floats(args.thresholds)
    if not all(0.0 < t < 1.0 for t in thresholds):
        raise InputError("thresholds must lie in (0, 1)")
    groups = args.groups.split(",") if args.groups else None
    if groups and len(groups) != len(thresholds):
        raise InputError("--groups must list one label per threshold")
    truth = recovery_truth(thresholds, n_depts=args.depts, seed=cfg.seed)
    n = np.full((len(thresholds), args.depts), args.n, dtype=np.int64)
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        spec = SynthSpec(truth, n, args.noise, seed=cfg.seed + 1, groups=groups)
    out = _out(cfg)
    if args.records:
        counts, records = generate(spec, records=True)
        with open(out / "synthetic_records.csv", "w", newline="", encoding="utf-8") as fh:
            write_records(records, fh)
    else:
        counts = generate(spec)
    with open(out / "synthetic_counts.csv", "w", newline="", encoding="utf-8") as fh:
        write_counts(counts, fh)
    meta = cfg.metadata()
    meta.update(
        {
            "groups": spec.groups,
            "depts": spec.depts,
            "threshold_noise_sigma": args.noise,
            "n_per_cell": args.n,
            "truth": {
                "t": truth.t,
                "phi_r": truth.phi_r,
                "lambda_r": truth.lambda_r,
                "phi_d": truth.phi_d,
                "lambda_d": truth.lambda_d,
                "aggregate_thresholds": dict(
                    zip(spec.groups, aggregate_threshold_draws(truth.t[None], n.sum(axis=0))[0])
                ),
            },
        }
    )
    _write_json(out / "truth.json", _clean(meta))
    print(f"wrote {int(counts.n.sum())} synthetic stops to {out}")
    return EXIT_OK


def interval_overlaps(agg: dict[str, dict[str, float]]):
    """Pairwise overlap of group-aggregate 95% intervals."""
    for a, b in itertools.combinations(agg, 2):
        x, y = agg[a], agg[b]
        yield a, b, x["q2.5"] <= y["q97.5"] and y["q2.5"] <= x["q97.5"]


def cmd_placebo(cfg: RunConfig) -> int:
    if cfg.axis not in ("day_of_week", "season"):
        raise InputError("placebo needs --axis day_of_week or --axis season")
    records, _, _ = load_records(cfg)
    try:
        relabeled = placebo_relabel(records, cfg.axis)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    counts = aggregate(relabeled)
    res = _fit(cfg, counts)
    out = _out(cfg)
    t = res.threshold_draws()
    agg = aggregate_thresholds(t, counts.dept_stop_counts(), counts.groups)
    overlaps = list(interval_overlaps(agg))
    _write_csv(out / "overlap.csv", ["group_a", "group_b", "overlap"], ([a, b, int(o)] for a, b, o in overlaps))
    ok = write_fit_artifacts(
        out, res, cfg, {"all_intervals_overlap": all(o for _, _, o in overlaps), "placebo_groups": counts.groups}
    )
    print(f"{len(counts.groups)} placebo groups; all intervals overlap: {all(o for _, _, o in overlaps)}")
    return EXIT_OK if ok else EXIT_CONVERGENCE


def cmd_disaggregate(cfg: RunConfig) -> int:
    if cfg.axis not in ("year", "time_of_day", "age_band", "gender"):
        raise InputError("disaggregate needs --axis year, time_of_day, age_band or gender")
    records, _, _ = load_records(cfg)
    subsets = disaggregate(records, cfg.axis)
    if not subsets:
        raise InputError(f"no records carry a {cfg.axis} value")
    rows = []
    code = EXIT_OK
    for key, subset in subsets.items():
        counts = aggregate(subset)
        res = _fit(cfg, counts)
        if not write_fit_artifacts(_out(cfg, f"{cfg.axis}={key}"), res, cfg, {"subset": key}):
            code = EXIT_CONVERGENCE
        agg = aggregate_thresholds(res.threshold_draws(), counts.dept_stop_counts(), counts.groups)
        rows.extend([key, g, a["mean"], a["q2.5"], a["q97.5"]] for g, a in agg.items())
    _write_csv(_out(cfg) / "disaggregate.csv", [cfg.axis, "group", "mean", "q2.5", "q97.5"], rows)
    return code


def build_report(run_dir: Path, reference_group: str | None = None) -> dict:
    """Combine the artifacts of a run directory into one JSON-ready dict."""
    counts_path = run_dir / "counts.csv"
    if not counts_path.exists():
        raise InputError(f"{run_dir} has no counts.csv; run fit first")
    counts = read_counts(counts_path.read_text(encoding="utf-8"))
    meta = {}
    if (run_dir / "metadata.json").exists():
        meta = json.loads((run_dir / "metadata.json").read_text(encoding="utf-8"))
    ref = reference_group or meta.get("reference_group")
    cfg = RunConfig("report", reference_group=ref)
    ref = _reference_group(cfg, counts)
    rates = RateTable(counts)
    bench = benchmark_test(counts, ref)
    outc = outcome_test(counts, ref)
    report = {
        "reference_group": ref,
        "rates": [
            {"group": g, "stops": n, "search_rate": s, "hit_rate": h} for g, n, s, h in table_rows(rates, percent=False)
        ],
        "metadata": meta,
    }
    tests = [bench, outc]
    if (run_dir / "draws.csv").exists():
        model, constrained, t = _threshold_result(cfg, counts, run_dir / "draws.csv", ref)
        agg = aggregate_thresholds(t, counts.dept_stop_counts(), counts.groups)
        report["aggregate_thresholds"] = [{"group": g, **a} for g, a in agg.items()]
        tests.append(threshold_verdicts(t, counts, ref))
        ppc = posterior_predictive(_unconstrained_draws(model, constrained), model)
        report["ppc"] = {
            "search_rmse": ppc.search_rmse,
            "hit_rmse": ppc.hit_rmse,
            "mean_weighted_search_residual": ppc.mean_weighted_search_residual,
        }
    report["concordance"] = {
        g: {pair: m.tolist() for pair, m in tabs.items()} for g, tabs in concordance_report(*tests).items()
    }
    report["flagged_departments"] = {
        r.kind: {g: r.flagged(g) for g in counts.groups if g != ref} for r in tests
    }
    return _clean(report)


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir or cfg.output_dir)
    report = build_report(run_dir, cfg.reference_group)
    _write_json(_out(cfg) / "report.json", report)
    json.dump(report, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, needs_input=True, sampling=True) -> None:
    if needs_input:
        p.add_argument("input", nargs="?", help="stop-records or counts CSV")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--output-dir", help=f"output directory (env {OUTPUT_DIR_ENV})")
    p.add_argument("--policy", choices=["none", "primary"], help="filter policy preset")
    p.add_argument(
        "--search-definition",
        choices=["any_search", "probable_cause_only", "probable_cause_no_official_info"],
    )
    p.add_argument("--reference-group")
    p.add_argument("--seed", type=int)
    if sampling:
        p.add_argument("--chains", type=int)
        p.add_argument("--warmup", dest="warmup_iters", type=int)
        p.add_argument("--samples", dest="sampling_iters", type=int)
        p.add_argument("--target-accept", type=float)
        p.add_argument("--max-tree-depth", type=int)
        p.add_argument("--init-scale", type=float)
        p.add_argument("--threads", type=int, help="cap on worker processes")
        p.add_argument("--allow-single-chain", action="store_true", default=None)
        p.add_argument("--parameterization", choices=[AUTO, CENTERED, NONCENTERED])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="threshold-test", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("validate", help="check schema and report exclusions"), sampling=False)
    _common(sub.add_parser("fit", help="fit the threshold model"))
    p = sub.add_parser("classic", help="benchmark and outcome tests")
    _common(p, sampling=False)
    p.add_argument("--draws", help="draws CSV from a fit, adds threshold verdicts")
    p = sub.add_parser("ppc", help="posterior predictive check")
    _common(p)
    p.add_argument("--draws", help="reuse a draws CSV instead of fitting")

    p = sub.add_parser("synth", help="generate synthetic data")
    _common(p, needs_input=False, sampling=False)
    p.add_argument("--thresholds", default="0.15,0.15,0.07,0.07", help="group-average thresholds")
    p.add_argument("--groups", help="comma-separated group labels")
    p.add_argument("--depts", type=int, default=20)
    p.add_argument("--n", type=int, default=5000, help="stops per cell")
    p.add_argument("--noise", type=float, default=0.0, help="stop-level threshold noise sd")
    p.add_argument("--records", action="store_true", help="also write stop-level records")

    p = sub.add_parser("placebo", help="fit with groups replaced by day of week or season")
    _common(p)
    p.add_argument("--axis", choices=["day_of_week", "season"])
    p = sub.add_parser("disaggregate", help="fit separately per year, time of day, age band or gender")
    _common(p)
    p.add_argument("--axis", choices=["year", "time_of_day", "age_band", "gender"])

    p = sub.add_parser("report", help="combine a run directory into one JSON report")
    _common(p, needs_input=False, sampling=False)
    p.add_argument("--run-dir", help="directory holding counts.csv and draws.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg, args)
        if args.command == "report":
            return cmd_report(cfg, args)
        handler = {
            "validate": cmd_validate,
            "fit": cmd_fit,
            "classic": cmd_classic,
            "ppc": cmd_ppc,
            "placebo": cmd_placebo,
            "disaggregate": cmd_disaggregate,
        }[args.command]
        return handler(cfg)
    except DataQualityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA_QUALITY
    except SamplerInitError as exc:
        print(f"error: sampler initialization failed: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except (InputError, SchemaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
