"""Command-line entry points: synth, tas, fewshot, theorem1.

All commands take --config (JSON, strictly validated), write their artifacts
under --out atomically (temp file + rename, so readers never see partial
files), and derive every random stream from seeds in the config; --seed
re-derives them all from one master value.  Nothing reads the wall clock
except the timing fields, which deterministic-output comparisons exclude.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, replace

from . import config as cfgmod
from . import pipeline, tasks, theorem
from .nnet import NetworkSpec
from .seeding import derive_seed

log = logging.getLogger(__name__)


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, doc: dict) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_id(command: str, echo: dict) -> str:
    blob = json.dumps({"command": command, "config": echo}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_data(src: cfgmod.DataSource) -> tuple[tasks.Dataset, tasks.Dataset]:
    if src.synthetic is not None:
        return tasks.family_holdout(src.synthetic, src.target_family, src.n_test_classes)
    assert src.train_csv is not None and src.test_csv is not None
    return tasks.load_csv(src.train_csv), tasks.load_csv(src.test_csv)


def _pipeline_cfg(job: cfgmod.PipelineJob) -> pipeline.PipelineConfig:
    return pipeline.PipelineConfig(
        s_count=job.s_count,
        n_test=job.n_test,
        top_r=job.top_r,
        m_way=job.m_way,
        k_shot=job.k_shot,
        q_query=job.q_query,
        epsilon=job.epsilon,
        whole_schedule=job.whole_schedule,
        approx_schedule=job.approx_schedule,
        finetune_schedule=job.finetune_schedule,
        n_eval_episodes=job.n_eval_episodes,
        softmax_temperature=job.softmax_temperature,
        master_seed=job.master_seed,
    )


def _hist_csv(edges: tuple[float, ...], counts: tuple[int, ...]) -> str:
    lines = ["bin_lo,bin_hi,count"]
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        lines.append(f"{lo!r},{hi!r},{c}")
    return "\n".join(lines) + "\n"


def _label_freq_csv(freq: dict[int, int]) -> str:
    lines = ["class_id,count"]
    for cid in sorted(freq):
        lines.append(f"{cid},{freq[cid]}")
    return "\n".join(lines) + "\n"


def _scores_doc(
    ordered: list[pipeline.RankedTask],
    related: pipeline.RelatedSet,
    run_id: str,
    echo: dict,
    diagnostics: dict[int, dict] | None,
) -> dict:
    rows = []
    for r in ordered:
        row = {
            "task_id": r.task_id,
            "score": r.score.value,
            "mapping": list(r.assignment.mapping),
            "total_cost": r.assignment.total_cost,
        }
        if diagnostics is not None:
            row["fisher"] = diagnostics[r.task_id]
        rows.append(row)
    return {
        "run_id": run_id,
        "config": echo,
        "scores": rows,
        "selected": {
            "label_set": list(related.label_set),
            "row_indices": list(related.row_indices),
        },
    }


def _rank_phases(job: cfgmod.PipelineJob, jobs: int):
    """Shared phases 1-2 for the tas and fewshot commands."""
    train, test = _load_data(job.data)
    spec = NetworkSpec(job.layer_widths, len(train.class_ids), job.activation)
    cfg = _pipeline_cfg(job)
    whole = pipeline.train_whole_classifier(train, spec, cfg.whole_schedule)
    source_tasks, target = pipeline.prepare_tasks(train, test, cfg)
    diagnostics = None
    if job.verbose_fisher:
        diagnostics = {}
        ranked = []
        for t in source_tasks:
            d = pipeline.mtas_diagnostics(t, target, train, test, whole, cfg)
            ranked.append(d.pop("ranked"))
            diagnostics[t.task_id] = d
    else:
        ranked = pipeline.rank_all_sources(
            source_tasks, target, train, test, whole, cfg, jobs=jobs
        )
    ordered = pipeline.sort_ranked(ranked)
    related = pipeline.related_training_set(ordered[: cfg.top_r], source_tasks, train)
    return train, test, spec, cfg, whole, source_tasks, ordered, related, diagnostics


def cmd_synth(doc: dict, out: str, seed: int | None) -> int:
    job = cfgmod.parse_synth(doc)
    if seed is not None:
        job = cfgmod.override_synth_seed(job, seed)
    data = tasks.make_synthetic(job.synthetic)
    path = os.path.join(out, job.filename)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".tmp-", suffix="~")
    os.close(fd)
    try:
        tasks.save_csv(data, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    print(f"wrote {path} ({data.n} rows, {len(data.class_ids)} classes)")
    return 0


def cmd_tas(doc: dict, out: str, seed: int | None, jobs: int) -> int:
    job = cfgmod.parse_pipeline(doc)
    if seed is not None:
        job = cfgmod.override_pipeline_seeds(job, seed)
    echo = asdict(job)
    run_id = _run_id("tas", echo)
    t0 = time.perf_counter()
    _, _, _, cfg, _, source_tasks, ordered, related, diagnostics = _rank_phases(job, jobs)
    doc_out = _scores_doc(ordered, related, run_id, echo, diagnostics)
    doc_out["timings"] = {"total_s": time.perf_counter() - t0}
    _write_json(os.path.join(out, "scores.json"), doc_out)
    edges, counts = pipeline.tas_histogram(ordered)
    _atomic_write(os.path.join(out, "tas_hist.csv"), _hist_csv(edges, counts))
    freq = pipeline.label_frequency(ordered[: cfg.top_r], source_tasks)
    _atomic_write(os.path.join(out, "label_freq.csv"), _label_freq_csv(freq))
    print(f"wrote scores.json tas_hist.csv label_freq.csv (run {run_id})")
    return 0


def cmd_fewshot(doc: dict, out: str, seed: int | None, jobs: int, ablation: str) -> int:
    job = cfgmod.parse_pipeline(doc)
    if seed is not None:
        job = cfgmod.override_pipeline_seeds(job, seed)
    echo = asdict(job)
    echo["ablation"] = ablation
    run_id = _run_id("fewshot", echo)
    train, test = _load_data(job.data)
    spec = NetworkSpec(job.layer_widths, len(train.class_ids), job.activation)
    cfg = _pipeline_cfg(job)
    report = pipeline.ablation_run(train, test, spec, cfg, mode=ablation, jobs=jobs)
    report_doc = pipeline.report_to_doc(report)
    report_doc["run_id"] = run_id
    report_doc["config"] = echo
    _write_json(os.path.join(out, "report.json"), report_doc)
    _write_json(
        os.path.join(out, "scores.json"),
        _scores_doc(list(report.scores), report.selected_labels, run_id, echo, None),
    )
    edges, counts = report.tas_histogram
    _atomic_write(os.path.join(out, "tas_hist.csv"), _hist_csv(edges, counts))
    _atomic_write(os.path.join(out, "label_freq.csv"), _label_freq_csv(report.label_frequency))
    print(
        f"wrote report.json scores.json tas_hist.csv label_freq.csv "
        f"(run {run_id}, mode {report.ablation_mode}, "
        f"accuracy {report.fewshot_accuracy_mean:.4f} +/- {report.fewshot_ci95:.4f})"
    )
    return 0


def cmd_theorem1(doc: dict, out: str, seed: int | None) -> int:
    job = cfgmod.parse_theorem(doc)
    if seed is not None:
        job = cfgmod.override_theorem_seeds(job, seed)
    echo = asdict(job)
    run_id = _run_id("theorem1", echo)
    t0 = time.perf_counter()
    problem, a_query, b_support = theorem.make_logistic_fixture(
        job.dim, job.n_support, job.n_query, job.l2_lambda, job.data_seed
    )
    theta_star = theorem.solve_optimum(problem, tol=job.optimum_tol)
    series = []
    for i in range(job.n_seeds):
        traj = theorem.noisy_sgd(problem, replace(job.sgd, seed=derive_seed(job.sgd.seed, i)))
        traj.theta_star = theta_star
        series.append(theorem.tas_trajectory(traj, a_query, b_support, problem))
    verdict = theorem.convergence_check(series, job.abs_tol)

    lines = ["seed,t,s_t,gap"]
    for i, s in enumerate(series):
        for t, v in zip(s.times, s.values):
            lines.append(f"{i},{int(t)},{v!r},{abs(v - s.s_star)!r}")
    _atomic_write(os.path.join(out, "theorem1_series.csv"), "\n".join(lines) + "\n")
    _write_json(
        os.path.join(out, "report.json"),
        {
            "run_id": run_id,
            "config": echo,
            "passed": verdict.passed,
            "final_gap_median": verdict.final_gap_median,
            "trend": list(verdict.trend),
            "abs_tol": verdict.abs_tol,
            "n_seeds": verdict.n_seeds,
            "s_star": series[0].s_star,
            "timings": {"total_s": time.perf_counter() - t0},
        },
    )
    status = "passed" if verdict.passed else "FAILED"
    print(
        f"wrote theorem1_series.csv report.json (run {run_id}, {status}, "
        f"final median gap {verdict.final_gap_median:.3e})"
    )
    return 0 if verdict.passed else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taskaffinity",
        description="Fisher-diagonal task affinity scoring and few-shot fine-tuning",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("synth", "generate a synthetic family-benchmark CSV"),
        ("tas", "rank source tasks by affinity against the target"),
        ("fewshot", "full pipeline: rank, fine-tune on related labels, evaluate"),
        ("theorem1", "averaged noisy-SGD affinity convergence harness"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="re-derive all embedded seeds")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel source-task evaluations")
        p.add_argument(
            "--ablation",
            choices=pipeline.ABLATION_MODES,
            default="related",
            help="label-set choice for the fewshot command",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        doc = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        if args.command == "synth":
            return cmd_synth(doc, args.out, args.seed)
        if args.command == "tas":
            return cmd_tas(doc, args.out, args.seed, args.jobs)
        if args.command == "fewshot":
            return cmd_fewshot(doc, args.out, args.seed, args.jobs, args.ablation)
        return cmd_theorem1(doc, args.out, args.seed)
    except (cfgmod.ConfigError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except theorem.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
