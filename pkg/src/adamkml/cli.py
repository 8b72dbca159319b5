"""Command-line entry point.

Every command reads an optional flat config (``--config``), applies flag
overrides, writes its artifacts under ``out_dir`` and appends one manifest
line to ``out_dir/runs.log``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import pipeline as P
from .data import builtin_domain, few_shot, write_pgm, write_points_csv
from .errors import AdamKmlError, ConfigError, InvalidArgumentError, NumericError, SingularityError
from .importance import MEASURES, kernel_fi_oracle, threshold_mask
from .nets import generate, kernel_layers
from .persist import (effective_gan, format_config, load_checkpoint, load_config, read_report,
                      save_checkpoint, source_gan, write_report)

log = logging.getLogger("adamkml")

THRESHOLDS = (0, 25, 50, 75, 90)
SHOTS = (1, 5, 10, 25, 50, 100, 200)
ORACLE_WIDTH = 8

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4


# ---------------------------------------------------------------- helpers

def git_hash(data: bytes) -> str:
    """Git blob id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _csv_text(header, rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(row.get(h, "")) for h in header])
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Run:
    """Output directory, resolved config and the artifacts written so far."""

    def __init__(self, command: str, cfg: P.TrainConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        p.write_text(_csv_text(header, [dict(zip(header, r)) if not isinstance(r, dict) else r for r in rows]),
                     encoding="utf-8", newline="")
        self.artifacts.append(p)
        return p

    def added(self, p: Path) -> Path:
        self.artifacts.append(p)
        return p

    def manifest(self) -> None:
        cfg_text = format_config(dataclasses.asdict(self.cfg))
        files = []
        for p in self.artifacts:
            if p.is_dir():
                for f in sorted(p.iterdir()):
                    files.append(f"{p.name}/{f.name}:{git_hash(f.read_bytes())}")
            else:
                files.append(f"{p.name}:{git_hash(p.read_bytes())}")
        line = (f"command={self.command} config_sha256={hashlib.sha256(cfg_text.encode()).hexdigest()} "
                f"seed={self.cfg.seed} artifacts={','.join(files) or '-'}\n")
        with open(self.path("runs.log"), "a", encoding="utf-8") as fh:
            fh.write(line)


def _config(args) -> P.TrainConfig:
    raw = load_config(args.config) if args.config else {}
    overrides = {
        "t_h": getattr(args, "t_h", None),
        "k_shots": getattr(args, "shots", None),
        "strategy": getattr(args, "strategy", None),
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out", None),
    }
    try:
        return P.TrainConfig.from_mapping(raw, **overrides)
    except (InvalidArgumentError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _source(run: Run, args):
    path = Path(args.source) if getattr(args, "source", None) else run.path("source.ckpt")
    if not path.exists():
        raise FileNotFoundError(f"{path}: no source checkpoint (run `pretrain` first or pass --source)")
    return load_checkpoint(path)


def _shots(cfg: P.TrainConfig, k: int | None = None):
    return few_shot(builtin_domain(cfg.target_domain), k or cfg.k_shots, cfg.seed)


def _metric_row(m: dict) -> dict:
    return {k: m.get(k, "") for k in ("fid", "kid", "coverage", "high_quality_frac", "intra_div",
                                      "q_pct_G", "q_pct_D")}


# ---------------------------------------------------------------- commands

def cmd_pretrain(run: Run, args) -> None:
    cfg = run.cfg
    ckpt = P.pretrain(builtin_domain(cfg.source_domain), cfg.arch, cfg)
    save_checkpoint(ckpt, run.added(run.path("source.ckpt")))


def cmd_probe(run: Run, args) -> None:
    cfg = run.cfg
    res = P.run_probe(_source(run, args), _shots(cfg), cfg, measure=args.measure)
    write_report(res.report, run.added(run.path(f"importance_{args.measure}.txt")))
    print(f"{len(res.report.important)}/{len(res.report.kernel_fi)} kernels important "
          f"(t_h={cfg.t_h}, {res.trainable_count} trainable parameters while probing)")


def cmd_adapt(run: Run, args) -> None:
    cfg = run.cfg
    report = read_report(args.report) if args.report else None
    res = P.adapt(_source(run, args), report, _shots(cfg), cfg,
                  target_domain=builtin_domain(cfg.target_domain))
    name = cfg.strategy
    save_checkpoint(res.adapted, run.added(run.path(f"adapted_{name}.ckpt")))
    if res.report is not None:
        write_report(res.report, run.added(run.path(f"importance_{name}.txt")))
    run.write_csv(f"history_{name}.csv", P.HISTORY_COLUMNS, res.history)


def _ckpt_path(run: Run, args) -> Path:
    return Path(args.ckpt) if args.ckpt else run.path(f"adapted_{run.cfg.strategy}.ckpt")


def cmd_eval(run: Run, args) -> None:
    cfg = run.cfg
    path = _ckpt_path(run, args)
    ckpt = load_checkpoint(path)
    source = _source(run, args) if (args.source or run.path("source.ckpt").exists()) else None
    if source is None:
        raise FileNotFoundError("eval needs the source checkpoint for q% (pass --source)")
    m = P.evaluate(effective_gan(ckpt), source_gan(source), builtin_domain(cfg.target_domain),
                   _shots(cfg), cfg.seed)
    run.write_csv(f"eval_{path.stem}.csv", ("metric", "value"), [(k, v) for k, v in m.items()])
    for k, v in m.items():
        print(f"{k},{v!r}")


def cmd_gen(run: Run, args) -> None:
    cfg = run.cfg
    path = _ckpt_path(run, args)
    gan = effective_gan(load_checkpoint(path))
    z = np.random.default_rng([cfg.seed, 99]).standard_normal((args.n, gan.latent_dim))
    x = generate(gan, z).data
    if gan.arch.kind == "mlp2d":
        out = run.path(f"samples_{path.stem}.csv")
        write_points_csv(x, out)
    else:
        out = run.path(f"samples_{path.stem}")
        out.mkdir(exist_ok=True)
        for i, img in enumerate(x):
            write_pgm(img, out / f"{i:05d}.pgm")
    run.added(out)


def _adapt_row(job):
    """One sweep cell; top-level so it can run in a worker process."""
    cfg, source, report, k = job
    shots = _shots(cfg, k)
    res = P.adapt(source, report, shots, cfg)
    m = P.evaluate(res.model.to_gan(), source_gan(source), builtin_domain(cfg.target_domain), shots, cfg.seed)
    frac = res.report.fraction_important if res.report is not None else ""
    return frac, _metric_row(m)


def _fan_out(jobs, workers: int):
    if workers <= 1:
        return [_adapt_row(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_adapt_row, jobs))


METRIC_COLS = ("fid", "kid", "coverage", "high_quality_frac", "intra_div", "q_pct_G", "q_pct_D")


def cmd_sweep_threshold(run: Run, args) -> None:
    cfg = run.cfg
    source = _source(run, args)
    probe = P.run_probe(source, _shots(cfg), cfg, measure=args.measure)
    jobs = []
    for t in THRESHOLDS:
        rep = threshold_mask(probe.report.kernel_fi, t, args.measure)
        jobs.append((cfg.with_(t_h=t, strategy="adam"), source, rep, None))
    rows = []
    for t, job, (frac, m) in zip(THRESHOLDS, jobs, _fan_out(jobs, args.workers)):
        rep = job[2]
        rows.append({"t_h": t, "n_kernels": len(rep.kernel_fi), "n_important": len(rep.important),
                     "fraction_important": frac, **m})
    run.write_csv("sweep_threshold.csv", ("t_h", "n_kernels", "n_important", "fraction_important") + METRIC_COLS,
                  rows)


def cmd_sweep_shots(run: Run, args) -> None:
    cfg = run.cfg
    source = _source(run, args)
    jobs = [(cfg.with_(k_shots=k), source, None, k) for k in SHOTS]
    rows = [{"k": k, "strategy": cfg.strategy, "fraction_important": frac, **m}
            for k, (frac, m) in zip(SHOTS, _fan_out(jobs, args.workers))]
    run.write_csv("sweep_shots.csv", ("k", "strategy", "fraction_important") + METRIC_COLS, rows)


def oracle_comparison(cfg: P.TrainConfig):
    """Per-kernel (estimate, oracle) FI on a small mlp2d and their Spearman correlation."""
    cfg = cfg.with_(arch="mlp2d")
    source = P.pretrain(builtin_domain(cfg.source_domain), "mlp2d", cfg, width=ORACLE_WIDTH)
    res = P.run_probe(source, _shots(cfg), cfg, record_trace=True)
    rows = []
    for spec in kernel_layers(source.arch):
        m1 = np.stack([step[f"{spec.name}.m1"][0] for step in res.trace])
        g1 = np.stack([step[f"{spec.name}.m1"][1] for step in res.trace])
        m2 = np.stack([step[f"{spec.name}.m2"][0] for step in res.trace])
        g2 = np.stack([step[f"{spec.name}.m2"][1] for step in res.trace])
        for i in range(spec.c_out):
            kid = f"{spec.name}.weight[{i}]"
            try:
                oracle = kernel_fi_oracle(m1[:, i], m2, g1[:, i], g2)
            except SingularityError:
                log.warning("%s: modulation parameter hit zero, left out of the comparison", kid)
                continue
            rows.append((kid, res.report.kernel_fi[kid], oracle))
    rho = float(spearmanr([r[1] for r in rows], [r[2] for r in rows]).statistic)
    return rows, rho


def cmd_oracle_report(run: Run, args) -> None:
    rows, rho = oracle_comparison(run.cfg)
    run.write_csv("oracle_report.csv", ("kernel_id", "fi_estimate", "fi_oracle"), rows)
    run.write_csv("oracle_summary.csv", ("n_kernels", "spearman"), [(len(rows), rho)])
    print(f"spearman={rho!r} over {len(rows)} kernels")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "gen": cmd_gen,
    "sweep-threshold": cmd_sweep_threshold,
    "sweep-shots": cmd_sweep_shots,
    "oracle-report": cmd_oracle_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adamkml", description="Few-shot GAN adaptation with kernel modulation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__ or name)
        p.add_argument("--config", help="flat `key = value` config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides out_dir)")
        if name in ("probe", "adapt", "eval", "sweep-threshold", "sweep-shots", "oracle-report"):
            p.add_argument("--t-h", dest="t_h", type=int, help="importance quantile in percent")
            p.add_argument("--shots", type=int, help="number of target samples")
        if name in ("adapt", "eval", "gen", "sweep-shots"):
            p.add_argument("--strategy", choices=P.STRATEGIES)
        if name in ("probe", "adapt", "eval", "sweep-threshold", "sweep-shots"):
            p.add_argument("--source", help="source checkpoint (default: out_dir/source.ckpt)")
        if name in ("probe", "sweep-threshold"):
            p.add_argument("--measure", choices=MEASURES, default="fisher")
        if name == "adapt":
            p.add_argument("--report", help="importance report to reuse instead of probing")
        if name in ("eval", "gen"):
            p.add_argument("--ckpt", help="checkpoint (default: out_dir/adapted_<strategy>.ckpt)")
        if name == "gen":
            p.add_argument("--n", type=int, default=64, help="number of samples")
        if name.startswith("sweep"):
            p.add_argument("--workers", type=int, default=1, help="worker processes")
    return ap


cmd_pretrain.__doc__ = "train the source GAN"
cmd_probe.__doc__ = "importance probing, writes a kernel report"
cmd_adapt.__doc__ = "main adaptation with --strategy"
cmd_eval.__doc__ = "metrics of an adapted checkpoint, one CSV row per metric"
cmd_gen.__doc__ = "sample a checkpoint (CSV points or PGM images)"
cmd_sweep_threshold.__doc__ = "adapt at t_h in 0,25,50,75,90"
cmd_sweep_shots.__doc__ = "adapt at k in 1,5,10,25,50,100,200"
cmd_oracle_report.__doc__ = "compare the kernel FI estimate with the full chain-rule FI"


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if getattr(args, "n", 1) < 1:
            raise InvalidArgumentError("--n must be positive")
        r = Run(args.command, cfg)
        COMMANDS[args.command](r, args)
        r.manifest()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AdamKmlError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
