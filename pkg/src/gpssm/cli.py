"""``gpssm`` command line: generate data, fit, benchmark samplers, run oracles.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 oracle violation.
"""
import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger("gpssm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4
SUBCOMMANDS = ("generate", "fit", "benchmark", "oracle")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    subcommand: str = "fit"
    # data
    dataset: str | None = None
    T: int = 50
    # model and optimiser
    variant: str = "u_factorised"
    n_inducing: int = 20
    chunk_length: int | None = None
    minibatch_chunks: int | None = None
    n_iter: int = 3000
    learning_rate: float = 0.01
    n_samples: int = 10
    inducing_jitter: float = 1e-4
    learn_kernel: bool = True
    learn_inducing_inputs: bool = True
    learn_process_noise: bool = True
    # reporting
    grid: list = field(default_factory=lambda: [-3.0, 1.2, 200])
    pair_samples: int = 1000
    elbo_samples: int = 1000
    # benchmark
    bench_variants: list = field(
        default_factory=lambda: ["factorised_linear", "factorised_nonlinear", "u_factorised", "non_factorised"]
    )
    bench_lengths: list = field(default_factory=lambda: [50, 100, 200, 400])
    bench_chunked: list = field(default_factory=lambda: ["non_factorised"])
    bench_tau: int = 25
    bench_repeats: int = 20
    bench_inducing: int = 20
    bench_samples: int = 16
    # oracle
    oracle_configs: int = 20
    oracle_samples: int = 10_000
    nonmarkov_sigma2: float = 1.0
    nonmarkov_x1: list = field(default_factory=lambda: [-1.0, 0.0])
    nonmarkov_x2: float = 0.5
    # run
    seed: int = 0
    out: str = "."
    threads: int | None = None

    def validate(self) -> "RunConfig":
        from gpssm.posterior import Variant

        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        for v in [self.variant, *self.bench_variants, *self.bench_chunked]:
            try:
                Variant.parse(v)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        if len(self.grid) != 3 or int(self.grid[2]) < 2 or not self.grid[0] < self.grid[1]:
            raise ConfigError("grid must be [lo, hi, n] with lo < hi and n >= 2")
        if self.n_inducing < 1 or self.bench_inducing < 1:
            raise ConfigError("the number of inducing points must be >= 1")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.n_iter < 0 or self.n_samples < 1 or self.pair_samples < 2 or self.elbo_samples < 2:
            raise ConfigError("iteration and sample counts must be positive")
        if self.chunk_length is not None and self.chunk_length < 1:
            raise ConfigError("chunk_length must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if len(self.nonmarkov_x1) != 2 or self.nonmarkov_sigma2 < 0:
            raise ConfigError("nonmarkov_x1 needs two values and nonmarkov_sigma2 must be >= 0")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path, subcommand: str, seed=None, out=None, threads=None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text()) if path else {}
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    doc["subcommand"] = subcommand
    for key, val in (("seed", seed), ("out", out), ("threads", threads)):
        if val is not None:
            doc[key] = val
    try:
        cfg = RunConfig(**doc)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def limit_threads(n: int | None):
    """Cap BLAS and XLA CPU threads; must run before the first JAX computation."""
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    flags = os.environ.get("XLA_FLAGS", "")
    extra = f"--xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}"
    os.environ["XLA_FLAGS"] = f"{flags} {extra}".strip()


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (str, int)) or v is None else repr(float(v)) for v in r])
    return path


def _dataset(cfg: RunConfig):
    from gpssm.ssm import Dataset, make_kink_dataset

    if cfg.dataset is None:
        return make_kink_dataset(cfg.seed, cfg.T)
    if not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset {cfg.dataset} not found")
    return Dataset.load(cfg.dataset)


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    from gpssm.ssm import make_kink_dataset

    ds = make_kink_dataset(cfg.seed, cfg.T)
    csv_path, meta_path = ds.save(out / "data.csv")
    log.info("wrote %s and %s", csv_path, meta_path)
    return EXIT_OK


def cmd_fit(cfg: RunConfig, out: Path) -> int:
    import numpy as np

    from gpssm.estimator import GPSSM
    from gpssm.experiment import covered_mask, transition_metrics
    from gpssm.ssm import kink

    ds = _dataset(cfg)
    est = GPSSM(
        variant=cfg.variant, n_inducing=cfg.n_inducing, n_iter=cfg.n_iter, learning_rate=cfg.learning_rate,
        n_samples=cfg.n_samples, chunk_length=cfg.chunk_length, minibatch_chunks=cfg.minibatch_chunks,
        inducing_jitter=cfg.inducing_jitter, learn_kernel=cfg.learn_kernel,
        learn_inducing_inputs=cfg.learn_inducing_inputs, learn_process_noise=cfg.learn_process_noise,
        random_state=cfg.seed,
    ).fit(ds.Y)
    lo, hi, n = float(cfg.grid[0]), float(cfg.grid[1]), int(cfg.grid[2])
    grid = np.linspace(lo, hi, n)
    if est.spec_.D != 1:
        raise ConfigError("grid reports need a 1-D latent state")
    mean, std = est.predict(grid[:, None], return_std=True)
    mean, std = mean[:, 0], std[:, 0]
    _write_csv(out / "grid.csv", ["x", "mean", "std"], zip(grid, mean, std))

    means, covs = est.pairwise_marginals(cfg.pair_samples)
    _write_csv(
        out / "pairs.csv", ["t", "mean_t", "mean_t1", "c00", "c01", "c11"],
        ([t, m[0], m[1], c[0, 0], c[0, 1], c[1, 1]] for t, (m, c) in enumerate(zip(means, covs))),
    )
    trace_path = est.trace_.to_csv(out / "trace.csv")

    has_truth = ds.X_true is not None and ds.meta.get("generator") == "kink"
    mask = covered_mask(grid, ds.X_true) if ds.X_true is not None else None
    if mask is not None and not mask.any():
        mask = None
    metrics = transition_metrics(mean, std, kink(grid) if has_truth else None, mask)
    final = est.elbo(cfg.elbo_samples)
    _write_json(out / "report.json", {
        "config": cfg.as_dict(),
        "elbo": final.as_dict(),
        "metrics": metrics,
        "trace_path": str(Path(trace_path).name),
        "grid_path": "grid.csv",
        "pairs_path": "pairs.csv",
        "n_pairs": len(means),
    })
    log.info("ELBO %.3f (stderr %.3f); metrics %s", final.value, final.stderr, metrics)
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig, out: Path) -> int:
    from gpssm.benchmark import run_benchmark, slopes

    common = dict(lengths=tuple(cfg.bench_lengths), M=cfg.bench_inducing, repeats=cfg.bench_repeats,
                  seed=cfg.seed, n_samples=cfg.bench_samples)
    rows = run_benchmark(variants=tuple(cfg.bench_variants), taus=(None,), **common)
    if cfg.bench_chunked:
        rows += run_benchmark(variants=tuple(cfg.bench_chunked), taus=(cfg.bench_tau,), **common)
    _write_csv(out / "bench.csv", ["variant", "T", "tau", "median_seconds"],
               ([r.variant, r.T, "" if r.tau is None else r.tau, r.median_seconds] for r in rows))
    fitted = [{"variant": v, "tau": tau, "slope": s} for (v, tau), s in slopes(rows).items()]
    _write_json(out / "bench.json", {"config": cfg.as_dict(), "slopes": fitted})
    for row in fitted:
        log.info("%s tau=%s slope %.2f", row["variant"], row["tau"], row["slope"])
    return EXIT_OK


def cmd_oracle(cfg: RunConfig, out: Path) -> int:
    from gpssm.experiment import bound_check
    from gpssm.oracle import fitc_nonmarkov_check

    rows = bound_check(n_configs=cfg.oracle_configs, n_samples=cfg.oracle_samples, seed=cfg.seed)
    violations = sum(r["violation"] for r in rows)
    _write_json(out / "bound_report.json", {"config": cfg.as_dict(), "violations": violations, "checks": rows})

    point = fitc_nonmarkov_check(sigma2=0.0, x1_pair=cfg.nonmarkov_x1, x2=cfg.nonmarkov_x2)
    spread = fitc_nonmarkov_check(sigma2=cfg.nonmarkov_sigma2, x1_pair=cfg.nonmarkov_x1, x2=cfg.nonmarkov_x2)
    _write_json(out / "nonmarkov_report.json", {
        "config": cfg.as_dict(),
        "point_mass": json.loads(point.to_json()),
        "spread": json.loads(spread.to_json()),
    })
    log.info("bound violations: %d of %d; non-Markov deviation %.3g (point mass %.3g)",
             violations, len(rows), spread.max_deviation, point.max_deviation)
    return EXIT_ORACLE if violations else EXIT_OK


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "benchmark": cmd_benchmark, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpssm", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config; omitted keys take their defaults")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory (created if missing)")
    parser.add_argument("--threads", type=int, help="cap on CPU threads")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not log.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False
    try:
        cfg = load_config(args.config, args.subcommand, args.seed, args.out, args.threads)
        limit_threads(cfg.threads)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{cfg.subcommand}_config.json", cfg.as_dict())
        return COMMANDS[cfg.subcommand](cfg, out)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except Exception as e:
        from gpssm.gauss import NonConvergence, NotPositiveDefinite
        from gpssm.optim import DivergenceError

        if isinstance(e, (NotPositiveDefinite, NonConvergence, DivergenceError, FloatingPointError)):
            log.error("numerical failure: %s", e)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
