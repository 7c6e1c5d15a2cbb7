"""Command-line experiment runner.

Each subcommand reads an INI config with sections ``[model]``, ``[init]``
and ``[run]``, writes a CSV table and a JSON report into ``--out``, and
embeds the config echo and package version in both. Outputs depend only on
(config, seed): Monte Carlo work is chunked with per-chunk streams, so
``--threads`` never changes a byte.

Exit codes: 0 success, 2 invalid config, 3 capacity exceeded.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bounds import (
    BasketExperimentConfig,
    basket_block_size,
    basket_experiment,
    chi2_tv_bound,
    comonotonic_pair_moments,
    evolved_block_second_moment_check,
    q2_moments_mc,
    q2_second_moment_bounds,
    q2_second_moment_exact,
    rho_for,
    upper_bound_linear,
    upper_bound_phi,
)
from .dynamics import evolve_exact, fragmentation_times, sample_root
from .errors import CapacityExceeded, ConfigError, RecombError
from .initdist import (
    KINDS,
    StructuredInit,
    basket_init,
    comonotonic_init,
    dense_init,
    monochromatic_init,
    product_init,
    random_marginal_respecting,
)
from .measures import DEFAULT_CAP, MarginalSequence, SpinSpace, product_measure, tv_distance
from .montecarlo import Moments, make_rng, proportion, run_chunks
from .profile import COUNT_CAP, profile_experiment

EXPERIMENTS = (
    "exact-evolve", "mc-evolve", "bounds", "basket-lb", "sharpness-q2", "profile", "fragmentation",
)
MARGINAL_SPECS = ("homogeneous", "per-site", "random")
EXIT_OK, EXIT_INVALID, EXIT_CAPACITY = 0, 2, 3


# -- config ----------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(" ", "").split(",") if x]


def _ints(text: str) -> list[int]:
    """'3' -> [3]; '0..6' -> [0, ..., 6]; '2,4,8' -> [2, 4, 8]."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


@dataclass
class ExperimentConfig:
    """Parsed experiment configuration; ``to_dict`` is the JSON echo."""

    kind: str = ""
    k: int = 2
    spins: list[float] = field(default_factory=list)
    n: int = 2
    marginal: str = "homogeneous"
    p: list[float] = field(default_factory=list)
    site_probs: list[list[float]] = field(default_factory=list)
    delta: float | None = None
    marginal_seed: int = 0
    init: str = "monochromatic"
    b: int | None = None
    sparsity: float = 1.0
    t: list[int] = field(default_factory=lambda: [0])
    samples: int = 10_000
    samples_pi: int = 10_000
    samples_mu: int = 10_000
    s: float = 1.0
    chunk: int = 10_000
    cap: int = DEFAULT_CAP
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        errors: list[str] = []
        cfg = cls()
        m = cp["model"] if cp.has_section("model") else {}
        i = cp["init"] if cp.has_section("init") else {}
        r = cp["run"] if cp.has_section("run") else {}

        def grab(section, sec_name, key, conv, attr=None):
            if key in section:
                try:
                    setattr(cfg, attr or key, conv(section[key]))
                except ValueError as exc:
                    errors.append(f"{sec_name}.{key}: cannot parse {section[key]!r} ({exc})")

        grab(r, "run", "kind", str.strip)
        grab(m, "model", "k", int)
        grab(m, "model", "spins", _floats)
        grab(m, "model", "n", int)
        grab(m, "model", "marginal", str.strip)
        grab(m, "model", "p", _floats)
        grab(m, "model", "delta", float)
        grab(m, "model", "marginal_seed", int)
        if "sites" in m:
            try:
                cfg.site_probs = [_floats(row) for row in m["sites"].split(";") if row.strip()]
            except ValueError as exc:
                errors.append(f"model.sites: cannot parse ({exc})")
        grab(i, "init", "kind", str.strip, "init")
        grab(i, "init", "b", int)
        grab(i, "init", "sparsity", float)
        grab(r, "run", "t", _ints)
        for key in ("samples", "samples_pi", "samples_mu", "chunk", "cap", "seed", "threads"):
            grab(r, "run", key, int)
        grab(r, "run", "s", float)
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        with open(path) as fh:
            cp.read_file(fh)
        return cls.from_parser(cp)

    def to_dict(self) -> dict:
        # the thread count is left out: it must not change any output byte
        d = asdict(self)
        d.pop("threads")
        return d

    # -- model construction ----------------------------------------------

    def space(self) -> SpinSpace:
        return SpinSpace(tuple(self.spins)) if self.spins else SpinSpace.range(self.k)

    def probs(self) -> np.ndarray:
        """(n, k) marginal table."""
        if self.marginal == "homogeneous":
            return np.tile(np.asarray(self.p, dtype=float), (self.n, 1))
        if self.marginal == "per-site":
            return np.asarray(self.site_probs, dtype=float)
        rng = make_rng(self.marginal_seed, "marginals")
        return MarginalSequence.random(self.space(), self.n, self.delta, rng).probs

    def sequence(self) -> MarginalSequence:
        return MarginalSequence.from_array(self.space(), self.probs())

    def structured_init(self, seq: MarginalSequence | None = None) -> StructuredInit:
        seq = seq or self.sequence()
        if self.init == "monochromatic":
            return monochromatic_init(seq.space, self.p, self.n)
        if self.init == "comonotonic-global":
            return comonotonic_init(seq)
        if self.init == "basket-blockwise":
            return basket_init(seq, self.b)
        if self.init == "product-stationary":
            return product_init(seq)
        rng = make_rng(self.seed, "dense-init")
        return dense_init(random_marginal_respecting(seq, rng, self.sparsity, cap=self.cap), seq)


def validate(cfg: ExperimentConfig) -> list[str]:
    """Field-level violations; an empty list means the config is usable."""
    v: list[str] = []
    if cfg.kind and cfg.kind not in EXPERIMENTS:
        v.append(f"run.kind: unknown experiment {cfg.kind!r}")
    if cfg.k < 2:
        v.append(f"model.k: need k >= 2, got {cfg.k}")
    if cfg.n < 1:
        v.append(f"model.n: need n >= 1, got {cfg.n}")
    if cfg.spins:
        if len(cfg.spins) != cfg.k:
            v.append(f"model.spins: {len(cfg.spins)} values for k = {cfg.k}")
        elif any(b <= a for a, b in zip(cfg.spins, cfg.spins[1:])):
            v.append("model.spins: values must be strictly increasing")
    if cfg.delta is not None and not 0.0 < cfg.delta <= 1.0 / max(cfg.k, 1):
        v.append(f"model.delta: need 0 < delta <= 1/k, got {cfg.delta}")

    if cfg.marginal not in MARGINAL_SPECS:
        v.append(f"model.marginal: expected one of {MARGINAL_SPECS}, got {cfg.marginal!r}")
    elif cfg.marginal == "homogeneous" and len(cfg.p) != cfg.k:
        v.append(f"model.p: {len(cfg.p)} entries for k = {cfg.k}")
    elif cfg.marginal == "per-site":
        if len(cfg.site_probs) != cfg.n:
            v.append(f"model.sites: {len(cfg.site_probs)} rows for n = {cfg.n}")
        for j, row in enumerate(cfg.site_probs):
            if len(row) != cfg.k:
                v.append(f"model.sites[{j}]: {len(row)} entries for k = {cfg.k}")
    elif cfg.marginal == "random" and (cfg.delta is None or cfg.delta >= 1.0 / cfg.k):
        v.append("model.delta: random marginals need a declared delta below 1/k")
    if not v and cfg.marginal != "random":
        probs = cfg.probs()
        name = "model.p" if cfg.marginal == "homogeneous" else "model.sites"
        for j, row in enumerate(probs[:1] if cfg.marginal == "homogeneous" else probs):
            where = name if cfg.marginal == "homogeneous" else f"{name}[{j}]"
            if abs(row.sum() - 1.0) > 1e-12:
                v.append(f"{where}: sums to {row.sum()!r}, not 1")
            if np.any(row <= 0.0) or np.any(row >= 1.0):
                v.append(f"{where}: entries must lie in (0, 1)")
            elif cfg.delta is not None:
                actual = float(min(row.min(), 1.0 - row.max()))
                if actual < cfg.delta:
                    v.append(f"{where}: actual delta {actual!r} below declared delta {cfg.delta!r}")

    if cfg.init not in KINDS:
        v.append(f"init.kind: expected one of {KINDS}, got {cfg.init!r}")
    if cfg.init == "monochromatic" and cfg.marginal != "homogeneous":
        v.append("init.kind: monochromatic needs homogeneous marginals")
    if cfg.init == "basket-blockwise" and cfg.b is not None and not 1 <= cfg.b <= cfg.n:
        v.append(f"init.b: need 1 <= b <= n = {cfg.n}, got {cfg.b}")
    if cfg.init == "basket-blockwise" and cfg.b is None and cfg.kind != "basket-lb":
        v.append("init.b: basket-blockwise needs a block size outside basket-lb")
    if cfg.init == "dense" and cfg.k ** cfg.n > cfg.cap:
        v.append(f"init.kind: dense init needs k^n = {cfg.k ** cfg.n} <= cap {cfg.cap}")

    if any(t < 0 for t in cfg.t):
        v.append("run.t: times must be nonnegative")
    for key in ("samples", "samples_pi", "samples_mu", "chunk", "threads"):
        if getattr(cfg, key) < 1:
            v.append(f"run.{key}: must be positive")
    if cfg.seed < 0:
        v.append("run.seed: must be nonnegative")
    if cfg.kind in ("exact-evolve",) and cfg.k ** cfg.n > cfg.cap:
        v.append(f"model.n: k^n = {cfg.k ** cfg.n} exceeds cap {cfg.cap} for exact evolution")
    if cfg.kind == "profile":
        if cfg.marginal != "homogeneous":
            v.append("model.marginal: profile needs homogeneous marginals")
        if cfg.s <= 0:
            v.append("run.s: must be positive")
    if cfg.kind == "basket-lb" and cfg.init != "basket-blockwise":
        v.append("init.kind: basket-lb needs basket-blockwise")
    return v


# -- output ----------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "" if x is None else str(x)


def _header(cfg: ExperimentConfig, command: str) -> dict:
    return {"artifact": "nlrecomb", "version": __version__, "command": command, "config": cfg.to_dict()}


def write_table(path: Path, head: dict, columns: Sequence[str], rows: Sequence[Sequence]) -> None:
    """CSV with the run header as '#' comment lines, then the table."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {head['artifact']} {head['version']} {head['command']}\n")
        fh.write("# config " + json.dumps(head["config"], sort_keys=True) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    return x


def write_report(path: Path, head: dict, body: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable({**head, **body}), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- experiments -----------------------------------------------------------


def run_exact_evolve(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    seq = cfg.sequence()
    init = cfg.structured_init(seq)
    pi = product_measure(seq, cfg.cap)
    trace = evolve_exact(init.dense(cfg.cap), max(cfg.t), cfg.cap)
    rows = []
    for t, mu in zip(trace.times, trace.steps):
        rows.append((t, tv_distance(mu, pi), upper_bound_linear(cfg.n, cfg.k, t),
                     chi2_tv_bound(mu, pi), "exact"))
    write_table(out / "exact_evolve.csv", head,
                ("t", "tv_to_pi", "upper_bound", "l2_bound", "provenance"), rows)
    violations = [r[0] for r in rows if r[1] > r[2]]
    write_report(out / "exact_evolve.json", head,
                 {"rows": len(rows), "bound_violations": violations, "final_tv": rows[-1][1]})


def run_mc_evolve(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    seq = cfg.sequence()
    init = cfg.structured_init(seq)
    sampler = init.sampler()
    exact = None
    if cfg.k ** cfg.n <= cfg.cap:
        trace = evolve_exact(init.dense(cfg.cap), max(cfg.t), cfg.cap)
        exact = [m.site_marginals() for m in trace.steps]
    rows, worst = [], 0.0
    for t in cfg.t:
        def work(rng, size, t=t):
            sigma = sample_root(sampler, t, rng, size)
            onehot = (sigma[:, :, None] == np.arange(cfg.k)).reshape(size, -1)
            return Moments.of(onehot)

        m = Moments.merge_all(run_chunks(work, cfg.samples, seed=cfg.seed, stream=f"mc-evolve-{t}",
                                         chunk=cfg.chunk, threads=cfg.threads))
        est = m.estimates()
        for i in range(cfg.n):
            for l in range(cfg.k):
                e = est[i * cfg.k + l]
                ref = None if exact is None else float(exact[t][i, l])
                if ref is not None and e.se > 0:
                    worst = max(worst, abs(e.mean - ref) / e.se)
                rows.append((t, i, l, e.mean, e.se, e.n, ref, "mc:site-frequency"))
    write_table(out / "mc_evolve.csv", head,
                ("t", "site", "spin", "estimate", "se", "samples", "exact", "provenance"), rows)
    write_report(out / "mc_evolve.json", head,
                 {"rows": len(rows), "exact_available": exact is not None, "max_abs_z": worst})


def run_bounds(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    exact = None
    if cfg.k ** cfg.n <= cfg.cap:
        seq = cfg.sequence()
        pi = product_measure(seq, cfg.cap)
        trace = evolve_exact(cfg.structured_init(seq).dense(cfg.cap), max(cfg.t), cfg.cap)
        exact = [tv_distance(m, pi) for m in trace.steps]
    rows = []
    for t in cfg.t:
        ph = upper_bound_phi(cfg.n, cfg.k, t)
        rows.append((t, cfg.n * 2.0**-t, upper_bound_linear(cfg.n, cfg.k, t), ph.value,
                     ph.in_regime, None if exact is None else exact[t], "exact"))
    write_table(out / "bounds.csv", head,
                ("t", "s", "upper_linear", "upper_phi", "phi_in_regime", "exact_tv", "provenance"),
                rows)
    viol = [r[0] for r in rows if r[5] is not None and (r[5] > r[2] or (r[4] and r[5] > r[3]))]
    write_report(out / "bounds.json", head, {"rows": len(rows), "violations": viol})


def run_basket(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    seq = cfg.sequence()
    rho = rho_for(seq)
    rows, results = [], []
    for t in cfg.t:
        b = cfg.b if cfg.b is not None else basket_block_size(cfg.n, t, rho)
        bc = BasketExperimentConfig(cfg.n, t, b, samples_pi=cfg.samples_pi,
                                    samples_mu=cfg.samples_mu, seed=cfg.seed,
                                    chunk=min(cfg.chunk, 500), threads=cfg.threads)
        init = basket_init(seq, b)
        res = basket_experiment(bc, init)
        second = evolved_block_second_moment_check(bc, init, rho)
        results.append({"t": t, "basket": res.as_dict(), "second_moment": second.as_dict()})
        rows.append((t, cfg.n * 2.0**-t, b, bc.a, bc.degenerate, res.pi_A.mean, res.pi_A.se,
                     res.mut_A.mean, res.mut_A.se, res.mut_block_hit.mean, res.mut_block_hit.se,
                     res.tv_lower, cfg.samples_pi, cfg.samples_mu, "mc:event-frequency"))
    write_table(out / "basket_lb.csv", head,
                ("t", "s", "b", "a", "a_below_15", "pi_A", "pi_A_se", "mut_A", "mut_A_se",
                 "mut_block_hit", "mut_block_hit_se", "tv_lower", "samples_pi", "samples_mu",
                 "provenance"), rows)
    write_report(out / "basket_lb.json", head, {"rho_hat": rho, "runs": results})


def run_q2(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    seq = cfg.sequence()
    pm = comonotonic_pair_moments(seq)
    rho = rho_for(seq)
    rows = []
    for t in cfg.t:
        est = q2_moments_mc(pm, seq, t, cfg.samples, cfg.seed, stream=f"q2-{t}",
                            chunk=min(cfg.chunk, 2000), threads=cfg.threads)
        lo, hi = q2_second_moment_bounds(cfg.n, cfg.k, t, rho)
        rows.append((t, cfg.n * 2.0**-t, q2_second_moment_exact(pm, t), est.second_moment.mean,
                     est.second_moment.se, est.mean.mean, est.mean.se, cfg.samples, lo, hi,
                     "mc:sigma~pi"))
    write_table(out / "sharpness_q2.csv", head,
                ("t", "s", "q2_sq_exact", "q2_sq_estimate", "q2_sq_se", "q2_mean", "q2_mean_se",
                 "samples", "lower", "upper", "provenance"), rows)
    write_report(out / "sharpness_q2.json", head, {"rho_hat": rho, "rows": len(rows)})


def run_profile(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    rows = profile_experiment(cfg.space(), cfg.p, cfg.s, cfg.t, threads=cfg.threads)
    write_table(out / "profile.csv", head,
                ("k", "s", "t", "n", "tv_exact", "tv_gaussian", "gap",
                 "alpha_domain_failure_rate", "provenance"),
                [tuple(r) + ("exact",) for r in rows])
    write_report(out / "profile.json", head,
                 {"limit": rows[0].tv_gaussian if rows else None,
                  "final_gap": rows[-1].gap if rows else None})


def run_fragmentation(cfg: ExperimentConfig, out: Path, head: dict) -> None:
    ts = np.asarray(cfg.t)

    def work(rng, size):
        tau = fragmentation_times(cfg.n, size, rng)
        return (tau[:, None] > ts[None, :]).sum(axis=0)

    parts = run_chunks(work, cfg.samples, seed=cfg.seed, stream="fragmentation",
                       chunk=cfg.chunk, threads=cfg.threads)
    hits = sum(parts)
    rows = []
    for t, h in zip(cfg.t, hits):
        e = proportion(int(h), cfg.samples)
        rows.append((t, e.mean, e.se, e.n, min(1.0, math.comb(cfg.n, 2) * 2.0**-t),
                     "mc:survival-frequency"))
    write_table(out / "fragmentation.csv", head,
                ("t", "p_tau_gt_t", "se", "samples", "bound", "provenance"), rows)
    write_report(out / "fragmentation.json", head, {"rows": len(rows)})


RUNNERS = {
    "exact-evolve": run_exact_evolve,
    "mc-evolve": run_mc_evolve,
    "bounds": run_bounds,
    "basket-lb": run_basket,
    "sharpness-q2": run_q2,
    "profile": run_profile,
    "fragmentation": run_fragmentation,
}


def run(cfg: ExperimentConfig, out: Path) -> int:
    """Validate and run ``cfg.kind``; returns the exit status."""
    problems = validate(cfg)
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_INVALID
    if cfg.kind == "profile":
        N = 2 ** max(cfg.t)
        n = max(1, round(cfg.s * N))
        if math.comb(N + cfg.k - 1, cfg.k - 1) * math.comb(n + cfg.k - 1, cfg.k - 1) > COUNT_CAP:
            print("capacity: profile count evolution too large", file=sys.stderr)
            return EXIT_CAPACITY
    out.mkdir(parents=True, exist_ok=True)
    try:
        RUNNERS[cfg.kind](cfg, out, _header(cfg, cfg.kind))
    except CapacityExceeded as exc:
        print(f"capacity: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except RecombError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlrecomb", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"nlrecomb {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS + ("validate",):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", type=Path, default=Path("out"))
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
    except (OSError, configparser.Error) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_INVALID
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.command == "validate":
        problems = validate(cfg)
        for p in problems:
            print(p)
        if not problems:
            print("ok")
        return EXIT_INVALID if problems else EXIT_OK
    cfg.kind = args.command
    return run(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
