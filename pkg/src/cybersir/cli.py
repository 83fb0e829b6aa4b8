"""Command-line entry point.

Subcommands read a JSON configuration (defaults via ``--print-config``),
write plot-ready CSV/JSON files into the output directory and report
progress on standard error. Exit codes: 0 success, 1 input error,
2 numerical or convergence warning.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import io as fio
from .calibration import (CalibrationConfig, InfectionPanel, ThetaSpec, allocate_initial_infected,
                          allocate_populations, build_firm_proxy, calibrate, fit_zipf_counts, initial_state)
from .firmmodel import ZipfSpec
from .portfolio import (AepConfig, LossDistribution, aep_exact, distribution_summary, episode_counts,
                        simulate_episodes)
from .sir import peak
from .stochproc import RngStream, TimeGrid
from .synth import (REFERENCE_INITIAL_SUBUNITS, REFERENCE_ZIPF, SECTOR_SHARES,
                    SyntheticSpec, reference_portfolio, synthetic_panel, synthetic_revenues)

log = logging.getLogger("cybersir")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


@dataclass
class RunConfig:
    """All settings of a batch run.

    Attributes:
        seed: Master seed for every random stream.
        horizon_days: Episode length T in days.
        n_scenarios: Monte Carlo scenarios M.
        n_outer: Compound-Poisson replications for the AEP.
        upsilon: Mean number of episodes per horizon.
        severity: Beta shapes of the loss fraction.
        theta: Contagion coefficients used when no theta file exists.
        zipf: Firm-size law (exponent, scale, max_size).
        initial_subunits: Infected subunits on day 0, split by k h_k.
        paths: Input and output locations.
        panel_semantics: "current" (infected counts) or "new" (daily new infections).
        bootstrap_aep: Resample the simulated loss pool instead of resimulating.
        substeps: Euler sub-steps per day.
        cdf_window: Days (from, to) of the loss CDF.
        aep_max: Largest AEP threshold; 0 picks twice the largest simulated loss.
        aep_points: Number of AEP thresholds.
        checkpoints: Days summarized by ``report``.
        calibration: Optimizer settings.
        synth: Synthetic data settings.
    """

    seed: int = 20240501
    horizon_days: int = 100
    n_scenarios: int = 1000
    n_outer: int = 10000
    upsilon: float = 0.105
    severity: tuple = (50.0, 10.0)
    theta: dict = field(default_factory=lambda: asdict(ThetaSpec()))
    zipf: dict = field(default_factory=lambda: {"exponent": REFERENCE_ZIPF.exponent, "scale": REFERENCE_ZIPF.scale,
                                                 "max_size": REFERENCE_ZIPF.max_size})
    initial_subunits: float = REFERENCE_INITIAL_SUBUNITS
    paths: dict = field(default_factory=lambda: {
        "portfolio": "data/portfolio.csv",
        "revenues": "data/revenues.csv",
        "infections": "data/infections.csv",
        "sector_rates": "data/sector_rates.csv",
        "theta": "out/theta.json",
        "outdir": "out",
    })
    panel_semantics: str = "current"
    bootstrap_aep: bool = False
    substeps: int = 1
    cdf_window: tuple = (0, 100)
    aep_max: float = 0.0
    aep_points: int = 201
    checkpoints: tuple = (7, 24, 38, 52, 93)
    calibration: dict = field(default_factory=lambda: {
        "n_scenarios": 100, "n_starts": 8, "max_evals": 3000, "xatol": 1e-4, "fatol": 1e-10})
    synth: dict = field(default_factory=lambda: {"n_firms": 3000, "years": 5, "revenue_dispersion": 0.3, "rho": 0.5})

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be at least 1")
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be at least 1")
        if self.n_outer < 1:
            raise ValueError("n_outer must be at least 1")
        if min(self.severity) <= 0:
            raise ValueError("severity shapes must be positive")
        if self.panel_semantics not in ("current", "new"):
            raise ValueError("panel_semantics must be 'current' or 'new'")

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        base = asdict(cls())
        if path:
            if not os.path.exists(path):
                raise fio.InputError(f"{path}: file not found")
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise fio.InputError(f"{path}: invalid JSON ({exc})") from None
            unknown = set(doc) - set(base)
            if unknown:
                raise fio.InputError(f"{path}: unknown key(s) {', '.join(sorted(unknown))}")
            for k, v in doc.items():
                if isinstance(base[k], dict) and isinstance(v, dict):
                    base[k] = {**base[k], **v}
                else:
                    base[k] = v
            base["_dir"] = os.path.dirname(os.path.abspath(path))
        root = base.pop("_dir", os.getcwd())
        base["paths"] = {k: v if os.path.isabs(v) else os.path.join(root, v) for k, v in base["paths"].items()}
        for k in ("severity", "cdf_window", "checkpoints"):
            base[k] = tuple(base[k])
        try:
            return cls(**base)
        except (TypeError, ValueError) as exc:
            raise fio.InputError(f"configuration: {exc}") from None

    # derived objects
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, float(self.horizon_days), 1.0)

    def zipf_spec(self) -> ZipfSpec:
        return ZipfSpec(float(self.zipf["exponent"]), float(self.zipf["scale"]), int(self.zipf["max_size"]))

    def out(self, name: str) -> str:
        return os.path.join(self.paths["outdir"], name)


def _theta(cfg: RunConfig) -> ThetaSpec:
    path = cfg.paths["theta"]
    if os.path.exists(path):
        log.info("using theta from %s", path)
        return fio.read_theta(path)
    try:
        return ThetaSpec(**cfg.theta)
    except (TypeError, ValueError) as exc:
        raise fio.InputError(f"configuration theta: {exc}") from None


def _portfolio(cfg: RunConfig):
    path = cfg.paths["portfolio"]
    if os.path.exists(path):
        return fio.read_portfolio(path)
    log.info("%s not found; using the reference synthetic portfolio", path)
    return reference_portfolio()


def _setup(cfg: RunConfig):
    theta = _theta(cfg)
    theta.cir_specs()
    zipf = cfg.zipf_spec()
    h = allocate_populations(theta.h_star, zipf).astype(float)
    infected = allocate_initial_infected(cfg.initial_subunits, h)
    return theta, h, initial_state(h, infected)


def _episodes(cfg: RunConfig, n: int, with_approx: bool = False):
    theta, h, state = _setup(cfg)
    firms = _portfolio(cfg)
    batch = simulate_episodes(firms, theta, state, cfg.grid(), RngStream(cfg.seed), n, tuple(cfg.severity),
                              cfg.substeps, h.sum(), with_approx)
    return firms, h, batch


def _write_cdf(cfg: RunConfig, batch) -> LossDistribution:
    a, b = cfg.cdf_window
    dist = batch.loss_distribution(a, b)
    x = np.unique(dist.samples)
    fio.write_csv(cfg.out("cdf.csv"), ["x", "F"], zip(x, dist.cdf(x)))
    return dist


def cmd_calibrate(cfg: RunConfig) -> int:
    panel = fio.read_infections(cfg.paths["infections"], int(cfg.zipf["max_size"]))
    zipf = cfg.zipf_spec()
    if os.path.exists(cfg.paths["revenues"]):
        series, sectors = fio.read_revenues(cfg.paths["revenues"])
        firms = build_firm_proxy(series, sectors)
        counts = np.bincount([min(f.size, zipf.max_size) for f in firms], minlength=zipf.max_size + 1)[1:]
        try:
            zipf = fit_zipf_counts(counts)
            log.info("size law fitted on %d firms: exponent %.4f, scale %.4f", len(firms), zipf.exponent, zipf.scale)
        except ValueError as exc:
            log.warning("size fit skipped (%s); using configured law", exc)
    if cfg.panel_semantics == "new":
        th = ThetaSpec(**cfg.theta)
        dur = 1.0 / (th.gamma1_0 / np.cumsum(1.0 / np.arange(1, panel.K + 1)))
        panel = InfectionPanel.from_new_infections(panel.counts, dur)
    c = cfg.calibration
    ccfg = CalibrationConfig(n_scenarios=int(c["n_scenarios"]), n_starts=int(c["n_starts"]),
                             max_evals=int(c["max_evals"]), xatol=float(c["xatol"]), fatol=float(c["fatol"]),
                             substeps=cfg.substeps)
    res = calibrate(panel, zipf, ccfg, RngStream(cfg.seed), x0=ThetaSpec(**cfg.theta))
    doc = res.to_dict()
    doc["seed"] = cfg.seed
    doc["zipf"] = {"exponent": zipf.exponent, "scale": zipf.scale, "max_size": zipf.max_size}
    fio.write_json(cfg.paths["theta"], doc)
    log.info("J2=%.6g converged=%s evaluations=%d", res.j2, res.converged, res.n_evals)
    if res.unidentifiable:
        log.warning("panel has no infections: theta is not identifiable")
    return EXIT_OK if res.converged else EXIT_NUMERIC


def cmd_simulate(cfg: RunConfig) -> int:
    firms, h, batch = _episodes(cfg, cfg.n_scenarios)
    g = cfg.grid()
    mean_i = batch.mean_i
    value, day = peak(mean_i, h)
    log.info("mean trajectory peak: %.1f infected subunits on day %d", value, day)
    rows = [(t, k + 1, batch.mean_s[u, k], mean_i[u, k], batch.mean_r[u, k], batch.mean_force[u])
            for u, t in enumerate(g.points) for k in range(h.size)]
    fio.write_csv(cfg.out("trajectory.csv"), ["day", "k", "S_k", "I_k", "R_k", "Y"], rows, unit=False)
    fio.write_csv(cfg.out("infected_subunits.csv"), ["day", "mean", "q05", "q95"],
                  zip(g.points, batch.infected_subunits.mean(0), *np.quantile(batch.infected_subunits, [0.05, 0.95], 0)),
                  unit=False)
    fio.write_csv(cfg.out("no_infection.csv"), ["size", "p_no_infection", "firms"],
                  [(k + 1, p, int(n)) for k, (p, n) in enumerate(zip(batch.no_infection_probability(), batch.firm_counts))
                   if n > 0], unit=False)
    fio.write_csv(cfg.out("losses_daily.csv"), ["day", "scenario", "loss"],
                  ((g.points[u], m, batch.daily_losses[m, u]) for m in range(batch.n_scenarios) for u in range(g.n_steps)))
    _write_cdf(cfg, batch)
    fio.write_csv(cfg.out("output.csv"), ["day", "expected_output"], zip(g.points, batch.expected_output()))
    return EXIT_OK


def cmd_cdf(cfg: RunConfig) -> int:
    _, _, batch = _episodes(cfg, cfg.n_scenarios)
    dist = _write_cdf(cfg, batch)
    log.info("loss over days %s: %s", cfg.cdf_window, distribution_summary(dist))
    return EXIT_OK


def cmd_aep(cfg: RunConfig) -> int:
    counts_cfg = AepConfig(cfg.upsilon, cfg.n_outer, [0.0])
    rng = RngStream(cfg.seed)
    n_ep = int(episode_counts(counts_cfg, rng).sum())
    n_sim = cfg.n_scenarios if cfg.bootstrap_aep else max(n_ep, 1)
    firms, h, batch = _episodes(cfg, n_sim, with_approx=True)
    exact_pool = batch.total_losses
    approx_pool = batch.approx_losses
    top = cfg.aep_max or 2.0 * max(float(exact_pool.max()), float(approx_pool.max()), 1e-9)
    x = np.linspace(0.0, top, cfg.aep_points)
    acfg = AepConfig(cfg.upsilon, cfg.n_outer, x, bootstrap=cfg.bootstrap_aep)
    if cfg.bootstrap_aep:
        ex = aep_exact(LossDistribution(exact_pool), acfg, rng)
        ap = aep_exact(LossDistribution(approx_pool), acfg, rng)
    else:
        ex = aep_exact(lambda idx: exact_pool[idx], acfg, rng)
        ap = aep_exact(lambda idx: approx_pool[idx], acfg, rng)
    freq = ex.count_frequencies(2)
    log.info("episode counts: P(0)=%.4f P(1)=%.4f P(2)=%.5f (upsilon=%g, %d replications)",
             freq[0], freq[1], freq[2], cfg.upsilon, cfg.n_outer)
    fio.write_csv(cfg.out("aep.csv"), ["x", "AEP_exact", "AEP_approx"], zip(x, ex.probability, ap.probability))
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    s = cfg.synth
    theta = ThetaSpec(**cfg.theta)
    spec = SyntheticSpec(n_firms=int(s["n_firms"]), zipf=cfg.zipf_spec(), years=int(s["years"]),
                         revenue_dispersion=float(s["revenue_dispersion"]), theta=theta,
                         horizon_days=cfg.horizon_days, initial_subunits=cfg.initial_subunits, rho=float(s["rho"]))
    rng = RngStream(cfg.seed, 11)
    series, sectors, _ = synthetic_revenues(spec, rng.child(1))
    rows = [(fid, sectors[fid], 2019 + y, v) for fid, ser in series.items() for y, v in enumerate(ser)]
    fio.write_csv(cfg.paths["revenues"], fio.REVENUE_COLUMNS, rows)
    fio.write_infections(cfg.paths["infections"], synthetic_panel(spec, rng.child(2)))
    fio.write_csv(cfg.paths["sector_rates"], fio.SECTOR_COLUMNS, SECTOR_SHARES.items(), unit=False)
    fio.write_portfolio(cfg.paths["portfolio"], reference_portfolio(rho=float(s["rho"])))
    log.info("synthetic data written next to %s", cfg.paths["infections"])
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    """Summaries of existing outputs as JSON on standard output."""
    out = {}
    path = cfg.out("losses_daily.csv")
    if not os.path.exists(path):
        raise fio.InputError(f"{path}: file not found (run 'simulate' first)")
    data = {}
    for n, row in fio._rows(path, ["day", "scenario", "loss"]):
        data.setdefault(int(float(row["scenario"])), {})[float(row["day"])] = float(row["loss"])
    days = sorted({d for v in data.values() for d in v})
    mat = np.array([[v.get(d, 0.0) for d in days] for _, v in sorted(data.items())])
    out["total_loss"] = distribution_summary(LossDistribution(mat.sum(axis=1)))
    out["daily_loss"] = {str(int(d)): distribution_summary(LossDistribution(mat[:, days.index(d)]))
                         for d in cfg.checkpoints if d in days}
    ipath = cfg.out("infected_subunits.csv")
    if os.path.exists(ipath):
        series = [(float(r["day"]), float(r["mean"])) for _, r in fio._rows(ipath, ["day", "mean"])]
        d, v = max(series, key=lambda p: p[1])
        out["peak"] = {"day": d, "infected_subunits": v}
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "cdf": cmd_cdf,
    "aep": cmd_aep,
    "synth": cmd_synth,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cybersir", description="Cyber contagion and portfolio loss simulation.")
    p.add_argument("command", nargs="?", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenarios", type=int, help="Monte Carlo scenarios M")
    p.add_argument("--outer", type=int, help="compound-Poisson replications")
    p.add_argument("--upsilon", type=float, help="mean episodes per horizon")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        over = {"seed": args.seed, "n_scenarios": args.scenarios, "n_outer": args.outer, "upsilon": args.upsilon}
        d = asdict(cfg)
        d.update({k: v for k, v in over.items() if v is not None})
        cfg = RunConfig(**d)
        if args.print_config:
            json.dump(asdict(cfg), sys.stdout, indent=2)
            sys.stdout.write("\n")
            return EXIT_OK
        if args.command is None:
            build_parser().print_usage(sys.stderr)
            return EXIT_INPUT
        return COMMANDS[args.command](cfg)
    except fio.InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
