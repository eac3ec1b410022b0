"""Command-line pipeline: simulate, diagnose, estimate, bootstrap, report.

Every subcommand reads either a CSV (``--input``) or the calibrated synthetic
preset (``--preset facet``).  Settings come from, in increasing priority,
built-in defaults, a flat ``key = value`` file given with ``--config`` and
command-line flags.  All outputs are written atomically.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 estimation error.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from . import __version__, bootstrap, diagnostics, gest, iptw, synth
from ._io import write_json
from .errors import ConfigError, GestkitError
from .panel import ColumnMapping, Panel, SampleFlow, load_panel, sample_flow, summarize_groups, write_panel

log = logging.getLogger("gestkit")

PRESETS = ("facet",)
BOOT_SEARCH = ("walk", "grid")
EXIT_OK = 0


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    preset: str | None = None
    unit: str = "unit_id"
    treatment: str = "treatment"
    outcome: str = "outcome"
    covariates: tuple = ()
    drop_missing: bool = False
    grid: tuple = gest.DEFAULT_GRID
    truncate_pct: float = 99.0
    bootstrap: int = 0
    jack_groups: int = 1000
    level: float = 0.95
    seed: int = 42
    boot_search: str = "walk"
    n: int | None = None
    psi_true: float | None = None
    out: str = "out"
    workers: int = 1

    def validate(self, *, need_source=True):
        if need_source and (self.input is None) == (self.preset is None):
            raise ConfigError("give exactly one of --input or --preset")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.input is not None and not self.covariates:
            raise ConfigError("--covariates is required with --input")
        if not 50.0 < self.truncate_pct <= 100.0:
            raise ConfigError(f"truncate_pct must lie in (50, 100], got {self.truncate_pct}")
        if self.bootstrap and self.bootstrap < 100:
            raise ConfigError(f"bootstrap B must be 0 (off) or >= 100, got {self.bootstrap}")
        if self.jack_groups < 20:
            raise ConfigError(f"jack_groups must be >= 20, got {self.jack_groups}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")
        if self.boot_search not in BOOT_SEARCH:
            raise ConfigError(f"boot_search must be one of {BOOT_SEARCH}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        gest.grid_points(*self.grid)
        return self

    def echo(self):
        """Settings that can change results.  ``out`` and ``workers`` are left
        out so the report bytes do not depend on where or how it was run."""
        d = asdict(self)
        del d["out"], d["workers"]
        d["grid"] = list(self.grid)
        d["covariates"] = list(self.covariates)
        return d

    @property
    def mapping(self):
        return ColumnMapping(self.unit, self.treatment, self.outcome, self.covariates)


# --------------------------------------------------------------------------- config parsing


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_grid(text):
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 3:
        raise ConfigError(f"grid must be LO,HI,STEP, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"grid must be numeric, got {text!r}") from exc


def _parse_list(text):
    return tuple(c.strip() for c in str(text).split(",") if c.strip())


def _optional_int(text):
    return None if str(text).strip().lower() in ("", "none") else int(text)


def _optional_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


_CONVERTERS = {
    "input": str,
    "preset": str,
    "unit": str,
    "treatment": str,
    "outcome": str,
    "covariates": _parse_list,
    "drop_missing": _parse_bool,
    "grid": _parse_grid,
    "truncate_pct": float,
    "bootstrap": int,
    "jack_groups": int,
    "level": float,
    "seed": int,
    "boot_search": str,
    "n": _optional_int,
    "psi_true": _optional_float,
    "out": str,
    "workers": int,
}


def _convert(key, value):
    try:
        return _CONVERTERS[key](value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment.  Keys use underscores."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    out = {}
    for key, value in parser["run"].items():
        key = key.replace("-", "_")
        if key not in _CONVERTERS:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        out[key] = _convert(key, value)
    return out


def build_config(args) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = _convert(f.name, v) if isinstance(v, str) else v
    return RunConfig(**values)


# --------------------------------------------------------------------------- stages


@contextlib.contextmanager
def stage(module, operation):
    """Tag any package error raised inside with ``module.operation``."""
    try:
        yield
    except GestkitError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = f"{module}.{operation}"
        raise


def preset_config(cfg: RunConfig):
    overrides = {"seed": cfg.seed}
    if cfg.n is not None:
        overrides["n"] = cfg.n
    if cfg.psi_true is not None:
        overrides["psi_true"] = cfg.psi_true
    return synth.facet_preset(**overrides)


def load_input(cfg: RunConfig) -> tuple[Panel, SampleFlow, dict | None]:
    """The modelling panel, its sample flow and (for a preset) the ground truth."""
    if cfg.preset is not None:
        with stage("synth", "facet_cohort"):
            raw, core, truth, book = synth.facet_cohort(preset_config(cfg))
        with stage("panel", "sample_flow"):
            panel, flow = sample_flow(raw, synth.facet_filters(raw.schema), initial_stage=book.expected_flow()[0][0])
            panel = panel.select_covariates(cfg.covariates or core.schema)
        return panel, flow, truth.to_dict()
    with stage("panel", "load_panel"):
        panel = load_panel(cfg.input, cfg.mapping, drop_missing=cfg.drop_missing)
        panel, flow = sample_flow(panel, initial_stage="Input")
    return panel, flow, None


def run_diagnostics(panel, cfg):
    with stage("iptw", "fit_propensity"):
        scores = iptw.fit_propensity(panel)
    with stage("iptw", "stabilized_weights"):
        raw = iptw.stabilized_weights(scores, panel)
        trunc = iptw.truncate_weights(raw, cfg.truncate_pct)
    with stage("diagnostics", "balance_report"):
        balance = diagnostics.balance_report(panel, scores, trunc, raw)
    return scores, raw, trunc, balance


def run_estimates(panel, cfg, trunc):
    with stage("gest", "g_estimate"):
        g = gest.g_estimate(panel, cfg.grid)
    with stage("iptw", "fit_msm"):
        msm = iptw.fit_msm(panel, trunc)
    return g, msm


def run_bootstrap(panel, cfg, psi_hat):
    if cfg.boot_search == "walk":
        estimator = gest.GestEstimator(grid=cfg.grid, search="walk", center=psi_hat)
    else:
        estimator = gest.GestEstimator(grid=cfg.grid)
    with stage("bootstrap", "bca"):
        return bootstrap.bca(
            panel, estimator, B=cfg.bootstrap, level=cfg.level, seed=cfg.seed,
            jack_groups=cfg.jack_groups, workers=cfg.workers, estimate=psi_hat,
        )


def triangulation(gest_rd, iptw_rd):
    diff = abs(gest_rd - iptw_rd)
    return {
        "gest_rd": gest_rd,
        "iptw_rd": iptw_rd,
        "discrepancy_pp": diff * 100.0,
        "discrepancy_pct": diff / abs(iptw_rd) * 100.0 if iptw_rd != 0 else None,
    }


def _header(cfg, panel, flow):
    return {
        "tool": {"name": "gestkit", "version": __version__},
        "config": cfg.echo(),
        "seed": cfg.seed,
        "input": {"provenance": panel.provenance, "n": panel.n, "dropped_missing": panel.dropped_missing},
        "sample_flow": flow.to_json(),
    }


def _write_weight_hists(out, raw, trunc):
    iptw.write_histogram_csv(iptw.weight_histogram(raw), out / "weights_raw_hist.csv")
    iptw.write_histogram_csv(iptw.weight_histogram(trunc), out / "weights_trunc_hist.csv")


def build_report(cfg: RunConfig, out: Path | None = None) -> dict:
    """Run the whole pipeline; write plot data into ``out`` when given."""
    panel, flow, truth = load_input(cfg)
    with stage("panel", "summarize_groups"):
        groups = summarize_groups(panel)
    scores, raw, trunc, balance = run_diagnostics(panel, cfg)
    g, msm = run_estimates(panel, cfg, trunc)
    with stage("diagnostics", "evalue"):
        evalues = diagnostics.evalue_bases(groups, g.psi_hat)
    boot = run_bootstrap(panel, cfg, g.psi_hat) if cfg.bootstrap else None

    report = _header(cfg, panel, flow)
    report.update(
        {
            "group_summary": groups.to_dict(),
            "balance": balance.to_dict(),
            "weights": {"raw": raw.to_dict(), "truncated": trunc.to_dict()},
            "gest": g.to_dict(),
            "msm": msm.to_dict(),
            "triangulation": triangulation(g.psi_hat, msm.risk_difference),
            "evalues": [e.to_dict() for e in evalues],
            "bootstrap": boot.to_dict() if boot is not None else None,
        }
    )
    if truth is not None:
        report["ground_truth"] = truth
    if out is not None:
        gest.write_curve_csv(g.curve, out / "gest_curve.csv")
        _write_weight_hists(out, raw, trunc)
        if boot is not None and not boot.degenerate:
            bootstrap.write_histogram_csv(bootstrap.bootstrap_histogram(boot), out / "bootstrap_hist.csv")
        write_json(out / "sample_flow.json", flow.to_json())
    return report


# --------------------------------------------------------------------------- subcommands


def cmd_simulate(cfg, args):
    if cfg.preset is None:
        raise ConfigError("simulate needs --preset")
    out = Path(cfg.out)
    sc = preset_config(cfg)
    if args.cohort:
        with stage("synth", "facet_cohort"):
            raw, _, truth, book = synth.facet_cohort(sc)
        write_panel(raw, out / "panel.csv")
        write_json(out / "expected_flow.json", [{"stage": s, "n": n} for s, n in book.expected_flow()])
    else:
        with stage("synth", "generate"):
            panel, truth = synth.generate(sc)
        write_panel(panel, out / "panel.csv")
    synth.write_ground_truth(out / "ground_truth.json", truth, sc)
    log.info("wrote %s", out / "panel.csv")


def cmd_diagnose(cfg, args):
    out = Path(cfg.out)
    panel, flow, _ = load_input(cfg)
    with stage("panel", "summarize_groups"):
        groups = summarize_groups(panel)
    _, raw, trunc, balance = run_diagnostics(panel, cfg)
    report = _header(cfg, panel, flow)
    report.update({"group_summary": groups.to_dict(), "balance": balance.to_dict(),
                   "weights": {"raw": raw.to_dict(), "truncated": trunc.to_dict()}})
    _write_weight_hists(out, raw, trunc)
    write_json(out / "sample_flow.json", flow.to_json())
    write_json(out / "diagnostics.json", report)


def cmd_estimate(cfg, args):
    out = Path(cfg.out)
    panel, flow, _ = load_input(cfg)
    _, _, trunc, _ = run_diagnostics(panel, cfg)
    g, msm = run_estimates(panel, cfg, trunc)
    report = _header(cfg, panel, flow)
    report.update({"gest": g.to_dict(), "msm": msm.to_dict(),
                   "triangulation": triangulation(g.psi_hat, msm.risk_difference)})
    gest.write_curve_csv(g.curve, out / "gest_curve.csv")
    write_json(out / "estimates.json", report)


def cmd_bootstrap(cfg, args):
    if not cfg.bootstrap:
        cfg = replace(cfg, bootstrap=1000)
    out = Path(cfg.out)
    panel, flow, _ = load_input(cfg)
    with stage("gest", "g_estimate"):
        g = gest.g_estimate(panel, cfg.grid)
    boot = run_bootstrap(panel, cfg, g.psi_hat)
    report = _header(cfg, panel, flow)
    report["bootstrap"] = boot.to_dict()
    if not boot.degenerate:
        bootstrap.write_histogram_csv(bootstrap.bootstrap_histogram(boot), out / "bootstrap_hist.csv")
    write_json(out / "bootstrap.json", report)


def cmd_report(cfg, args):
    out = Path(cfg.out)
    report = build_report(cfg, out)
    write_json(out / "report.json", report)
    tri = report["triangulation"]
    log.info("psi_hat %.4f  MSM RD %.4f  discrepancy %.2f pp", tri["gest_rd"], tri["iptw_rd"], tri["discrepancy_pp"])


COMMANDS = {
    "simulate": (cmd_simulate, "draw a synthetic panel from a preset"),
    "diagnose": (cmd_diagnose, "positivity, weights and covariate balance"),
    "estimate": (cmd_estimate, "G-estimation and the weighted MSM"),
    "bootstrap": (cmd_bootstrap, "BCa interval for the G-estimate"),
    "report": (cmd_report, "full pipeline with the triangulation report"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("input")
    src.add_argument("--input", help="panel CSV with a header row")
    src.add_argument("--preset", choices=PRESETS, help="synthetic preset instead of a CSV")
    src.add_argument("--unit", help="unit id column (default unit_id)")
    src.add_argument("--treatment", help="binary treatment column (default treatment)")
    src.add_argument("--outcome", help="binary outcome column (default outcome)")
    src.add_argument("--covariates", help="comma-separated covariate columns")
    src.add_argument("--drop-missing", dest="drop_missing", action="store_true", default=None,
                     help="skip rows with missing values instead of failing")
    src.add_argument("--n", type=int, help="preset sample size override")
    src.add_argument("--psi-true", dest="psi_true", type=float, help="preset true effect override")
    est = common.add_argument_group("estimation")
    est.add_argument("--grid", help="LO,HI,STEP for the psi search (default 0.0,0.5,0.005)")
    est.add_argument("--truncate-pct", dest="truncate_pct", type=float, help="weight truncation percentile (default 99)")
    est.add_argument("--bootstrap", type=int, help="bootstrap resamples, 0 = off (default 0)")
    est.add_argument("--jack-groups", dest="jack_groups", type=int, help="jackknife groups for BCa (default 1000)")
    est.add_argument("--level", type=float, help="confidence level (default 0.95)")
    est.add_argument("--boot-search", dest="boot_search", choices=BOOT_SEARCH,
                     help="root search inside resamples (default walk)")
    est.add_argument("--workers", type=int, help="bootstrap worker processes (default 1)")
    run = common.add_argument_group("run")
    run.add_argument("--seed", type=int, help="random seed (default 42)")
    run.add_argument("--out", help="output directory (default ./out)")
    run.add_argument("--config", help="flat key = value settings file")
    run.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="gestkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gestkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "simulate":
            p.add_argument("--cohort", action="store_true", help="include the excluded rows and their flag columns")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    func = COMMANDS[args.command][0]
    try:
        cfg = build_config(args).validate()
        func(cfg, args)
    except GestkitError as exc:
        where = getattr(exc, "stage", None) or "config"
        print(f"gestkit {args.command}: error in {where}: {exc}", file=sys.stderr)
        return exc.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
