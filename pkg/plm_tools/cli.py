"""
Command-line entry point: ``plm fit-hd``, ``plm fit-dml`` and ``plm simulate``.

Every flag may also come from a JSON ``--config-file`` whose keys are long
flag names (dashes or underscores); flags given on the command line win.
Exit status is 0 on success, 1 on a usage error and 2 when estimation or
file IO fails.
"""

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence
import argparse
import json
import logging
import sys

from .dml import R_VARIANTS, DmlConfig, fit_dml
from .exceptions import EstimationError
from .hd import HdConfig, fit_hd
from .learners import LearnerSpec
from .records import FORMATS, dml_record, hd_record, plot_data_frame, sim_records, write_records
from .simgen import CONFIGS, DmlEstimator, GeneratorSpec, HdEstimator, run_replicates
from .tools import LEARNER_CHOICES, dml_config_for, prepare_dataset

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

COMMON_DEFAULTS: Dict[str, Any] = {
    "bootstrap_draws": 500,
    "seed": 0,
    "threads": 1,
    "output": "-",
    "format": "json-record",
    "log_level": "WARNING",
}

DATA_DEFAULTS: Dict[str, Any] = {
    "x": "rest",
    "expand_basis": False,
    "downsample_prevalence": None,
}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "fit-hd": {**COMMON_DEFAULTS, **DATA_DEFAULTS, "link": "identity", "cv_folds": 5},
    "fit-dml": {**COMMON_DEFAULTS, **DATA_DEFAULTS, "learner": "boosted-trees", "k_outer": 5,
                "k_inner": 5, "r_variant": "difference"},
    "simulate": {**COMMON_DEFAULTS, "p": None, "reps": 100, "estimator": "hd",
                 "learner": "boosted-trees", "link": "identity", "k_outer": 5, "k_inner": 5,
                 "r_variant": "difference", "emit_plot_data": None, "oracle": False},
}

REQUIRED: Dict[str, Sequence[str]] = {
    "fit-hd": ("input", "y", "a"),
    "fit-dml": ("input", "y", "a"),
    "simulate": ("config", "n"),
}


class UsageError(Exception):
    """Bad flags, config file keys or input paths (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bootstrap-draws", type=int,
                   help="Multiplier bootstrap draws, 0 for the normal interval (default 500)")
    p.add_argument("--seed", type=int, help="Root seed of every split and draw (default 0)")
    p.add_argument("--threads", type=int, help="Worker processes (default 1)")
    p.add_argument("--output", help="Result file, '-' for stdout (default)")
    p.add_argument("--format", choices=FORMATS, help="Result format (default json-record)")
    p.add_argument("--config-file", help="JSON file supplying any long flag")
    p.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                   help="Logging verbosity (default WARNING)")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="Comma-separated file with a header row")
    p.add_argument("--y", help="Binary response column")
    p.add_argument("--a", help="Exposure column")
    p.add_argument("--x", help="Comma-separated covariate columns, or 'rest' (default)")
    p.add_argument("--expand-basis", action="store_true",
                   help="Add pairwise products and natural spline columns")
    p.add_argument("--downsample-prevalence", type=float,
                   help="Drop controls until cases make up this fraction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="plm", argument_default=argparse.SUPPRESS,
                     description="Inference for the exposure log odds ratio in a logistic "
                                 "partially linear model.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    hd = sub.add_parser("fit-hd", argument_default=argparse.SUPPRESS,
                        help="Sparse high-dimensional estimator")
    _add_data(hd)
    hd.add_argument("--link", choices=("identity", "expit"),
                    help="Link of the exposure model among controls")
    hd.add_argument("--cv-folds", type=int, help="Folds for lambda selection (default 5)")
    _add_common(hd)

    dml = sub.add_parser("fit-dml", argument_default=argparse.SUPPRESS,
                         help="Cross-fitted machine-learning estimator")
    _add_data(dml)
    dml.add_argument("--learner", choices=LEARNER_CHOICES, help="Nuisance learner kind")
    dml.add_argument("--k-outer", type=int, help="Outer cross-fitting folds (default 5)")
    dml.add_argument("--k-inner", type=int, help="Inner refitting folds (default 5)")
    dml.add_argument("--r-variant", choices=R_VARIANTS, help="Log odds ratio estimate")
    _add_common(dml)

    sim = sub.add_parser("simulate", argument_default=argparse.SUPPRESS,
                         help="Monte Carlo study on a simulation design")
    sim.add_argument("--config", choices=CONFIGS, help="Simulation design")
    sim.add_argument("--n", type=int, help="Sample size per replicate")
    sim.add_argument("--p", type=int, help="Covariate dimension")
    sim.add_argument("--reps", type=int, help="Number of replicates (default 100)")
    sim.add_argument("--estimator", choices=("hd", "dml"), help="Estimator under study")
    sim.add_argument("--learner", choices=LEARNER_CHOICES, help="Learner kind for dml")
    sim.add_argument("--link", choices=("identity", "expit"), help="Link for hd")
    sim.add_argument("--k-outer", type=int, help="Outer folds for dml")
    sim.add_argument("--k-inner", type=int, help="Inner folds for dml")
    sim.add_argument("--r-variant", choices=R_VARIANTS, help="Log odds ratio estimate for dml")
    sim.add_argument("--oracle", action="store_true", help="Use the true nuisances (dml)")
    sim.add_argument("--emit-plot-data", metavar="PATH",
                     help="Write (replicate, beta_hat, ci_low, ci_high) as CSV")
    _add_common(sim)
    return parser


def load_config_file(path: str, command: str) -> Dict[str, Any]:
    """Read a JSON object of long flag names; unknown keys are a usage error."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    known = set(DEFAULTS[command]) | set(REQUIRED[command])
    values = {}
    for key, value in raw.items():
        name = key.lstrip("-").replace("-", "_")
        if name not in known:
            raise UsageError(f"unknown key {key!r} in config file {path}")
        values[name] = value
    return values


def resolve_options(argv: Sequence[str]) -> Dict[str, Any]:
    """Defaults, then config file, then command line."""
    ns = vars(build_parser().parse_args(list(argv)))
    command = ns.pop("command", None)
    if command is None:
        raise UsageError("plm: a command is required (fit-hd, fit-dml or simulate)")
    config_file = ns.pop("config_file", None)
    from_file = load_config_file(config_file, command) if config_file else {}
    opts = {**DEFAULTS[command], **from_file, **ns, "command": command}
    missing = [name for name in REQUIRED[command] if opts.get(name) is None]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"plm {command}: missing required option(s) {flags}")
    if "input" in opts and not Path(opts["input"]).is_file():
        raise UsageError(f"input file not found: {opts['input']}")
    if opts["format"] not in FORMATS:
        raise UsageError(f"format must be one of {FORMATS}, got {opts['format']!r}")
    return opts


def _columns(x: Any) -> Optional[List[str]]:
    if x is None or x == "rest":
        return None
    if isinstance(x, str):
        return [c.strip() for c in x.split(",") if c.strip()]
    return list(x)


def _dml_config(opts: Mapping[str, Any], **kwargs: Any) -> DmlConfig:
    learner = opts["learner"]
    if isinstance(learner, Mapping):
        spec = LearnerSpec.from_dict(learner)
        return DmlConfig(learner_m=spec, learner_full=spec, learner_a=spec, learner_t=spec,
                         **kwargs)
    return dml_config_for(learner, **kwargs)


def _dml_kwargs(opts: Mapping[str, Any]) -> Dict[str, Any]:
    return {"k_outer": opts["k_outer"], "k_inner": opts["k_inner"],
            "r_variant": opts["r_variant"], "bootstrap_draws": opts["bootstrap_draws"]}


def _load(opts: Mapping[str, Any]):
    return prepare_dataset(opts["input"], opts["y"], opts["a"], _columns(opts["x"]),
                           opts["expand_basis"], opts["downsample_prevalence"], opts["seed"])


def _meta(opts: Mapping[str, Any], *keys: str) -> Dict[str, Any]:
    return {k: opts[k] for k in ("seed",) + keys}


def cmd_fit_hd(opts: Mapping[str, Any]) -> List[Dict[str, Any]]:
    d = _load(opts)
    cfg = HdConfig(link=opts["link"], cv_folds=opts["cv_folds"], seed=opts["seed"],
                   bootstrap_draws=opts["bootstrap_draws"], n_jobs=opts["threads"])
    logger.info(f"fit-hd: n={d.n}, p={d.p}, link={cfg.link}")
    return [hd_record(fit_hd(d, cfg), {**_meta(opts), "input": str(opts["input"])})]


def cmd_fit_dml(opts: Mapping[str, Any]) -> List[Dict[str, Any]]:
    d = _load(opts)
    cfg = _dml_config(opts, seed=opts["seed"], n_jobs=opts["threads"], **_dml_kwargs(opts))
    learner = opts["learner"]
    learner_name = learner if isinstance(learner, str) else LearnerSpec.from_dict(learner).kind
    logger.info(f"fit-dml: n={d.n}, p={d.p}, learner={learner_name}")
    record = dml_record(fit_dml(d, cfg), {**_meta(opts), "input": str(opts["input"]),
                                          "learner": learner_name})
    return [record]


def cmd_simulate(opts: Mapping[str, Any]) -> List[Dict[str, Any]]:
    spec = GeneratorSpec(opts["config"], opts["n"], opts["p"], opts["seed"])
    if opts["estimator"] == "hd":
        if opts["oracle"]:
            raise UsageError("--oracle applies to the dml estimator only")
        est = HdEstimator(HdConfig(link=opts["link"], bootstrap_draws=opts["bootstrap_draws"]))
    else:
        est = DmlEstimator(_dml_config(opts, **_dml_kwargs(opts)), use_oracle=opts["oracle"])
    report = run_replicates(spec, est, opts["reps"], n_jobs=opts["threads"])
    if opts["emit_plot_data"]:
        plot_data_frame(report).to_csv(opts["emit_plot_data"], index=False, float_format="%.17g")
    logger.info(f"simulate: {report.n_ok} of {len(report.records)} replicates succeeded in "
                f"{report.runtime_seconds:.1f}s")
    return sim_records(report, _meta(opts))


COMMANDS = {"fit-hd": cmd_fit_hd, "fit-dml": cmd_fit_dml, "simulate": cmd_simulate}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit status."""
    argv = sys.argv[1:] if argv is None else argv
    try:
        opts = resolve_options(argv)
        logging.basicConfig(level=getattr(logging, str(opts["log_level"]).upper(), logging.WARNING),
                            format=LOG_FORMAT)
        logging.getLogger('sklearn').setLevel(logging.WARNING)
        logging.getLogger('joblib').setLevel(logging.WARNING)
        records = COMMANDS[opts["command"]](opts)
        write_records(records, opts["output"], opts["format"])
        return 0
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except EstimationError as e:
        print(f"plm: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"plm: error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"plm: invalid option: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
