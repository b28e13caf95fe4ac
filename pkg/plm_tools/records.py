"""
Result records: flat, JSON-serializable dictionaries written as line-delimited
JSON, CSV or a human-readable table.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, TextIO, Union
import json
import math
import sys

import numpy as np
import pandas as pd

from common.utils import json_safe

from .dml import DmlFit
from .hd import HdFit
from .simgen import SimReport

FORMATS = ("json-record", "csv-records", "table")

Record = Dict[str, Any]


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _inference_fields(inference) -> Record:
    return {k: _plain(v) for k, v in inference.as_dict().items()}


def hd_record(fit: HdFit, meta: Optional[Mapping[str, Any]] = None) -> Record:
    record: Record = {"command": "fit-hd", **dict(meta or {})}
    record.update(_inference_fields(fit.inference))
    record.update({
        "n": fit.inference.n,
        "p": len(fit.x_names) - 1,
        "link": fit.link,
        "beta_init": fit.beta_init,
        "beta_tilde": fit.beta_tilde,
        "equation_residual": fit.equation_residual,
        "fold_seed": fit.fold_seed,
    })
    for name, stage in fit.stages.items():
        key = name.replace("-", "_")
        record[f"lambda_{key}"] = stage.lam
        record[f"kkt_{key}"] = stage.kkt_residual
        record[f"gradient_sup_{key}"] = stage.gradient_sup
        record[f"weight_scale_{key}"] = stage.weight_scale
        record[f"nonzero_{key}"] = int(np.count_nonzero(stage.coef[1:]))
        record[f"iterations_{key}"] = stage.solution.iterations
    return record


def dml_record(fit: DmlFit, meta: Optional[Mapping[str, Any]] = None) -> Record:
    record: Record = {"command": "fit-dml", **dict(meta or {})}
    record.update(_inference_fields(fit.inference))
    record.update({
        "n": fit.inference.n,
        "r_variant": fit.r_variant,
        "k_outer": fit.folds.k,
        "equation_residual": fit.equation_residual,
        "fold_seed": fit.fold_seed,
        "oracle": fit.oracle,
    })
    for k, breve in enumerate(fit.breve_betas, start=1):
        record[f"breve_beta_fold_{k}"] = _plain(breve)
    for k, chosen in enumerate(fit.selected, start=1):
        for component, kind in chosen.items():
            record[f"learner_{component}_fold_{k}"] = kind
    return record


def sim_records(report: SimReport, meta: Optional[Mapping[str, Any]] = None) -> List[Record]:
    """One summary record followed by one record per replicate. Runtime is not included."""
    summary: Record = {
        "record": "summary",
        "command": "simulate",
        **dict(meta or {}),
        "config": report.config,
        "n": report.n,
        "p": report.p,
        "estimator": report.estimator,
        "true_beta": report.true_beta,
        "reps": len(report.records),
        "mse": report.mse,
        "bias": report.bias,
        "cp": report.cp,
        "n_ok": report.n_ok,
        "failures": report.failures,
    }
    rows = [{"record": "replicate", "replicate": r.replicate, "seed": r.seed,
             "beta_hat": r.beta_hat, "ci_low": r.ci_low, "ci_high": r.ci_high, "se": r.se,
             "ok": r.ok, "error": r.error} for r in report.records]
    return [summary] + rows


def plot_data_frame(report: SimReport) -> pd.DataFrame:
    """(replicate, beta_hat, ci_low, ci_high) of the successful replicates."""
    return pd.DataFrame(
        [(r.replicate, r.beta_hat, r.ci_low, r.ci_high) for r in report.records if r.ok],
        columns=["replicate", "beta_hat", "ci_low", "ci_high"])


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def _table(records: List[Record]) -> str:
    summaries = [r for r in records if r.get("record") != "replicate"]
    replicates = [r for r in records if r.get("record") == "replicate"]
    blocks = []
    for rec in summaries:
        width = max(len(k) for k in rec)
        blocks.append("\n".join(f"{k.ljust(width)}  {_format_value(v)}" for k, v in rec.items()))
    if replicates:
        frame = pd.DataFrame(replicates).drop(columns=["record"])
        blocks.append(frame.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    return "\n\n".join(blocks) + "\n"


def _render(records: List[Record], fmt: str) -> str:
    if fmt == "json-record":
        return "".join(json.dumps(json_safe(r), allow_nan=False) + "\n" for r in records)
    if fmt == "csv-records":
        return pd.DataFrame(records).to_csv(index=False, float_format="%.17g")
    if fmt == "table":
        return _table(records)
    raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")


def write_records(records: Iterable[Record], dest: Union[str, Path, TextIO, None] = None,
                  fmt: str = "json-record") -> None:
    """Write records to a path, an open text stream, or stdout when ``dest`` is None or "-"."""
    text = _render(list(records), fmt)
    if dest is None or dest == "-":
        sys.stdout.write(text)
    elif hasattr(dest, "write"):
        dest.write(text)
    else:
        Path(dest).write_text(text, encoding="utf-8")


def read_records(path: Union[str, Path]) -> List[Record]:
    """Parse a json-record file; missing values come back as None."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
