"""Wall-clock benchmark of inversion methods and the fidelity/speed report it produces."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import torch

from .encoder import encode
from .generator import generate
from .inversion import InversionConfig, invert
from .metrics import embedding_distance, psnr

logger = logging.getLogger(__name__)

# A method maps (target image, target index) to a recovered latent.
InversionMethod = Callable[[torch.Tensor, int], torch.Tensor]

CSV_COLUMNS = ("method", "psnr_db", "embed_dist", "time_total_s", "time_per_image_s", "n_targets")
TIME_FIELDS = ("time_total_s", "time_per_image_s")


@dataclass
class ReportRow:
    method: str
    psnr_db: float
    embed_dist: float
    time_total_s: float
    time_per_image_s: float
    n_targets: int
    failed: bool = False
    error: Optional[str] = None


@dataclass
class EvalReport:
    rows: List[ReportRow]
    metadata: Dict[str, object] = field(default_factory=dict)

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def without_times(self) -> "EvalReport":
        rows = [dataclasses.replace(r, time_total_s=0.0, time_per_image_s=0.0) for r in self.rows]
        return EvalReport(rows, dict(self.metadata))

    def to_dict(self) -> dict:
        return {"rows": [dataclasses.asdict(r) for r in self.rows], "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls([ReportRow(**r) for r in data["rows"]], dict(data.get("metadata", {})))


def descent_method(gen, prior, config: InversionConfig) -> InversionMethod:
    """Adaptive-moment descent per target, seeded ``config.seed + index``."""

    def run(target, index):
        result = invert(gen, target, prior, dataclasses.replace(config, seed=config.seed + index))
        if result.termination == "numerical_error":
            raise ArithmeticError(f"descent hit a numerical error on target {index}")
        return result.z_final

    return run


def encoder_method(enc) -> InversionMethod:
    return lambda target, index: encode(enc, target)


def benchmark(methods: Mapping[str, InversionMethod], targets: torch.Tensor, extractor, gen,
              seed: int = 0, metadata: Optional[dict] = None, warmup: bool = True) -> EvalReport:
    """Run every method over every target and tabulate mean PSNR, embedding distance and time.

    Methods run one after another. Only the method calls are timed; an untimed
    warm-up call on the first target precedes each method's timed pass. A
    method that raises gets a row flagged ``failed`` instead of aborting the
    report.
    """
    if not methods:
        raise ValueError("benchmark needs at least one method")
    if len(targets) == 0:
        raise ValueError("benchmark needs at least one target")
    n = len(targets)
    rows = []
    for name, method in methods.items():
        try:
            if warmup:
                method(targets[0], 0)
            latents = []
            elapsed = 0.0
            for i in range(n):
                start = time.perf_counter()
                z = method(targets[i], i)
                elapsed += time.perf_counter() - start
                latents.append(torch.as_tensor(z).reshape(-1))
            recon = generate(gen, torch.stack(latents))
            p = sum(psnr(recon[i], targets[i]) for i in range(n)) / n
            d = sum(embedding_distance(extractor, recon[i], targets[i]) for i in range(n)) / n
            rows.append(ReportRow(name, p, d, elapsed, elapsed / n, n))
            logger.info("%s: psnr=%.3f embed_dist=%.4f time/img=%.4fs", name, p, d, elapsed / n)
        except Exception as exc:  # one broken method must not sink the report
            logger.warning("method %s failed: %s", name, exc)
            rows.append(ReportRow(name, math.nan, math.nan, math.nan, math.nan, n, failed=True, error=str(exc)))
    meta = {"seed": seed}
    meta.update(metadata or {})
    return EvalReport(rows, meta)


def _fmt(value) -> str:
    return f"{float(value):.6g}"


def render_report(report: EvalReport, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in report.rows:
            writer.writerow([r.method, _fmt(r.psnr_db), _fmt(r.embed_dist), _fmt(r.time_total_s),
                             _fmt(r.time_per_image_s), str(int(r.n_targets))])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "markdown":
        lines = [
            "| Model | PSNR (dB) | embed_dist | Time total (s) | Time / image (s) | n |",
            "|---|---|---|---|---|---|",
        ]
        for r in report.rows:
            name = f"{r.method} (failed)" if r.failed else r.method
            lines.append(f"| {name} | {_fmt(r.psnr_db)} | {_fmt(r.embed_dist)} | {_fmt(r.time_total_s)} | "
                         f"{_fmt(r.time_per_image_s)} | {int(r.n_targets)} |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> EvalReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV columns {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        rows.append(ReportRow(rec[0], float(rec[1]), float(rec[2]), float(rec[3]), float(rec[4]), int(rec[5])))
    return EvalReport(rows)


def report_from_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))
