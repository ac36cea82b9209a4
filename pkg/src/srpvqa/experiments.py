"""Ablation and relation-source experiment matrix.

The grid is the 3x3 product of input combinations and attention kinds
with parsed semantic relations, plus three relation-source rows.  Each
cell is trained once per seed on the train split and scored on the
held-out split; the report keeps per-seed metrics and their medians.
"""

from __future__ import annotations

import logging
import statistics
from collections import Counter

from .config import ATTENTIONS, INPUTS
from .train import NumericError, fit_detector, metrics_from_records, needs_detector, predict, split, train_model

log = logging.getLogger(__name__)

METRICS = ("accuracy", "binary", "open", "relation")

SOURCE_ROWS = (
    ("r_oracle+q", {"inputs": "r+q", "relation_source": "oracle"}),
    ("r_oracle+v+q", {"inputs": "v+r+q", "relation_source": "oracle"}),
    ("r_vis+v+q", {"inputs": "v+r+q", "relation_source": "parsed-visual"}),
)


def grid_cells():
    """``(name, overrides)`` for all 12 cells, grid first."""
    cells = [(f"{inputs}/{att}", {"inputs": inputs, "attention": att,
                                  "relation_source": "parsed-semantic"})
             for inputs in INPUTS for att in ATTENTIONS]
    return cells + [(name, dict(kw, attention="msa")) for name, kw in SOURCE_ROWS]


def run_cell(cfg, train, test, vocab, detector=None):
    result = train_model(cfg, train, vocab, detector=detector)
    records = predict(result.model, test, vocab, result.detector)
    return metrics_from_records(records), result


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def run_matrix(base, examples, vocab, seeds=(0, 1, 2), cells=None, progress=None):
    """Train and score every cell for every seed; failures are recorded, not raised."""
    cells = cells if cells is not None else grid_cells()
    train, test = split(examples, base.holdout, base.seed)
    detectors = {}
    table = {}
    for name, overrides in cells:
        runs = []
        for seed in seeds:
            cfg = base.with_overrides(seed=seed, **overrides).validate()
            entry = {"seed": seed}
            try:
                detector = None
                if needs_detector(cfg):
                    key = (seed, cfg.sigma, cfg.confusion, cfg.dropout, cfg.detector_epochs, cfg.d_v)
                    if key not in detectors:
                        detectors[key] = fit_detector(cfg, train)
                    detector = detectors[key]
                metrics, _ = run_cell(cfg, train, test, vocab, detector)
                entry.update(metrics)
            except (NumericError, FloatingPointError, ValueError) as err:
                log.warning("cell %s seed %d failed: %s", name, seed, err)
                entry["error"] = str(err)
            runs.append(entry)
            if progress:
                progress(name, entry)
        ok = [r for r in runs if "error" not in r]
        table[name] = {
            "overrides": overrides,
            "runs": runs,
            "failed": len(ok) < len(runs),
            "median": {m: _median(r.get(m) for r in ok) for m in METRICS},
        }
    return table


def majority_relation_baseline(test):
    """Accuracy of always giving the most common answer to relation-dependent questions."""
    answers = [q.answer for ex in test for q in ex.questions if q.depends_on_relations]
    if not answers:
        return None
    return Counter(answers).most_common(1)[0][1] / len(answers)


def _get(table, cell, metric):
    row = table.get(cell)
    return None if row is None else row["median"].get(metric)


def _cmp(lhs, rhs, margin=0.0, strict=False):
    if lhs is None or rhs is None:
        return None
    return lhs > rhs + margin if strict else lhs >= rhs + margin


def ordering_checks(table, majority_relation=None):
    """Directional comparisons over cell medians; ``None`` when a cell is missing."""
    checks = {}
    checks["oracle_relation_gain_10"] = _cmp(_get(table, "r_oracle+v+q", "relation"),
                                             _get(table, "v+q/msa", "relation"), 0.10)
    checks["oracle_overall_not_worse"] = _cmp(_get(table, "r_oracle+v+q", "accuracy"),
                                              _get(table, "v+q/msa", "accuracy"))
    if majority_relation is not None:
        checks["blind_beats_majority_15"] = _cmp(_get(table, "r_oracle+q", "relation"),
                                                 majority_relation, 0.15)
    for inputs in INPUTS:
        mutual = _get(table, f"{inputs}/mutual", "accuracy")
        selfa = _get(table, f"{inputs}/self", "accuracy")
        msa = _get(table, f"{inputs}/msa", "accuracy")
        checks[f"{inputs}: mutual < self"] = _cmp(selfa, mutual, strict=True)
        checks[f"{inputs}: msa >= self - 0.5"] = _cmp(msa, selfa, -0.005)
    checks["v+r+q msa >= v+q msa - 0.5"] = _cmp(_get(table, "v+r+q/msa", "accuracy"),
                                                _get(table, "v+q/msa", "accuracy"), -0.005)
    checks["semantic >= visual - 0.5"] = _cmp(_get(table, "v+r+q/msa", "accuracy"),
                                              _get(table, "r_vis+v+q", "accuracy"), -0.005)
    return checks


def format_table(table):
    def cell(v):
        return "n/a" if v is None else f"{100 * v:6.2f}"

    lines = [f"{'cell':<16} {'acc':>6} {'binary':>6} {'open':>6} {'rel':>6}  seeds"]
    for name, row in table.items():
        med = row["median"]
        status = "FAILED" if row["failed"] else ""
        seeds = ",".join(str(r["seed"]) for r in row["runs"])
        lines.append(f"{name:<16} " + " ".join(cell(med[m]) for m in METRICS) + f"  {seeds} {status}")
    return "\n".join(lines)
