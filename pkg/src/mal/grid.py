"""All-pairs merge experiment over a zoo; one CSV row per ordered pair."""
from __future__ import annotations

import csv
import io
import logging

from mal.align import match
from mal.assembly import incompatibility
from mal.lmc import DEFAULT_EPSILON, DEFAULT_GRID, curve_report, naive_plan, sweep
from mal.merge import parse_mask

log = logging.getLogger(__name__)

PAIR_FIELDS = ("base_id", "target_id", "row_arch", "col_arch", "row_family", "col_family", "engine",
               "objective", "barrier", "naive_barrier", "aulc", "naive_aulc", "aulc_ratio", "aulc_diff",
               "lambda_star", "split")


def arch_label(arch) -> str:
    return "-".join(str(w) for w in arch.hidden)


def pairwise_rows(manifest, entries, eval_data, grid=DEFAULT_GRID, engine="auto", layer_mask=None,
                  epsilon=DEFAULT_EPSILON, seed=0, split="test", workers=1) -> list:
    """Align, sweep and score every ordered pair of distinct entries."""
    models = {e.id: manifest.load(e) for e in entries}
    rows = []
    for a in entries:
        for b in entries:
            if a.id == b.id:
                continue
            A, B = models[a.id], models[b.id]
            row = {"base_id": a.id, "target_id": b.id, "row_arch": arch_label(A.arch),
                   "col_arch": arch_label(B.arch), "row_family": A.arch.family.value,
                   "col_family": B.arch.family.value, "split": split}
            if incompatibility(A, B):
                log.info("skip %s <- %s: %s", a.id, b.id, incompatibility(A, B))
                continue
            mask = parse_mask(layer_mask, A.num_layers, A.arch.widths[-1] != B.arch.widths[-1])
            res = match(A, B, engine=engine, seed=seed)
            curve = sweep(A, B, res.plan, mask, eval_data, grid, split, workers)
            naive = sweep(A, B, naive_plan(A, B), mask, eval_data, grid, split, workers)
            rep = curve_report(curve, naive, epsilon)
            row.update(engine=res.engine, objective=res.objective,
                       **{k: rep[k] for k in ("barrier", "naive_barrier", "aulc", "naive_aulc",
                                              "aulc_ratio", "aulc_diff", "lambda_star")})
            rows.append(row)
    return rows


def rows_to_csv(rows, fields=PAIR_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
