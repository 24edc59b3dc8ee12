#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Recompute the directional claims from raw result files and compare them
with claims.csv written by `ctcd report`."""

import csv
import json
import statistics
import sys
from pathlib import Path


def load(out):
    experiments = {}
    for manifest_path in sorted((out / "experiments").glob("*.json")):
        manifest = json.loads(manifest_path.read_text())
        cells = {}
        for entry in manifest["entries"]:
            result_path = out / entry["dir"] / "result.json"
            if not entry["ok"] or not result_path.exists():
                continue
            result = json.loads(result_path.read_text())
            cells.setdefault(entry["label"], {})[entry["seed"]] = result
        experiments[manifest["kind"]] = cells
    return experiments


def metric(result, role, name):
    r = result["roles"].get(role)
    if r is None:
        return None
    if name == "average":
        return r["average"]
    task, field = name.rsplit(".", 1)
    return r["downstream"][task]["mcc" if field == "mcc" else "accuracy"]


def series(cells, label, role, name):
    out = {}
    for seed, result in cells.get(label, {}).items():
        v = metric(result, role, name)
        if v is not None:
            out[seed] = v
    return out


def paired(lhs, rhs):
    seeds = sorted(set(lhs) & set(rhs))
    return [lhs[s] for s in seeds], [rhs[s] for s in seeds]


def claim(cid, lhs, rhs, strict, gated):
    if not lhs:
        return None
    lm, rm = statistics.median(lhs), statistics.median(rhs)
    holds = lm > rm if strict else lm >= rm
    return {"claim": cid, "lhs_median": f"{lm:.6f}", "rhs_median": f"{rm:.6f}",
            "holds": "true" if holds else "false", "gated": "true" if gated else "false"}


def claims(experiments):
    found = []
    cmp = experiments.get("compare-regimes")
    if cmp is not None:
        for cid, (ll, lr), (rl, rr), strict, gated in [
            ("a", ("ctcd", "teacher"), ("standalone", "teacher"), True, True),
            ("b", ("ctcd", "student"), ("co-oneway", "student"), True, True),
            ("c", ("ctcd", "student"), ("standalone", "student"), False, False),
            ("d", ("ctcd", "student"), ("standalone", "teacher"), True, False),
        ]:
            lhs, rhs = paired(series(cmp, ll, lr, "average"), series(cmp, rl, rr, "average"))
            found.append(claim(cid, lhs, rhs, strict, gated))
    length = experiments.get("sweep-length")
    if length is not None:
        budgets = sorted({int(label.split("@")[1]) for label in length if "@" in label})
        if len(budgets) == 2 and budgets[1] == 2 * budgets[0]:
            name = "pattern-imbalanced.mcc"
            gains = {}
            for regime in ("ctcd", "co-oneway"):
                lo = series(length, f"{regime}@{budgets[0]}", "student", name)
                hi = series(length, f"{regime}@{budgets[1]}", "student", name)
                gains[regime] = {s: hi[s] - lo[s] for s in hi if s in lo}
            lhs, rhs = paired(gains["ctcd"], gains["co-oneway"])
            found.append(claim("length", lhs, rhs, True, True))
    community = experiments.get("community")
    if community is not None:
        for role in ("student1", "student2"):
            lhs, rhs = paired(series(community, "community", role, "average"),
                              series(community, "classic-kd", "student", "average"))
            found.append(claim("community-" + role, lhs, rhs, True, False))
    return {c["claim"]: c for c in found if c is not None}


def main():
    if len(sys.argv) != 2:
        print("usage: reaggregate.py <results dir>", file=sys.stderr)
        return 1
    out = Path(sys.argv[1])
    mine = claims(load(out))
    with open(out / "claims.csv", newline="") as f:
        theirs = {row["claim"]: row for row in csv.DictReader(f)}
    ok = set(mine) == set(theirs)
    if not ok:
        print(f"claim sets differ: {sorted(mine)} vs {sorted(theirs)}")
    for cid in sorted(set(mine) & set(theirs)):
        for field in ("lhs_median", "rhs_median", "holds", "gated"):
            if mine[cid][field] != theirs[cid][field]:
                print(f"claim {cid}: {field} {mine[cid][field]} != {theirs[cid][field]}")
                ok = False
    print(f"{len(mine)} claims re-aggregated: {'agree' if ok else 'DISAGREE'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
