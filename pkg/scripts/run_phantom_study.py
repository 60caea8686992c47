#!/usr/bin/env python3
"""End-to-end phantom study: generate a labelled cohort, train the voting
ensemble on a stratified subset, and evaluate on the held-out remainder.

The held-out table is printed as Markdown and every artifact (cases,
bundle, report) lands under --out for later inspection with the CLI or
the review gateway:

    python3 scripts/run_phantom_study.py --out runs/demo --cases 60 --seed 1
    thermoviab serve --data runs/demo/cases --model runs/demo/model.bundle
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from thermoviab import pipeline as pl
from thermoviab.io import read_manifest
from thermoviab.metrics import stratified_split
from thermoviab.phantom import PhantomSpec, generate_study


def parse_args(argv):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True, help="output directory for the run")
    p.add_argument("--cases", type=int, default=60)
    p.add_argument("--viable-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--disk-radius", type=float, default=24.0)
    p.add_argument("--nodule-radius", type=float, default=8.0)
    p.add_argument("--rate", type=float, default=0.2,
                   help="frames per second of the generated videos")
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--holdout", type=int, default=1,
                   help="held-out parts per 2 training parts (0 trains on everything)")
    p.add_argument("--vote-threshold", type=int, default=2)
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    cases_dir = os.path.join(args.out, "cases")
    bundle_dir = os.path.join(args.out, "model.bundle")
    report_path = os.path.join(args.out, "report.json")

    template = PhantomSpec(width=args.width, height=args.height,
                           disk_radius=args.disk_radius,
                           nodule_radius=args.nodule_radius,
                           rate=args.rate, duration=args.duration)
    t0 = time.perf_counter()
    print(f"generating {args.cases} cases under {cases_dir} ...", flush=True)
    generate_study(cases_dir, args.cases, args.viable_fraction,
                   seed=args.seed, template=template)

    dirs = pl.discover_cases(cases_dir)
    labelled = []
    by_id = {}
    for d in dirs:
        m = read_manifest(d)
        by_id[m["case_id"]] = d
        labelled.append((m["case_id"], m["label"] == "viable"))

    if args.holdout > 0:
        split = stratified_split(labelled, ratio=(2, args.holdout), seed=args.seed)
        train_ids = set(split.train)
    else:
        train_ids = {cid for cid, _ in labelled}
    test_ids = [cid for cid, _ in labelled if cid not in train_ids]

    train_dir = os.path.join(args.out, "train")
    os.makedirs(train_dir, exist_ok=True)
    for cid in sorted(train_ids):
        link = os.path.join(train_dir, os.path.basename(by_id[cid]))
        if not os.path.exists(link):
            os.symlink(os.path.abspath(by_id[cid]), link)

    cfg = pl.RunConfig(data_dir=train_dir, seed=args.seed, jobs=args.jobs,
                       vote_threshold=args.vote_threshold)
    print(f"training on {len(train_ids)} cases ...", flush=True)
    result = pl.train_on_dataset(train_dir, bundle_dir, ratio=(80, 20),
                                 seed=args.seed, cfg=cfg)
    print(f"bundle written to {bundle_dir} "
          f"({len(result.split.train)} train / {len(result.split.validation)} validation)")

    if test_ids:
        test_dir = os.path.join(args.out, "test")
        os.makedirs(test_dir, exist_ok=True)
        for cid in sorted(test_ids):
            link = os.path.join(test_dir, os.path.basename(by_id[cid]))
            if not os.path.exists(link):
                os.symlink(os.path.abspath(by_id[cid]), link)
        print(f"evaluating {len(test_ids)} held-out cases ...", flush=True)
        eval_cfg = pl.RunConfig(data_dir=test_dir, seed=args.seed, jobs=args.jobs,
                                vote_threshold=args.vote_threshold)
        report = pl.evaluate_dataset(test_dir, bundle_dir, report_path, cfg=eval_cfg)
        print()
        print(report.to_markdown())
        print(f"\nreport written to {report_path} (and .md alongside)")

    print(f"total {time.perf_counter() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
