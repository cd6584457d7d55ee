"""Comparison runs: region choice, number of glimpses, reward strategy.

All runs share one seed and one ``step1_cache``, so every arm starts its
attention and part phases from the same backbone and image classifier.
Runs that coincide (e.g. the attention arm and T = parts) are trained once.
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .train import evaluate, train

REPORT_FIELDS = ("epoch", "step", "round", "J", "R", "L", "train_acc", "val_acc", "mean_reward")


@dataclass
class RunResult:
    name: str
    model: object
    reports: list
    acc: float
    n: int
    eval: dict = field(repr=False, default=None)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_metrics(path, reports):
    write_csv(path, REPORT_FIELDS, [[getattr(r, k) for k in REPORT_FIELDS] for r in reports])


def rects_intersect(a, glyph):
    """``a`` is (top, left, h, w); ``glyph`` is (x, y, w, h) from the manifest."""
    top, left, h, w = a
    gx, gy, gw, gh = glyph
    return left < gx + gw and gx < left + w and top < gy + gh and gy < top + h


def localization_rate(result, glyph_rects, labels):
    """Share of correctly classified samples with some argmax rectangle on the glyph."""
    ev = result.eval
    ok = np.nonzero(ev["preds"] == np.asarray(labels))[0]
    if len(ok) == 0 or not ev["rects"]:
        return 0.0, 0
    hits = sum(any(rects_intersect(rc[i], glyph_rects[i]) for rc in ev["rects"]) for i in ok)
    return hits / len(ok), len(ok)


def epochs_to_threshold(reports, threshold):
    """1-based count of step-2 epochs until mean reward first reaches ``threshold``."""
    for i, r in enumerate([r for r in reports if r.step == 2], start=1):
        if r.mean_reward >= threshold:
            return i
    return None


def kept_regions(region_sizes, parts, full):
    """Region sizes for a run with ``parts`` glimpses when the full model has ``full``.

    Dropping glimpses keeps the largest regions of the full model (in their
    original order); extra glimpses beyond ``full`` follow the configured list.
    """
    sizes = list(region_sizes)
    if parts >= full:
        return tuple(sizes)
    order = sorted(range(full), key=lambda i: -sizes[i][0] * sizes[i][1])
    keep = sorted(order[:parts])
    return tuple(sizes[i] for i in keep) + tuple(sizes[full:])


class Ablation:
    def __init__(self, train_set, test_set, config, out_dir=None, log=None):
        self.train_set = train_set
        self.test_set = test_set
        self.cfg = config
        self.out_dir = out_dir
        self.log = log or (lambda msg: None)
        self.cache = {}
        self.runs = {}

    def run(self, arm="attention", parts=None, reward=None):
        base = self.cfg.train
        parts = base.parts if parts is None else parts
        reward = reward or base.reward
        if parts == 0:
            arm, reward = "attention", base.reward
        key = (arm, parts, reward)
        if key in self.runs:
            return self.runs[key]
        name = f"{arm}_T{parts}_{reward}"
        self.log(f"training {name}")
        cfg = replace(base, arm=arm, parts=parts, reward=reward,
                      region_sizes=kept_regions(base.region_sizes, parts, base.parts))
        run_dir = os.path.join(self.out_dir, "runs", name) if self.out_dir else None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
        ds = self.train_set
        model, reports = train(ds.images, ds.labels, cfg, ds.num_classes,
                               log_path=os.path.join(run_dir, "log.jsonl") if run_dir else None,
                               ckpt_dir=run_dir, step1_cache=self.cache)
        ev = evaluate(model, self.test_set.images, self.test_set.labels, arm)
        if run_dir:
            write_metrics(os.path.join(run_dir, "metrics.csv"), reports)
        res = RunResult(name, model, reports, ev["acc"], ev["n"], ev)
        self.log(f"{name}: test accuracy {res.acc:.4f}")
        self.runs[key] = res
        return res

    def regions_table(self):
        """Image-only baseline against random, centre and attention regions."""
        rows = [("baseline", self.run(parts=0))]
        for arm in self.cfg.ablate.arms:
            rows.append((arm, self.run(arm=arm)))
        return [(name, r.acc, r.n) for name, r in rows]

    def parts_table(self):
        return [(t, self.run(parts=t).acc, self.run(parts=t).n) for t in self.cfg.ablate.parts]

    def reward_table(self):
        thr = self.cfg.ablate.reward_threshold
        rows = []
        for reward in self.cfg.ablate.rewards:
            r = self.run(reward=reward)
            step2 = [x.mean_reward for x in r.reports if x.step == 2]
            e = epochs_to_threshold(r.reports, thr)
            rows.append((reward, "" if e is None else e, len(step2), max(step2, default=0.0), r.acc, r.n))
        return rows

    def write_all(self):
        """Run every table and write regions.csv, parts.csv, reward.csv, localization.csv."""
        out = self.out_dir
        regions = self.regions_table()
        parts = self.parts_table()
        rewards = self.reward_table()
        loc = self.localization()
        if out:
            write_csv(os.path.join(out, "regions.csv"), ("arm", "accuracy", "n"), regions)
            write_csv(os.path.join(out, "parts.csv"), ("parts", "accuracy", "n"), parts)
            write_csv(os.path.join(out, "reward.csv"),
                      ("reward", "epochs_to_threshold", "step2_epochs", "max_mean_reward", "accuracy", "n"),
                      rewards)
            write_csv(os.path.join(out, "localization.csv"), ("run", "hit_rate", "correct"), [loc])
        return {"regions": regions, "parts": parts, "reward": rewards, "localization": loc}

    def localization(self):
        r = self.run()
        rate, n = localization_rate(r, self.test_set.rects, self.test_set.labels)
        return (r.name, rate, n)
