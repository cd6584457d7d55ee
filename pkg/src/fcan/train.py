"""Step-wise training: backbone, then attention heads, then part classifiers.

Every phase draws from its own seeded stream (``stream(seed, tag)``), so
the backbone phase is identical across runs that differ only in their
attention configuration and can be shared between ablation arms through
``step1_cache``.
"""

import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as tn
from .attention import batch_argmax, batch_policy
from .classifier import build_model, pooled_logits
from .data import stream
from .features import GlimpseLocation, clamp_region, crop_batch, grid_rect_to_pixels
from .optim import RMSProp, step_lr
from .rl import (GREEDY, DELAYED, image_scores, policy_gradient, region_means, region_score_table,
                 rollout)

ARMS = ("attention", "random", "center")


@dataclass
class TrainConfig:
    parts: int = 2
    region_sizes: tuple = ((2, 2), (4, 4), (3, 3))
    samples: int = 8
    batch_size: int = 64
    epochs_backbone: int = 10
    epochs_attention: int = 10
    epochs_parts: int = 10
    rounds: int = 2
    lr: float = 0.003
    lr_drop_at: float = 2 / 3
    lr_factor: float = 0.1
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    reward: str = GREEDY
    arm: str = "attention"
    seed: int = 0
    patience: int = 3
    val_fraction: float = 0.1
    part_size: int = 32
    channels: tuple = (8, 16, 32)
    hidden: int = 64

    def validate(self):
        if self.parts < 0:
            raise ValueError(f"parts must be >= 0, got {self.parts}")
        if self.parts > len(self.region_sizes):
            raise ValueError(f"parts={self.parts} but only {len(self.region_sizes)} region sizes configured")
        if self.samples < 1:
            raise ValueError(f"samples (K) must be >= 1, got {self.samples}")
        if self.reward not in (GREEDY, DELAYED):
            raise ValueError(f"reward must be greedy or delayed, got {self.reward!r}")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.batch_size < 1 or self.rounds < 1:
            raise ValueError("batch_size and rounds must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


@dataclass
class ObjectiveReport:
    epoch: int
    step: int
    round: int
    J: float
    R: float
    L: float
    train_acc: float
    val_acc: float
    mean_reward: float
    wall_ms: float = field(default=0.0, compare=False)

    def record(self):
        return asdict(self)


def _drop_epochs(total, frac):
    b = int(round(total * frac))
    return [b] if 0 < b < total else []


def _batches(n, size, perm):
    for i in range(0, n, size):
        yield perm[i:i + size]


def compute_features(backbone, images, batch=256):
    out = []
    for i in range(0, len(images), batch):
        out.append(backbone.forward(tn.Tensor(images[i:i + batch])).data)
    return np.concatenate(out) if out else np.zeros((0, backbone.out_channels, 1, 1))


def split_validation(n, fraction, seed):
    perm = stream(seed, "split").permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fixed_locations(arm, n, grid, rng=None):
    """Non-learned glimpse centres (N x 2) for the random and centre baselines."""
    gh, gw = grid
    if arm == "center":
        return np.tile([gh // 2, gw // 2], (n, 1))
    if arm == "random":
        cells = rng.integers(0, gh * gw, n)
        return np.stack([cells // gw, cells % gw], axis=1)
    raise ValueError(f"no fixed locations for arm {arm!r}")


def glimpse_rects(locs, head, stride, image_size):
    gh, gw = image_size[0] // stride, image_size[1] // stride
    out = []
    for r, c in locs:
        cells = clamp_region(GlimpseLocation(head.t, int(r), int(c)), head.region, gh, gw)
        out.append(grid_rect_to_pixels(cells, stride, image_size))
    return out


def glimpse_locations(model, feats, t, arm, rng=None):
    if arm == "attention":
        return batch_argmax(batch_policy(feats, model.heads[t - 1]))
    return fixed_locations(arm, len(feats), feats.shape[-2:], rng)


def part_probs(part, crops, batch=256):
    out = []
    for i in range(0, len(crops), batch):
        x = tn.Tensor(crops[i:i + batch])
        out.append(tn.softmax(pooled_logits(part.stack.forward(x), part.head)).data)
    return np.concatenate(out)


def evaluate(model, images, labels, arm="attention", rng=None, feats=None):
    """Batched argmax-path accuracy.  Returns dict with acc, n, preds, locations, rects."""
    labels = np.asarray(labels)
    if feats is None:
        feats = compute_features(model.backbone, images)
    scores = [image_scores(feats, model.image_clf.head)]
    locations, rects = [], []
    stride = model.backbone.downsample
    if arm == "random" and rng is None:
        rng = stream(0, "eval.random")
    for t, (head, part) in enumerate(zip(model.heads, model.parts), start=1):
        locs = glimpse_locations(model, feats, t, arm, rng)
        rc = glimpse_rects(locs, head, stride, images.shape[-2:])
        crops = crop_batch(images, rc, model.part_size)
        scores.append(part_probs(part, crops))
        locations.append(locs)
        rects.append(rc)
    final = np.mean(scores, axis=0)
    preds = final.argmax(axis=1)
    acc = float((preds == labels).mean()) if len(labels) else 0.0
    return {"acc": acc, "n": int(len(labels)), "preds": preds, "locations": locations,
            "rects": rects, "scores": final}


class Trainer:
    """Runs the alternating three-step schedule on an in-memory dataset."""

    def __init__(self, config, images, labels, num_classes=None, log_path=None, ckpt_dir=None,
                 step1_cache=None):
        config.validate()
        if len(labels) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.cfg = config
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels)
        self.num_classes = num_classes or int(labels.max()) + 1
        tr, va = split_validation(len(labels), config.val_fraction, config.seed)
        self.x, self.y = images[tr], labels[tr]
        self.xv, self.yv = images[va], labels[va]
        self.log_path = log_path
        self.ckpt_dir = ckpt_dir
        self.step1_cache = step1_cache
        self.reports = []
        self.epoch = 0
        self.last_R = 0.0
        sizes = tuple(tuple(s) for s in config.region_sizes[:config.parts])
        self.model = build_model(stream(config.seed, "init"), self.num_classes, images.shape[-2:],
                                 (config.part_size, config.part_size), images.shape[1],
                                 tuple(config.channels), sizes, config.hidden)

    # ------------------------------------------------------------ bookkeeping

    def _report(self, step, rnd, L, train_acc, val_acc, mean_reward, t0, R=None):
        R = self.last_R if R is None else R
        rep = ObjectiveReport(self.epoch, step, rnd, R - L, R, L, train_acc, val_acc, mean_reward,
                              round((time.perf_counter() - t0) * 1000.0, 3))
        self.epoch += 1
        self.reports.append(rep)
        if self.log_path:
            rec = rep.record()
            rec["reward"] = self.cfg.reward
            rec["arm"] = self.cfg.arm
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")
        return rep

    def _checkpoint(self, name):
        if self.ckpt_dir:
            os.makedirs(self.ckpt_dir, exist_ok=True)
            checkpoint.save(os.path.join(self.ckpt_dir, name), self.model.state())

    def _optimizer(self, params):
        return RMSProp(params, self.cfg.lr, self.cfg.rmsprop_decay, self.cfg.rmsprop_eps)

    # ------------------------------------------------------------ step 1

    def step_backbone(self, rnd):
        cfg, m = self.cfg, self.model
        key = rnd
        if self.step1_cache is not None and key in self.step1_cache:
            state, reps = self.step1_cache[key]
            m.backbone.load_state(state, "backbone")
            m.image_clf.load_state(state)
            for rep in reps:
                t0 = time.perf_counter()
                self._report(1, rnd, rep.L, rep.train_acc, rep.val_acc, rep.mean_reward, t0)
            return
        first = len(self.reports)
        rng = stream(cfg.seed, f"step1.r{rnd}")
        params = m.backbone.tensors + m.image_clf.head.tensors
        opt = self._optimizer(params)
        drops = _drop_epochs(cfg.epochs_backbone, cfg.lr_drop_at)
        best, stale = -1.0, 0
        n = len(self.y)
        for e in range(cfg.epochs_backbone):
            t0 = time.perf_counter()
            opt.lr = step_lr(cfg.lr, e, drops, cfg.lr_factor)
            perm = rng.permutation(n)
            tot_loss, correct = 0.0, 0
            for idx in _batches(n, cfg.batch_size, perm):
                logits = pooled_logits(m.backbone.forward(tn.Tensor(self.x[idx])), m.image_clf.head)
                loss = tn.softmax_cross_entropy(logits, self.y[idx])
                loss.backward()
                opt.step()
                tot_loss += loss.item() * len(idx)
                correct += int((logits.data.argmax(1) == self.y[idx]).sum())
            val_acc = self._image_val_acc()
            self._report(1, rnd, tot_loss / n, correct / n, val_acc, 0.0, t0)
            best, stale = (val_acc, 0) if val_acc > best else (best, stale + 1)
            if stale >= cfg.patience:
                break
        if self.step1_cache is not None:
            state = dict(m.backbone.state("backbone"))
            state.update({k: v.copy() for k, v in m.image_clf.state().items()})
            state = {k: np.array(v) for k, v in state.items()}
            self.step1_cache[key] = (state, self.reports[first:])

    def _image_val_acc(self):
        if len(self.yv) == 0:
            return 0.0
        feats = compute_features(self.model.backbone, self.xv)
        return float((image_scores(feats, self.model.image_clf.head).argmax(1) == self.yv).mean())

    # ------------------------------------------------------------ step 2

    def step_attention(self, rnd):
        cfg, m = self.cfg, self.model
        rng = stream(cfg.seed, f"step2.r{rnd}")
        feats = compute_features(m.backbone, self.x)
        s0 = image_scores(feats, m.image_clf.head)
        tables = [region_score_table(feats, p.region_head, h.region) for h, p in zip(m.heads, m.parts)]
        fv = compute_features(m.backbone, self.xv) if len(self.yv) else None
        params = [t for h in m.heads for t in h.tensors]
        opt = self._optimizer(params)
        drops = _drop_epochs(cfg.epochs_attention, cfg.lr_drop_at)
        best, stale = -1.0, 0
        n = len(self.y)
        for e in range(cfg.epochs_attention):
            t0 = time.perf_counter()
            opt.lr = step_lr(cfg.lr, e, drops, cfg.lr_factor)
            perm = rng.permutation(n)
            rew, loss, final_ok = 0.0, 0.0, 0.0
            for idx in _batches(n, cfg.batch_size, perm):
                traces = rollout(feats[idx], self.y[idx], m, cfg.samples, cfg.reward, rng,
                                 sample_ids=idx, s0=s0[idx], tables=[tb[idx] for tb in tables])
                grads = policy_gradient(traces, m, feats)
                for head, hg in zip(m.heads, grads):
                    for p, g in zip(head.tensors, hg):
                        p.grad = -g
                opt.step()
                for head in m.heads:
                    head.version += 1
                rew += sum(float(tr.rewards.sum()) for tr in traces)
                loss += sum(float(tr.losses.sum()) for tr in traces)
                final_ok += sum(float(tr.correct[-1].sum()) for tr in traces)
            denom = n * m.T * cfg.samples
            R, L = rew / denom, loss / denom
            self.last_R = R
            val_acc = self._region_val_acc(fv) if fv is not None else 0.0
            self._report(2, rnd, L, final_ok / (n * cfg.samples), val_acc, R, t0, R=R)
            best, stale = (val_acc, 0) if val_acc > best else (best, stale + 1)
            if stale >= cfg.patience:
                break

    def _region_val_acc(self, fv):
        """Accuracy of the argmax glimpses scored on sliced region features."""
        m = self.model
        total = image_scores(fv, m.image_clf.head)
        rows = np.arange(len(fv))
        for head, part in zip(m.heads, m.parts):
            locs = batch_argmax(batch_policy(fv, head))
            table = region_score_table(fv, part.region_head, head.region)
            total = total + table[rows, locs[:, 0], locs[:, 1]]
        return float((total.argmax(1) == self.yv).mean())

    # ------------------------------------------------------------ step 3

    def step_parts(self, rnd):
        cfg, m = self.cfg, self.model
        rng = stream(cfg.seed, f"step3.r{rnd}")
        loc_rng = stream(cfg.seed, f"step3.locs.r{rnd}")
        feats = compute_features(m.backbone, self.x)
        stride = m.backbone.downsample
        crops, pooled = [], []
        for t, head in enumerate(m.heads, start=1):
            locs = glimpse_locations(m, feats, t, cfg.arm, loc_rng)
            rects = glimpse_rects(locs, head, stride, self.x.shape[-2:])
            crops.append(crop_batch(self.x, rects, m.part_size))
            means = region_means(feats, head.region)
            pooled.append(means[np.arange(len(feats)), locs[:, 0], locs[:, 1]])
        opts = [self._optimizer(p.tensors) for p in m.parts]
        ropts = [self._optimizer(p.region_head.tensors) for p in m.parts]
        drops = _drop_epochs(cfg.epochs_parts, cfg.lr_drop_at)
        best, stale = -1.0, 0
        n = len(self.y)
        eval_rng = stream(cfg.seed, f"eval.r{rnd}")
        for e in range(cfg.epochs_parts):
            t0 = time.perf_counter()
            lr = step_lr(cfg.lr, e, drops, cfg.lr_factor)
            perm = rng.permutation(n)
            tot, correct = 0.0, 0
            for part, opt, ropt, x, pf in zip(m.parts, opts, ropts, crops, pooled):
                opt.lr = ropt.lr = lr
                for idx in _batches(n, cfg.batch_size, perm):
                    logits = pooled_logits(part.stack.forward(tn.Tensor(x[idx])), part.head)
                    loss = tn.softmax_cross_entropy(logits, self.y[idx])
                    loss.backward()
                    opt.step()
                    tot += loss.item() * len(idx)
                    correct += int((logits.data.argmax(1) == self.y[idx]).sum())
                    rl = tn.softmax_cross_entropy(tn.linear(tn.Tensor(pf[idx]), part.region_head), self.y[idx])
                    rl.backward()
                    ropt.step()
            val_acc = 0.0
            if len(self.yv):
                val_acc = evaluate(m, self.xv, self.yv, cfg.arm, stream(cfg.seed, "eval.val"))["acc"]
            self._report(3, rnd, tot / (n * m.T), correct / (n * m.T), val_acc, 0.0, t0)
            best, stale = (val_acc, 0) if val_acc > best else (best, stale + 1)
            if stale >= cfg.patience:
                break

    # ------------------------------------------------------------ driver

    def _init_parts(self):
        m = self.model
        for part in m.parts:
            part.stack = m.backbone.copy()
            part.head = m.image_clf.head.copy()
            part.region_head = m.image_clf.head.copy()

    def run(self):
        cfg = self.cfg
        for rnd in range(cfg.rounds):
            self.step_backbone(rnd)
            self._checkpoint(f"round{rnd}_step1.fcan")
            if self.model.T == 0:
                continue
            if rnd == 0:
                self._init_parts()
            if cfg.arm == "attention":
                self.step_attention(rnd)
                self._checkpoint(f"round{rnd}_step2.fcan")
            self.step_parts(rnd)
            self._checkpoint(f"round{rnd}_step3.fcan")
        self._checkpoint("final.fcan")
        return self.model, self.reports


def train(images, labels, config, num_classes=None, log_path=None, ckpt_dir=None, step1_cache=None):
    """Train a model; returns (ModelParams, list of ObjectiveReport)."""
    return Trainer(config, images, labels, num_classes, log_path, ckpt_dir, step1_cache).run()
