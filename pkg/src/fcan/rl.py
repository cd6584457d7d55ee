"""Rewards, episode rollouts, the REINFORCE estimator and its exact counterpart.

Conventions used throughout:

* The whole-image score s_0 is term 0 of the running average, so after t
  glimpses S_t = (s_0 + s_1 + ... + s_t) / (t + 1).
* L_t is the cross-entropy -log S_t[y] of that running average.
* Each of the K samples drawn per step starts its own chain: sample k at
  step t is averaged with sample k of steps 1..t-1, and its greedy reward
  compares against the loss of that same chain at t-1.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import score_map
from .features import GlimpseLocation, clamp_region

GREEDY = "greedy"
DELAYED = "delayed"
MAX_ENUM_CELLS = 4096


def greedy_reward(t, correct, loss=None, prev_loss=None):
    """1 if correct at t = 1, or correct with a strictly lower loss at t > 1."""
    if t < 1:
        raise ValueError(f"timesteps start at 1, got {t}")
    if t == 1:
        return int(bool(correct))
    if prev_loss is None or loss is None:
        raise ValueError(f"greedy reward at t={t} needs both the current and previous loss")
    return int(bool(correct) and loss < prev_loss)


def delayed_reward(t, T, final_correct):
    """1 only at the last step, and only when the final prediction is right."""
    return int(t == T and bool(final_correct))


# ---------------------------------------------------------------- region scores

def clamp_tables(grid_h, grid_w, spec):
    """Per-cell (top, left) of the clamped region, as two H x W int arrays."""
    tops = np.empty((grid_h, grid_w), dtype=int)
    lefts = np.empty((grid_h, grid_w), dtype=int)
    for r in range(grid_h):
        for c in range(grid_w):
            top, left, _, _ = clamp_region(GlimpseLocation(spec.t, r, c), spec, grid_h, grid_w)
            tops[r, c], lefts[r, c] = top, left
    return tops, lefts


def region_means(features, spec):
    """Mean feature vector of the clamped region centred on every cell.

    ``features`` is N x C x H x W; returns N x H x W x C.
    """
    n, c, gh, gw = features.shape
    h, w = min(spec.cells_h, gh), min(spec.cells_w, gw)
    sat = np.zeros((n, c, gh + 1, gw + 1))
    sat[:, :, 1:, 1:] = features.cumsum(axis=2).cumsum(axis=3)
    box = sat[:, :, h:, w:] - sat[:, :, :-h, w:] - sat[:, :, h:, :-w] + sat[:, :, :-h, :-w]
    tops, lefts = clamp_tables(gh, gw, spec)
    means = box[:, :, tops, lefts] / (h * w)
    return means.transpose(0, 2, 3, 1)


def region_score_table(features, region_head, spec):
    """Class probabilities for the region at every cell: N x H x W x classes."""
    means = region_means(features, spec)
    w = region_head.kernels.data[:, :, 0, 0]
    logits = means @ w.T + region_head.bias.data
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def image_scores(features, image_head):
    """Whole-image class probabilities from cached N x C x H x W features."""
    logits = features.mean(axis=(2, 3)) @ image_head.kernels.data[:, :, 0, 0].T + image_head.bias.data
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- episodes

@dataclass
class EpisodeTrace:
    sample_id: int
    label: int
    locations: np.ndarray   # T x K x 2 (row, col)
    log_probs: np.ndarray   # T x K
    scores: np.ndarray      # T x K x classes, the step scores s_t
    losses: np.ndarray      # T x K, loss of the running average S_t
    correct: np.ndarray     # T x K
    rewards: np.ndarray     # T x K
    versions: tuple         # policy version of each head at rollout time

    @property
    def final_losses(self):
        return self.losses[-1]

    def glimpses(self, t, k):
        r, c = self.locations[t - 1, k]
        return GlimpseLocation(t, int(r), int(c))


def sample_cells(probs, k, rng):
    """K multinomial draws per row of an N x H x W probability array -> N x K flat indices."""
    n = probs.shape[0]
    cdf = np.cumsum(probs.reshape(n, -1), axis=1)
    u = rng.random((n, k)) * cdf[:, -1:]
    idx = (cdf[:, None, :] <= u[:, :, None]).sum(axis=-1)
    return np.minimum(idx, cdf.shape[1] - 1)


def chain_rewards(strategy, t, T, correct, loss, prev_loss):
    if strategy == GREEDY:
        if t == 1:
            return correct.astype(int)
        return (correct & (loss < prev_loss)).astype(int)
    if strategy == DELAYED:
        return (correct & (t == T)).astype(int)
    raise ValueError(f"unknown reward strategy {strategy!r}")


def rollout(features, labels, model, k, strategy, rng, sample_ids=None, s0=None, tables=None):
    """Roll out K chains per sample through all T heads (Fast-RCNN region path).

    ``features`` is the N x C x H x W cached feature array.  Returns one
    EpisodeTrace per sample.
    """
    features = np.asarray(features)
    labels = np.asarray(labels)
    n = features.shape[0]
    T = model.T
    if sample_ids is None:
        sample_ids = np.arange(n)
    if s0 is None:
        s0 = image_scores(features, model.image_clf.head)
    rows = np.arange(n)[:, None]
    total = np.repeat(s0[:, None, :], k, axis=1)  # running sum, N x K x classes
    prev_loss = None
    locs, logps, step_scores, losses, corrects, rewards = [], [], [], [], [], []
    for i, (head, part) in enumerate(zip(model.heads, model.parts)):
        t = i + 1
        conf = score_map(tn.Tensor(features), head)
        logp = tn.log_spatial_softmax(conf).data.reshape(n, -1)
        gh, gw = features.shape[-2:]
        cells = sample_cells(np.exp(logp).reshape(n, gh, gw), k, rng)
        table = tables[i] if tables is not None else region_score_table(features, part.region_head, head.region)
        s_t = table.reshape(n, gh * gw, -1)[rows, cells]
        total = total + s_t
        avg = total / (t + 1)
        loss = -np.log(avg[rows, np.arange(k)[None, :], labels[:, None]])
        correct = avg.argmax(axis=-1) == labels[:, None]
        r = chain_rewards(strategy, t, T, correct, loss, prev_loss)
        locs.append(np.stack([cells // gw, cells % gw], axis=-1))
        logps.append(logp[rows, cells])
        step_scores.append(s_t)
        losses.append(loss)
        corrects.append(correct)
        rewards.append(r)
        prev_loss = loss
    versions = tuple(h.version for h in model.heads)
    traces = []
    for j in range(n):
        traces.append(EpisodeTrace(
            int(sample_ids[j]), int(labels[j]),
            np.stack([x[j] for x in locs]) if T else np.zeros((0, k, 2), int),
            np.stack([x[j] for x in logps]) if T else np.zeros((0, k)),
            np.stack([x[j] for x in step_scores]) if T else np.zeros((0, k, s0.shape[1])),
            np.stack([x[j] for x in losses]) if T else np.zeros((0, k)),
            np.stack([x[j] for x in corrects]) if T else np.zeros((0, k), bool),
            np.stack([x[j] for x in rewards]) if T else np.zeros((0, k), int),
            versions))
    return traces


def run_episode(features, label, model, k, strategy, rng, sample_id=0):
    """Single-sample rollout; ``features`` is C x H x W."""
    return rollout(np.asarray(features)[None], [label], model, k, strategy, rng,
                   sample_ids=[sample_id])[0]


# ---------------------------------------------------------------- gradients

def policy_gradient(traces, model, features):
    """Monte Carlo ascent direction for every head.

    Head t receives the gradient of (1/N) sum_n (1/K) sum_k r_nk log pi(l_nk),
    i.e. an estimate of the gradient of (1/N) sum_n E[r^t_n].  Samples with zero
    reward are dropped before the backward pass.  ``features[trace.sample_id]``
    must be the cached feature array each trace was rolled out on.

    Returns a list (one per head) of gradient arrays aligned with head.tensors.
    """
    if not traces:
        raise ValueError("policy_gradient needs at least one trace")
    versions = tuple(h.version for h in model.heads)
    for tr in traces:
        if tr.versions != versions:
            raise ValueError(f"stale trace for sample {tr.sample_id}: rolled out under policy "
                             f"versions {tr.versions}, current {versions}")
    ids = np.array([tr.sample_id for tr in traces])
    feats = np.asarray(features)[ids]
    n = len(traces)
    k = traces[0].rewards.shape[1]
    out = []
    for i, head in enumerate(model.heads):
        r = np.stack([tr.rewards[i] for tr in traces])            # N x K
        loc = np.stack([tr.locations[i] for tr in traces])        # N x K x 2
        grads = [np.zeros_like(p.data) for p in head.tensors]
        nz = np.nonzero(r)
        if len(nz[0]) == 0:
            out.append(grads)
            continue
        gw = feats.shape[-1]
        cells = loc[..., 0] * gw + loc[..., 1]
        sub = np.unique(nz[0])
        remap = np.searchsorted(sub, nz[0])
        for p in head.tensors:
            p.grad = None
        conf = score_map(tn.Tensor(feats[sub]), head)
        logp = tn.reshape(tn.log_spatial_softmax(conf), (len(sub), -1))
        picked = tn.take(logp, (remap, cells[nz]))
        weights = r[nz].astype(float) / (k * n)
        tn.sum(tn.mul(picked, weights)).backward()
        for j, p in enumerate(head.tensors):
            grads[j] = p.grad.copy()
            p.grad = None
        out.append(grads)
    return out


def cell_rewards(features, label, model, t, prev_locations=(), strategy=GREEDY, s0=None):
    """Deterministic reward of every cell at step t, given the earlier glimpses.

    ``features`` is C x H x W; ``prev_locations`` holds t-1 GlimpseLocations.
    Returns an H x W array.
    """
    if len(prev_locations) != t - 1:
        raise ValueError(f"step {t} needs {t - 1} previous locations, got {len(prev_locations)}")
    feats = np.asarray(features)[None]
    if s0 is None:
        s0 = image_scores(feats, model.image_clf.head)[0]
    total = s0.copy()
    gh, gw = feats.shape[-2:]
    for loc in prev_locations:
        i = loc.t - 1
        table = region_score_table(feats, model.parts[i].region_head, model.heads[i].region)[0]
        total = total + table[loc.row, loc.col]
    prev_avg = total / t
    prev_loss = -np.log(prev_avg[label])
    head_i = t - 1
    table = region_score_table(feats, model.parts[head_i].region_head, model.heads[head_i].region)[0]
    avg = (total[None, None, :] + table) / (t + 1)
    loss = -np.log(avg[..., label])
    correct = avg.argmax(axis=-1) == label
    return chain_rewards(strategy, t, model.T, correct, loss, prev_loss if t > 1 else None).astype(float)


def exact_policy_gradient(features, head, rewards):
    """Gradient of sum_l pi(l) r(l) w.r.t. the head parameters, by enumeration."""
    gh, gw = np.asarray(features).shape[-2:]
    if gh * gw > MAX_ENUM_CELLS:
        raise ValueError(f"grid {gh}x{gw} too large to enumerate (limit {MAX_ENUM_CELLS} cells)")
    for p in head.tensors:
        p.grad = None
    probs = tn.spatial_softmax(score_map(tn.Tensor(features), head))
    expected = tn.sum(tn.mul(probs, np.asarray(rewards, dtype=float)))
    expected.backward()
    grads = [p.grad.copy() for p in head.tensors]
    for p in head.tensors:
        p.grad = None
    return grads, expected.item()


def exact_expected_reward_gradient(features, label, model, t, prev_locations=(), strategy=GREEDY):
    """Exact gradient of E[r^t] for one sample, enumerating every grid cell."""
    gh, gw = np.asarray(features).shape[-2:]
    if gh * gw > MAX_ENUM_CELLS:
        raise ValueError(f"grid {gh}x{gw} too large to enumerate (limit {MAX_ENUM_CELLS} cells)")
    r = cell_rewards(features, label, model, t, prev_locations, strategy)
    grads, _ = exact_policy_gradient(features, model.heads[t - 1], r)
    return grads
