"""Release-gate checks: finite differences for every backward rule, plus the
Monte Carlo policy gradient against exact enumeration."""

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import AttentionHead, score_map
from .classifier import PartClassifier, build_model, classify_part
from .features import Backbone, RegionSpec
from .gradcheck import grad_check
from .rl import GREEDY, cell_rewards, exact_policy_gradient, policy_gradient, rollout
from .rng import Rng
from .tensor import LayerParams

GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    error: float
    tol: float
    detail: str = ""

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<28} error={self.error:.3e} tol={self.tol:.0e}{extra}"


def _p(rng, *shape, scale=1.0):
    return tn.parameter(rng.normal(shape, scale))


def _weights(rng, shape):
    # fixed random projection so every output coordinate matters
    return rng.normal(shape)


def _project(y, w):
    return tn.sum(tn.mul(y, w))


def _op_cases(rng):
    """(name, fn, params) for every differentiable primitive."""
    cases = []

    a, b = _p(rng, 3, 4), _p(rng, 4)
    w = _weights(rng, (3, 4))
    cases.append(("add", lambda: _project(tn.add(a, b), w), [a, b]))
    a2, b2 = _p(rng, 3, 4), _p(rng, 3, 1)
    cases.append(("mul", lambda: _project(tn.mul(a2, b2), w), [a2, b2]))
    s = _p(rng, 5)
    ws = _weights(rng, (5,))
    cases.append(("scale", lambda: _project(tn.scale(s, -2.5), ws), [s]))
    # keep relu inputs away from the kink
    r = tn.parameter(np.sign(rng.normal(20)) * (0.1 + rng.random(20)))
    wr = _weights(rng, (20,))
    cases.append(("relu", lambda: _project(tn.relu(r), wr), [r]))
    lg = tn.parameter(0.5 + rng.random(6))
    wl = _weights(rng, (6,))
    cases.append(("log", lambda: _project(tn.log(lg), wl), [lg]))
    sm = _p(rng, 3, 4)
    cases.append(("sum", lambda: _project(tn.sum(sm, axis=1), _weights(Rng(1), (3,))), [sm]))
    mn = _p(rng, 3, 4)
    cases.append(("mean", lambda: _project(tn.mean(mn, axis=0), _weights(Rng(2), (4,))), [mn]))
    rs = _p(rng, 2, 6)
    cases.append(("reshape", lambda: _project(tn.reshape(rs, (3, 4)), w), [rs]))
    tk = _p(rng, 4, 5)
    idx = (np.array([0, 1, 1, 3]), np.array([2, 0, 0, 4]))
    cases.append(("take", lambda: _project(tn.take(tk, idx), _weights(Rng(3), (4,))), [tk]))
    c1, c2 = _p(rng, 2, 3), _p(rng, 1, 3)
    cases.append(("concat", lambda: _project(tn.concat([c1, c2], axis=0), w[:, :3]), [c1, c2]))

    x = _p(rng, 2, 2, 8, 8)
    conv = LayerParams.init(rng, 2, 4, k=3, stride=1, padding=1)
    conv.bias.data = rng.normal(4)
    wc = _weights(rng, (2, 4, 8, 8))
    cases.append(("conv2d", lambda: _project(tn.conv2d(x, conv), wc), [x] + conv.tensors))
    xs = _p(rng, 2, 7, 7)
    conv_s = LayerParams.init(rng, 2, 3, k=3, stride=2, padding=0)
    ws2 = _weights(rng, (3, 3, 3))
    cases.append(("conv2d_stride2", lambda: _project(tn.conv2d(xs, conv_s), ws2), [xs] + conv_s.tensors))

    # distinct values so the pooled maximum is unique and stable under eps
    mp = tn.parameter(rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1)
    wm = _weights(rng, (2, 3, 2, 2))
    cases.append(("max_pool2d", lambda: _project(tn.max_pool2d(mp), wm), [mp]))
    gp = _p(rng, 2, 3, 4, 4)
    cases.append(("global_avg_pool", lambda: _project(tn.global_avg_pool(gp), _weights(Rng(4), (2, 3))), [gp]))
    lin_x = _p(rng, 3, 5)
    lin = LayerParams.init(rng, 5, 4, k=1, padding=0)
    lin.bias.data = rng.normal(4)
    cases.append(("linear", lambda: _project(tn.linear(lin_x, lin), w), [lin_x] + lin.tensors))
    ls = _p(rng, 3, 4)
    cases.append(("log_softmax", lambda: _project(tn.log_softmax(ls), w), [ls]))
    so = _p(rng, 3, 4)
    cases.append(("softmax", lambda: _project(tn.softmax(so), w), [so]))
    ss = _p(rng, 1, 4, 4)
    wss = _weights(rng, (4, 4))
    cases.append(("spatial_softmax", lambda: _project(tn.spatial_softmax(ss), wss), [ss]))
    lss = _p(rng, 1, 4, 4)
    cases.append(("log_spatial_softmax", lambda: _project(tn.log_spatial_softmax(lss), wss), [lss]))
    ce = _p(rng, 5, 6)
    labels = np.array([0, 5, 2, 2, 1])
    cases.append(("softmax_cross_entropy", lambda: tn.softmax_cross_entropy(ce, labels), [ce]))
    cr = _p(rng, 2, 6, 6)
    cases.append(("crop", lambda: _project(tn.crop(cr, 1, 2, 3, 4), _weights(Rng(5), (2, 3, 4))), [cr]))
    rb = _p(rng, 2, 3, 5)
    cases.append(("resize_bilinear", lambda: _project(tn.resize_bilinear(rb, (7, 4)), _weights(Rng(6), (2, 7, 4))), [rb]))
    rn = _p(rng, 2, 3, 5)
    cases.append(("resize_nearest", lambda: _project(tn.resize_nearest(rn, (7, 4)), _weights(Rng(7), (2, 7, 4))), [rn]))
    return cases


def _pipeline_cases(rng):
    cases = []
    feats = tn.Tensor(rng.normal((4, 5, 5)))
    head = AttentionHead.init(rng, 1, 4, RegionSpec(1, 2, 2), hidden=8, out_gain=2.0)
    head.conv1.bias.data = rng.normal(8, 0.1)

    def attention_logp():
        logp = tn.reshape(tn.log_spatial_softmax(score_map(feats, head)), (-1,))
        return tn.sum(tn.take(logp, (np.array([7]),)))
    # conv2's bias shifts every cell equally, so its gradient is exactly zero
    # and a relative finite-difference error is meaningless; checked separately
    cases.append(("attention_log_prob", attention_logp, head.tensors[:3]))

    def bias_gradient():
        for p in head.tensors:
            p.grad = None
        attention_logp().backward()
        g = float(np.abs(head.conv2.bias.grad).max())
        for p in head.tensors:
            p.grad = None
        return g
    cases.append(("attention_bias_invariance", bias_gradient, None))

    img = tn.Tensor(rng.normal((1, 6, 6)))
    conv = LayerParams.init(rng, 1, 3, k=3, padding=1)
    conv.bias.data = rng.normal(3, 0.1)

    def conv_relu_softmax_ce():
        h = tn.relu(tn.conv2d(img, conv))
        return tn.softmax_cross_entropy(tn.reshape(h, (3, 36)), np.array([4, 0, 35]))
    cases.append(("conv_relu_softmax_ce", conv_relu_softmax_ce, conv.tensors))

    stack = Backbone([LayerParams.init(rng, 1, 4, k=3, padding=1)], [True])
    stack.layers[0].bias.data = rng.normal(4, 0.1)
    clf = PartClassifier(1, LayerParams.init(rng, 4, 5, k=1, padding=0), 5, stack=stack, input_size=(6, 6))
    patch = tn.Tensor(rng.normal((1, 6, 6)))

    def part_ce():
        p = classify_part(patch, clf)
        return tn.scale(tn.log(tn.take(p, (np.array([2]),))), -1.0)
    cases.append(("classify_part_ce", part_ce, clf.tensors))
    return cases


def gradient_checks(seed=0, tol=GRAD_TOL):
    """Finite-difference check of every op and the composed pipelines."""
    rng = Rng(seed)
    out = []
    for name, fn, params in _op_cases(rng) + _pipeline_cases(rng):
        try:
            if params is None:
                out.append(Check(name, fn(), 1e-12))
                continue
            err = grad_check(fn, params, eps=1e-6, max_coords=48, rng=Rng(seed + 1))
            out.append(Check(name, err, tol))
        except Exception as e:  # a broken rule must not hide the others
            out.append(Check(name, float("inf"), tol, f"{type(e).__name__}: {e}"))
    return out


# ---------------------------------------------------------------- estimator oracle

def toy_policy_problem(seed=0, grid=4, classes=4, channels=3):
    """Frozen single-glimpse model on a grid x grid feature map whose greedy
    reward varies across cells.  Returns (model, features, label, rewards)."""
    rng = Rng(seed)
    for attempt in range(200):
        model = build_model(rng, classes, (8 * grid, 8 * grid), (8, 8), 1, (channels,),
                            ((1, 1),), hidden=8)
        head = model.heads[0]
        head.conv2.kernels.data *= 30.0
        model.parts[0].region_head.kernels.data *= 20.0
        feats = np.abs(rng.normal((channels, grid, grid)))
        label = int(attempt % classes)
        r = cell_rewards(feats, label, model, 1, (), GREEDY)
        if 0.25 <= r.mean() <= 0.75:
            return model, feats, label, r
    raise RuntimeError("no toy problem with mixed rewards found")


def mc_policy_gradient(model, feats, label, episodes, rng, chunk=2000):
    """Average of ``policy_gradient`` over independent single-sample episodes."""
    total = None
    done = 0
    while done < episodes:
        n = min(chunk, episodes - done)
        batch = np.broadcast_to(feats, (n,) + feats.shape).copy()
        traces = rollout(batch, np.full(n, label), model, 1, GREEDY, rng)
        g = policy_gradient(traces, model, batch)[0]
        g = [x * n for x in g]
        total = g if total is None else [a + b for a, b in zip(total, g)]
        done += n
    return [x / episodes for x in total]


def per_cell_score_grads(model, feats):
    """d log pi(l) / d theta for every cell l, flattened: (H*W) x P."""
    head = model.heads[0]
    gh, gw = feats.shape[-2:]
    rows = []
    for cell in range(gh * gw):
        for p in head.tensors:
            p.grad = None
        logp = tn.reshape(tn.log_spatial_softmax(score_map(tn.Tensor(feats), head)), (-1,))
        tn.sum(tn.take(logp, (np.array([cell]),))).backward()
        rows.append(np.concatenate([p.grad.ravel() for p in head.tensors]))
        for p in head.tensors:
            p.grad = None
    return np.array(rows)


def estimator_check(seed=0, episodes=10_000, z=5.0):
    """Monte Carlo vs enumeration: max |mc - exact| / SE over coordinates."""
    model, feats, label, rewards = toy_policy_problem(seed)
    head = model.heads[0]
    exact, _ = exact_policy_gradient(feats, head, rewards)
    exact = np.concatenate([g.ravel() for g in exact])
    mc = np.concatenate([g.ravel() for g in mc_policy_gradient(model, feats, label, episodes, Rng(seed + 7))])
    probs = tn.spatial_softmax(score_map(tn.Tensor(feats), head)).data.ravel()
    per_cell = per_cell_score_grads(model, feats) * rewards.ravel()[:, None]
    var = probs @ per_cell ** 2 - (probs @ per_cell) ** 2
    se = np.sqrt(np.maximum(var, 0.0) / episodes)
    live = se > 1e-12
    zmax = float(np.max(np.abs(mc - exact)[live] / se[live])) if live.any() else 0.0
    dead = float(np.max(np.abs(mc - exact)[~live], initial=0.0))
    scale = np.max(np.abs(exact))
    rel = np.abs(mc - exact) / scale
    return {"exact": exact, "mc": mc, "se": se, "z_max": zmax, "dead_max": dead, "rel": rel,
            "episodes": episodes, "passed": zmax < z and dead < 1e-12}


def oracle_checks(seed=0):
    res = estimator_check(seed)
    rel = float(np.max(res["rel"]))
    return [Check("reinforce_vs_enumeration", res["z_max"], 5.0,
                  f"max coordinate error {rel:.2%} of the largest exact coordinate"), res]


def run_all(seed=0, out=print):
    """Print one line per check; returns True when everything passes."""
    checks = gradient_checks(seed)
    oracle, res = oracle_checks(seed)
    checks.append(oracle)
    for c in checks:
        out(c.line())
    out("reinforce vs enumeration, per coordinate (|mc - exact| / max|exact|):")
    out("  " + " ".join(f"{v:.3f}" for v in res["rel"][:24]) + (" ..." if len(res["rel"]) > 24 else ""))
    failed = [c.name for c in checks if not c.passed]
    out(f"{len(checks) - len(failed)}/{len(checks)} checks passed" +
        (f"; failing: {', '.join(failed)}" if failed else ""))
    return not failed
