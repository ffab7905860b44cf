"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line to the session summary (printed at the
end of the pytest run) and fails if its criterion is not met.
"""

import itertools
import math
import time

import numpy as np
import pytest

from cae import nn
from cae.codec import compress, decompress, image_codes
from cae.data import synthetic_corpus
from cae.entropy import GsmModel, discrete_log2_probs, exact_code_bits, gsm_log2_density, rate_upper_bound_estimate
from cae.harness import ablate_no_round, ablate_surrogates, evaluate, rows_to_csv, summarize
from cae.metrics import ms_ssim, psnr, ssim
from cae.model import CaeConfig, CaeModel, Tradeoff, training_forward
from cae.rangecoder import ChannelTable, decode_stream, encode_stream
from cae.tensor import Rng, Tape, Tensor, add, gradcheck, mul, reduce_mean, reduce_sum, scale, square, sub
from cae.train import AdamState, adam_step, finetune_lr

pytestmark = pytest.mark.slow


def verdict(log, number, title, ok, detail, seconds=None, limit=None):
    if seconds is not None:
        detail += f"; {seconds:.1f}s (limit {limit}s)"
        ok = ok and seconds < limit
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    log.append(line)
    print(line)
    assert ok, line


def _lin(c, shape, seed):
    """Random linear read-out so every output coordinate matters."""
    return Tensor(np.random.default_rng(seed).normal(size=shape) * c)


def test_1_gradient_suite(acceptance_log):
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    errs = {}

    def check(name, f, x, **kw):
        errs[name] = gradcheck(f, Tensor(x), **kw)

    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    c = _lin(1, (3, 4), 1)
    check("add", lambda t: reduce_sum(mul(add(t, Tensor(b)), c)), a)
    check("sub", lambda t: reduce_sum(mul(sub(Tensor(b), t), c)), a)
    check("mul", lambda t: reduce_sum(mul(t, Tensor(b))), a)
    check("scale", lambda t: reduce_sum(mul(scale(t, -2.5), c)), a)
    check("square", lambda t: reduce_sum(square(t)), a)
    check("reduce_mean", lambda t: reduce_mean(mul(t, c)), a)

    x = r.normal(size=(2, 3, 6, 6))
    for mode, stride in itertools.product(("mirror", "zero"), (1, 2)):
        spec = nn.ConvSpec(3, 2, 3, stride, mode)
        spec.init_uniform(Rng(1))
        out_shape = nn.conv2d(Tensor(x), spec).shape
        cc = _lin(1, out_shape, 2)
        check(f"conv2d[{mode},s{stride}]", lambda t: reduce_sum(mul(nn.conv2d(t, spec), cc)), x)
        check(f"conv2d_weight[{mode},s{stride}]",
              lambda w: reduce_sum(mul(nn.conv2d(Tensor(x), nn.ConvSpec(3, 2, 3, stride, mode, w, spec.bias)), cc)),
              spec.weight.data)
    check("pad_mirror", lambda t: reduce_sum(mul(nn.pad2d(t, 2, "mirror"), _lin(1, (2, 3, 10, 10), 3))), x)
    check("subpixel_up", lambda t: reduce_sum(mul(nn.subpixel(t, 2, "up"), _lin(1, (3, 1, 6, 8), 4))),
          r.normal(size=(3, 4, 3, 4)))
    check("subpixel_down", lambda t: reduce_sum(mul(nn.subpixel(t, 2, "down"), _lin(1, (2, 12, 3, 3), 5))), x)
    check("leaky_relu", lambda t: reduce_sum(mul(nn.leaky_relu(t), c)), a + np.sign(a) * 0.1)
    img = r.uniform(0, 255, (3, 4, 4))
    check("normalize", lambda t: reduce_sum(mul(nn.normalize(t, [1, 2, 3], [4, 5, 6]), _lin(1, (3, 4, 4), 6))), img)
    check("denormalize", lambda t: reduce_sum(mul(nn.denormalize(t, [1, 2, 3], [4, 5, 6]), _lin(1, (3, 4, 4), 7))),
          r.normal(size=(3, 4, 4)))
    check("channel_scale", lambda s: reduce_sum(mul(nn.channel_scale(Tensor(x[0]), s), _lin(1, (3, 6, 6), 8))),
          r.normal(size=3) * 0.3)
    check("channel_mask", lambda t: reduce_sum(mul(nn.channel_mask(t, [1, 0, 1]), _lin(1, (3, 6, 6), 9))), x[0])
    check("add_noise", lambda t: reduce_sum(square(nn.add_noise(t, x[0]))), x[1])
    check("sum_squared_error", lambda t: nn.sum_squared_error(t, img), r.uniform(0, 255, (3, 4, 4)))
    gsm = GsmModel(3, 4, r.normal(size=(3, 4)), r.uniform(-4, 2, (3, 4)))
    v = r.normal(scale=2, size=(3, 3, 3))
    check("gsm[v]", lambda t: gsm_log2_density(gsm, t), v)

    def gsm_with(lw=None, lp=None):
        g = gsm.copy()
        if lw is not None:
            g.log_weights = lw
        if lp is not None:
            g.log_precisions = lp
        return gsm_log2_density(g, Tensor(v))
    check("gsm[log_weights]", lambda t: gsm_with(lw=t), gsm.log_weights.data)
    check("gsm[log_precisions]", lambda t: gsm_with(lp=t), gsm.log_precisions.data)

    # full desk-scale pass: 16 filters, 1 residual block, 16 code channels, additive-noise
    # surrogate with the noise draw replayed by a fresh seeded Rng on every evaluation
    model = CaeModel(CaeConfig())
    batch = synthetic_corpus(2, seed=4, height=16, width=16)
    model.fit_normalization(batch)
    xb = np.stack([im.transpose(2, 0, 1) for im in batch]).astype(np.float64)
    groups = dict(model.network_parameters())
    groups["scales"] = model.scale_sets[0].log_scales
    for name, p in groups.items():
        def f(t, name=name, p=p):
            holder = _swap(model, name, t)
            try:
                return training_forward(model, xb, Tradeoff.alpha(0.05), Rng(11), mode="additive_noise").loss
            finally:
                _swap(model, name, holder)
        errs[f"training_forward[{name}]"] = gradcheck(f, Tensor(p.data.copy()), h=1e-5, coords=6)

    worst_name = max(errs, key=errs.get)
    grad_ok = errs[worst_name] < 1e-4

    # surrogate rules are exact: identity for round_ste, constant 1 for clip_st
    y = Tensor(r.normal(scale=3, size=50), requires_grad=True)
    g = r.normal(size=50)
    with Tape() as tape:
        out = reduce_sum(mul(nn.quantize_surrogate(y, "round_ste"), Tensor(g)))
    tape.backward(out)
    ste_ok = np.array_equal(y.grad, g)
    z = Tensor(np.array([-40.0, 10.0, 300.0, 255.0, 0.0]), requires_grad=True)
    with Tape() as tape:
        out = reduce_sum(mul(nn.clip_st(z), Tensor(g[:5])))
    tape.backward(out)
    clip_ok = np.array_equal(z.grad, g[:5])
    verdict(acceptance_log, 1, "gradient suite",
            grad_ok and ste_ok and clip_ok,
            f"{len(errs)} checks, worst {worst_name} rel err {errs[worst_name]:.2e} (< 1e-4); "
            f"round_ste identity {ste_ok}, clip_st unit {clip_ok}",
            time.perf_counter() - t0, 60)


def _swap(model, name, tensor):
    """Put ``tensor`` in place of the named parameter; returns the previous one."""
    if name == "scales":
        old = model.scale_sets[0].log_scales
        model.scale_sets[0].log_scales = tensor
        return old
    if name.startswith("gsm."):
        attr = name.split(".", 1)[1]
        old = getattr(model.gsm, attr)
        setattr(model.gsm, attr, tensor)
        return old
    layer, attr = name.rsplit(".", 1)
    spec = model.convs()[layer]
    old = getattr(spec, attr)
    setattr(spec, attr, tensor)
    return old


def test_2_entropy_bound(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_margin, worst_norm = math.inf, 0.0
    for i in range(50):
        k, s = int(rng.integers(1, 4)), int(rng.integers(1, 7))
        m = GsmModel(k, s, rng.normal(size=(k, s)), rng.uniform(-6, 4, (k, s)))
        z = np.round(rng.normal(scale=np.exp(rng.uniform(-1, 2)), size=(k, 2, 2)))
        r = Rng(i, 3)
        draws = np.array([rate_upper_bound_estimate(m, Tensor(z), r).item() for _ in range(1000)])
        sem = draws.std(ddof=1) / math.sqrt(draws.size)
        margin = (draws.mean() - exact_code_bits(m, z)) / max(sem, 1e-300)
        worst_margin = min(worst_margin, margin)
        reach = int(math.ceil(40 * m.sigmas.max()))
        support = np.broadcast_to(np.arange(-reach, reach + 1, dtype=np.float64), (k, 1, 2 * reach + 1))
        total = (2.0 ** discrete_log2_probs(m, support)).sum(axis=(1, 2))
        worst_norm = max(worst_norm, float(np.abs(total - 1).max()))
    ok = worst_margin >= -3 and worst_norm <= 1e-9
    verdict(acceptance_log, 2, "entropy bound",
            ok, f"50 models, min (MC mean - exact)/SEM = {worst_margin:.2f} (>= -3); "
            f"max |sum Q - 1| = {worst_norm:.1e} (<= 1e-9)", time.perf_counter() - t0, 60)


def test_3_coder(acceptance_log, desk_build):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    n = 10 ** 5
    hist = desk_build.models[1].scale_sets[0].histogram
    trained = hist.tables[int(np.argmax([t.n_symbols for t in hist.tables]))]
    p = trained.probabilities()
    sources = {
        "uniform": (ChannelTable(0, np.append(np.ones(256, int), 1)), rng.integers(0, 256, n)),
        "skewed": (ChannelTable(0, np.array([99, 1, 1]) * 10 ** 4), (rng.random(n) < 0.01).astype(int)),
        "trained": (trained, trained.z_min + rng.choice(p.size - 1, n, p=p[:-1] / p[:-1].sum())),
    }
    details, ok = [], True
    for name, (table, syms) in sources.items():
        data = encode_stream(syms, table)
        exact = decode_stream(data, table, n) == syms.tolist()
        xent = sum(table.log2_prob(int(z)) for z in syms) / 8
        within = len(data) <= xent * 1.01 + 16
        ok &= exact and within
        details.append(f"{name} {len(data)}B vs H {xent:.0f}B exact={exact}")

    imgs = synthetic_corpus(100, seed=30)
    bad = 0
    for i, im in enumerate(imgs):
        m = desk_build.models[i % 3]
        s = i % len(m.scale_sets)
        f = compress(desk_build.models, im, preset=(m.model_id, s))
        _, codes = decompress(f.to_bytes(), desk_build.models, return_codes=True)
        bad += not np.array_equal(codes, image_codes(m, im, s))
    ok &= bad == 0
    verdict(acceptance_log, 3, "coder", ok,
            "; ".join(details) + f"; 100 images, {bad} code mismatches", time.perf_counter() - t0, 60)


def test_4_desk_training(acceptance_log, desk_build):
    res = desk_build.results[1]  # alpha 0.05, 16 code channels
    losses = np.array([r.loss for r in res.trace])
    start = losses[:50].mean()
    end = losses[-50:].mean()
    reduction = 1 - end / start
    hist = res.mask_history
    monotone = all(b - a in (0, 1) for a, b in zip(hist, hist[1:])) and hist[0] == 2 \
        and all(a < b for a, b in zip(res.enable_steps, res.enable_steps[1:]))
    zeros = all(desk_build.masked_zero)
    ok = reduction >= 0.2 and monotone and zeros and len(res.trace) == 2000
    verdict(acceptance_log, 4, "desk training", ok,
            f"loss MA50 {start:.4f} -> {end:.4f} ({100 * reduction:.1f}% reduction, >= 20%); "
            f"enabled {hist[0]} -> {hist[-1]} at steps {res.enable_steps}; "
            f"masked codes zero at all {len(desk_build.masked_zero)} steps: {zeros}",
            desk_build.train_seconds / 3, 600)


def test_5_rd_monotonicity(acceptance_log, desk_build, test_images):
    t0 = time.perf_counter()
    pts = evaluate(desk_build.models, test_images)
    means = {r["codec"]: r for r in summarize(pts)}

    def at(mid, sid):
        return means[f"cae:m{mid}:s{sid}"]

    tuned = [(s.alpha, at(m.model_id, i)) for m in desk_build.models
             for i, s in enumerate(m.scale_sets) if s.alpha is not None]
    violations = []
    for (a1, r1), (a2, r2) in itertools.combinations(sorted(tuned, key=lambda t: t[0]), 2):
        if a1 == a2:
            continue
        if not (r1["bpp"] - r2["bpp"] >= 1e-6 and r2["mse"] - r1["mse"] >= 1e-6):
            violations.append(f"alpha {a1} vs {a2}")
    base = [at(m.model_id, 0) for m in desk_build.models]
    base_ok = all(x["bpp"] > y["bpp"] and x["mse"] < y["mse"] for x, y in zip(base, base[1:]))

    outside = []
    for m in desk_build.models:
        for i, s in enumerate(m.scale_sets):
            if s.parents is None:
                continue
            lo, hi = sorted(at(m.model_id, j)["bpp"] for j in s.parents)
            b = at(m.model_id, i)["bpp"]
            if not (0.95 * lo <= b <= 1.05 * hi):
                outside.append(f"m{m.model_id}:s{i}")
    ok = base_ok and not violations and not outside
    frontier = ", ".join(f"a={a:g}:{r['bpp']:.3f}bpp/{r['mse']:.0f}" for a, r in sorted(tuned, key=lambda t: t[0]))
    verdict(acceptance_log, 5, "RD monotonicity", ok,
            f"{len(tuned)} tuned points [{frontier}]; order violations {violations or 'none'}; "
            f"interpolated points outside endpoints±5%: {outside or 'none'}",
            desk_build.total_seconds + time.perf_counter() - t0, 1800)


def test_6_ablations(acceptance_log, desk_build, train_images, test_images, tmp_path):
    t0 = time.perf_counter()
    rows = ablate_no_round(desk_build.models[1], test_images)
    rounded = float(np.mean([r["mse_rounded"] for r in rows]))
    smooth = float(np.mean([r["mse_no_round"] for r in rows]))
    from cae.harness import RunConfig
    run = RunConfig.from_dict({"seed": 0})
    twin = ablate_surrogates(train_images, test_images, run.train, run.net)
    (tmp_path / "surrogates.csv").write_text(rows_to_csv(twin))
    by = {r["surrogate"]: r for r in twin}
    ordering = "STE < additive noise" if by["round_ste"]["mse"] < by["additive_noise"]["mse"] \
        else "additive noise <= STE"
    verdict(acceptance_log, 6, "ablations", smooth < rounded and len(twin) == 2,
            f"no-round MSE {smooth:.1f} < rounded MSE {rounded:.1f}; surrogate twins: "
            f"round_ste MSE {by['round_ste']['mse']:.1f} @ {by['round_ste']['bpp']:.3f}bpp, "
            f"additive_noise MSE {by['additive_noise']['mse']:.1f} @ {by['additive_noise']['bpp']:.3f}bpp "
            f"(reported: {ordering})", time.perf_counter() - t0, 1200)


def test_7_schedule(acceptance_log):
    expected = {0: 1e-3, 1: 9.99200719328637788e-4, 1000: 5.74349177498517486e-4,
                10_000: 1.46854024200197984e-4}
    sched_err = max(abs(finetune_lr(t) - v) / v for t, v in expected.items())
    target = np.array([1.5, -0.7, 0.2])
    p = {"w": Tensor(np.zeros(3))}
    state = AdamState(lr=0.05)
    for _ in range(500):
        adam_step(state, p, {"w": 2 * (p["w"].data - target)})
    bowl = float(np.abs(p["w"].data - target).max())
    verdict(acceptance_log, 7, "schedule arithmetic", sched_err < 1e-12 and bowl < 1e-3,
            f"lr(t) max rel err {sched_err:.1e} at t in {{0,1,1000,1e4}}; "
            f"Adam quadratic bowl |w - w*| = {bowl:.1e} after 500 steps")


def test_8_metrics(acceptance_log):
    a = np.full((16, 16, 3), 100, np.uint8)
    e1 = abs(psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) - 48.1308036086791034)
    e25 = abs(psnr(a, a + 5) - 34.1514035219587273)
    img = synthetic_corpus(1, seed=7)[0]
    noise = np.random.default_rng(8).normal(size=img.shape)
    noisy = [np.clip(img + s * noise, 0, 255) for s in (2, 5, 10, 20)]
    s_vals = [ssim(img, x) for x in noisy]
    m_vals = [ms_ssim(img, x) for x in noisy]
    ident = abs(ssim(img, img) - 1) < 1e-12 and abs(ms_ssim(img, img) - 1) < 1e-12
    mono = all(x > y for x, y in zip(s_vals, s_vals[1:])) and all(x > y for x, y in zip(m_vals, m_vals[1:]))
    verdict(acceptance_log, 8, "metrics", max(e1, e25) < 1e-9 and ident and mono,
            f"PSNR errors {e1:.1e}, {e25:.1e} dB; identity {ident}; "
            f"SSIM {[round(v, 4) for v in s_vals]}, MS-SSIM {[round(v, 4) for v in m_vals]} monotone {mono}")
