"""Central finite-difference oracles for the differentiable pipeline.

``numeric_gradient`` never touches the reverse pass: it re-evaluates a scalar
function at perturbed inputs, which is what makes it an independent check of
every analytic backward rule.  ``run_all_suites`` bundles the checks the
command line exposes.
"""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad

DEFAULT_EPS = 1e-3
DEFAULT_TOL = 1e-4


def numeric_gradient(f, x, eps=DEFAULT_EPS):
    """Central finite differences of scalar ``f`` at array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def check_gradients(build, arrays, eps=DEFAULT_EPS, tol=DEFAULT_TOL, coords=None, rng=None):
    """Compare analytic gradients of ``build`` against finite differences.

    ``build`` maps a list of numpy arrays to a scalar Value, constructing a
    fresh graph each call.  Every array is treated as trainable.  Returns the
    worst relative error over the checked coordinates.

    ``coords``: number of randomly chosen coordinates to difference per array
    (None checks all of them).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [ad.parameter(a.copy()) for a in arrays]
    loss = build(params)
    ad.backward(loss)

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, (arr, p) in enumerate(zip(arrays, params)):
        if p.grad is None:
            analytic = np.zeros_like(arr)
        else:
            analytic = p.grad
        flat = arr.ravel()
        if coords is None or coords >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=coords, replace=False)
        for i in idxs:
            def f_at(_x, k=k, i=i):
                trial = [ad.constant(a) for a in arrays]
                trial[k] = ad.parameter(arrays[k])
                return build(trial).data

            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f_at(None))
            flat[i] = orig - eps
            fm = float(f_at(None))
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a_val = analytic.ravel()[i]
            denom = max(abs(numeric), abs(a_val), 1.0)
            err = abs(numeric - a_val) / denom
            worst = max(worst, err)
    return worst


def _suite_primitives(rng):
    """Per-primitive finite-difference checks, >=100 coordinates each."""
    n = 104  # 8 x 13 arrays give >100 coordinates per primitive
    results = {}

    def unary(name, fn, lo=-2.0, hi=2.0, avoid_kink=None):
        x = rng.uniform(lo, hi, size=(8, 13))
        if avoid_kink is not None:
            # keep inputs a safe margin away from non-differentiable points
            x = np.where(np.abs(x - avoid_kink) < 0.05, x + 0.1, x)
        err = check_gradients(lambda ps: ad.square_norm(fn(ps[0])), [x])
        results[name] = err

    unary("relu", ad.relu, avoid_kink=0.0)
    unary("sigmoid", ad.sigmoid)
    unary("exp", ad.exp)
    unary("log", ad.log, lo=0.2, hi=3.0)
    unary("sin", ad.sin)
    unary("cos", ad.cos)
    unary("sqrt", ad.sqrt, lo=0.2, hi=3.0)
    unary("clamp", lambda v: ad.clamp(v, -1.0, 1.0), avoid_kink=None)

    x = rng.normal(size=(12, 9))
    y = rng.normal(size=(12, 9))
    results["add"] = check_gradients(
        lambda ps: ad.square_norm(ps[0] + ps[1]), [x, y]
    )
    results["sub"] = check_gradients(
        lambda ps: ad.square_norm(ps[0] - ps[1]), [x, y]
    )
    results["mul"] = check_gradients(
        lambda ps: ad.square_norm(ps[0] * ps[1]), [x, y]
    )
    results["div"] = check_gradients(
        lambda ps: ad.square_norm(ps[0] / (ps[1] * 0.25 + 3.0)), [x, y]
    )
    results["scale"] = check_gradients(
        lambda ps: ad.square_norm(ps[0] * 1.7), [x]
    )

    xm = rng.normal(size=(7, 5))
    wm = rng.normal(size=(5, 6))
    bm = rng.normal(size=(6,))
    results["matmul"] = check_gradients(
        lambda ps: ad.square_norm(ps[0] @ ps[1]), [xm, wm]
    )
    results["affine"] = check_gradients(
        lambda ps: ad.square_norm(ad.affine(ps[0], ps[1], ps[2])), [xm, wm, bm]
    )
    results["transpose"] = check_gradients(
        lambda ps: ad.square_norm(ad.transpose(ps[0]) @ ps[0]), [xm]
    )
    results["concat"] = check_gradients(
        lambda ps: ad.square_norm(ad.concat([ps[0], ps[1]], axis=1) * rescale),
        [x, y],
    ) if (rescale := rng.normal(size=(12, 18))) is not None else None
    results["sum"] = check_gradients(
        lambda ps: ad.reduce_sum(ps[0] * ps[0]), [x]
    )
    results["mean"] = check_gradients(
        lambda ps: ad.mean(ps[0] * ps[0] * ps[0]), [x]
    )
    results["square_norm"] = check_gradients(lambda ps: ad.square_norm(ps[0]), [x])
    results["exclusive_cumsum"] = check_gradients(
        lambda ps: ad.square_norm(ad.exclusive_cumsum(ps[0] * ps[0], axis=1)), [x]
    )

    table = rng.normal(size=(30, 4))
    idx = rng.integers(0, 30, size=40)
    results["gather_rows"] = check_gradients(
        lambda ps: ad.square_norm(ad.gather_rows(ps[0], idx) * 0.5), [table]
    )
    results["broadcast_to"] = check_gradients(
        lambda ps: ad.square_norm(ad.broadcast_to(ps[0], (4, 12, 9)) * bscale),
        [x],
    ) if (bscale := rng.normal(size=(4, 12, 9))) is not None else None
    return results


def _suite_encodings(rng):
    from . import encodings

    results = {}
    x = rng.uniform(-0.9, 0.9, size=(6, 3))
    results["fourier_encode"] = check_gradients(
        lambda ps: ad.square_norm(encodings.fourier_encode(ps[0], 4) * fscale),
        [x],
    ) if (fscale := rng.normal(size=(6, 24))) is not None else None

    d = rng.normal(size=(6, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    sscale = rng.normal(size=(6, 16))
    results["sh_encode"] = check_gradients(
        lambda ps: ad.square_norm(encodings.sh_encode(ps[0]) * sscale), [d]
    )

    grid = encodings.HashGrid(
        levels=4, features_per_vertex=2, table_size=64, n_min=2, n_max=11,
        rng=np.random.default_rng(3),
    )
    pts = rng.uniform(0.08, 0.92, size=(5, 3))
    # keep each coordinate away from voxel faces at every level so finite
    # differences stay inside one cell
    for level in range(grid.levels):
        res = grid.level_resolution(level)
        scaled = pts * res
        frac = scaled - np.floor(scaled)
        pts += (np.abs(frac - 0.5) > 0.42) * (0.5 - frac) * 0.2 / res
    hscale = rng.normal(size=(5, 8))

    def build_tables(ps):
        g2 = grid.with_tables(ps)
        return ad.square_norm(encodings.hash_encode(ad.constant(pts), g2) * hscale)

    results["hash_encode/tables"] = check_gradients(
        build_tables, [t.data for t in grid.tables]
    )

    def build_x(ps):
        return ad.square_norm(encodings.hash_encode(ps[0], grid) * hscale)

    results["hash_encode/points"] = check_gradients(build_x, [pts], eps=1e-4)
    return results


def _suite_camera(rng):
    from . import camera

    results = {}
    r = rng.normal(size=3) * 0.7
    results["rodrigues"] = check_gradients(
        lambda ps: ad.square_norm(camera.rodrigues(ps[0]) * rscale), [r]
    ) if (rscale := rng.normal(size=(3, 3))) is not None else None

    rt = rng.normal(size=3) * 1e-6
    results["rodrigues/small-angle"] = check_gradients(
        lambda ps: ad.square_norm(camera.rodrigues(ps[0]) * rscale), [rt], eps=1e-7
    )

    w, h = 24, 18
    pixels = np.stack([rng.integers(0, h, 7), rng.integers(0, w, 7)], axis=1)
    dscale = rng.normal(size=(7, 3))
    oscale = rng.normal(size=(7, 3))

    def build_rays(ps):
        cam = camera.CameraParams(w, h, r=ps[0], t=ps[1], s=ps[2])
        rays = camera.generate_rays(cam, pixels)
        return ad.square_norm(rays.directions * dscale) + ad.square_norm(
            rays.origins * oscale
        )

    results["generate_rays"] = check_gradients(
        build_rays,
        [rng.normal(size=3) * 0.1, rng.normal(size=3) * 0.3,
         np.array([1.0, 1.0]) + rng.normal(size=2) * 0.05],
    )

    def build_ndc(ps):
        cam = camera.CameraParams(w, h, r=ps[0], t=ps[1], s=ps[2])
        rays = camera.generate_rays(cam, pixels)
        ndc = camera.to_ndc(rays, 1.0, cam)
        return ad.square_norm(ndc.directions * dscale) + ad.square_norm(
            ndc.origins * oscale
        )

    results["to_ndc"] = check_gradients(
        build_ndc,
        [rng.normal(size=3) * 0.05, np.array([0.1, -0.2, 0.3]),
         np.array([1.0, 1.0]) + rng.normal(size=2) * 0.05],
    )
    return results


def _suite_field(rng):
    from . import field

    results = {}
    model = field.FieldModel(rng=np.random.default_rng(11), cc_output_scale=0.5)
    pts = rng.uniform(-0.8, 0.8, size=(4, 3))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cscale = rng.normal(size=(4, 3))
    sscale = rng.normal(size=(4, 1))

    groups = {
        "main": model.main_parameters(),
        "correction": model.correction_parameters(),
    }
    for name, params in groups.items():
        arrays = [p.data for p in params]

        def build(ps, params=params):
            saved = [p.data for p in params]
            for p, a in zip(params, ps):
                p.data = a.data if isinstance(a, ad.Value) else a
            out = model.field_forward(ad.constant(pts), ad.constant(dirs))
            loss = ad.square_norm(out.corrected * cscale) + ad.square_norm(
                out.sigma * sscale
            )
            # restore then rebind Values so gradients land on the trial params
            for p, s in zip(params, saved):
                p.data = s
            return loss

        # rebind: simplest is to temporarily swap the arrays inside the model
        def build2(ps, params=params):
            originals = [p.data.copy() for p in params]
            for p, trial in zip(params, ps):
                p.data[...] = trial.data
                p.grad = None
                trial_backref.append((p, trial))
            out = model.field_forward(ad.constant(pts), ad.constant(dirs))
            loss = ad.square_norm(out.corrected * cscale) + ad.square_norm(
                out.sigma * sscale
            )
            for p, orig in zip(params, originals):
                p.data[...] = orig
            return loss

        # The closures above are awkward; use the dedicated helper instead.
        results[f"field/{name}"] = field.gradient_check(
            model, pts, dirs, params, cscale, sscale, coords=30, rng=rng
        )
    return results


trial_backref = []


def _suite_render(rng):
    from . import render

    results = {}
    n_rays, n_samples = 3, 6
    colors = rng.uniform(0.1, 0.9, size=(n_rays, n_samples, 3))
    sigmas = rng.uniform(0.1, 3.0, size=(n_rays, n_samples))
    deltas = np.full((n_rays, n_samples), 0.25)
    pscale = rng.normal(size=(n_rays, 3))

    def build(ps):
        pix, _ = render.volume_render(ps[0], ps[1], deltas)
        return ad.square_norm(pix * pscale)

    results["volume_render"] = check_gradients(build, [colors, sigmas])
    return results


def _suite_loss(rng):
    from . import trainer

    results = {}
    p = rng.uniform(0, 1, size=(9, 3))
    a = rng.uniform(0, 1, size=(9, 3))
    b = rng.uniform(0, 1, size=(9, 3))
    results["combined_loss"] = check_gradients(
        lambda ps: trainer.combined_loss(ad.constant(p), ps[0], ps[1]), [a, b]
    )
    return results


SUITES = {
    "primitives": _suite_primitives,
    "encodings": _suite_encodings,
    "camera": _suite_camera,
    "field": _suite_field,
    "render": _suite_render,
    "loss": _suite_loss,
}


def run_all_suites(tol=DEFAULT_TOL, seed=0, report=print):
    """Run every finite-difference suite; returns True when all pass."""
    rng = np.random.default_rng(seed)
    all_ok = True
    t0 = time.perf_counter()
    for name, suite in SUITES.items():
        for check, err in suite(rng).items():
            ok = err < tol
            all_ok &= ok
            report(f"[{'PASS' if ok else 'FAIL'}] {name}/{check}: max rel err {err:.3e}")
    report(f"gradient checks finished in {time.perf_counter() - t0:.1f}s")
    return all_ok
