"""Executable oracle suites: every derived-oracle comparison as a named
check returning pass/fail, runnable from the CLI. The pytest suite asserts
the same comparisons with fixed seeds; this module is the operational
surface for a quick green/red sweep of a build.
"""
import numpy as np

from . import autodiff as ad
from . import geometry, losses, oracles
from .autodiff import Var
from .geometry import Box3D
from .proposal import (
    Proposal,
    assign_targets,
    decode_stage1_boxes,
    encode_stage1_box,
    filter_nms,
    group_slices,
)
from .roipool import decode_residual, encode_residual, sample_roi_grid
from .sparse import (
    ConvWeights,
    SparseTensor,
    build_kernel_map,
    sparse_conv_backward,
    sparse_conv_forward,
    upsample_interpolate,
)
from .voxelize import ClassSizeTable, PointCloud, class_revoxelize, voxelize_avg


def _rand_coords(rng, n, lo, hi):
    seen, out = set(), []
    while len(out) < n:
        c = tuple(int(v) for v in rng.integers(lo, hi, 3))
        if c not in seen:
            seen.add(c)
            out.append(c)
    return np.array(out, np.int32)


def _rand_box(rng, center_scale=2.0):
    c = rng.uniform(-center_scale, center_scale, 3)
    d = rng.uniform(0.3, 2.0, 3)
    return Box3D(*c, *d, rng.uniform(-np.pi, np.pi))


def suite_kernel_map(rng):
    for k, dil in ((1, 1), (3, 1), (5, 2)):
        ic = _rand_coords(rng, 50, 0, 8)
        oc = _rand_coords(rng, 30, 0, 8)
        km = build_kernel_map(ic, oc, k, dil)
        if set(km.triples()) != oracles.brute_kernel_map(ic, oc, k, dil):
            return False, f"triple mismatch at k={k} dilation={dil}"
    return True, "triples equal brute-force pair scan"


def suite_dense_conv(rng):
    worst = 0.0
    for occ in (0.05, 0.3, 1.0):
        for k in (1, 3, 5):
            n = max(1, int(occ * 512))
            coords = _rand_coords(rng, n, 0, 8)
            feats = rng.normal(size=(n, 4))
            kernel = rng.normal(size=(k ** 3, 4, 3))
            y, _ = sparse_conv_forward(SparseTensor(coords, feats), ConvWeights(kernel), coords, k)
            ref = oracles.dense_conv_oracle(coords, feats, kernel, coords, k)
            worst = max(worst, oracles.rel_err(y.feats, ref))
    return worst <= 1e-6, f"max rel err {worst:.2e} (<= 1e-6)"


def suite_conv_gradients(rng):
    coords = _rand_coords(rng, 20, 0, 5)
    feats = rng.normal(size=(20, 3))
    kernel = rng.normal(size=(27, 3, 2))
    w = ConvWeights(kernel, rng.normal(size=2))
    kmap = build_kernel_map(coords, coords, 3)
    gi, gw = sparse_conv_backward(SparseTensor(coords, feats), w, kmap,
                                  np.ones((kmap.n_out, 2)))

    def f_feats(f):
        t, _ = sparse_conv_forward(SparseTensor(coords, f), w, coords, 3, kmap=kmap)
        return t.feats.sum()

    def f_kernel(kk):
        t, _ = sparse_conv_forward(SparseTensor(coords, feats), ConvWeights(kk, w.bias),
                                   coords, 3, kmap=kmap)
        return t.feats.sum()

    e1 = oracles.rel_err(gi, oracles.fd_gradient(f_feats, feats.copy()))
    e2 = oracles.rel_err(gw.kernel, oracles.fd_gradient(f_kernel, kernel.copy()))
    err = max(e1, e2)
    return err <= 1e-5, f"max rel err {err:.2e} (<= 1e-5)"


def suite_voxelize(rng):
    pos = rng.uniform(-3, 3, size=(300, 3))
    feats = rng.normal(size=(300, 2))
    vs = np.array([0.37, 0.41, 0.53])
    t = voxelize_avg(PointCloud(pos, feats), vs)
    cells = {tuple(v) for v in np.floor(pos / vs).astype(int)}
    if len(cells) != t.n_voxels:
        return False, "occupied cell count mismatch"
    table = ClassSizeTable([[0.3, 0.3, 0.3], [1.2, 1.2, 1.2]])
    for j in range(2):
        tj = class_revoxelize(PointCloud(pos), j, table, 0.5)
        cj = {tuple(v) for v in np.floor(pos / (0.5 * table[j])).astype(int)}
        if tj.n_voxels != len(cj):
            return False, f"class {j} revoxelization count mismatch"
        if not np.array_equal(tj.voxel_size, 0.5 * table[j]):
            return False, f"class {j} voxel size not exactly alpha*d_j"
    return True, "floor-division quantization and class cell sizes exact"


def suite_upsample(rng):
    parents = _rand_coords(rng, 20, 0, 4) * 4
    low = SparseTensor(parents, rng.normal(size=(20, 3)), stride=4)
    targets = _rand_coords(rng, 60, 0, 16)
    up = upsample_interpolate(low, targets, 1)
    lut = {tuple(c): f for c, f in zip(parents.tolist(), low.feats)}
    for t, f in zip(targets.tolist(), up.feats):
        want = lut.get(tuple(int(v) // 4 * 4 for v in t), np.zeros(3))
        if not np.array_equal(f, want):
            return False, "parent lookup mismatch"
    return True, "nearest-parent assignment equals per-point floor division"


def suite_iou_monte_carlo(rng, pairs=40, samples=200_000):
    worst = 0.0
    for i in range(pairs):
        a, b = _rand_box(rng), _rand_box(rng)
        got = geometry.iou3d(a, b)
        mc = oracles.mc_iou(a, b, samples, np.random.default_rng(1000 + i))
        worst = max(worst, abs(got - mc))
    exact = abs(geometry.iou3d(Box3D(0, 0, 0, 1, 1, 1), Box3D(0.5, 0, 0, 1, 1, 1)) - 1 / 3)
    ok = worst <= 0.02 and exact <= 1e-9
    return ok, f"max |clip - MC| {worst:.4f}, half-overlap cube err {exact:.1e}"


def suite_nms(rng):
    boxes = [_rand_box(rng, 1.2) for _ in range(120)]
    scores = rng.uniform(0, 1, 120)
    props = [Proposal(b, float(s), 0, 0.5) for b, s in zip(boxes, scores)]
    got = filter_nms(props, 0.0, 0.3)
    want = oracles.brute_nms(boxes, scores, 0.3)
    same = [p.box for p in got] == [boxes[i] for i in want]
    return same, f"kept {len(got)} boxes, equal to brute-force suppression: {same}"


def suite_assign(rng):
    coords = _rand_coords(rng, 400, 0, 12)
    vox = SparseTensor(coords, np.zeros((400, 1)), 1, (0.3, 0.3, 0.3))
    boxes = [_rand_box(rng, 1.8) for _ in range(8)]
    boxes = [Box3D(b.cx + 1.8, b.cy + 1.8, b.cz + 1.8, b.w, b.l, b.h, b.theta) for b in boxes]
    got = assign_targets(vox, boxes, list(range(8)))
    want = oracles.brute_assign(vox.centers(), boxes)
    ok = np.array_equal(got.box_id, want)
    return ok, "min-volume containment assignment equals brute-force scan"


def suite_roundtrips(rng):
    table = ClassSizeTable([[0.5, 0.6, 0.7], [1.5, 1.2, 1.0]])
    worst = 0.0
    for _ in range(300):
        b = _rand_box(rng)
        vc = rng.uniform(-2, 2, 3)
        j = int(rng.integers(0, 2))
        dec = decode_stage1_boxes(encode_stage1_box(b, vc, j, table, 0.15), vc, j, table, 0.15)[0]
        worst = max(worst, np.abs(dec - [b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta]).max())
        p, g = _rand_box(rng), _rand_box(rng)
        d = decode_residual(encode_residual(p, g), p)
        worst = max(worst, np.abs(np.array([d.cx - g.cx, d.cy - g.cy, d.cz - g.cz,
                                            d.w - g.w, d.l - g.l, d.h - g.h,
                                            geometry.wrap_angle(d.theta - g.theta)])).max())
    return worst <= 1e-6, f"max round-trip error {worst:.2e} (<= 1e-6)"


def suite_group_slices(rng):
    scores = rng.uniform(0, 1, size=(200, 3))
    tau = 0.35
    slices = group_slices(scores, tau)
    for j, idx in enumerate(slices):
        if not np.array_equal(idx, np.nonzero(scores[:, j] > tau)[0]):
            return False, f"slice {j} mismatch"
    return True, "class slices equal the predicate filter"


def suite_roi_grid(rng):
    boxes = [_rand_box(rng, 1.0) for _ in range(6)]
    gs = sample_roi_grid(boxes + [boxes[0]], (3, 3, 3), (0.1, 0.1, 0.1))
    bound = 27 * 7
    if len(gs.points) > bound:
        return False, "dedup bound violated"
    for own in gs.owners:
        if not own:
            return False, "point without owner"
    return True, f"{len(gs.points)} unique points <= {bound}, owners tracked"


def suite_loss_formulas(rng):
    probs = rng.uniform(0.05, 0.95, size=(40, 3))
    targets = rng.integers(-1, 3, size=40)
    got = float(losses.focal_loss(Var(probs), targets, 2.0, 0.7).data)
    acc = 0.0
    for i in range(40):
        for k in range(3):
            p_t = probs[i, k] if targets[i] == k else 1 - probs[i, k]
            acc += -0.7 * (1 - p_t) ** 2 * np.log(p_t)
    want = acc / 40
    if abs(got - want) > 1e-10:
        return False, f"focal loss mismatch {got} vs {want}"
    x = rng.normal(size=20)
    got = float(losses.smooth_l1(Var(x), np.zeros(20), 1.0).data)
    want = np.where(np.abs(x) < 1, 0.5 * x ** 2, np.abs(x) - 0.5).mean()
    if abs(got - want) > 1e-12:
        return False, "smooth-l1 mismatch"
    return True, "focal and smooth-l1 match direct formula evaluation"


def suite_loss_gradients(rng):
    logits0 = rng.normal(size=(12, 3))
    targets = rng.integers(-1, 3, size=12)

    def focal_of(lg):
        return float(losses.focal_loss(ad.sigmoid(Var(lg)), targets, 2.0, 1.0).data)

    x = Var(logits0.copy(), requires_grad=True)
    losses.focal_loss(ad.sigmoid(x), targets, 2.0, 1.0).backward()
    err = oracles.rel_err(x.grad, oracles.fd_gradient(focal_of, logits0.copy()))

    t0 = rng.normal(size=(5, 8)) * 0.3
    tgt = rng.normal(size=(5, 8)) * 0.3

    def sl1_of(t):
        return float(losses.smooth_l1(Var(t), tgt).data)

    y = Var(t0.copy(), requires_grad=True)
    losses.smooth_l1(y, tgt).backward()
    err = max(err, oracles.rel_err(y.grad, oracles.fd_gradient(sl1_of, t0.copy())))
    return err <= 1e-4, f"max rel err {err:.2e} (<= 1e-4)"


def suite_eval_map(rng):
    from .metrics import eval_map

    gt_boxes = [_rand_box(rng, 1.0) for _ in range(6)]
    gts = [(gt_boxes[:3], [0, 0, 1]), (gt_boxes[3:], [1, 0, 0])]
    preds = [[], []]
    for si, (boxes, cids) in enumerate(gts):
        for b, c in zip(boxes, cids):
            if rng.uniform() < 0.8:
                preds[si].append((c, float(rng.uniform(0.5, 1.0)), b))
        preds[si].append((int(rng.integers(0, 2)), float(rng.uniform(0, 0.5)),
                          _rand_box(rng, 4.0)))
    res = eval_map(preds, gts, (0.25,))
    from .metrics import match_predictions

    for cid, ap in res["ap"][0.25].items():
        scores, is_tp, n_gt, _ = match_predictions(preds, gts, cid, 0.25)
        ref = oracles.reference_average_precision(scores, is_tp, n_gt)
        if not (np.isnan(ap) and np.isnan(ref)) and abs(ap - ref) > 1e-12:
            return False, f"AP mismatch for class {cid}: {ap} vs {ref}"
    return True, "per-class AP equals the pointwise reference computation"


ALL_SUITES = [
    ("kernel_map_bruteforce", suite_kernel_map),
    ("sparse_vs_dense_conv", suite_dense_conv),
    ("conv_finite_differences", suite_conv_gradients),
    ("voxelize_floor_division", suite_voxelize),
    ("upsample_parent_lookup", suite_upsample),
    ("iou_monte_carlo", suite_iou_monte_carlo),
    ("nms_bruteforce", suite_nms),
    ("target_assignment_bruteforce", suite_assign),
    ("encode_decode_roundtrips", suite_roundtrips),
    ("grouping_slice_predicate", suite_group_slices),
    ("roi_grid_dedup", suite_roi_grid),
    ("loss_formula_reevaluation", suite_loss_formulas),
    ("loss_finite_differences", suite_loss_gradients),
    ("eval_map_reference", suite_eval_map),
]

GRAD_SUITES = [
    ("conv_finite_differences", suite_conv_gradients),
    ("loss_finite_differences", suite_loss_gradients),
]


def run_suites(suites=None, seed=0, report=print):
    """Run the named oracle suites; prints one PASS/FAIL line each and
    returns True iff everything passed."""
    suites = ALL_SUITES if suites is None else suites
    all_ok = True
    for name, fn in suites:
        rng = np.random.default_rng(seed)
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crashed oracle is a failed oracle
            ok, detail = False, f"exception: {e}"
        all_ok &= ok
        report(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
