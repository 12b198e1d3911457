"""Independent oracles and the self-test battery.

These deliberately avoid the production code paths they check: IoU by
Monte-Carlo point sampling, gradients by central finite differences,
suppression and matching by exhaustive reference loops.
"""

from __future__ import annotations

import math

import numpy as np

from . import geometry
from .geometry import Box3D, BoxBEV


# --------------------------------------------------------------- MC oracle
def mc_iou_bev(a: BoxBEV, b: BoxBEV, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo BEV IoU: sample the joint bounding box, test membership
    in each rotated rectangle analytically."""
    ca, cb = geometry.corners_bev(a), geometry.corners_bev(b)
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))

    def inside(box, p):
        c, s = math.cos(-box.theta), math.sin(-box.theta)
        dx = p[:, 0] - box.x
        dy = p[:, 1] - box.y
        lx = c * dx - s * dy
        ly = s * dx + c * dy
        return (np.abs(lx) <= box.l / 2) & (np.abs(ly) <= box.w / 2)

    both = inside(a, pts) & inside(b, pts)
    box_area = float(np.prod(hi - lo))
    inter = both.mean() * box_area
    union = a.l * a.w + b.l * b.w - inter
    return inter / union if union > 0 else 0.0


# ------------------------------------------------------------- FD gradient
def finite_diff_check(make_loss, params: list, n_coords: int = 5, step: float = 1e-5,
                      rtol: float = 1e-4, seed: int = 0) -> float:
    """Compare analytic gradients of a scalar loss against central
    differences on randomly chosen parameter coordinates.

    make_loss() rebuilds the loss from the current parameter data. Returns
    the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    loss = make_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    worst = 0.0
    for p in params:
        grads = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(grads).reshape(-1)
        k = min(n_coords, flat.size)
        for i in rng.choice(flat.size, size=k, replace=False):
            orig = flat[i]
            flat[i] = orig + step
            hi = make_loss().item()
            flat[i] = orig - step
            lo = make_loss().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            scale = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / scale)
    return worst


# --------------------------------------------------------- brute references
def brute_force_nms(boxes: list, scores: np.ndarray, iou_thresh: float) -> list:
    """O(n^2) reference suppression, independent of the production path."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if geometry.iou_bev(boxes[i], boxes[j]) > iou_thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def brute_force_points_in_box(points: np.ndarray, box: Box3D, margin: float) -> np.ndarray:
    """Per-point canonize-and-compare membership, one point at a time."""
    out = np.zeros(len(points), dtype=bool)
    c, s = math.cos(-box.theta), math.sin(-box.theta)
    for i, p in enumerate(points):
        dx, dy, dz = p[0] - box.x, p[1] - box.y, p[2] - box.z
        lx = c * dx - s * dy
        ly = s * dx + c * dy
        out[i] = (abs(lx) <= box.l / 2 + margin and abs(ly) <= box.w / 2 + margin
                  and abs(dz) <= box.h / 2 + margin)
    return out


def random_bev_box(rng, center_scale: float = 10.0) -> BoxBEV:
    return BoxBEV(rng.uniform(-center_scale, center_scale),
                  rng.uniform(-center_scale, center_scale),
                  rng.uniform(0.5, 6.0), rng.uniform(0.5, 4.0),
                  rng.uniform(-math.pi, math.pi))


def random_box3d(rng, center_scale: float = 10.0) -> Box3D:
    return Box3D(rng.uniform(-center_scale, center_scale),
                 rng.uniform(-center_scale, center_scale),
                 rng.uniform(-2.0, 2.0),
                 rng.uniform(0.5, 6.0), rng.uniform(0.5, 4.0), rng.uniform(0.5, 3.0),
                 rng.uniform(-math.pi, math.pi))


# ------------------------------------------------------------- the battery
def run_selftest(quick: bool = True, report=print) -> bool:
    """Condensed oracle battery; returns True when every suite passes."""
    from . import anchors as anchor_mod
    from . import augmentation, evalkit, losses, postprocess

    ok_all = True

    def suite(name, fn):
        nonlocal ok_all
        try:
            fn()
            report(f"PASS {name}")
        except AssertionError as e:
            ok_all = False
            report(f"FAIL {name}: {e}")

    def geometry_suite():
        rng = np.random.default_rng(0)
        n_pairs = 20 if quick else 200
        n_samples = 200_000 if quick else 1_000_000
        for k in range(n_pairs):
            a, b = random_bev_box(rng), random_bev_box(rng)
            got = geometry.iou_bev(a, b)
            ref = mc_iou_bev(a, b, n_samples, seed=k)
            assert abs(got - ref) <= 5e-3, f"pair {k}: {got} vs MC {ref}"

    def roundtrip_suite():
        rng = np.random.default_rng(1)
        for _ in range(200):
            gt = random_box3d(rng)
            anchor = random_box3d(rng)
            d_a = math.hypot(anchor.l, anchor.w)
            dec = anchor_mod.decode_rpn(anchor_mod.encode_rpn(gt, anchor, d_a), anchor, d_a)
            assert abs(dec.x - gt.x) < 1e-9 and abs(dec.l - gt.l) < 1e-9
            corners = anchor_mod.decode_corners(anchor_mod.encode_corners(gt, anchor), anchor)
            assert np.allclose(corners, geometry.corners_3d(gt), atol=1e-9)

    def loss_suite():
        cfg = losses.LossConfig()
        got = losses.cls_loss(np.array([0.5]), np.array([0.5]), cfg).item()
        assert abs(got - 11 * math.log(2)) < 1e-12, got
        s = cfg.sigma
        cut = 1 / s ** 2
        a = losses.smooth_l1(np.array([cut - 1e-9]), s).data[0]
        b = losses.smooth_l1(np.array([cut + 1e-9]), s).data[0]
        assert abs(a - b) < 1e-6

    def nms_suite():
        rng = np.random.default_rng(2)
        boxes = [random_bev_box(rng, 5.0) for _ in range(60)]
        scores = rng.uniform(0, 1, 60)
        got = postprocess.nms_rotated(boxes, scores, 0.3)
        ref = brute_force_nms(boxes, scores, 0.3)
        assert got == ref, "kept sets differ"

    def ap_suite():
        ap = evalkit.average_precision(np.array([True]), np.array([False]), 2, "R11")
        assert abs(ap - 6 / 11) < 1e-12, ap

    def augment_suite():
        from .synthetic import SceneSpec, generate_scene
        spec = SceneSpec()
        n = 20 if quick else 100
        for i in range(n):
            pc, gts = generate_scene(spec, seed=i)
            counts = [int(geometry.points_in_box(pc.points, g).sum()) for g in gts]
            pc2, gts2 = augmentation.global_augment(pc, gts, seed=i)
            counts2 = [int(geometry.points_in_box(pc2.points, g).sum()) for g in gts2]
            assert counts == counts2, f"scene {i}: {counts} vs {counts2}"
            for a in range(len(gts2)):
                for b in range(a + 1, len(gts2)):
                    assert geometry.iou_bev(gts2[a].bev(), gts2[b].bev()) == 0.0

    suite("geometry.iou_bev vs Monte-Carlo", geometry_suite)
    suite("encode/decode round-trips", roundtrip_suite)
    suite("loss hand values", loss_suite)
    suite("rotated NMS vs brute force", nms_suite)
    suite("average precision hand case", ap_suite)
    suite("augmentation audit", augment_suite)
    return ok_all
