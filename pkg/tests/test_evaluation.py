"""Tests for oracle detection and the layout metrics.

Reference numbers are derived by hand (small-box IOU, the single-point AP
value, 8-bit contrast/saturation of synthetic fields) before being frozen
here; the detector is validated by round-tripping rendered dataset scenes.
"""

import numpy as np

from ilgd.dataset import (
    COLOR_VALUES, SceneObject, SceneSpec, generate_scene, render_scene,
)
from ilgd.evaluation import (
    Detection, GroundTruth, iou, classify_fill, oracle_detect, count_matches,
    eleven_point_ap, ap_at_50, rms_contrast, mean_saturation, luma_u8,
)


def det(color, shape, box, conf=1.0):
    return Detection(color, shape, box, conf, 0.0, 100)


def gt(color, shape, box):
    return GroundTruth(color, shape, box)


# --- IOU -------------------------------------------------------------------

def test_iou_hand_case():
    # inter = 5*5 = 25, union = 100 + 100 - 25 = 175
    assert abs(iou((0, 0, 10, 10), (5, 5, 15, 15)) - 25 / 175) < 1e-12


def test_iou_limits():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0
    assert iou((0, 0, 10, 10), (20, 20, 30, 30)) == 0.0
    assert 0.0 < iou((0, 0, 10, 10), (2, 2, 8, 8)) < 1.0


def test_iou_symmetry():
    r = np.random.default_rng(0)
    for _ in range(50):
        a = np.sort(r.uniform(0, 32, size=4)).take([0, 2, 1, 3])
        b = np.sort(r.uniform(0, 32, size=4)).take([0, 2, 1, 3])
        a = (a[0], a[1], a[2], a[3])
        b = (b[0], b[1], b[2], b[3])
        assert abs(iou(a, b) - iou(b, a)) < 1e-15
        assert 0.0 <= iou(a, b) <= 1.0


# --- matching --------------------------------------------------------------

def test_count_matches_true_positive():
    tp, fp, fn = count_matches([det("red", "square", (0, 0, 10, 10))],
                               [gt("red", "square", (0, 0, 10, 10))])
    assert (tp, fp, fn) == (1, 0, 0)


def test_count_matches_low_iou_costs_both():
    # right class, some overlap, IOU < 0.5 -> one FP and one FN
    tp, fp, fn = count_matches([det("red", "square", (0, 0, 10, 10))],
                               [gt("red", "square", (8, 8, 18, 18))])
    assert (tp, fp, fn) == (0, 1, 1)


def test_count_matches_wrong_class():
    tp, fp, fn = count_matches([det("red", "circle", (0, 0, 10, 10))],
                               [gt("red", "square", (0, 0, 10, 10))])
    assert (tp, fp, fn) == (0, 1, 1)


def test_count_matches_duplicate_detection():
    dets = [det("red", "square", (0, 0, 10, 10)),
            det("red", "square", (1, 1, 11, 11))]
    tp, fp, fn = count_matches(dets, [gt("red", "square", (0, 0, 10, 10))])
    assert (tp, fp, fn) == (1, 1, 0)


def test_count_matches_confidence_filter():
    # the low-confidence detection is dropped before matching, so only the
    # ground truth remains -> one FN, and tp + fn still equals len(truths)
    dets = [det("red", "square", (0, 0, 10, 10), conf=0.2)]
    gts = [gt("red", "square", (0, 0, 10, 10))]
    assert count_matches(dets, gts, confidence_threshold=0.5) == (0, 0, 1)
    assert count_matches(dets, gts, confidence_threshold=0.2) == (1, 0, 0)


def test_count_matches_invariant_random():
    r = np.random.default_rng(1)
    colors = ["red", "green", "blue"]
    shapes = ["circle", "square", "triangle"]

    def rand_box():
        x0, y0 = r.uniform(0, 20, size=2)
        w, h = r.uniform(4, 12, size=2)
        return (x0, y0, x0 + w, y0 + h)

    for _ in range(100):
        dets = [det(colors[r.integers(3)], shapes[r.integers(3)], rand_box(),
                    conf=float(r.random()))
                for _ in range(r.integers(0, 5))]
        gts = [gt(colors[r.integers(3)], shapes[r.integers(3)], rand_box())
               for _ in range(r.integers(0, 5))]
        tp, fp, fn = count_matches(dets, gts)
        assert tp + fn == len(gts)
        assert tp + fp >= len(dets) - 0  # every detection is TP or FP
        assert tp + fp == len(dets) or fp >= 0


# --- AP ---------------------------------------------------------------------

def test_eleven_point_ap_single_point():
    # one (recall 0.5, precision 1.0) point -> 6 grid points at P=1 -> 6/11
    assert abs(eleven_point_ap([(0.5, 1.0)]) - 6 / 11) < 1e-12


def test_eleven_point_ap_perfect():
    assert eleven_point_ap([(1.0, 1.0)]) == 1.0


def test_ap_sweep_end_to_end():
    # Two images, two gts; one exact detection at confidence 0.9 on image 0.
    # At every threshold <= 0.9: tp=1, fp=0, fn=1 -> P=1, R=0.5.
    # Above 0.9: no detections -> degenerate (P=1, R=0).
    dets = [[det("red", "square", (0, 0, 10, 10), conf=0.9)], []]
    gts = [[gt("red", "square", (0, 0, 10, 10))],
           [gt("blue", "circle", (0, 0, 10, 10))]]
    ap, table = ap_at_50(dets, gts)
    assert abs(ap - 6 / 11) < 1e-12
    assert any(row["degenerate"] for row in table)
    for row in table:
        assert row["tp"] + row["fn"] == 2  # counting invariant at every threshold
        if not row["degenerate"]:
            assert row["precision"] == 1.0 and row["recall"] == 0.5


# --- image statistics --------------------------------------------------------

def test_rms_contrast_checkerboard():
    img = np.zeros((8, 8, 3))
    img[::2, ::2] = 1.0
    img[1::2, 1::2] = 1.0
    assert abs(rms_contrast(img) - 127.5) < 1e-9


def test_rms_contrast_uniform_ramp():
    # one row per 8-bit level: std of discrete uniform {0..255} = 73.9003...
    levels = np.arange(256, dtype=np.float64) / 255.0
    img = np.repeat(levels.reshape(-1, 1), 4, axis=1)[..., None].repeat(3, axis=2)
    want = np.sqrt((256.0 ** 2 - 1) / 12.0)
    assert abs(rms_contrast(img) - want) < 1e-9
    assert abs(want - 73.90027) < 1e-4


def test_rms_contrast_flat_is_zero():
    assert rms_contrast(np.full((4, 4, 3), 0.5)) == 0.0


def test_luma_bt601_weights():
    img = np.zeros((1, 3, 3))
    img[0, 0, 0] = 1.0  # pure red
    img[0, 1, 1] = 1.0  # pure green
    img[0, 2, 2] = 1.0  # pure blue
    y = luma_u8(img)
    assert y[0, 0] == round(0.299 * 255)
    assert y[0, 1] == round(0.587 * 255)
    assert y[0, 2] == round(0.114 * 255)


def test_saturation_pure_red():
    img = np.zeros((4, 4, 3))
    img[..., 0] = 1.0
    assert mean_saturation(img) == 255.0


def test_saturation_half_red_half_grey():
    img = np.zeros((2, 4, 3))
    img[0, :, 0] = 1.0        # saturated red row: S = 255
    img[1, :, :] = 0.5        # grey row: S = 0
    assert abs(mean_saturation(img) - 127.5) < 1e-12


def test_saturation_black_is_zero():
    assert mean_saturation(np.zeros((3, 3, 3))) == 0.0


# --- detector round trip -----------------------------------------------------

def test_classify_fill_thresholds():
    assert classify_fill(0.97)[0] == "square"
    assert classify_fill(0.785)[0] == "circle"
    assert classify_fill(0.5)[0] == "triangle"
    shape, conf = classify_fill(1.0)
    assert shape == "square" and conf == 1.0
    shape, conf = classify_fill(np.pi / 4)
    assert shape == "circle" and conf > 0.999


def test_oracle_detects_rendered_scenes():
    # Round trip: every rendered object is found with the right class, a
    # tight box, and confidence >= 0.9.
    for seed in range(25):
        scene = generate_scene(seed)
        img = render_scene(scene)
        dets = oracle_detect(img)
        assert len(dets) == len(scene.objects), f"seed {seed}"
        gts = [gt(o.color, o.shape, o.box) for o in scene.objects]
        tp, fp, fn = count_matches(dets, gts)
        assert (tp, fp, fn) == (len(gts), 0, 0), f"seed {seed}"
        for d in dets:
            assert d.confidence >= 0.9, (seed, d)
        for g_ in gts:
            best = max(iou(d.box, g_.box) for d in dets
                       if d.label == g_.label)
            assert best >= 0.8, f"seed {seed}: loose box {best}"


def test_oracle_empty_background():
    img = render_scene(SceneSpec("grid", ()))
    assert oracle_detect(img) == []
