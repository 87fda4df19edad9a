import numpy as np
import pytest

from lowa.dataset import SyntheticSpec, generate_synthetic
from lowa.geometry import pairwise_iou, to_xyxy
from lowa.inference import (
    DEFAULT_THRESHOLD,
    Detection,
    ImageScores,
    Predictor,
    classify_attributes_boxfree,
    closed_vocab_from_scores,
    detect_closed_vocab,
    detect_open_vocab,
    localize_by_attribute,
    nms,
    predictions_json,
    select_proposal,
)
from lowa.model import LOWAModel, ModelConfig
from lowa.trainer import TrainConfig, build_vocab, train

SMALL = ModelConfig(image_size=32, patch_size=8, embed_dim=16, num_layers=1, num_heads=2, mlp_hidden=32,
                    proj_dim=8, text_vocab_size=64)
CLASSES = ["bar", "circle", "square", "triangle"]
ATTRS = ["blue", "green", "hollow", "large", "on its side", "orange", "purple", "red", "small", "solid",
         "upright", "yellow"]


@pytest.fixture(scope="module")
def images():
    return generate_synthetic(SyntheticSpec(image_size=32, num_images=40, max_objects=2), 0)


@pytest.fixture(scope="module")
def random_predictor():
    from lowa.querygen import load_templates
    vocab = build_vocab(CLASSES, ATTRS, load_templates())
    return Predictor(LOWAModel(SMALL, 0), vocab)


@pytest.fixture(scope="module")
def trained(images):
    out = {}
    for seed in (0, 1, 2):
        cfg = TrainConfig(steps_o=40, steps_a=40, steps_f=20, batch_size=4, seed=seed, lr_image=3e-3,
                          lr_text=3e-3)
        model, data, _, _ = train(images, SMALL, cfg)
        out[seed] = Predictor(model, data.vocab, data.templates)
    return out


def test_nms_keeps_one_of_duplicates():
    boxes = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3]], dtype=float)
    assert nms(boxes, np.array([0.5, 0.5, 0.9])) == [2, 0]
    assert nms(np.zeros((0, 4)), np.zeros(0)) == []


def test_nms_keeps_boxes_at_exactly_half_overlap():
    boxes = np.array([[0, 0, 2, 1], [1, 0, 3, 1], [0.5, 0, 2.5, 1]], dtype=float)
    # IoU(0,1) = 1/3, IoU(0,2) = 0.6
    assert nms(boxes, np.array([0.9, 0.8, 0.7])) == [0, 1]


def test_one_class_gives_query_zero(random_predictor, images):
    dets = detect_closed_vocab(random_predictor, images[0].pixels, ["square"])
    assert dets and all(d.query_index == 0 for d in dets)
    with pytest.raises(ValueError):
        detect_closed_vocab(random_predictor, images[0].pixels, [])


def _scores(P=6, Q=3, seed=0):
    rng = np.random.default_rng(seed)
    lo = rng.random((P, 2)) * 0.6
    boxes = np.hstack([lo, lo + 0.1 + rng.random((P, 2)) * 0.3])
    return ImageScores(boxes, rng.normal(size=(P, Q)) * 3, np.zeros((P, 2)))


def test_closed_vocab_against_brute_force():
    for seed in range(30):
        s = _scores(seed=seed)
        got = closed_vocab_from_scores(s)
        sc = s.scores
        want = []
        for q in range(sc.shape[1]):
            mine = [p for p in range(len(sc)) if np.argmax(sc[p]) == q]
            mine.sort(key=lambda p: (-sc[p, q], p))
            kept = []
            for p in mine:
                if all(pairwise_iou(s.boxes[[p]], s.boxes[[k]])[0, 0] <= 0.5 for k in kept):
                    kept.append(p)
            want += [(q, p) for p in kept]
        assert [(d.query_index, d.proposal) for d in got] == want


def test_trained_closed_vocab_ranking_is_a_score_sort(trained, images):
    pred = trained[0]
    for img in images[:5]:
        dets = detect_closed_vocab(pred, img.pixels, CLASSES)
        for q in range(len(CLASSES)):
            scores = [d.score for d in dets if d.query_index == q]
            assert scores == sorted(scores, reverse=True)
        s = pred.score(img.pixels, [pred.prompt(c) for c in CLASSES])
        for d in dets:
            assert d.score == s.scores[d.proposal, d.query_index] == s.scores[d.proposal].max()


def test_select_proposal_exhaustive():
    rng = np.random.default_rng(1)
    for _ in range(50):
        lo = rng.random((10, 2)) * 0.5
        boxes = np.hstack([lo, lo + 0.05 + rng.random((10, 2)) * 0.4])
        target = boxes[rng.integers(10)] + rng.normal(0, 0.05, 4)
        ious = [pairwise_iou([target], [b])[0, 0] for b in boxes]
        best = max(range(10), key=lambda i: (ious[i], -i))
        assert select_proposal(boxes, target) == best


def test_exact_box_selects_that_proposal(random_predictor, images):
    boxes, _ = random_predictor.image_features(images[0].pixels)
    assert select_proposal(boxes, boxes[11]) == 11


def test_box_free_duplicates_and_order(random_predictor, images):
    img, box = images[1].pixels, to_xyxy(images[1].instances[0].box)
    s = classify_attributes_boxfree(random_predictor, img, box, ["red", "small", "red"])
    assert s[0] == s[2]
    perm = classify_attributes_boxfree(random_predictor, img, box, ["small", "red"])
    np.testing.assert_array_equal(perm, s[[1, 0]])
    assert np.all((s >= 0) & (s <= 1))


def test_localize_top_k(random_predictor, images):
    out = localize_by_attribute(random_predictor, images[2].pixels, ["red", "blue"], top_k=1)
    assert [len(x) for x in out] == [1, 1]
    with pytest.raises(ValueError):
        localize_by_attribute(random_predictor, images[2].pixels, ["red"], top_k=0)


def test_localize_ranking_is_nms_over_sorted_scores(random_predictor, images):
    pred = random_predictor
    img = images[3].pixels
    out = localize_by_attribute(pred, img, ["red"], top_k=10)[0]
    s = pred.score(img, [pred.prompt("red")])
    order = sorted(range(len(s.boxes)), key=lambda p: (-s.scores[p, 0], p))
    kept = []
    for p in order:
        if all(pairwise_iou(s.boxes[[p]], s.boxes[[k]])[0, 0] <= 0.5 for k in kept):
            kept.append(p)
    assert [d.proposal for d in out] == kept[:10]


def test_absent_attribute_scores_below_threshold(trained, images):
    for seed, pred in trained.items():
        for img in images[:10]:
            present = {a for i in img.instances for a in i.attributes}
            absent = [a for a in ATTRS if a not in present]
            for dets in localize_by_attribute(pred, img.pixels, absent, top_k=10):
                assert all(d.score < DEFAULT_THRESHOLD for d in dets), seed


def test_open_vocab_is_filter_of_scores(random_predictor, images):
    pred, img = random_predictor, images[4].pixels
    queries = ["a photo of red square", "a photo of blue circle"]
    s = pred.score(img, queries)
    t = float(np.median(s.scores))
    dets = detect_open_vocab(pred, img, queries, threshold=t)
    assert all(d.score >= t for d in dets)
    for q in range(2):
        above = set(np.flatnonzero(s.scores[:, q] >= t))
        kept = {d.proposal for d in dets if d.query_index == q}
        assert kept <= above
        assert bool(kept) == bool(above)


def test_threshold_monotone(random_predictor, images):
    queries = ["a photo of red square", "a photo of small bar"]
    for img in images[:5]:
        s = random_predictor.score(img.pixels, queries)
        ts = np.sort(np.r_[np.linspace(0.1, 0.9, 9), np.quantile(s.scores, np.linspace(0.1, 0.9, 9))])
        sets = [{(d.query_index, d.proposal) for d in detect_open_vocab(random_predictor, img.pixels, queries, t)}
                for t in ts]
        assert all(hi <= lo for lo, hi in zip(sets, sets[1:]))


def test_threshold_near_one_is_empty(random_predictor, images):
    assert detect_open_vocab(random_predictor, images[0].pixels, ["a photo of red square"], threshold=0.999999) == []
    with pytest.raises(ValueError):
        detect_open_vocab(random_predictor, images[0].pixels, ["x"], threshold=1.0)


def test_inference_is_read_only(trained, images):
    pred = trained[1]
    before = pred.model.state_dict()
    detect_closed_vocab(pred, images[0].pixels, CLASSES)
    localize_by_attribute(pred, images[0].pixels, ATTRS)
    detect_open_vocab(pred, images[0].pixels, ["a photo of red square"])
    assert all(np.array_equal(before[n], p.data) for n, p in pred.model.params.items())


def test_prediction_json_shape():
    d = Detection((0.1, 0.2, 0.3, 0.4), 1, 0.75)
    out = predictions_json("img1", [d], ["a", "b"])
    assert out == {"image_id": "img1", "detections": [{"bbox": [0.1, 0.2, 0.3, 0.4], "query": "b", "score": 0.75}]}
