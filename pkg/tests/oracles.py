"""Slow, loop-only reference implementations used by the metric tests."""


def iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def rank_order(scores):
    """Indices by descending score, ties by position, via pairwise counting."""
    n = len(scores)
    rank = [sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
            for i in range(n)]
    order = [0] * n
    for i, r in enumerate(rank):
        order[r] = i
    return order


def average_precision(scores, labels):
    """Area under the stepwise precision/recall curve, one step per item."""
    labels = [bool(x) for x in labels]
    n_pos = sum(labels)
    if n_pos == 0:
        return None
    order = rank_order(list(scores))
    area, prev_recall = 0.0, 0.0
    for cut in range(1, len(order) + 1):
        top = order[:cut]
        tp = sum(labels[i] for i in top)
        recall = tp / n_pos
        area += (tp / cut) * (recall - prev_recall)
        prev_recall = recall
    return area


def mr_f1(scores, gt, k):
    n, a = len(scores), len(scores[0])
    pred = []
    for row in scores:
        chosen = rank_order(list(row))[:k]
        pred.append([j in chosen for j in range(a)])
    recalls, f1s = [], []
    for j in range(a):
        g = sum(gt[i][j] for i in range(n))
        if g == 0:
            continue
        hit = sum(1 for i in range(n) if gt[i][j] and pred[i][j])
        p_count = sum(pred[i][j] for i in range(n))
        r = hit / g
        p = hit / p_count if p_count else 0.0
        recalls.append(r)
        f1s.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    if not recalls:
        return None, None
    return sum(recalls) / len(recalls), sum(f1s) / len(f1s)


def greedy_found(dets, gts, t):
    """dets: list of (box, score); each det takes its best free GT if IoU >= t."""
    order = rank_order([d[1] for d in dets])
    taken = [False] * len(gts)
    for i in order:
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i][0], g)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= t:
            taken[best] = True
    return sum(taken)


def localization_ar(dets, gt, attributes, k):
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    per = {}
    for a in attributes:
        total = sum(len(g.get(a, [])) for g in gt.values())
        if total == 0:
            per[a] = None
            continue
        vals = []
        for t in thresholds:
            found = 0
            for img, g in gt.items():
                if not g.get(a):
                    continue
                d = dets.get(img, {}).get(a, [])
                d = [d[i] for i in rank_order([x[1] for x in d])][:k]
                found += greedy_found(d, g[a], t)
            vals.append(found / total)
        per[a] = sum(vals) / len(vals)
    defined = [v for v in per.values() if v is not None]
    return (sum(defined) / len(defined) if defined else None), per


def detection_ap(dets, gts, t=0.5):
    """dets: (image, box, score); the stepwise PR-curve area with greedy matching."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    order = rank_order([d[2] for d in dets])
    taken = {img: [False] * len(v) for img, v in gts.items()}
    flags = []
    for i in order:
        img, box, _ = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts.get(img, [])):
            if taken[img][j]:
                continue
            v = iou(box, g)
            if v > best_iou:
                best, best_iou = j, v
        ok = best is not None and best_iou >= t
        if ok:
            taken[img][best] = True
        flags.append(ok)
    area, tp, prev = 0.0, 0, 0.0
    for cut, f in enumerate(flags, 1):
        tp += f
        recall = tp / n_gt
        area += (tp / cut) * (recall - prev)
        prev = recall
    return area


# -- seeded random instances -------------------------------------------------

def random_box(rng):
    x, y = rng.random(2) * 0.7
    w, h = 0.05 + rng.random(2) * 0.3
    return [float(x), float(y), float(x + w), float(y + h)]


def jitter(rng, box, s=0.05):
    x0, y0, x1, y1 = (v + float(rng.normal(0, s)) for v in box)
    return [min(x0, x1 - 0.01), min(y0, y1 - 0.01), max(x1, x0 + 0.01), max(y1, y0 + 0.01)]


def ap_case(rng):
    n = int(rng.integers(1, 21))
    scores = rng.integers(0, 6, n) / 5 if rng.random() < 0.5 else rng.random(n)
    return scores, rng.random(n) < 0.4


def mr_case(rng):
    n, a = int(rng.integers(1, 6)), int(rng.integers(1, 7))
    scores = rng.integers(0, 4, (n, a)) / 3 if rng.random() < 0.5 else rng.random((n, a))
    return scores, rng.random((n, a)) < 0.4, int(rng.integers(1, a + 2))


def ar_case(rng, attributes=("a", "b", "c")):
    gt, dets = {}, {}
    for img in range(int(rng.integers(1, 4))):
        gt[img], dets[img] = {}, {}
        for a in attributes:
            boxes = [random_box(rng) for _ in range(int(rng.integers(0, 3)))]
            if boxes:
                gt[img][a] = boxes
            cand = [(jitter(rng, b), float(rng.random())) for b in boxes] + \
                   [(random_box(rng), float(rng.random())) for _ in range(int(rng.integers(0, 4)))]
            dets[img][a] = cand
    return dets, gt, int(rng.integers(1, 5))


def ovd_case(rng, classes=("p", "q", "r", "s")):
    gt, dets = {c: {} for c in classes}, {c: [] for c in classes}
    for img in range(int(rng.integers(1, 4))):
        for c in classes:
            boxes = [random_box(rng) for _ in range(int(rng.integers(0, 3)))]
            if boxes:
                gt[c][img] = boxes
            for b in boxes:
                if rng.random() < 0.7:
                    dets[c].append((img, jitter(rng, b, 0.08), float(rng.integers(0, 5) / 4)))
            for _ in range(int(rng.integers(0, 3))):
                dets[c].append((img, random_box(rng), float(rng.random())))
    return dets, gt
