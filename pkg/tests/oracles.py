"""Independent brute-force references used by the tests."""
import math


def nn_distances_bruteforce(points):
    out = []
    for i, p in enumerate(points):
        best = math.inf
        for j, q in enumerate(points):
            if i != j:
                best = min(best, math.dist(p, q))
        out.append(best)
    return out


def _objects(mask):
    """Pixel sets of each object, ordered by first appearance in raster order."""
    order, pixels = [], {}
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            v = int(mask[r, c])
            if v == 0:
                continue
            if v not in pixels:
                order.append(v)
                pixels[v] = set()
            pixels[v].add((r, c))
    return [pixels[v] for v in order]


def aji_bruteforce(pred, gt):
    gts, preds = _objects(gt), _objects(pred)
    if not gts:
        return 1.0 if not preds else 0.0
    used = [False] * len(preds)
    inter_sum = union_sum = 0
    for g in gts:
        best, best_j = 0.0, None
        for j, p in enumerate(preds):
            if used[j]:
                continue
            iou = len(g & p) / len(g | p)
            if iou > best:
                best, best_j = iou, j
        if best_j is None:
            union_sum += len(g)
        else:
            used[best_j] = True
            inter_sum += len(g & preds[best_j])
            union_sum += len(g | preds[best_j])
    for j, p in enumerate(preds):
        if not used[j]:
            union_sum += len(p)
    return inter_sum / union_sum


def _directed(a_objs, b_objs):
    total_area = sum(len(a) for a in a_objs)
    acc = 0.0
    for a in a_objs:
        best, best_b = 0, None
        for b in b_objs:
            k = len(a & b)
            if k > best:
                best, best_b = k, b
        if best_b is not None:
            acc += len(a) / total_area * 2 * best / (len(a) + len(best_b))
    return acc


def object_dice_bruteforce(pred, gt):
    gts, preds = _objects(gt), _objects(pred)
    if not gts and not preds:
        return 1.0
    if not gts or not preds:
        return 0.0
    return 0.5 * (_directed(gts, preds) + _directed(preds, gts))


def pixel_in_ellipse(r, c, e):
    dr, dc = r - e.center[0], c - e.center[1]
    u = dc * math.cos(e.angle) + dr * math.sin(e.angle)
    v = -dc * math.sin(e.angle) + dr * math.cos(e.angle)
    return (u / e.semi_major) ** 2 + (v / e.semi_minor) ** 2 <= 1.0


def central_differences(loss_fn, params, eps=1e-4):
    """Central finite-difference gradient of ``loss_fn()`` w.r.t. each tensor."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads
