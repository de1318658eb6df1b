"""Independent oracles shared by the unit and acceptance tests."""
import numpy as np

from gridfault.aplcore import total_loss


def finite_difference_error(model, Xs, ys, Xt, h=1e-5, analytic=None):
    """Worst relative error between analytic and central-difference gradients."""
    from gridfault.aplcore import gradients
    grads = gradients(model, Xs, ys, Xt) if analytic is None else analytic
    worst = 0.0
    for param, grad in zip(model.params(), grads):
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = param[idx]
            param[idx] = keep + h
            up = total_loss(model, Xs, ys, Xt)[0]
            param[idx] = keep - h
            down = total_loss(model, Xs, ys, Xt)[0]
            param[idx] = keep
            num = (up - down) / (2 * h)
            err = abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-6)
            worst = max(worst, err)
    return worst


def brute_f1(pred, truth, categories):
    """Per-category F1 via an explicit confusion matrix."""
    cats = list(categories)
    index = {c: k for k, c in enumerate(cats)}
    cm = [[0] * len(cats) for _ in cats]
    for p, t in zip(pred, truth):
        cm[index[t]][index[p]] += 1
    out = []
    for k in range(len(cats)):
        tp = cm[k][k]
        fp = sum(cm[r][k] for r in range(len(cats))) - tp
        fn = sum(cm[k]) - tp
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        out.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
    return out, sum(out) / len(out)


def aligned_embeddings(counts, scale=30.0, dim=None):
    """Source and target embeddings that coincide per category, one axis each."""
    k = len(counts)
    dim = dim or k
    rows, labels = [], []
    for c, n in enumerate(counts):
        e = np.zeros(dim)
        e[c] = scale
        rows += [e] * n
        labels += [c] * n
    return np.array(rows), np.array(labels)
