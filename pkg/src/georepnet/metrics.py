"""Classification metrics: confusion matrix, accuracy, F1 and one-vs-rest AUC."""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import UsageError


def confusion_matrix(y_true, y_pred, num_classes):
    """``cm[t, p]`` counts samples of true class ``t`` predicted as ``p``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise UsageError("y_true and y_pred differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise UsageError("accuracy of an empty set")
    return float(np.mean(y_true == y_pred))


def precision_recall_f1(cm):
    """Per-class precision, recall and F1 arrays; 0/0 is taken as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def _present(cm):
    return (cm.sum(axis=0) + cm.sum(axis=1)) > 0


def macro_f1(y_true, y_pred, num_classes=None):
    """Unweighted mean F1 over classes present in ``y_true`` or ``y_pred``."""
    k = num_classes or int(max(np.max(y_true), np.max(y_pred))) + 1
    cm = confusion_matrix(y_true, y_pred, k)
    return float(precision_recall_f1(cm)[2][_present(cm)].mean())


def weighted_f1(y_true, y_pred, num_classes=None):
    """Support-weighted mean F1."""
    k = num_classes or int(max(np.max(y_true), np.max(y_pred))) + 1
    cm = confusion_matrix(y_true, y_pred, k)
    support = cm.sum(axis=1)
    return float((precision_recall_f1(cm)[2] * support).sum() / support.sum())


def binary_auc(scores, positive):
    """ROC AUC from ranks; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UsageError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks handle ties
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(scores, labels, return_skipped=False):
    """Macro one-vs-rest AUC over classes that have both positives and negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise UsageError(f"scores must be (N, K) matching labels, got {scores.shape}")
    if scores.shape[0] < 2:
        raise UsageError("AUC needs at least two samples")
    per_class, skipped = {}, []
    for k in range(scores.shape[1]):
        pos = labels == k
        if pos.all() or not pos.any():
            skipped.append(k)
            continue
        per_class[k] = binary_auc(scores[:, k], pos)
    if not per_class:
        raise UsageError("no class has both positive and negative samples")
    value = float(np.mean(list(per_class.values())))
    return (value, skipped) if return_skipped else value


def pair_scores(y_true, y_pred, pairs):
    """Accuracy restricted to samples whose label lies in one of ``pairs``.

    Returns raw accuracy on those samples and the mean per-class recall over
    the paired classes. A predictor that sees only features distributed
    identically across both members of a pair has expected balanced value of
    at most 0.5, whatever the class frequencies.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    classes = [c for p in pairs for c in p]
    sel = np.isin(y_true, classes)
    raw = float(np.mean(y_true[sel] == y_pred[sel])) if sel.any() else float("nan")
    recalls = [float(np.mean(y_pred[y_true == c] == c)) for c in classes if np.any(y_true == c)]
    balanced = float(np.mean(recalls)) if recalls else float("nan")
    return raw, balanced


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    auc: float
    auc_skipped: list
    precision: list
    recall: list
    f1: list
    confusion: list
    count: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def softmax_np(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build_report(logits, labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise UsageError("cannot evaluate an empty dataset")
    probs = softmax_np(logits)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(labels, pred, num_classes)
    precision, recall, f1 = precision_recall_f1(cm)
    try:
        auc, skipped = auc_ovr(probs, labels, return_skipped=True)
    except UsageError:
        auc, skipped = float("nan"), list(range(num_classes))
    return MetricsReport(
        accuracy=accuracy(labels, pred),
        macro_f1=float(f1[_present(cm)].mean()),
        weighted_f1=weighted_f1(labels, pred, num_classes),
        auc=auc,
        auc_skipped=skipped,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=cm.tolist(),
        count=int(labels.size),
    )
