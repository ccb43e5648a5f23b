"""1:1 verification metrics over embedding cosine similarities.

A verification pair is two image paths plus a same-identity flag; its
score is the cosine of the two L2-normalized identity embeddings. On top
of the scores: 10-fold cross-validated accuracy (threshold picked on the
held-in folds), trapezoidal ROC AUC, TPR at a fixed false-accept rate, and
the per-identity masked-unmasked similarity histogram.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import face_data
from .face_data import DatasetManifest


@dataclass
class VerificationPair:
    path_a: str
    path_b: str
    same_identity: bool
    similarity: float | None = None


@dataclass
class SimilarityHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    per_identity: dict  # identity label -> mean masked-unmasked cosine

    def to_csv(self, path: str | Path) -> None:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
            lines.append(f"{lo:.6f},{hi:.6f},{int(c)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pairs_file(path: str | Path) -> list[VerificationPair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected 'path_a<TAB>path_b<TAB>0|1'")
        pairs.append(VerificationPair(parts[0], parts[1], parts[2] == "1"))
    if not pairs:
        raise ValueError(f"pairs file is empty: {path}")
    return pairs


def write_pairs_file(pairs: list[VerificationPair], path: str | Path) -> None:
    lines = [f"{p.path_a}\t{p.path_b}\t{int(p.same_identity)}" for p in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@torch.no_grad()
def embed_paths(model, paths: list[str], batch_size: int = 32) -> np.ndarray:
    """L2-normalized identity embeddings for image files, in input order."""
    model.eval()
    unique = list(dict.fromkeys(paths))
    embs = {}
    for start in range(0, len(unique), batch_size):
        chunk = unique[start : start + batch_size]
        batch = torch.from_numpy(np.stack([face_data.load_image(p) for p in chunk]))
        z = model(batch).z_id
        z = torch.nn.functional.normalize(z, dim=1)
        for p, row in zip(chunk, z):
            embs[p] = row.numpy()
    return np.stack([embs[p] for p in paths])


@torch.no_grad()
def verify_pairs(model, pairs: list[VerificationPair], batch_size: int = 32) -> np.ndarray:
    """Fill in and return cosine similarities for every pair."""
    za = embed_paths(model, [p.path_a for p in pairs], batch_size)
    zb = embed_paths(model, [p.path_b for p in pairs], batch_size)
    sims = np.sum(za * zb, axis=1)
    sims = np.clip(sims, -1.0, 1.0)
    for p, s in zip(pairs, sims):
        p.similarity = float(s)
    return sims


def _as_arrays(similarities, labels):
    sims = np.asarray(similarities, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    if sims.shape != lab.shape or sims.ndim != 1:
        raise ValueError("similarities and labels must be 1-D arrays of equal length")
    return sims, lab


def _accuracy_per_threshold(sims, labels, thresholds):
    """Accuracy of 'same iff sim >= t' for every candidate threshold."""
    pred = sims[None, :] >= thresholds[:, None]
    return (pred == labels[None, :]).mean(axis=1)


def fold_accuracy(similarities, labels, folds: int = 10) -> float:
    """Cross-validated verification accuracy.

    Pairs are split into ``folds`` contiguous folds; for each fold the
    threshold maximizing accuracy on the remaining folds is applied to the
    held-out fold (ties resolved toward the smallest threshold). Candidate
    thresholds are the observed similarity values plus a reject-all
    sentinel.
    """
    sims, lab = _as_arrays(similarities, labels)
    if sims.size < folds:
        raise ValueError(f"need at least {folds} pairs, got {sims.size}")
    thresholds = np.unique(sims)
    thresholds = np.append(thresholds, thresholds[-1] + 1.0)

    accs = []
    for test_idx in np.array_split(np.arange(sims.size), folds):
        train_mask = np.ones(sims.size, dtype=bool)
        train_mask[test_idx] = False
        train_acc = _accuracy_per_threshold(sims[train_mask], lab[train_mask], thresholds)
        best_t = thresholds[int(np.argmax(train_acc))]
        test_pred = sims[test_idx] >= best_t
        accs.append((test_pred == lab[test_idx]).mean())
    return float(np.mean(accs))


def roc_auc(similarities, labels) -> float:
    """Trapezoidal area under the ROC curve (ties share a single vertex)."""
    sims, lab = _as_arrays(similarities, labels)
    n_pos = int(lab.sum())
    n_neg = int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative pairs")

    order = np.argsort(-sims, kind="stable")
    sims_sorted = sims[order]
    lab_sorted = lab[order]
    tp = np.cumsum(lab_sorted)
    fp = np.cumsum(~lab_sorted)
    # keep only the last index of each tied similarity group
    distinct = np.append(sims_sorted[1:] != sims_sorted[:-1], True)
    tpr = np.concatenate([[0.0], tp[distinct] / n_pos])
    fpr = np.concatenate([[0.0], fp[distinct] / n_neg])
    return float(np.trapezoid(tpr, fpr))


def tpr_at_far(similarities, labels, far: float = 0.01) -> float:
    """TPR at the smallest threshold whose FAR does not exceed ``far``.

    The threshold strictly enforces FAR <= far (no interpolation); if even
    the strictest useful threshold over-accepts, every candidate above the
    top negative rejects all pairs and TPR is computed there.
    """
    sims, lab = _as_arrays(similarities, labels)
    if far < 0 or far > 1:
        raise ValueError(f"far must be in [0, 1], got {far}")
    neg = np.sort(sims[~lab])
    pos = sims[lab]
    if neg.size == 0 or pos.size == 0:
        raise ValueError("tpr_at_far needs both positive and negative pairs")

    thresholds = np.unique(sims)
    thresholds = np.append(thresholds, neg[-1] + 1.0)
    # false accepts: negatives with sim >= t
    fars = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    ok = np.nonzero(fars <= far)[0]
    t = thresholds[ok[0]]
    return float((pos >= t).mean())


@torch.no_grad()
def similarity_distribution(model, manifest: DatasetManifest, bins=20) -> SimilarityHistogram:
    """Per-identity mean masked-unmasked cosine similarity histogram.

    Every simulated-masked record is compared against its paired unmasked
    image; means are grouped by identity. Values are clipped into the bin
    range so the counts always sum to the number of identities.
    """
    masked = [r for r in manifest.records if r.mask_flag == face_data.SIMULATED_MASKED]
    if not masked:
        raise ValueError("manifest has no simulated_masked records")
    for r in masked:
        if not r.paired_unmasked_path:
            raise ValueError(f"masked record without paired_unmasked_path: {r.path}")

    za = embed_paths(model, [r.path for r in masked])
    zb = embed_paths(model, [r.paired_unmasked_path for r in masked])
    sims = np.clip(np.sum(za * zb, axis=1), -1.0, 1.0)

    per_identity: dict[int, list[float]] = {}
    for r, s in zip(masked, sims):
        per_identity.setdefault(r.identity_label, []).append(float(s))
    means = {k: float(np.mean(v)) for k, v in sorted(per_identity.items())}

    edges = np.linspace(-1.0, 1.0, bins + 1) if np.isscalar(bins) else np.asarray(bins, dtype=np.float64)
    vals = np.clip(np.array(list(means.values())), edges[0], edges[-1])
    counts, _ = np.histogram(vals, bins=edges)
    return SimilarityHistogram(bin_edges=edges, counts=counts, per_identity=means)


def balanced_pairs_from_manifest(
    manifest: DatasetManifest, seed: int = 0, per_identity: int = 8
) -> list[VerificationPair]:
    """Equal numbers of same- and different-identity pairs, seeded and shuffled."""
    by_id: dict[int, list[str]] = {}
    for r in manifest.records:
        by_id.setdefault(r.identity_label, []).append(r.path)
    idents = sorted(by_id)
    if len(idents) < 2:
        raise ValueError("need at least two identities to build negative pairs")

    rng = np.random.default_rng([0xA17, seed])
    positives: list[VerificationPair] = []
    for ident in idents:
        paths = by_id[ident]
        combos = [(a, b) for i, a in enumerate(paths) for b in paths[i + 1 :]]
        take = min(per_identity, len(combos))
        for k in rng.choice(len(combos), size=take, replace=False):
            a, b = combos[int(k)]
            positives.append(VerificationPair(a, b, True))

    negatives: list[VerificationPair] = []
    while len(negatives) < len(positives):
        ia, ib = rng.choice(len(idents), size=2, replace=False)
        a = by_id[idents[ia]][int(rng.integers(len(by_id[idents[ia]])))]
        b = by_id[idents[ib]][int(rng.integers(len(by_id[idents[ib]])))]
        negatives.append(VerificationPair(a, b, False))

    pairs = positives + negatives
    order = rng.permutation(len(pairs))
    return [pairs[int(i)] for i in order]


def metric_report(similarities, labels, far: float = 0.01, folds: int = 10) -> str:
    """Key=value text block with all three verification metrics."""
    sims, lab = _as_arrays(similarities, labels)
    lines = [
        f"pairs_total={sims.size}",
        f"pairs_positive={int(lab.sum())}",
        f"pairs_negative={int((~lab).sum())}",
        f"acc={fold_accuracy(sims, lab, folds):.6f}",
        f"auc={roc_auc(sims, lab):.6f}",
        f"tpr_at_far_{far:g}={tpr_at_far(sims, lab, far):.6f}",
    ]
    return "\n".join(lines) + "\n"
