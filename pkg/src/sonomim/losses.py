"""Training objectives: masked-patch reconstruction error, hierarchy-coherent
score construction, and the per-node log-likelihood loss.

The coherent construction replaces each raw score by the min over the node
and its ancestors when the node is labeled positive, and by the max over the
node and its descendants when labeled negative. Thresholding the min-form
scores therefore always yields an ancestor-closed positive set, which is also
how label-free inference works (``coherent_inference_scores``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from sonomim.autodiff import Tensor, ops
from sonomim.imaging import MaskSpec
from sonomim.ontology import AnatomyOntology

PROB_CLIP = 1e-7


class LossError(ValueError):
    pass


@dataclass
class CoherentScores:
    """Hierarchy-coherent probabilities plus, per entry, the node index whose
    raw score realized the min/max (lowest index on ties); the subgradient
    routes entirely to that achiever."""

    p_h: Tensor
    achiever: np.ndarray


def masked_pixel_weights(
    specs: Sequence[MaskSpec], grid: tuple[int, int], patch_size: int, channels: int
) -> np.ndarray:
    """Per-pixel weights averaging |pred-target| over each sample's masked
    patch pixels, then over the batch. Unmasked pixels weigh exactly zero."""
    gh, gw = grid
    p = patch_size
    b = len(specs)
    w = np.zeros((b, gh * gw), dtype=np.float64)
    for i, spec in enumerate(specs):
        if spec.masked.size == 0:
            raise LossError("mask spec selects no patches")
        w[i, spec.masked] = 1.0 / (b * spec.masked.size * p * p * channels)
    w = w.reshape(b, gh, gw)
    w = np.repeat(np.repeat(w, p, axis=1), p, axis=2)
    return np.repeat(w[..., None], channels, axis=3)


def mim_loss(
    pred: Tensor,
    target,
    specs: MaskSpec | Sequence[MaskSpec],
    patch_size: int,
) -> Tensor:
    """Mean absolute error over masked-patch pixels only.

    ``pred``/``target`` are (H, W, C) or (B, H, W, C); unmasked pixels
    contribute exactly zero to both the value and the gradient.
    """
    single = isinstance(specs, MaskSpec)
    spec_list = [specs] if single else list(specs)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tuple(target_data.shape):
        raise LossError(f"shape mismatch: pred {pred.shape} vs target {target_data.shape}")
    if single and pred.ndim != 3:
        raise LossError("single MaskSpec requires an unbatched (H, W, C) image")
    shape = pred.shape if pred.ndim == 4 else (1,) + pred.shape
    b, h, w, c = shape
    if len(spec_list) != b:
        raise LossError(f"{len(spec_list)} mask specs for batch of {b}")
    gh, gw = h // patch_size, w // patch_size
    for spec in spec_list:
        if spec.total != gh * gw:
            raise LossError("mask spec patch count inconsistent with image/patch size")
    weights = masked_pixel_weights(spec_list, (gh, gw), patch_size, c)
    weights = weights.reshape(pred.shape).astype(pred.data.dtype)
    diff = ops.abs_(ops.sub(pred, ops.constant(target_data, dtype=pred.data.dtype)))
    return ops.sum_(ops.mul(diff, ops.constant(weights)))


def coherent_scores(
    s: Tensor, labels: np.ndarray, o: AnatomyOntology
) -> CoherentScores:
    """Eq-style coherent construction over (K,) or (B, K) raw scores."""
    labels = np.asarray(labels, dtype=bool)
    k = o.node_count
    if s.shape[-1] != k or labels.shape != s.shape:
        raise LossError(
            f"scores {s.shape} / labels {labels.shape} inconsistent with {k} nodes"
        )
    anc_idx, anc_valid = o.ancestor_groups()
    desc_idx, desc_valid = o.descendant_groups()
    pos, pos_ach = ops.group_min(s, anc_idx, anc_valid)
    neg, neg_ach = ops.group_max(s, desc_idx, desc_valid)
    lab = labels.astype(s.data.dtype)
    p_h = ops.add(ops.mul(pos, ops.constant(lab)), ops.mul(neg, ops.constant(1.0 - lab)))
    achiever = np.where(labels, pos_ach, neg_ach)
    return CoherentScores(p_h=p_h, achiever=achiever)


def coherent_inference_scores(s: Tensor, o: AnatomyOntology) -> Tensor:
    """Label-free coherent scores: min over each node's ancestors-and-self.
    Thresholding at any tau gives an ancestor-closed positive set."""
    anc_idx, anc_valid = o.ancestor_groups()
    out, _ = ops.group_min(s, anc_idx, anc_valid)
    return out


def hier_loss(ch: CoherentScores | Tensor, labels: np.ndarray) -> Tensor:
    """Sum over nodes of -l*log(p) - (1-l)*log(1-p), probabilities clipped to
    [1e-7, 1-1e-7]; batched input averages the per-sample sums."""
    p = ch.p_h if isinstance(ch, CoherentScores) else ch
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != p.shape:
        raise LossError(f"labels {labels.shape} do not match scores {p.shape}")
    lab = ops.constant(labels.astype(p.data.dtype))
    pc = ops.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    ll = ops.add(
        ops.mul(ops.log(pc), lab),
        ops.mul(ops.log(ops.sub(1.0, pc)), ops.sub(1.0, lab)),
    )
    if p.ndim == 1:
        return ops.mul(ops.sum_(ll), -1.0)
    per_sample = ops.sum_(ll, axis=-1)
    return ops.mul(ops.mean(per_sample), -1.0)


def total_loss(mim: Tensor, hie: Tensor) -> Tensor:
    """Unweighted sum of the two objectives."""
    for name, t in (("reconstruction", mim), ("hierarchical", hie)):
        if not np.isfinite(t.data).all():
            raise LossError(f"{name} loss is non-finite")
    return ops.add(mim, hie)
