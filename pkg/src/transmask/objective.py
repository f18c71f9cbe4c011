"""Scale-invariant SNR and utterance-level permutation-invariant training loss."""
from __future__ import annotations

import itertools
import math

import numpy as np

from .tensor import ContractError, Tensor, as_tensor, log, stack, sum_

EPS = 1e-8
MAX_SPEAKERS = 4
_LOG10 = math.log(10.0)


class DegenerateReferenceError(ValueError):
    """The reference signal has no energy after mean removal."""


def si_snr(estimate, reference, eps=EPS):
    """SI-SNR in dB as a scalar ``Tensor``; differentiable with respect to ``estimate``.

    Both signals are mean-centred; ``eps`` keeps the value finite, capping it
    near +/-80 dB for unit-energy references.
    """
    est, ref = as_tensor(estimate), as_tensor(reference)
    if est.shape != ref.shape or est.ndim != 1:
        raise ContractError(f"si_snr needs equal 1-d shapes, got {est.shape} and {ref.shape}")
    if est.shape[0] < 2:
        raise ContractError("si_snr needs at least two samples")
    ref_c = ref - ref.mean()
    if not np.any(ref_c.data):
        raise DegenerateReferenceError("reference is identically zero after mean removal")
    est_c = est - est.mean()
    target = ref_c * (sum_(est_c * ref_c) / (sum_(ref_c * ref_c) + eps))
    noise = est_c - target
    ratio = (sum_(target * target) + eps) / (sum_(noise * noise) + eps)
    return log(ratio) * (10.0 / _LOG10)


def _rows(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ContractError(f"expected [n_speakers, N], got shape {x.shape}")
    return x


def upit_loss(estimates, references):
    """Negative mean SI-SNR under the best estimate-to-reference assignment.

    Returns ``(loss, perm)`` where ``perm[i]`` is the reference row matched to
    estimate row ``i``. Ties resolve to the lexicographically smallest
    permutation. Only the selected assignment carries gradient.
    """
    est, ref = _rows(estimates), _rows(references)
    if est.shape != ref.shape:
        raise ContractError(f"estimates {est.shape} and references {ref.shape} differ")
    n = est.shape[0]
    if not 2 <= n <= MAX_SPEAKERS:
        raise ContractError(f"uPIT supports 2..{MAX_SPEAKERS} speakers, got {n}")
    pair = [[si_snr(est[i], ref[j]) for j in range(n)] for i in range(n)]
    values = np.array([[p.item() for p in row] for row in pair])
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(n)):
        score = values[np.arange(n), perm].mean()
        if score > best_score:
            best, best_score = perm, score
    selected = stack([pair[i][best[i]] for i in range(n)])
    return selected.mean() * -1.0, best


def si_snr_improvement(estimates, references, mixture):
    """Mean SI-SNRi (dB) over speakers under the best assignment; plain floats, no graph."""
    est = np.asarray(getattr(estimates, "data", estimates), dtype=np.float64)
    ref = np.asarray(getattr(references, "data", references), dtype=np.float64)
    mix = np.asarray(getattr(mixture, "data", mixture), dtype=np.float64)
    est_t, ref_t = Tensor(est, dtype=np.float64), Tensor(ref, dtype=np.float64)
    loss, perm = upit_loss(est_t, ref_t)
    mix_t = Tensor(mix, dtype=np.float64)
    baseline = np.mean([si_snr(mix_t, ref_t[j]).item() for j in range(ref.shape[0])])
    return -loss.item() - baseline, perm
