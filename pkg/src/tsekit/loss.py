"""Reconstruction and speaker-identification losses.

SiSNR follows the projection formulation: both signals are zero-meaned,
the estimate is projected onto the reference, and the ratio of projected
to residual energy is taken in dB.  The guard term is 1e-8 *relative to
the centered estimate energy*: it caps the range at exactly +/-80 dB for
perfect (or orthogonal) reconstructions, keeps gradients finite there,
and leaves the value invariant under rescaling of either argument to
machine precision (an absolute epsilon would break invariance for small
signals).

The multi-task total is  -SiSNR + alpha * CE  with CE the cross entropy
of the projected speaker embedding against the target speaker label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DataError, ShapeError

EPS = 1e-8
_DB = 10.0 / math.log(10.0)


@dataclass
class LossReport:
    """One training-loss evaluation; `total` stays on the autodiff tape."""

    total: Tensor
    sisnr_db: float
    ce: float
    alpha: float
    permutation: tuple | list | None = None


def _check_pair(x: np.ndarray, xhat_shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(xhat_shape):
        raise ShapeError(f"sisnr: reference {x.shape} and estimate "
                         f"{tuple(xhat_shape)} lengths differ")
    xc = x - x.mean(axis=-1, keepdims=True)
    energy = (xc ** 2).sum(axis=-1)
    if np.any(energy == 0.0):
        raise DataError("sisnr: reference signal has zero power after centering")
    return xc


def sisnr(x, xhat) -> float:
    """Scale-invariant source-to-noise ratio in dB (numpy path)."""
    xhat = np.asarray(xhat, dtype=np.float64)
    xc = _check_pair(x, xhat.shape)
    ec = xhat - xhat.mean(axis=-1, keepdims=True)
    dot = (ec * xc).sum(axis=-1, keepdims=True)
    s = dot / (xc ** 2).sum(axis=-1, keepdims=True) * xc
    e = ec - s
    guard = EPS * ((ec ** 2).sum(axis=-1) + 1e-30)
    val = 10.0 * np.log10(((s ** 2).sum(axis=-1) + guard)
                          / ((e ** 2).sum(axis=-1) + guard))
    return float(val) if val.ndim == 0 else val


def sisnr_graph(x, xhat: Tensor) -> Tensor:
    """SiSNR as an autodiff node; last axis is time, leading axes batch."""
    xc = _check_pair(x, xhat.shape)
    inv_energy = Tensor(1.0 / (xc ** 2).sum(axis=-1, keepdims=True))
    xc = Tensor(xc)
    ec = ad.sub(xhat, ad.mean(xhat, axis=-1, keepdims=True))
    dot = ad.tensor_sum(ad.mul(ec, xc), axis=-1, keepdims=True)
    s = ad.mul(ad.mul(dot, inv_energy), xc)
    e = ad.sub(ec, s)
    guard = ad.mul(ad.tensor_sum(ad.mul(ec, ec), axis=-1) + Tensor(1e-30),
                   Tensor(EPS))
    num = ad.add(ad.tensor_sum(ad.mul(s, s), axis=-1), guard)
    den = ad.add(ad.tensor_sum(ad.mul(e, e), axis=-1), guard)
    return ad.sub(ad.log(num), ad.log(den)) * Tensor(_DB)


def multitask_loss(x, xhat: Tensor, e: Tensor | None = None,
                   w: Tensor | None = None, label=None,
                   alpha: float = 0.0) -> LossReport:
    """-mean SiSNR plus alpha times the speaker-identification CE.

    With alpha = 0 the CE term is dropped from the graph entirely (pure
    reconstruction training); its value is still reported when the
    embedding and projection are supplied.
    """
    if alpha < 0:
        raise DataError(f"multitask_loss: alpha must be >= 0, got {alpha}")
    per_item = sisnr_graph(x, xhat)
    mean_db = ad.mean(per_item)
    total = ad.mul(mean_db, Tensor(-1.0))
    ce_value = math.nan
    if alpha > 0:
        if e is None or w is None or label is None:
            raise DataError("multitask_loss: alpha > 0 requires embedding, "
                            "projection and label")
        ce = nn.linear_softmax_ce(e, w, label)
        total = ad.add(total, ad.mul(ce, Tensor(alpha)))
        ce_value = ce.item()
    elif e is not None and w is not None and label is not None:
        with ad.no_grad():
            ce_value = nn.linear_softmax_ce(e, w, label).item()
    return LossReport(total=total, sisnr_db=mean_db.item(), ce=ce_value, alpha=alpha)


def pit_loss(x1, x2, xhat1: Tensor, xhat2: Tensor):
    """Utterance-level permutation-invariant loss over two sources.

    Per item, the permutation minimizing -mean(SiSNR of its pairs) is
    chosen (ties keep the identity); returns the mean loss tensor and the
    chosen permutation (one tuple, or a list of tuples for batches).
    """
    s11 = sisnr_graph(x1, xhat1)
    s22 = sisnr_graph(x2, xhat2)
    s12 = sisnr_graph(x2, xhat1)
    s21 = sisnr_graph(x1, xhat2)
    half = Tensor(-0.5)
    loss_id = ad.mul(ad.add(s11, s22), half)
    loss_sw = ad.mul(ad.add(s12, s21), half)
    keep_id = loss_id.data <= loss_sw.data
    if loss_id.ndim == 0:
        chosen = loss_id if keep_id else loss_sw
        perms = (0, 1) if keep_id else (1, 0)
    else:
        mask = Tensor(keep_id.astype(np.float64))
        inv = Tensor(1.0 - mask.data)
        chosen = ad.add(ad.mul(mask, loss_id), ad.mul(inv, loss_sw))
        perms = [(0, 1) if k else (1, 0) for k in keep_id]
    return ad.mean(chosen), perms
