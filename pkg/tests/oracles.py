"""Finite-difference harness shared by the topology-loss unit tests and the acceptance run."""
import numpy as np

from topodiff.tgap import TGAPConfig, tgap_loss
from topodiff.wasserstein import wasserstein


def matching_signature(result):
    """Hashable description of which witness pixels are matched to what.

    Two inputs with the same signature lie on the same smooth piece of the loss.
    """
    sig = []
    for dim in (0, 1):
        pts = result.pred_diagram.by_dim(dim)
        _, m = wasserstein(result.pred_diagram.array(dim), result.true_diagram.array(dim))
        pairs = sorted((pts[i].birth_pixel, pts[i].death_pixel or (-1, -1), j) for i, j in m.pairs)
        diag = sorted((pts[i].birth_pixel, pts[i].death_pixel or (-1, -1)) for i in m.diagonal_p)
        sig.append((tuple(pairs), tuple(diag), tuple(sorted(m.diagonal_q))))
    return tuple(sig)


def tumor_block_case(seed, region=8, margin=3, scale=2.0):
    """Random noise pair on a field holding one ``region`` x ``region`` tumour block."""
    rng = np.random.default_rng(seed)
    n = region + 2 * margin
    tumor = np.zeros((n, n), dtype=bool)
    tumor[margin:margin + region, margin:margin + region] = True
    eps_pred = scale * rng.standard_normal((n, n))
    eps_true = scale * rng.standard_normal((n, n))
    return eps_pred, eps_true, tumor


def unique_values(result, tumor, config, eps_pred):
    """True when the filtration restricted to tumour pixels has no repeated values."""
    from topodiff.tgap import crop_to_tumor, extract_signal, soft_filtration

    crop = crop_to_tumor(extract_signal(eps_pred, config.kernel_array()), tumor, config.pad)
    f, _ = soft_filtration(crop, config.soft)
    vals = f[crop.mask]
    return len(np.unique(vals)) == vals.size


def fd_check(eps_pred, eps_true, tumor, config=TGAPConfig(), h=1e-3, rtol=1e-3, atol=1e-9):
    """Compare the analytic gradient with central differences pixel by pixel.

    Pixels whose +-h probes change the matching signature are skipped (they
    straddle a non-smooth point). Returns (checked, skipped, worst_rel, ok).
    """
    base = tgap_loss(eps_pred, eps_true, tumor, config)
    sig = matching_signature(base)
    checked = skipped = 0
    worst = 0.0
    ok = True
    x = eps_pred.copy()
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        rp = tgap_loss(x, eps_true, tumor, config)
        x[idx] = old - h
        rm = tgap_loss(x, eps_true, tumor, config)
        x[idx] = old
        if matching_signature(rp) != sig or matching_signature(rm) != sig:
            skipped += 1
            continue
        fd = (rp.loss - rm.loss) / (2 * h)
        an = base.grad[idx]
        err = abs(fd - an)
        scale = max(abs(fd), abs(an))
        checked += 1
        if err > rtol * scale + atol:
            ok = False
        if scale > atol:
            worst = max(worst, err / scale)
    return checked, skipped, worst, ok
