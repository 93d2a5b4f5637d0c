"""Layer-wise least-squares feature reconstruction for pruned networks.

For a pruned conv layer with ``n'`` retained channels, ``F_p`` (n' x d) is its
output on the probe set and ``F_o`` the original layer's output restricted to
the same channels.  The channel-mixing matrix ``X`` minimizing
``||F_o - X F_p||^2`` is folded into the layer's filters, so the pruned model
keeps its shape and cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .graph import ChannelConfig
from .nn import Network, recalibrate_bn

log = logging.getLogger(__name__)


@dataclass
class FeaturePair:
    f_original: np.ndarray
    f_pruned: np.ndarray

    def __post_init__(self):
        if self.f_original.shape != self.f_pruned.shape:
            raise ValueError(f"feature shapes differ: {self.f_original.shape} vs {self.f_pruned.shape}")
        n, d = self.f_pruned.shape
        if d < n:
            log.warning("only %d feature columns for %d channels; the fit is underdetermined", d, n)


@dataclass
class ReconSolution:
    x: np.ndarray
    residual_before: float
    residual_after: float
    ridge: float
    failed: bool = False


def feature_matrix(fmap):
    """(N, C, H, W) or (N, C) activations -> (C, N*H*W) float64 matrix."""
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 4:
        return fmap.transpose(1, 0, 2, 3).reshape(fmap.shape[1], -1)
    return fmap.T.copy()


def _inputs(probe):
    return probe.inputs if hasattr(probe, "inputs") else np.asarray(probe)


def _tap(net, x, layer_id, batch_size=256):
    outs = [net.forward(x[i:i + batch_size], stop_after=layer_id) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs)


def collect_features(original: Network, pruned: Network, probe, layer_id, keep_indices) -> FeaturePair:
    """Conv outputs (pre-batchnorm) of both models at ``layer_id`` on the probe inputs."""
    for net in (original, pruned):
        if layer_id not in net.graph or net.graph[layer_id].kind not in ("conv2d", "linear"):
            raise ValueError(f"'{layer_id}' is not a conv/linear layer of {net.graph.name}")
    x = _inputs(probe)
    fo = feature_matrix(_tap(original, x, layer_id))[list(keep_indices)]
    fp = feature_matrix(_tap(pruned, x, layer_id))
    return FeaturePair(fo, fp)


def _residual(fo, fp, x=None):
    r = fo - (fp if x is None else x @ fp)
    return float(np.einsum("ij,ij->", r, r))


def solve_ls(pair: FeaturePair, ridge=None, retries=3) -> ReconSolution:
    """X = (F_o F_p^T)(F_p F_p^T + eps I)^-1 via a Cholesky solve.

    ``ridge=None`` picks eps = 1e-6 * trace(F_p F_p^T) / n'.  A failed
    factorization multiplies eps by 10 (up to ``retries`` times); after that
    the identity is returned with ``failed=True``.  If the solution would fit
    worse than the identity (possible with a ridge term), the identity is kept.
    """
    fo, fp = pair.f_original, pair.f_pruned
    if not (np.isfinite(fo).all() and np.isfinite(fp).all()):
        raise ValueError("feature matrices contain non-finite values")
    n = fp.shape[0]
    gram = fp @ fp.T
    cross = fo @ fp.T
    eps = 1e-6 * np.trace(gram) / n if ridge is None else float(ridge)
    before = _residual(fo, fp)
    x = None
    for attempt in range(retries + 1):
        try:
            a = gram + eps * np.eye(n)
            # X a = cross  <=>  a^T X^T = cross^T, with a symmetric
            xt = scipy.linalg.solve(a, cross.T, assume_a="pos", check_finite=False)
            x = xt.T
            if np.isfinite(x).all():
                break
            x = None
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            pass
        eps = eps * 10 if eps > 0 else 1e-12 * max(np.trace(gram) / n, 1.0)
        log.debug("least-squares solve failed; retrying with ridge %.3g", eps)
    if x is None:
        log.warning("least-squares solve failed after %d retries; keeping identity", retries)
        return ReconSolution(np.eye(n), before, before, eps, failed=True)
    after = _residual(fo, fp, x)
    if after > before:
        return ReconSolution(np.eye(n), before, before, eps)
    return ReconSolution(x, before, after, eps)


def merge_solution(layer, sol: ReconSolution):
    """Fold X into a conv/linear layer: W'[o] = sum_j X[o, j] W[j], b' = X b."""
    x = sol.x if isinstance(sol, ReconSolution) else np.asarray(sol)
    w = layer.weight.value
    if x.shape != (w.shape[0], w.shape[0]):
        raise ValueError(f"layer '{layer.name}': X is {x.shape}, layer has {w.shape[0]} output channels")
    if np.array_equal(x, np.eye(len(x))):
        return layer
    new_w = np.tensordot(x, w.astype(np.float64), axes=(1, 0)).astype(w.dtype)
    layer.weight.value[...] = new_w
    if layer.bias is not None:
        layer.bias.value[...] = (x @ layer.bias.value.astype(np.float64)).astype(w.dtype)
    return layer


def original_features(original: Network, probe, layers=None):
    """Outputs of the original network's prunable layers, reusable across samples."""
    layers = set(layers or original.graph.prunable)
    taps = {}
    original.forward(_inputs(probe), hook=lambda i, y: taps.setdefault(i, y) if i in layers else y)
    return taps


def reconstruct_network(original: Network, pruned: Network, probe, config: ChannelConfig,
                        ridge=None, recalibrate=True, cached_original=None):
    """Sequential collect -> solve -> merge over prunable layers in topological order.

    Runs a single forward pass of the pruned network over the probe set: when
    the pass reaches a prunable layer its output is fitted to the original's,
    the solution is merged, and the corrected output flows on, so every later
    layer sees already-corrected inputs.  Batchnorm statistics are then
    recalibrated on the probe set.  Returns the residual trace (one dict per
    layer); per-layer failures are flagged, never raised.
    """
    graph = pruned.graph
    probe_inputs = _inputs(probe)
    taps = cached_original if cached_original is not None else original_features(original, probe_inputs)
    report = []

    def hook(layer_id, y):
        if layer_id not in config.keep_count or layer_id == graph.classifier:
            return y
        idx = config.keep_indices[layer_id]
        fo = feature_matrix(taps[layer_id])[list(idx)]
        fp = feature_matrix(y)
        try:
            sol = solve_ls(FeaturePair(fo, fp), ridge)
        except ValueError as e:
            report.append({"layer": layer_id, "failed": True, "error": str(e)})
            return y
        merge_solution(pruned.layers[layer_id], sol)
        report.append({"layer": layer_id, "n_prime": fp.shape[0], "d": fp.shape[1], "ridge": sol.ridge,
                       "residual_before": sol.residual_before, "residual_after": sol.residual_after,
                       "failed": sol.failed})
        if np.array_equal(sol.x, np.eye(len(sol.x))):
            return y
        if y.ndim == 4:
            return np.einsum("oj,njhw->nohw", sol.x, y.astype(np.float64)).astype(y.dtype)
        return (y.astype(np.float64) @ sol.x.T).astype(y.dtype)

    pruned.forward(probe_inputs, hook=hook)
    if recalibrate:
        recalibrate_bn(pruned, probe_inputs)
    return pruned, report
