"""Cross-modality query alignment.

Queries from both modalities are reordered by assigned class so matched
classes line up positionally, then each modality's matched queries are
passed through a small VAE refiner and pulled toward the other modality's
raw queries with an MSE + MMD loss. The module also provides the two
distance diagnostics used to characterize trained models: MMD between raw
modality query sets and mean per-coordinate L1 deviation from cross-modal
class centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError, ShapeError

REFINER_DEPTH = 4
BANDWIDTH_FLOOR = 1e-6


@dataclass
class QuerySet:
    """L x C query embeddings with per-query class assignments (0 = None)."""

    values: np.ndarray
    assigned_class: np.ndarray
    modality: str
    node: Tensor | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.assigned_class = np.asarray(self.assigned_class, dtype=np.int64)
        if self.values.ndim != 2:
            raise ShapeError(f"queries must be L x C, got {self.values.shape}")
        if self.assigned_class.shape != (self.values.shape[0],):
            raise ShapeError("one assigned class per query required")


def reorder_by_class(qs: QuerySet) -> tuple[QuerySet, np.ndarray]:
    """Sort queries ascending by assigned class, ties by original index.

    Returns the reordered set and the permutation (new position -> original
    index). After both modalities are reordered their class sequences agree,
    so matched classes align positionally.
    """
    perm = np.argsort(qs.assigned_class, kind="stable")
    return QuerySet(qs.values[perm], qs.assigned_class[perm],
                    qs.modality, qs.node), perm


def rbf_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise squared distance over the pooled sample, floored."""
    n = pooled.shape[0]
    if n < 2:
        return BANDWIDTH_FLOOR
    d2 = _pairwise_sq(pooled, pooled)
    upper = d2[np.triu_indices(n, k=1)]
    med = float(np.median(upper))
    return max(med, BANDWIDTH_FLOOR)


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)
    bb = np.sum(b * b, axis=1)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Biased squared MMD with a Gaussian RBF kernel.

    Bandwidth defaults to the median heuristic over the pooled sample.
    Always >= 0 up to rounding; 0 for identical samples.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("mmd requires nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"sample dims disagree: {a.shape} vs {b.shape}")
    if bandwidth is None:
        bandwidth = rbf_bandwidth(np.vstack([a, b]))
    k_aa = np.exp(-_pairwise_sq(a, a) / (2.0 * bandwidth))
    k_bb = np.exp(-_pairwise_sq(b, b) / (2.0 * bandwidth))
    k_ab = np.exp(-_pairwise_sq(a, b) / (2.0 * bandwidth))
    return float(k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean())


def mmd_node(tape: Tape, a: Tensor, b: Tensor, bandwidth: float) -> Tensor:
    """Tape-recorded biased squared MMD; the bandwidth is a fixed constant
    (the median heuristic is treated as stop-gradient)."""
    def kernel_mean(u: Tensor, v: Tensor) -> Tensor:
        n, m = u.shape[0], v.shape[0]
        uu = tape.sum(tape.mul(u, u), axis=1)                  # (n,1)
        vv = tape.sum(tape.mul(v, v), axis=1)                  # (m,1)
        left = tape.matmul(uu, tape.constant(np.ones((1, m))))
        right = tape.matmul(tape.constant(np.ones((n, 1))), tape.transpose(vv))
        cross = tape.matmul(u, tape.transpose(v))
        d2 = left + right - 2.0 * cross
        return tape.mean(tape.reshape(
            tape.exp(tape.scale(d2, -1.0 / (2.0 * bandwidth))), (n * m,)))

    out = kernel_mean(a, a) + kernel_mean(b, b) - 2.0 * kernel_mean(a, b)
    return out


def init_refiner(rng: np.random.Generator, c: int, prefix: str) -> dict[str, np.ndarray]:
    """Parameter arrays for one refiner: 4 Linear-Layernorm-ReLU blocks per
    side, mean/log-variance heads on the encoder, an output head on the
    decoder. The log-variance head starts at zero so initial sampling is
    mean-plus-noise with unit scale."""
    params: dict[str, np.ndarray] = {}
    std = 1.0 / np.sqrt(c)
    for side in ("enc", "dec"):
        for i in range(REFINER_DEPTH):
            params[f"{prefix}.{side}{i}.w"] = rng.normal(0.0, std, (c, c))
            params[f"{prefix}.{side}{i}.gain"] = np.ones(c)
            params[f"{prefix}.{side}{i}.bias"] = np.zeros(c)
    params[f"{prefix}.mu.w"] = rng.normal(0.0, std, (c, c))
    params[f"{prefix}.mu.b"] = np.zeros(c)
    params[f"{prefix}.logvar.w"] = np.zeros((c, c))
    params[f"{prefix}.logvar.b"] = np.zeros(c)
    params[f"{prefix}.out.w"] = rng.normal(0.0, std, (c, c))
    params[f"{prefix}.out.b"] = np.zeros(c)
    return params


def _block(tape: Tape, x: Tensor, params: dict[str, Tensor],
           name: str) -> Tensor:
    h = tape.matmul(x, params[f"{name}.w"])
    h = tape.layernorm(h, params[f"{name}.gain"], params[f"{name}.bias"])
    return tape.relu(h)


def _head(tape: Tape, x: Tensor, params: dict[str, Tensor],
          name: str) -> Tensor:
    n = x.shape[0]
    bias = tape.matmul(tape.constant(np.ones((n, 1))),
                       tape.reshape(params[f"{name}.b"], (1, -1)))
    return tape.matmul(x, params[f"{name}.w"]) + bias


def refine(tape: Tape, params: dict[str, Tensor], prefix: str,
           source: Tensor, noise: np.ndarray,
           ) -> tuple[Tensor, Tensor, Tensor]:
    """Encode -> reparameterized sample -> decode.

    noise is a frozen standard-normal draw of the source's shape; it is a
    constant on the tape so gradient checks see a deterministic function.
    Returns (refined, mu, logvar).
    """
    if noise.shape != source.shape:
        raise ContractError(
            f"noise shape {noise.shape} != source shape {source.shape}")
    h = source
    for i in range(REFINER_DEPTH):
        h = _block(tape, h, params, f"{prefix}.enc{i}")
    mu = _head(tape, h, params, f"{prefix}.mu")
    logvar = _head(tape, h, params, f"{prefix}.logvar")
    z = mu + tape.mul(tape.exp(tape.scale(logvar, 0.5)), tape.constant(noise))
    h = z
    for i in range(REFINER_DEPTH):
        h = _block(tape, h, params, f"{prefix}.dec{i}")
    return _head(tape, h, params, f"{prefix}.out"), mu, logvar


def kl_to_standard_normal(tape: Tape, mu: Tensor, logvar: Tensor) -> Tensor:
    """0.5 * sum_dims(mu^2 + sigma^2 - 1 - logvar), averaged over rows."""
    n = mu.shape[0]
    inner = tape.mul(mu, mu) + tape.exp(logvar) - logvar - 1.0
    return tape.scale(tape.sum(inner), 0.5 / n)


def _mse_node(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return tape.mean(tape.reshape(tape.mul(d, d), (a.shape[0] * a.shape[1],)))


def alignment_loss(tape: Tape, q_r: QuerySet, q_x: QuerySet,
                   params: dict[str, Tensor], lambda_mse: float,
                   lambda_mmd: float, noise_r: np.ndarray,
                   noise_x: np.ndarray, beta_kl: float = 0.0,
                   bandwidth: float | None = None,
                   refine_fn=refine) -> tuple[Tensor, dict]:
    """Symmetric refinement loss over positionally matched pairs.

    Both query sets are reordered by class; the matched block (class > 0) of
    each modality is refined by its own VAE ("rx" refines RGB, "xr" refines
    X) and compared against the other modality's raw block with
    lambda_mse*MSE + lambda_mmd*MMD, plus an optional KL regularizer.
    bandwidth None recomputes the median heuristic from the current values;
    gradient checks must pass the base-point bandwidth explicitly so the
    differentiated function holds it fixed. Returns (loss node, info) where
    info carries the bandwidth used and a "warned" flag for the
    no-matched-pairs case (loss is then a constant zero).
    """
    if q_r.node is None or q_x.node is None:
        raise ContractError("alignment needs tape-connected query sets")
    ordered_r, perm_r = reorder_by_class(q_r)
    ordered_x, perm_x = reorder_by_class(q_x)
    matched_r = np.flatnonzero(ordered_r.assigned_class > 0)
    matched_x = np.flatnonzero(ordered_x.assigned_class > 0)
    if matched_r.size != matched_x.size or not np.array_equal(
            ordered_r.assigned_class[matched_r],
            ordered_x.assigned_class[matched_x]):
        raise ContractError("matched class sequences disagree across modalities")
    if matched_r.size == 0:
        return tape.constant(np.zeros(1)), {"warned": True, "bandwidth": None}

    def select(node: Tensor, perm: np.ndarray, matched: np.ndarray) -> Tensor:
        rows = perm[matched]
        sel = np.zeros((rows.size, node.shape[0]))
        sel[np.arange(rows.size), rows] = 1.0
        return tape.matmul(tape.constant(sel), node)

    sel_r = select(q_r.node, perm_r, matched_r)
    sel_x = select(q_x.node, perm_x, matched_x)

    refined_r, mu_r, logvar_r = refine_fn(tape, params, "rx", sel_r, noise_r)
    refined_x, mu_x, logvar_x = refine_fn(tape, params, "xr", sel_x, noise_x)

    if bandwidth is None:
        pooled = np.vstack([sel_r.data, refined_x.data,
                            sel_x.data, refined_r.data])
        bandwidth = rbf_bandwidth(pooled)

    def refinement(a: Tensor, b: Tensor) -> Tensor:
        parts = []
        if lambda_mse:
            parts.append(lambda_mse * _mse_node(tape, a, b))
        if lambda_mmd:
            parts.append(lambda_mmd * mmd_node(tape, a, b, bandwidth))
        if not parts:
            return tape.constant(np.zeros(1))
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        return total

    loss = refinement(sel_r, refined_x) + refinement(sel_x, refined_r)
    if beta_kl:
        kl = kl_to_standard_normal(tape, mu_r, logvar_r) + \
            kl_to_standard_normal(tape, mu_x, logvar_x)
        loss = loss + beta_kl * kl
    return loss, {"warned": False, "bandwidth": bandwidth}


def modality_distance(q_r: QuerySet, q_x: QuerySet) -> float:
    """MMD between the raw matched query sets of the two modalities."""
    a = q_r.values[q_r.assigned_class > 0]
    b = q_x.values[q_x.assigned_class > 0]
    return mmd(a, b)


def class_distance(q_r: QuerySet, q_x: QuerySet) -> float:
    """Mean per-coordinate L1 deviation from cross-modal class centers,
    averaged over classes present in both modalities."""
    classes = sorted(set(q_r.assigned_class[q_r.assigned_class > 0])
                     & set(q_x.assigned_class[q_x.assigned_class > 0]))
    if not classes:
        raise ContractError("no class present in both modalities")
    per_class = []
    for c in classes:
        members = np.vstack([q_r.values[q_r.assigned_class == c],
                             q_x.values[q_x.assigned_class == c]])
        center = members.mean(axis=0)
        per_class.append(float(np.mean(np.abs(members - center))))
    return float(np.mean(per_class))
