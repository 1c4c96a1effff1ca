"""Reconstruction-loss calibration of transforms and branch gates.

Plain gradient descent with a cosine-decayed learning rate minimizes the
mean squared error between the quantized forward pass and the unquantized
reference output.  Gradients flow through rounding with the straight-through
estimator (identity inside the clamp range, zero outside); quantization
scales and zero-points are treated as stop-gradient.  Diagonal transforms
learn in log-scale space so steps cannot cross zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transform as tr
from .layer import SplitLayer, forward_reference, forward_with_cache, with_updated_params
from .mocd import MocdConfig, build_partition, jaccard
from .tensor import ActivationBatch

MAX_FD_PARAMS = 4096
_LOG_LO = np.log(tr.DIAG_EPS)
_LOG_HI = np.log(tr.DIAG_MAX)


@dataclass(frozen=True)
class CalibConfig:
    steps: int = 200
    # Log-scale and gate parameters live on an O(1) scale while the MSE loss
    # surface around the smoothing init is quite flat; unit step size with the
    # cosine decay moves them far enough to matter within 200 steps.
    learning_rate: float = 1.0
    seed: int = 0
    learn_p_main: bool = True
    learn_p_text: bool = True
    learn_p_vision: bool = True
    learn_gates: bool = True
    grad_mode: str = "analytic"  # or "fd"
    fd_step: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.grad_mode not in ("analytic", "fd"):
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")


@dataclass
class LossTrace:
    losses: list[float] = field(default_factory=list)

    @property
    def best_loss(self) -> float:
        return min(self.losses)

    @property
    def best_step(self) -> int:
        return int(np.argmin(self.losses))


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


def _param_layout(layer: SplitLayer, cfg: CalibConfig):
    """(name, size) segments of the flat learnable-parameter vector."""
    segments = []
    for name, learn, t in (
        ("p_main", cfg.learn_p_main, layer.p_main),
        ("p_text", cfg.learn_p_text, layer.p_text),
        ("p_vision", cfg.learn_p_vision, layer.p_vision),
    ):
        if learn and t.dim > 0:
            if not t.is_diagonal:
                if cfg.grad_mode != "fd":
                    raise ValueError(
                        f"{name} is dense; dense transforms require grad_mode='fd'"
                    )
                segments.append((name, t.dim * t.dim))
            else:
                segments.append((name, t.dim))
    if cfg.learn_gates and layer.use_cws:
        segments.append(("gate_s", layer.branch_smooth.rank))
    if cfg.learn_gates and layer.use_mac:
        segments.append(("gate_c", layer.branch_comp.rank))
    return segments


def _initial_params(layer: SplitLayer, segments) -> np.ndarray:
    parts = []
    for name, _size in segments:
        if name in ("p_main", "p_text", "p_vision"):
            t = getattr(layer, name)
            parts.append(t.log_scale if t.is_diagonal else t.dense.ravel())
        elif name == "gate_s":
            parts.append(layer.branch_smooth.gate)
        else:
            parts.append(layer.branch_comp.gate)
    return np.concatenate(parts) if parts else np.zeros(0)


def _apply_params(layer: SplitLayer, segments, theta: np.ndarray) -> SplitLayer:
    updates: dict = {}
    offset = 0
    for name, size in segments:
        chunk = theta[offset : offset + size]
        offset += size
        if name in ("p_main", "p_text", "p_vision"):
            t = getattr(layer, name)
            if t.is_diagonal:
                updates[name] = tr.diagonal_transform(
                    np.exp(np.clip(chunk, _LOG_LO, _LOG_HI))
                )
            else:
                updates[name] = tr.dense_transform(chunk.reshape(t.dim, t.dim))
        elif name == "gate_s":
            updates["gate_smooth"] = chunk.copy()
        else:
            updates["gate_comp"] = chunk.copy()
    return with_updated_params(layer, **updates)


def _loss(layer: SplitLayer, batch: ActivationBatch, y_ref: np.ndarray):
    y, cache = forward_with_cache(layer, batch)
    loss = float(np.mean((y - y_ref) ** 2))
    return loss, y, cache


def _outlier_path_grad(path, transform, g):
    """Gradient of the loss w.r.t. a diagonal outlier-path log-scale."""
    d = transform.scale
    dl_da = g @ path["b"].T
    dl_dz = path["mask_a"] * dl_da
    grad = np.sum(dl_dz * path["x"], axis=0) * d
    dl_db = path["a"].T @ g
    dl_db_pre = path["mask_b"] * dl_db
    grad -= np.sum(dl_db_pre * path["b_pre"], axis=1)
    return grad


def analytic_gradient(
    layer: SplitLayer, batch: ActivationBatch, segments, y_ref: np.ndarray
):
    """Loss and straight-through gradient for the current parameters."""
    loss, y, cache = _loss(layer, batch, y_ref)
    g = (2.0 / y.size) * (y - y_ref)
    grads: dict[str, np.ndarray] = {}

    if any(n == "p_text" for n, _ in segments):
        grads["p_text"] = _outlier_path_grad(cache["t"], layer.p_text, g)
    if any(n == "p_vision" for n, _ in segments):
        grads["p_vision"] = _outlier_path_grad(cache["v"], layer.p_vision, g)

    m = cache["m"]
    t_rows = cache["text_rows"]
    need_main = any(n == "p_main" for n, _ in segments)
    need_gs = any(n == "gate_s" for n, _ in segments)
    need_gc = any(n == "gate_c" for n, _ in segments)

    if need_main or need_gs or need_gc:
        if layer.use_cws:
            cws = cache["cws"]
            b_m, mask_r, r_pre = cws["b_m"], cws["mask_r"], cws["r_pre"]
            dl_dxhat = g @ b_m.T + (g @ cws["v_q"].T) @ cws["u_q"].T
        else:
            mw = cache["main_w"]
            b_m, mask_r, r_pre = mw["b_m"], mw["mask_r"], m["w_prime"]
            dl_dxhat = g @ b_m.T

        dl_de_pre = None
        if layer.use_mac and "mac" in cache:
            mac = cache["mac"]
            dl_de_q = (g[t_rows] @ mac["vc_q"].T) @ mac["uc_q"].T
            dl_de_pre = mac["mask_e"] * dl_de_q
            dl_dxhat = dl_dxhat.copy()
            dl_dxhat[t_rows] -= dl_de_pre

        dl_dz = m["mask_x"] * dl_dxhat
        if dl_de_pre is not None:
            dl_dz = dl_dz.copy()
            dl_dz[t_rows] += dl_de_pre

        dl_db_m = m["x_hat"].T @ g
        dl_dr_pre = mask_r * dl_db_m

        if need_main:
            d = layer.p_main.scale
            grad = np.sum(dl_dz * m["x"], axis=0) * d
            grad -= np.sum(dl_dr_pre * m["w_prime"], axis=1)
            grads["p_main"] = grad

        if need_gs:
            cws = cache["cws"]
            br = layer.branch_smooth
            dl_dv_q = (m["x_hat"] @ cws["u_q"]).T @ g
            dl_dv_eff = cws["mask_v"] * dl_dv_q
            grad_gs = np.sum(dl_dv_eff * br.v_base, axis=1)
            # The branch product is also subtracted inside the main residual.
            grad_gs -= np.einsum("jk,jo,ko->k", br.u_star, dl_dr_pre, br.v_base)
            grads["gate_s"] = grad_gs

        if need_gc:
            br = layer.branch_comp
            if "mac" in cache:
                mac = cache["mac"]
                dl_dvc_q = (mac["e_q"] @ mac["uc_q"]).T @ g[t_rows]
                dl_dvc_eff = mac["mask_vc"] * dl_dvc_q
                grads["gate_c"] = np.sum(dl_dvc_eff * br.v_base, axis=1)
            else:
                grads["gate_c"] = np.zeros(br.rank)

    flat = (
        np.concatenate([grads[name] for name, _ in segments])
        if segments
        else np.zeros(0)
    )
    return loss, flat


def fd_gradient(layer, batch, segments, y_ref, theta, h):
    """Central-difference gradient of the calibration loss."""
    if theta.size > MAX_FD_PARAMS:
        raise ValueError(
            f"finite differences limited to {MAX_FD_PARAMS} parameters"
        )
    loss, _, _ = _loss(_apply_params(layer, segments, theta), batch, y_ref)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        for sign in (1.0, -1.0):
            probe = theta.copy()
            probe[i] += sign * h
            l_probe, _, _ = _loss(_apply_params(layer, segments, probe), batch, y_ref)
            grad[i] += sign * l_probe
        grad[i] /= 2.0 * h
    return loss, grad


def calibrate(
    layer: SplitLayer, batch: ActivationBatch, cfg: CalibConfig
) -> tuple[SplitLayer, LossTrace]:
    """Minimize the reconstruction loss; returns the best-loss snapshot."""
    segments = _param_layout(layer, cfg)
    y_ref = forward_reference(layer.full_weight(), batch)
    theta = _initial_params(layer, segments)
    trace = LossTrace()
    best_theta = theta.copy()
    best_loss = np.inf
    for step in range(cfg.steps):
        current = _apply_params(layer, segments, theta)
        if cfg.grad_mode == "analytic":
            loss, grad = analytic_gradient(current, batch, segments, y_ref)
        else:
            loss, grad = fd_gradient(layer, batch, segments, y_ref, theta, cfg.fd_step)
        if not np.isfinite(loss):
            raise NonFiniteLossError(step)
        trace.losses.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_theta = theta.copy()
        if theta.size == 0:
            continue
        lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))
        theta = theta - lr * grad
    final = _apply_params(layer, segments, best_theta)
    return final, trace


def _stratified_subset(rng, batch: ActivationBatch, size: int) -> np.ndarray:
    """Token subset keeping roughly the batch's text/vision proportions."""
    t_rows, v_rows = batch.text_rows, batch.vision_rows
    total = batch.data.shape[0]
    if size > total:
        raise ValueError(f"subset size {size} exceeds {total} tokens")
    n_t = int(round(size * t_rows.size / total))
    if t_rows.size:
        n_t = min(max(n_t, 1), t_rows.size, size)
    n_v = size - n_t
    if v_rows.size and n_v == 0 and size > 1:
        n_v, n_t = 1, size - 1
    chosen = np.concatenate([
        rng.choice(t_rows, size=n_t, replace=False) if n_t else np.empty(0, np.int64),
        rng.choice(v_rows, size=n_v, replace=False) if n_v else np.empty(0, np.int64),
    ])
    return np.sort(chosen.astype(np.int64))


def _subset_batch(batch: ActivationBatch, rows: np.ndarray) -> ActivationBatch:
    return ActivationBatch(batch.data[rows], batch.tags[rows])


def outlier_set(partition) -> np.ndarray:
    return np.sort(np.concatenate([partition.c_text, partition.c_vision]))


def stability_report(
    batch: ActivationBatch,
    cfg: MocdConfig,
    subset_sizes: list[int],
    reference_size: int,
    trials: int,
    seed: int = 0,
) -> list[dict]:
    """Mean/std Jaccard similarity of outlier selections from random token
    subsets against the reference-size selection."""
    total = batch.data.shape[0]
    if reference_size > total:
        raise ValueError("reference size exceeds token count")
    ref_rng = np.random.default_rng(seed)
    ref_rows = _stratified_subset(ref_rng, batch, reference_size)
    ref_sel = outlier_set(build_partition(_subset_batch(batch, ref_rows), cfg))
    report = []
    for size in subset_sizes:
        sims = []
        for trial in range(trials):
            rng = np.random.default_rng(seed * 1_000_003 + trial + 1)
            rows = _stratified_subset(rng, batch, size)
            sel = outlier_set(build_partition(_subset_batch(batch, rows), cfg))
            sims.append(jaccard(sel, ref_sel))
        sims = np.asarray(sims)
        report.append(
            {"subset_size": size, "mean_jaccard": float(sims.mean()),
             "std_jaccard": float(sims.std())}
        )
    return report
