"""The channel-split quantized linear layer.

The forward pass splits activations and weights into main / text-outlier /
vision-outlier paths, runs each through its own transform and fake
quantizer, optionally applies the two gated low-rank corrections (weight
smoothing on the main weight, activation compensation on text-token rows),
and sums the three paths.  With identity quantizers everything cancels
algebraically and the output equals X @ W, which is the load-bearing
correctness oracle for the wiring.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import lowrank, transform as tr
from .mocd import ChannelPartition, trivial_partition
from .quantizer import (
    Granularity,
    QuantSpec,
    clamp_mask,
    compute_params,
    fake_quantize,
)
from .tensor import (
    ActivationBatch,
    as_matrix,
    load_tensor,
    matmul,
    save_tensor,
    split_columns,
)

AUX_BITS_FLOOR = 4

DEFAULT_ACT_SPEC = QuantSpec(bits=8, symmetric=False, granularity=Granularity.PER_TOKEN)
DEFAULT_WEIGHT_SPEC = QuantSpec(
    bits=8, symmetric=True, granularity=Granularity.PER_CHANNEL
)


@dataclass(frozen=True)
class SplitLayer:
    partition: ChannelPartition
    w_main: np.ndarray
    w_text: np.ndarray
    w_vision: np.ndarray
    p_main: tr.Transform
    p_text: tr.Transform
    p_vision: tr.Transform
    act_spec: QuantSpec
    weight_spec: QuantSpec
    branch_smooth: lowrank.LowRankBranch | None = None
    branch_comp: lowrank.LowRankBranch | None = None
    use_cws: bool = False
    use_mac: bool = False
    aux_bits_floor: int = AUX_BITS_FLOOR

    def __post_init__(self):
        p = self.partition
        d_out = self.w_main.shape[1]
        if self.w_main.shape[0] != len(p.c_main):
            raise ValueError("w_main rows must match main channel count")
        if self.w_text.shape != (len(p.c_text), d_out):
            raise ValueError("w_text shape mismatch")
        if self.w_vision.shape != (len(p.c_vision), d_out):
            raise ValueError("w_vision shape mismatch")
        for t, width in (
            (self.p_main, len(p.c_main)),
            (self.p_text, len(p.c_text)),
            (self.p_vision, len(p.c_vision)),
        ):
            if t.dim != width:
                raise ValueError("transform dim does not match path width")
        if self.use_cws and self.branch_smooth is None:
            raise ValueError("CWS enabled but smoothing branch absent")
        if self.use_mac and self.branch_comp is None:
            raise ValueError("MAC enabled but compensation branch absent")
        for br in (self.branch_smooth, self.branch_comp):
            if br is not None and br.rank > min(len(p.c_main), d_out):
                raise ValueError("branch rank exceeds min(path width, d_out)")

    @property
    def d_out(self) -> int:
        return self.w_main.shape[1]

    def full_weight(self) -> np.ndarray:
        """Reassemble the unsplit D_in x D_out weight."""
        w = np.empty((self.partition.dim, self.d_out))
        w[self.partition.c_main] = self.w_main
        w[self.partition.c_text] = self.w_text
        w[self.partition.c_vision] = self.w_vision
        return w


def _quantized(m: np.ndarray, spec: QuantSpec):
    """Quantize with fresh params; returns (value, straight-through mask)."""
    params = compute_params(m, spec)
    return fake_quantize(m, params, spec), clamp_mask(m, params, spec)


def _outlier_path(x_p, w_p, p_t, act_spec, weight_spec, cache, prefix):
    z = tr.apply_right(x_p, p_t)
    a, mask_a = _quantized(z, act_spec)
    b_pre = tr.apply_inv_left(w_p, p_t)
    b, mask_b = _quantized(b_pre, weight_spec)
    cache[prefix] = {
        "x": x_p, "z": z, "a": a, "mask_a": mask_a,
        "b_pre": b_pre, "b": b, "mask_b": mask_b,
    }
    return matmul(a, b) if x_p.shape[1] else np.zeros((x_p.shape[0], w_p.shape[1]))


def forward_with_cache(layer: SplitLayer, batch: ActivationBatch):
    """Alg.-style forward returning the output and cached intermediates.

    The cache holds every pre-quantization tensor and straight-through mask
    needed for the analytic calibration gradient.
    """
    if batch.data.shape[1] != layer.partition.dim:
        raise ValueError("batch width does not match partition dim")
    x_m, x_t, x_v = split_columns(batch.data, layer.partition)
    t_rows = batch.text_rows
    act_aux = layer.act_spec.with_floor(layer.aux_bits_floor)
    w_aux = layer.weight_spec.with_floor(layer.aux_bits_floor)
    cache: dict = {"text_rows": t_rows}

    y_t = _outlier_path(x_t, layer.w_text, layer.p_text, act_aux, w_aux, cache, "t")
    y_v = _outlier_path(x_v, layer.w_vision, layer.p_vision, act_aux, w_aux, cache, "v")

    z = tr.apply_right(x_m, layer.p_main)
    x_hat, mask_x = _quantized(z, layer.act_spec)
    w_prime = tr.apply_inv_left(layer.w_main, layer.p_main)
    cache["m"] = {"x": x_m, "z": z, "x_hat": x_hat, "mask_x": mask_x,
                  "w_prime": w_prime}

    if layer.use_cws:
        br = layer.branch_smooth
        v_eff = br.effective_v()
        r_pre = w_prime - br.u_star @ v_eff
        b_m, mask_r = _quantized(r_pre, layer.weight_spec)
        u_q, mask_u = _quantized(br.u_star, w_aux)
        v_q, mask_v = _quantized(v_eff, w_aux)
        y_m = matmul(x_hat, b_m) + matmul(matmul(x_hat, u_q), v_q)
        cache["cws"] = {"r_pre": r_pre, "b_m": b_m, "mask_r": mask_r,
                        "u_q": u_q, "mask_u": mask_u,
                        "v_q": v_q, "mask_v": mask_v, "v_eff": v_eff}
    else:
        b_m, mask_r = _quantized(w_prime, layer.weight_spec)
        y_m = matmul(x_hat, b_m)
        cache["main_w"] = {"b_m": b_m, "mask_r": mask_r}

    if layer.use_mac and t_rows.size:
        br = layer.branch_comp
        e_pre = (z - x_hat)[t_rows]
        e_q, mask_e = _quantized(e_pre, act_aux)
        uc_q, mask_uc = _quantized(br.u_star, w_aux)
        vc_eff = br.effective_v()
        vc_q, mask_vc = _quantized(vc_eff, w_aux)
        comp = matmul(matmul(e_q, uc_q), vc_q)
        y_m = y_m.copy()
        y_m[t_rows] += comp
        cache["mac"] = {"e_pre": e_pre, "e_q": e_q, "mask_e": mask_e,
                        "uc_q": uc_q, "mask_uc": mask_uc,
                        "vc_q": vc_q, "mask_vc": mask_vc, "vc_eff": vc_eff}

    y = y_m + y_t + y_v
    return y, cache


def forward(layer: SplitLayer, batch: ActivationBatch) -> np.ndarray:
    y, _ = forward_with_cache(layer, batch)
    return y


def forward_reference(w: np.ndarray, batch: ActivationBatch) -> np.ndarray:
    """Unquantized reference output X @ W."""
    return matmul(batch.data, as_matrix(w))


def build_layer(
    w: np.ndarray,
    batch: ActivationBatch,
    partition: ChannelPartition | None = None,
    act_spec: QuantSpec = DEFAULT_ACT_SPEC,
    weight_spec: QuantSpec = DEFAULT_WEIGHT_SPEC,
    use_cws: bool = False,
    use_mac: bool = False,
    rank_ratio_cws: float = 0.02,
    rank_ratio_mac: float = 0.03,
    smoothing_init: bool = True,
) -> SplitLayer:
    """Assemble a layer: split weights, init transforms from the calibration
    activations, and anchor the optional low-rank branches."""
    w = as_matrix(w)
    if partition is None:
        partition = trivial_partition(w.shape[0])
    if w.shape[0] != partition.dim:
        raise ValueError("weight rows must match partition dim")
    x_m, x_t, x_v = split_columns(batch.data, partition)
    w_m = w[partition.c_main]
    w_t = w[partition.c_text]
    w_v = w[partition.c_vision]

    def _init(width, x_path):
        calib = x_path if smoothing_init else None
        return tr.init_transform(width, "diagonal", calib)

    p_main = _init(len(partition.c_main), x_m)
    p_text = _init(len(partition.c_text), x_t)
    p_vision = _init(len(partition.c_vision), x_v)

    d_out = w.shape[1]
    branch_smooth = branch_comp = None
    if use_cws:
        r = lowrank.default_rank(rank_ratio_cws, len(partition.c_main), d_out)
        branch_smooth = lowrank.build_branch(w_m, p_main, r)
    if use_mac:
        r = lowrank.default_rank(rank_ratio_mac, len(partition.c_main), d_out)
        branch_comp = lowrank.build_branch(w_m, p_main, r)
    return SplitLayer(
        partition=partition,
        w_main=w_m, w_text=w_t, w_vision=w_v,
        p_main=p_main, p_text=p_text, p_vision=p_vision,
        act_spec=act_spec, weight_spec=weight_spec,
        branch_smooth=branch_smooth, branch_comp=branch_comp,
        use_cws=use_cws, use_mac=use_mac,
    )


# -- serialization -----------------------------------------------------------

def _spec_to_dict(spec: QuantSpec) -> dict:
    return {"bits": spec.bits, "symmetric": spec.symmetric,
            "granularity": spec.granularity.value}


def _spec_from_dict(d: dict) -> QuantSpec:
    return QuantSpec(d["bits"], d["symmetric"], Granularity(d["granularity"]))


def _save_transform(t: tr.Transform, out_dir: str, name: str, manifest: dict):
    if t.is_diagonal:
        fname = f"{name}_scale.spqt"
        save_tensor(os.path.join(out_dir, fname), t.scale.reshape(1, -1))
        manifest[name] = {"kind": "diagonal", "file": fname}
    else:
        fname = f"{name}_dense.spqt"
        save_tensor(os.path.join(out_dir, fname), t.dense)
        manifest[name] = {"kind": "dense", "file": fname}


def _load_transform(entry: dict, in_dir: str, dim: int) -> tr.Transform:
    data = load_tensor(os.path.join(in_dir, entry["file"]))
    if entry["kind"] == "diagonal":
        if dim == 0:
            return tr.identity_transform(0)
        return tr.diagonal_transform(np.asarray(data).reshape(-1))
    return tr.dense_transform(data)


def _save_branch(br: lowrank.LowRankBranch, out_dir: str, name: str, manifest: dict):
    files = {}
    for part, value in (("u_star", br.u_star), ("v_base", br.v_base),
                        ("gate", br.gate.reshape(1, -1))):
        fname = f"{name}_{part}.spqt"
        save_tensor(os.path.join(out_dir, fname), value)
        files[part] = fname
    manifest[name] = files


def _load_branch(entry: dict, in_dir: str) -> lowrank.LowRankBranch:
    u = load_tensor(os.path.join(in_dir, entry["u_star"]))
    v = load_tensor(os.path.join(in_dir, entry["v_base"]))
    gate = np.asarray(load_tensor(os.path.join(in_dir, entry["gate"]))).reshape(-1)
    return lowrank.LowRankBranch(u, v, gate)


def save_layer(layer: SplitLayer, out_dir: str) -> str:
    """Write all layer tensors plus a JSON manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest: dict = {
        "format": "modquant-layer",
        "version": 1,
        "dim": layer.partition.dim,
        "d_out": layer.d_out,
        "partition": {
            "c_main": layer.partition.c_main.tolist(),
            "c_text": layer.partition.c_text.tolist(),
            "c_vision": layer.partition.c_vision.tolist(),
        },
        "act_spec": _spec_to_dict(layer.act_spec),
        "weight_spec": _spec_to_dict(layer.weight_spec),
        "use_cws": layer.use_cws,
        "use_mac": layer.use_mac,
        "aux_bits_floor": layer.aux_bits_floor,
    }
    for name, w in (("w_main", layer.w_main), ("w_text", layer.w_text),
                    ("w_vision", layer.w_vision)):
        fname = f"{name}.spqt"
        save_tensor(os.path.join(out_dir, fname), w)
        manifest[name] = fname
    _save_transform(layer.p_main, out_dir, "p_main", manifest)
    _save_transform(layer.p_text, out_dir, "p_text", manifest)
    _save_transform(layer.p_vision, out_dir, "p_vision", manifest)
    if layer.branch_smooth is not None:
        _save_branch(layer.branch_smooth, out_dir, "branch_smooth", manifest)
    if layer.branch_comp is not None:
        _save_branch(layer.branch_comp, out_dir, "branch_comp", manifest)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_layer(manifest_path: str) -> SplitLayer:
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "modquant-layer":
        raise ValueError("not a layer manifest")
    in_dir = os.path.dirname(os.path.abspath(manifest_path))
    part = manifest["partition"]
    partition = ChannelPartition(
        np.asarray(part["c_main"], dtype=np.int64),
        np.asarray(part["c_text"], dtype=np.int64),
        np.asarray(part["c_vision"], dtype=np.int64),
        manifest["dim"],
    )
    kwargs = {}
    for name in ("branch_smooth", "branch_comp"):
        if name in manifest:
            kwargs[name] = _load_branch(manifest[name], in_dir)
    return SplitLayer(
        partition=partition,
        w_main=load_tensor(os.path.join(in_dir, manifest["w_main"])),
        w_text=load_tensor(os.path.join(in_dir, manifest["w_text"])),
        w_vision=load_tensor(os.path.join(in_dir, manifest["w_vision"])),
        p_main=_load_transform(manifest["p_main"], in_dir, len(partition.c_main)),
        p_text=_load_transform(manifest["p_text"], in_dir, len(partition.c_text)),
        p_vision=_load_transform(manifest["p_vision"], in_dir, len(partition.c_vision)),
        act_spec=_spec_from_dict(manifest["act_spec"]),
        weight_spec=_spec_from_dict(manifest["weight_spec"]),
        use_cws=manifest["use_cws"],
        use_mac=manifest["use_mac"],
        aux_bits_floor=manifest["aux_bits_floor"],
        **kwargs,
    )


def with_updated_params(
    layer: SplitLayer,
    p_main: tr.Transform | None = None,
    p_text: tr.Transform | None = None,
    p_vision: tr.Transform | None = None,
    gate_smooth: np.ndarray | None = None,
    gate_comp: np.ndarray | None = None,
) -> SplitLayer:
    """Return a copy with selected learnable parameters replaced."""
    changes: dict = {}
    if p_main is not None:
        changes["p_main"] = p_main
    if p_text is not None:
        changes["p_text"] = p_text
    if p_vision is not None:
        changes["p_vision"] = p_vision
    if gate_smooth is not None:
        changes["branch_smooth"] = layer.branch_smooth.with_gate(gate_smooth)
    if gate_comp is not None:
        changes["branch_comp"] = layer.branch_comp.with_gate(gate_comp)
    return replace(layer, **changes)
