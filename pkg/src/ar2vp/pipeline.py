"""Full cooperative forward pass and its closed-form backward pass.

For a batch of frames, every agent encodes its BEV grid with the shared
encoder. Transmitted copies optionally pass through the channel autoencoder
and the wire dtype. For each destination vehicle the maps of every agent are
warped into its frame, fused over the collaborative graph, decoded,
compensated with the RSU's decoded map and fed to both heads.

Array axes: B frames, N vehicles, A = N + 1 agents (RSU first), P = H * W
cells, then channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import model as nn
from .channel import BandwidthLedger, broadcast, make_message, serialize_feature, serialize_pose
from .dpr import DISTANCE_MODES, SELF_MODES, distance_factor, weights_from_cosines
from .geometry import rsu_vehicle_distance
from .r2vpc import CompensationConfig

FUSION_MODES = ("graph", "mean")


@dataclass(frozen=True)
class PipelineFlags:
    rsu_on: bool = True
    graph_on: bool = True
    compensator_on: bool = True
    compression_n: int = 1
    dpr_self: str = "include"
    dpr_distance: str = "raw"
    fusion: str = "graph"
    threshold: float = 0.5
    wire_dtype: str = "float64"
    model_at_rsu: bool = False

    def __post_init__(self):
        if self.dpr_self not in SELF_MODES:
            raise ValueError(f"dpr_self must be one of {SELF_MODES}")
        if self.dpr_distance not in DISTANCE_MODES:
            raise ValueError(f"dpr_distance must be one of {DISTANCE_MODES}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}")
        if self.wire_dtype not in ("float32", "float64"):
            raise ValueError("wire_dtype must be float32 or float64")
        if self.compression_n < 1:
            raise ValueError("compression_n must be >= 1")
        CompensationConfig(self.threshold)

    @property
    def collaborates(self) -> bool:
        return self.graph_on or self.compensator_on


# ---------------------------------------------------------------- frame geometry

def warp_indices(poses, height: int, width: int, cell_size: float) -> np.ndarray:
    """Nearest-neighbour source cell for every (destination vehicle, source agent, cell).

    Returns (N, A, P) int64 with -1 where the destination cell falls outside
    the source grid.
    """
    from .scene import GridSpec, cell_centers

    local = cell_centers(GridSpec(height, width, cell_size)).reshape(-1, 2)
    n = len(poses) - 1
    out = np.empty((n, len(poses), height * width), dtype=np.int64)
    for i in range(n):
        g = poses[i + 1].to_global(local)
        for j, src in enumerate(poses):
            q = src.to_local(g)
            col = np.floor(q[:, 0] / cell_size + width / 2 + 1e-9).astype(np.int64)
            row = np.floor(q[:, 1] / cell_size + height / 2 + 1e-9).astype(np.int64)
            ok = (col >= 0) & (col < width) & (row >= 0) & (row < height)
            out[i, j] = np.where(ok, row * width + col, -1)
    return out


def frame_inputs(frame) -> np.ndarray:
    """Encoder input per agent: grid plus its 3x3 neighbourhood mean, (A, P, 2 C_in)."""
    if "inputs" not in frame._cache:
        x = nn.spatial_context(frame.grids)
        frame._cache["inputs"] = x.reshape(x.shape[0], -1, x.shape[-1])
    return frame._cache["inputs"]


def frame_warps(frame) -> np.ndarray:
    if "warps" not in frame._cache:
        a, h, w, _ = frame.grids.shape
        frame._cache["warps"] = warp_indices(frame.poses, h, w, frame.cell_size)
    return frame._cache["warps"]


def frame_distances(frame) -> np.ndarray:
    if "distances" not in frame._cache:
        frame._cache["distances"] = np.array(
            [rsu_vehicle_distance(frame.poses[0], p) for p in frame.poses[1:]])
    return frame._cache["distances"]


def nearest_peer(poses) -> np.ndarray:
    """Index of each vehicle's closest other vehicle (ties to the lower index)."""
    xy = np.array([p.position for p in poses], dtype=float)
    d = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.argmin(axis=1)


# ---------------------------------------------------------------- helpers

def wire_roundtrip(x, dtype: str):
    """Values as they arrive after the wire; identity for float64."""
    if dtype == "float64":
        return x
    return x.astype(np.float32).astype(np.float64)


def _pearson_rows(a, b):
    """Pearson correlation of each (B, N) pair of flattened maps; 0 for constant maps."""
    a = a.reshape(a.shape[0], a.shape[1], -1)
    b = b.reshape(b.shape[0], b.shape[1], -1)
    da = a - a.mean(axis=-1, keepdims=True)
    db = b - b.mean(axis=-1, keepdims=True)
    na = np.sqrt((da * da).sum(-1))
    nb = np.sqrt((db * db).sum(-1))
    num = (da * db).sum(-1)
    ok = (na > 0) & (nb > 0)
    r = np.zeros(num.shape)
    r[ok] = num[ok] / (na[ok] * nb[ok])
    return np.clip(r, -1.0, 1.0)


def _gather_matrix(gidx, weights, n_src: int):
    """Sparse (B*N*P, n_src) matrix summing weights[b,i,a] * src[gidx[b,i,a,p]] over a."""
    b_n, n_v, a_n, p_n = gidx.shape
    rows = np.broadcast_to(np.arange(b_n * n_v * p_n).reshape(b_n, n_v, 1, p_n), gidx.shape)
    data = np.broadcast_to(weights[..., None], gidx.shape)
    keep = data != 0.0
    return sparse.csr_matrix((data[keep], (rows[keep], gidx[keep])), shape=(b_n * n_v * p_n, n_src))


def _scatter_matrix(gidx, n_src: int):
    """Sparse (gidx.size, n_src) one-hot rows; its transpose scatters gathered gradients back."""
    rows = gidx.size
    return sparse.csr_matrix((np.ones(rows), (np.arange(rows), gidx.ravel())), shape=(rows, n_src))


@dataclass
class Frozen:
    """Stop-gradient quantities of a forward pass, reusable to hold them fixed."""

    xi: np.ndarray  # (B, N, N) with [b, j, i] = weight of vehicle j into vehicle i
    r: np.ndarray  # (B, N) similarity ratios
    coef: np.ndarray  # (B, N) applied compensation coefficients


@dataclass
class PipelineOutput:
    seg: np.ndarray  # (B, N, H, W, K)
    det: np.ndarray  # (B, N, H, W, 5)
    frozen: Frozen
    cache: dict


# ---------------------------------------------------------------- forward

def forward(frames, params: nn.ModelParams, flags: PipelineFlags, frozen: Frozen | None = None,
            ledger: BandwidthLedger | None = None) -> PipelineOutput:
    frames = list(frames)
    b_n = len(frames)
    a_n = frames[0].grids.shape[0]
    n_v = a_n - 1
    h, w = frames[0].grids.shape[1:3]
    p_n = h * w
    if n_v < 1:
        raise ValueError("a frame needs at least one vehicle")
    for f in frames:
        if f.grids.shape[:3] != (a_n, h, w):
            raise ValueError("all frames in a batch must share agent count and grid size")
    n = flags.compression_n
    if n != params.dims.compression_n and n > 1:
        raise nn.ShapeError(f"flags ask for compression {n}, params built for {params.dims.compression_n}")

    x = np.stack([frame_inputs(f) for f in frames])  # (B, A, P, Cin)
    m, c_enc = nn.encode_forward(x, params)
    f_ch = m.shape[-1]
    cache = {"c_enc": c_enc, "shape": (b_n, a_n, n_v, h, w), "flags": flags}

    if n > 1:
        z, cache["c_cmp"] = nn.compress_forward(m, params, n)
        zq = wire_roundtrip(z, flags.wire_dtype)
        s, cache["c_dcmp"] = nn.decompress_forward(zq, params, n)
        sent_payload = zq
    else:
        s = wire_roundtrip(m, flags.wire_dtype)
        sent_payload = s
    ego = s if flags.model_at_rsu else m

    # gather every source map into every destination frame
    bap = b_n * a_n * p_n
    warps = np.stack([frame_warps(f) for f in frames])  # (B, N, A, P)
    base = (np.arange(b_n)[:, None, None, None] * a_n + np.arange(a_n)[None, None, :, None]) * p_n
    gidx = np.where(warps >= 0, base + warps, 2 * bap)
    cells = np.arange(p_n)
    for i in range(n_v):
        gidx[:, i, i + 1, :] = bap + (np.arange(b_n)[:, None] * a_n + i + 1) * p_n + cells
    valid = gidx != 2 * bap  # (B, N, A, P)
    src = np.concatenate([s.reshape(bap, f_ch), ego.reshape(bap, f_ch), np.zeros((1, f_ch))])
    g = src[gidx]  # (B, N, A, P, F)

    # collaborative graph weights (stop-gradient)
    if frozen is None:
        xi = np.zeros((b_n, n_v, n_v))
        veh = g[:, :, 1:]  # (B, N, N, P, F)
        ego_maps = np.stack([g[:, i, i + 1] for i in range(n_v)], axis=1)  # (B, N, P, F)
        dots = np.einsum("bijpf,bipf->bij", veh, ego_maps)
        norms_j = np.sqrt(np.einsum("bijpf,bijpf->bij", veh, veh))
        norms_i = np.sqrt(np.einsum("bipf,bipf->bi", ego_maps, ego_maps))
        denom = norms_j * norms_i[:, :, None]
        cos = np.zeros_like(dots)
        np.divide(dots, denom, out=cos, where=denom > 0)
        cos = np.clip(cos, -1.0, 1.0)
        for b in range(b_n):
            gd = distance_factor(frame_distances(frames[b]), flags.dpr_distance)
            for i in range(n_v):
                xi[b, :, i] = weights_from_cosines(cos[b, i], gd, i, flags.dpr_self)
    else:
        xi = frozen.xi

    coeff = np.zeros((b_n, n_v, a_n))
    if flags.graph_on and flags.fusion == "graph":
        coeff[:, :, 1:] = np.transpose(xi, (0, 2, 1))
        if flags.rsu_on:
            coeff[:, :, 0] = 1.0 / n_v
    elif flags.graph_on:
        members = np.ones(a_n)
        if not flags.rsu_on:
            members[0] = 0.0
        coeff[:] = members / members.sum()
    else:
        for i in range(n_v):
            coeff[:, i, i + 1] = 1.0
    fuse_mat = _gather_matrix(gidx, coeff, src.shape[0])
    fused = np.asarray(fuse_mat @ src).reshape(b_n, n_v, p_n, f_ch)
    dec, cache["c_dec"] = nn.decode_forward(fused, params)
    cache["fuse_mat"] = fuse_mat

    r = np.zeros((b_n, n_v))
    coef = np.zeros((b_n, n_v))
    comp = dec
    if flags.compensator_on and (flags.rsu_on or n_v > 1):
        if flags.rsu_on:
            sel = slice(0, 1)
            ccomp = np.ones((b_n, n_v, 1))
        else:
            sel = slice(1, a_n)
            ccomp = np.zeros((b_n, n_v, n_v))
            for b, f in enumerate(frames):
                ccomp[b, np.arange(n_v), nearest_peer(f.poses[1:])] = 1.0
        gsrc = g[:, :, sel]
        vsrc = valid[:, :, sel, :, None].astype(float)
        dg, c_dg = nn.decode_forward(gsrc, params)
        source = np.einsum("bij,bijpc->bipc", ccomp, dg * vsrc)
        if frozen is None:
            r = _pearson_rows(source, dec)
            coef = np.where(r < flags.threshold, flags.threshold - r, 0.0)
        else:
            r, coef = frozen.r, frozen.coef
        comp = dec + coef[:, :, None, None] * source
        cache.update(sel=sel, ccomp=ccomp, vsrc=vsrc, c_dg=c_dg,
                     comp_mat=_scatter_matrix(gidx[:, :, sel], src.shape[0]))
    cache["coef"] = coef
    if flags.model_at_rsu:
        comp = wire_roundtrip(comp, flags.wire_dtype)

    seg, cache["c_seg"] = nn.seg_head_forward(comp, params)
    det, cache["c_det"] = nn.det_head_forward(comp, params)

    if ledger is not None:
        _account(frames, flags, sent_payload, comp, ledger, h, w)

    return PipelineOutput(seg.reshape(b_n, n_v, h, w, -1), det.reshape(b_n, n_v, h, w, -1),
                          Frozen(xi, r, coef), cache)


# ---------------------------------------------------------------- backward

def backward(dseg, ddet, out: PipelineOutput, params: nn.ModelParams) -> dict:
    """Parameter gradients given upstream gradients of both heads."""
    c = out.cache
    if "c_enc" not in c:
        raise nn.CacheError("pipeline backward needs the forward cache")
    b_n, a_n, n_v, h, w = c["shape"]
    p_n = h * w
    flags = c["flags"]
    grads = params.zeros_like()

    dcomp, gs = nn.seg_head_backward(dseg.reshape(b_n, n_v, p_n, -1), c["c_seg"])
    nn.add_grads(grads, gs)
    dcomp2, gd = nn.det_head_backward(ddet.reshape(b_n, n_v, p_n, -1), c["c_det"])
    nn.add_grads(grads, gd)
    dcomp = dcomp + dcomp2

    f_ch = params.dims.c_f
    dfused, gdec = nn.decode_backward(dcomp, c["c_dec"])
    nn.add_grads(grads, gdec)
    dsrc = np.asarray(c["fuse_mat"].T @ dfused.reshape(-1, f_ch))
    if "c_dg" in c:
        dsource = c["coef"][:, :, None, None] * dcomp
        ddg = c["ccomp"][..., None, None] * dsource[:, :, None] * c["vsrc"]
        dgsrc, gdg = nn.decode_backward(ddg, c["c_dg"])
        nn.add_grads(grads, gdg)
        dsrc += c["comp_mat"].T @ dgsrc.reshape(-1, f_ch)
    bap = b_n * a_n * p_n
    ds = dsrc[:bap].reshape(b_n, a_n, p_n, f_ch)
    dego = dsrc[bap:2 * bap].reshape(b_n, a_n, p_n, f_ch)
    if flags.model_at_rsu:
        ds = ds + dego
        dm = np.zeros_like(ds)
    else:
        dm = dego
    if flags.compression_n > 1:
        dz, gdc = nn.decompress_backward(ds, c["c_dcmp"])
        nn.add_grads(grads, gdc)
        dm2, gc = nn.compress_backward(dz, c["c_cmp"])
        nn.add_grads(grads, gc)
        dm = dm + dm2
    else:
        dm = dm + ds
    _, ge = nn.encode_backward(dm, c["c_enc"])
    nn.add_grads(grads, ge)
    return grads


# ---------------------------------------------------------------- accounting

def _account(frames, flags: PipelineFlags, payload, comp, ledger: BandwidthLedger, h, w):
    """Charge one step per frame with the messages this configuration sends.

    Distributed mode: vehicles exchange features pairwise (N(N-1) sends); with
    the RSU present each vehicle also uploads to the RSU and the RSU sends its
    map to each vehicle (2N). With the model hosted at the RSU only the N
    uploads and N returned maps remain.
    """
    kind = "compressed_feature" if flags.compression_n > 1 else "feature"
    n_v = len(frames[0].poses) - 1
    for b, frame in enumerate(frames):
        ledger.new_step()
        if not flags.collaborates:
            continue
        for j, pose in enumerate(frame.poses):
            if j == 0 and not flags.rsu_on:
                continue
            broadcast(make_message(serialize_pose(pose, j)), set(range(len(frame.poses))) - {j}, ledger)
        maps = [serialize_feature(payload[b, j].reshape(h, w, -1), j, kind, flags.wire_dtype)
                for j in range(n_v + 1)]
        if flags.model_at_rsu:
            for j in range(1, n_v + 1):
                broadcast(make_message(maps[j]), {0}, ledger)
            for i in range(n_v):
                back = serialize_feature(comp[b, i].reshape(h, w, -1), 0, "feature", flags.wire_dtype)
                broadcast(make_message(back), {i + 1}, ledger)
            continue
        if flags.graph_on or (flags.compensator_on and not flags.rsu_on):
            for j in range(1, n_v + 1):
                msg = make_message(maps[j])
                for i in range(1, n_v + 1):
                    if i != j:
                        broadcast(msg, {i}, ledger)
        if flags.rsu_on:
            for j in range(1, n_v + 1):
                broadcast(make_message(maps[j]), {0}, ledger)
            msg = make_message(maps[0])
            for i in range(1, n_v + 1):
                broadcast(msg, {i}, ledger)
