"""Volumetric transformer: patch embedding, encoder, decoder, summariser.

The encoder turns a 3D view into patch tokens (linear patch embedding +
learned positional embeddings, pre-norm attention/MLP blocks). A summary
branch prepends a learned aggregation token, runs one attention block, and
projects both the aggregated summary and the raw patch tokens through a
shared MLP -> L2-normalise -> weight-normalised linear head to K logits.
The decoder maps tokens linearly back to patch voxels for reconstruction.

Forward passes are deterministic; parameters are never mutated by them.
Teacher and student use the same functions with different parameter sets.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CKPT_MAGIC = b"VXSC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    patch_extent: int = 4
    embed_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    proj_dim: int = 256
    summariser_heads: int = 8
    pos_grid: tuple[int, int, int] = (4, 4, 4)

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.embed_dim % self.summariser_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by summariser_heads {self.summariser_heads}")
        if self.proj_dim < 2:
            raise ValueError(f"proj_dim must be >= 2, got {self.proj_dim}")

    @property
    def patch_voxels(self) -> int:
        return self.patch_extent ** 3


def paper_preset() -> ModelConfig:
    """Full-scale configuration (D=768, 8 summariser heads)."""
    return ModelConfig(patch_extent=16, embed_dim=768, depth=12, n_heads=12,
                       mlp_ratio=4.0, proj_dim=4096, summariser_heads=8,
                       pos_grid=(9, 12, 12))


def desk_preset() -> ModelConfig:
    return ModelConfig()


class ModelParams:
    """Named parameter arrays for one network (student or teacher)."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self, requires_grad: bool = False) -> "ModelParams":
        out = {n: Tensor(t.data.copy(), requires_grad=requires_grad, name=n)
               for n, t in self.tensors.items()}
        return ModelParams(self.cfg, out)

    @staticmethod
    def init(cfg: ModelConfig, seed: int = 0, dtype=np.float64,
             requires_grad: bool = True) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        hidden = int(cfg.mlp_ratio * d)

        def w(*shape):
            return np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04)

        t: dict[str, np.ndarray] = {}
        t["patch_embed.w"] = w(cfg.patch_voxels, d)
        t["patch_embed.b"] = np.zeros(d)
        t["pos_embed"] = w(int(np.prod(cfg.pos_grid)), d)
        for i in range(cfg.depth):
            p = f"enc{i}"
            t[f"{p}.attn.norm.g"] = np.ones(d)
            t[f"{p}.attn.norm.b"] = np.zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                t[f"{p}.attn.{nm}"] = w(d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                t[f"{p}.attn.{nm}"] = np.zeros(d)
            t[f"{p}.mlp.norm.g"] = np.ones(d)
            t[f"{p}.mlp.norm.b"] = np.zeros(d)
            t[f"{p}.mlp.w1"] = w(d, hidden)
            t[f"{p}.mlp.b1"] = np.zeros(hidden)
            t[f"{p}.mlp.w2"] = w(hidden, d)
            t[f"{p}.mlp.b2"] = np.zeros(d)
        t["dec.w"] = w(d, cfg.patch_voxels)
        t["dec.b"] = np.zeros(cfg.patch_voxels)
        t["cls"] = w(1, d)
        t["agg.norm1.g"] = np.ones(d)
        t["agg.norm1.b"] = np.zeros(d)
        for nm in ("wq", "wk", "wv", "wo"):
            t[f"agg.attn.{nm}"] = w(d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            t[f"agg.attn.{nm}"] = np.zeros(d)
        t["agg.norm2.g"] = np.ones(d)
        t["agg.norm2.b"] = np.zeros(d)
        t["agg.mlp.w1"] = w(d, hidden)
        t["agg.mlp.b1"] = np.zeros(hidden)
        t["agg.mlp.w2"] = w(hidden, d)
        t["agg.mlp.b2"] = np.zeros(d)
        t["proj.w1"] = w(d, 2 * d)
        t["proj.b1"] = np.zeros(2 * d)
        t["proj.w2"] = w(2 * d, d)
        t["proj.b2"] = np.zeros(d)
        t["head.w"] = w(cfg.proj_dim, d)  # weight-normalised at use; scale fixed at 1
        tensors = {n: Tensor(a.astype(dtype), requires_grad=requires_grad, name=n)
                   for n, a in t.items()}
        return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# Patch handling
# ---------------------------------------------------------------------------


def view_grid(extent: tuple[int, ...], patch: int) -> tuple[int, int, int]:
    if any(e % patch for e in extent):
        raise ValueError(f"view extent {tuple(extent)} not divisible by patch {patch}")
    return tuple(e // patch for e in extent)


def patchify(view: np.ndarray, patch: int) -> np.ndarray:
    """(X,Y,Z) -> (N, patch^3), row-major over the patch grid."""
    gx, gy, gz = view_grid(view.shape, patch)
    p = patch
    arr = view.reshape(gx, p, gy, p, gz, p).transpose(0, 2, 4, 1, 3, 5)
    return arr.reshape(gx * gy * gz, p ** 3)


def unpatchify(tokens: Tensor, grid: tuple[int, int, int], patch: int) -> Tensor:
    gx, gy, gz = grid
    p = patch
    t = ad.reshape(tokens, (gx, gy, gz, p, p, p))
    t = ad.transpose(t, (0, 3, 1, 4, 2, 5))
    return ad.reshape(t, (gx * p, gy * p, gz * p))


_interp_cache: dict[tuple, np.ndarray] = {}


def _interp_matrix(src_grid: tuple[int, int, int], dst_grid: tuple[int, int, int]) -> np.ndarray:
    """Trilinear interpolation matrix between flattened row-major 3D grids."""
    key = (src_grid, dst_grid)
    if key in _interp_cache:
        return _interp_cache[key]
    axes = []
    for s, d in zip(src_grid, dst_grid):
        if d == 1:
            coords = np.array([(s - 1) / 2.0])
        else:
            coords = np.arange(d) * ((s - 1) / (d - 1))
        i0 = np.floor(coords).astype(int)
        i0 = np.minimum(i0, s - 1)
        i1 = np.minimum(i0 + 1, s - 1)
        w = coords - i0
        axes.append((i0, i1, w))
    n_src = int(np.prod(src_grid))
    n_dst = int(np.prod(dst_grid))
    m = np.zeros((n_dst, n_src))
    sx, sy, sz = src_grid
    row = 0
    for ix0, ix1, wx in zip(*axes[0]):
        for iy0, iy1, wy in zip(*axes[1]):
            for iz0, iz1, wz in zip(*axes[2]):
                for cx, fx in ((ix0, 1 - wx), (ix1, wx)):
                    for cy, fy in ((iy0, 1 - wy), (iy1, wy)):
                        for cz, fz in ((iz0, 1 - wz), (iz1, wz)):
                            m[row, (cx * sy + cy) * sz + cz] += fx * fy * fz
                row += 1
    _interp_cache[key] = m
    return m


def positional_embedding(params: ModelParams, grid: tuple[int, int, int]) -> Tensor:
    pos = params["pos_embed"]
    if tuple(grid) == tuple(params.cfg.pos_grid):
        return pos
    m = _interp_matrix(tuple(params.cfg.pos_grid), tuple(grid)).astype(pos.dtype)
    return ad.matmul(Tensor(m), pos)


def patchify_embed(view: np.ndarray, params: ModelParams,
                   cfg: ModelConfig | None = None) -> Tensor:
    """Embed a view into N x D tokens (linear map of patch voxels + position)."""
    cfg = cfg or params.cfg
    grid = view_grid(view.shape, cfg.patch_extent)
    flat = patchify(np.asarray(view), cfg.patch_extent)
    w = params["patch_embed.w"]
    x = ad.matmul(Tensor(flat.astype(w.dtype)), w)
    x = ad.add(x, params["patch_embed.b"])
    return ad.add(x, positional_embedding(params, grid))


# ---------------------------------------------------------------------------
# Transformer blocks
# ---------------------------------------------------------------------------


def _mhsa(x: Tensor, params: ModelParams, prefix: str, n_heads: int) -> Tensor:
    n, d = x.shape
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)

    def heads(name):
        y = ad.add(ad.matmul(x, params[f"{prefix}.w{name}"]), params[f"{prefix}.b{name}"])
        return ad.transpose(ad.reshape(y, (n, n_heads, dh)), (1, 0, 2))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), scale)
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, d))
    return ad.add(ad.matmul(out, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def encode(tokens: Tensor, params: ModelParams, cfg: ModelConfig | None = None) -> Tensor:
    """Pre-norm encoder blocks: x += MHSA(LN(x)); x += MLP(LN(x))."""
    cfg = cfg or params.cfg
    if tokens.shape[-1] != cfg.embed_dim:
        raise ValueError(f"token dim {tokens.shape[-1]} != embed dim {cfg.embed_dim}")
    x = tokens
    for i in range(cfg.depth):
        p = f"enc{i}"
        h = ad.layernorm(x, params[f"{p}.attn.norm.g"], params[f"{p}.attn.norm.b"])
        x = ad.add(x, _mhsa(h, params, f"{p}.attn", cfg.n_heads))
        h = ad.layernorm(x, params[f"{p}.mlp.norm.g"], params[f"{p}.mlp.norm.b"])
        x = ad.add(x, _mlp(h, params, f"{p}.mlp"))
    return x


def project_feature(features: Tensor, params: ModelParams) -> Tensor:
    """Projection MLP followed by L2 normalisation (unit pre-head feature)."""
    h = ad.gelu(ad.add(ad.matmul(features, params["proj.w1"]), params["proj.b1"]))
    z = ad.add(ad.matmul(h, params["proj.w2"]), params["proj.b2"])
    norm = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(z, z), axis=-1, keepdims=True), 1e-12))
    return ad.div(z, norm)


def project(features: Tensor, params: ModelParams) -> Tensor:
    """Shared projection branch: MLP -> L2-normalise -> unit-row linear to K logits."""
    z_hat = project_feature(features, params)
    w = params["head.w"]
    row_norm = ad.sqrt(ad.add(ad.reduce_sum(ad.mul(w, w), axis=-1, keepdims=True), 1e-12))
    w_unit = ad.div(w, row_norm)
    return ad.matmul(z_hat, ad.transpose(w_unit, (1, 0)))


def summarise(tokens: Tensor, params: ModelParams,
              cfg: ModelConfig | None = None) -> tuple[Tensor, Tensor]:
    """Aggregate tokens behind a learned summary token.

    Returns (global K logits from the summary position, N x K patch logits
    from projecting the input tokens through the same branch).
    """
    cfg = cfg or params.cfg
    seq = ad.concat([params["cls"], tokens], axis=0)
    h = ad.layernorm(seq, params["agg.norm1.g"], params["agg.norm1.b"])
    x = ad.add(seq, _mhsa(h, params, "agg.attn", cfg.summariser_heads))
    h = ad.layernorm(x, params["agg.norm2.g"], params["agg.norm2.b"])
    x = ad.add(x, _mlp(h, params, "agg.mlp"))
    cls_out = x[0:1]
    global_logits = ad.reshape(project(cls_out, params), (cfg.proj_dim,))
    patch_logits = project(tokens, params)
    return global_logits, patch_logits


def summary_feature(tokens: Tensor, params: ModelParams,
                    cfg: ModelConfig | None = None) -> Tensor:
    """D-dim aggregated summary vector (pre-projection); probe feature."""
    cfg = cfg or params.cfg
    seq = ad.concat([params["cls"], tokens], axis=0)
    h = ad.layernorm(seq, params["agg.norm1.g"], params["agg.norm1.b"])
    x = ad.add(seq, _mhsa(h, params, "agg.attn", cfg.summariser_heads))
    h = ad.layernorm(x, params["agg.norm2.g"], params["agg.norm2.b"])
    x = ad.add(x, _mlp(h, params, "agg.mlp"))
    return ad.reshape(x[0:1], (cfg.embed_dim,))


def decode(tokens: Tensor, params: ModelParams, view_extent: tuple[int, int, int],
           cfg: ModelConfig | None = None) -> Tensor:
    """Per-token linear map back to patch voxels, assembled to the view extent."""
    cfg = cfg or params.cfg
    grid = view_grid(view_extent, cfg.patch_extent)
    if int(np.prod(grid)) != tokens.shape[0]:
        raise ValueError(f"{tokens.shape[0]} tokens cannot tile extent {view_extent} "
                         f"with patch {cfg.patch_extent}")
    vox = ad.add(ad.matmul(tokens, params["dec.w"]), params["dec.b"])
    return unpatchify(vox, grid, cfg.patch_extent)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, student: ModelParams,
                    teacher: ModelParams, step: int) -> None:
    entries = []
    payload = bytearray()
    for group, params in (("student", student), ("teacher", teacher)):
        for name, t in params.named():
            entries.append({"group": group, "name": name, "shape": list(t.shape),
                            "dtype": str(t.dtype)})
            payload += t.data.tobytes()
    header = json.dumps({"config": asdict(cfg), "step": int(step),
                         "params": entries}).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, ModelParams, int]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    cd = header["config"]
    cd["pos_grid"] = tuple(cd["pos_grid"])
    cfg = ModelConfig(**cd)
    offset = 16 + hlen
    groups: dict[str, dict[str, Tensor]] = {"student": {}, "teacher": {}}
    for e in header["params"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=offset).reshape(e["shape"]).copy()
        offset += n * dt.itemsize
        requires = e["group"] == "student"
        groups[e["group"]][e["name"]] = Tensor(arr, requires_grad=requires, name=e["name"])
    if offset != len(blob):
        raise CheckpointError(f"checkpoint payload length mismatch at offset {offset}")
    return (cfg, ModelParams(cfg, groups["student"]),
            ModelParams(cfg, groups["teacher"]), int(header["step"]))


def checkpoint_manifest(path) -> dict:
    """Header-only view of a checkpoint (config, step, parameter table)."""
    with open(path, "rb") as f:
        head = f.read(16)
        if head[:4] != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {head[:4]!r}")
        version, hlen = struct.unpack_from("<IQ", head, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        return json.loads(f.read(hlen))
