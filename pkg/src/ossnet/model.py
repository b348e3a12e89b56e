"""The occupancy network: global CNN encoder, patch encoder and CBN decoder.

A forward pass maps query locations, the downscaled global volume and one
local patch per location to occupancy probabilities.  Parameters live in a
flat name -> Tensor dictionary whose prefixes identify the sub-network
(``encoder.``, ``patch_encoder.``, ``decoder.``, ``cbn.``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensornet as tn
from .errors import FormatError, ShapeError
from .sampling import PATCH_SIZE
from .tensornet import Tensor
from .volume import Volume, block_reduce

CKPT_MAGIC = b"OSSCKPT1\n"
PAU_PLACEMENTS = ("none", "decoder", "encoder", "both")

# Safe PAU (degrees 5/4) least-squares fit to leaky-ReLU(0.01) on [-10, 10];
# reproduced by ``fit_pau_init``.
PAU_INIT_NUM = (1.11886123e-01, 5.05000071e-01, 4.95913974e-01,
                1.80814297e-01, 2.51431685e-02, 1.23344056e-03)
PAU_INIT_DEN = (1.57052507e-07, 3.58048064e-01, 5.77927326e-09, 2.44245634e-03)


def fit_pau_init(lo: float = -10.0, hi: float = 10.0, samples: int = 4001):
    """Least-squares PAU coefficients approximating leaky-ReLU(0.01) on [lo, hi]."""
    from scipy.optimize import least_squares

    x = np.linspace(lo, hi, samples)
    y = np.where(x > 0, x, 0.01 * x)

    def pau_np(c):
        num, den = c[:6], c[6:]
        return np.polyval(num[::-1], x) / (1 + np.abs(np.polyval(np.r_[den[::-1], 0.0], x)))

    design = np.concatenate(
        [np.stack([x ** i for i in range(6)], 1), np.stack([-y * x ** j for j in range(1, 5)], 1)], 1
    )
    start, *_ = np.linalg.lstsq(design, y, rcond=None)
    fit = least_squares(lambda c: pau_np(c) - y, start, xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=20000)
    return fit.x[:6], fit.x[6:]


@dataclass(frozen=True)
class OssNetConfig:
    in_channels: int = 2
    encoder_stages: int = 4
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64)
    encoder_strides: tuple[int, ...] = (2, 1, 1, 1)
    downscale: int = 2
    latent_dim: int = 64
    decoder_blocks: int = 5
    decoder_width: int = 64
    use_patches: bool = True
    patch_source_size: int = 7
    patch_channels: tuple[int, int] = (8, 16)
    use_output_skips: bool = True
    use_aux_head: bool = True
    pau_placement: str = "decoder"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "encoder_strides", tuple(self.encoder_strides))
        object.__setattr__(self, "patch_channels", tuple(self.patch_channels))
        if self.decoder_blocks < 1:
            raise ValueError("decoder_blocks must be >= 1")
        if len(self.encoder_channels) != self.encoder_stages or \
                len(self.encoder_strides) != self.encoder_stages:
            raise ValueError("encoder_channels and encoder_strides need one entry per stage")
        widths = (self.in_channels, self.latent_dim, self.decoder_width, *self.encoder_channels,
                  *self.patch_channels)
        if min(widths) < 1 or min(self.encoder_strides) < 1 or self.downscale < 1:
            raise ValueError("widths, strides and the downscale factor must be positive")
        if self.patch_source_size not in (7, 14):
            raise ValueError("patch_source_size must be 7 or 14")
        if self.pau_placement not in PAU_PLACEMENTS:
            raise ValueError(f"pau_placement must be one of {PAU_PLACEMENTS}")

    @property
    def skip_width(self) -> int:
        """Length of the pooled feature vector fed to the latent projection."""
        if self.use_output_skips:
            return int(np.sum(self.encoder_channels))
        return self.encoder_channels[-1]

    @property
    def local_dim(self) -> int:
        if not self.use_patches:
            return 0
        side = PATCH_SIZE - 4
        return self.patch_channels[1] * side ** 3

    @classmethod
    def preset(cls, name: str, **overrides) -> OssNetConfig:
        """Configurations mirroring the ablation rows.

        ``onet`` is the global-latent baseline; ``A``/``B`` add 7^3 or pooled
        14^3 patches; ``C``/``D`` additionally enable output skips and the
        auxiliary head.  ``full`` is variant C with the 512-wide decoder.
        """
        table = {
            "onet": dict(use_patches=False, use_output_skips=False, use_aux_head=False),
            "A": dict(patch_source_size=7, use_output_skips=False, use_aux_head=False),
            "B": dict(patch_source_size=14, use_output_skips=False, use_aux_head=False),
            "C": dict(patch_source_size=7, use_output_skips=True, use_aux_head=True),
            "D": dict(patch_source_size=14, use_output_skips=True, use_aux_head=True),
            "full": dict(patch_source_size=7, use_output_skips=True, use_aux_head=True,
                          decoder_width=512, latent_dim=256),
        }
        if name not in table:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(table)}")
        return cls(**{**table[name], **overrides})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> OssNetConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


@dataclass
class ModelParams:
    config: OssNetConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    @property
    def encoder(self):
        return self.group("encoder")

    @property
    def patch_encoder(self):
        return self.group("patch_encoder")

    @property
    def decoder(self):
        return self.group("decoder")

    @property
    def cbn_predictors(self):
        return self.group("cbn")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> ModelParams:
        return ModelParams(
            self.config,
            {k: tn.parameter(v.data.copy(), k) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            {k: v.copy() for k, v in self.optimizer_state.items()},
        )

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.tensors.values()]))


def is_pau(name: str) -> bool:
    return ".pau" in name


# ----------------------------------------------------------------- init


def _uses_pau(config: OssNetConfig, site: str) -> bool:
    return config.pau_placement == "both" or config.pau_placement == site


def init_params(config: OssNetConfig, seed: int = 0) -> ModelParams:
    """He-initialised parameters; CBN scale predictors start at the identity."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}

    def conv(name, k, cin, cout):
        tensors[name + ".w"] = rng.normal(0.0, np.sqrt(2.0 / (k ** 3 * cin)), (k, k, k, cin, cout))
        tensors[name + ".b"] = np.zeros(cout)

    def dense(name, fan_in, fan_out, bias=True, scale=1.0):
        tensors[name + ".w"] = rng.normal(0.0, scale * np.sqrt(1.0 / fan_in), (fan_in, fan_out))
        if bias:
            tensors[name + ".b"] = np.zeros(fan_out)

    def pau_site(name):
        tensors[name + ".num"] = np.array(PAU_INIT_NUM)
        tensors[name + ".den"] = np.array(PAU_INIT_DEN)

    def cbn(name, width):
        tensors[f"cbn.{name}.w_gamma"] = np.zeros((config.latent_dim, width))
        tensors[f"cbn.{name}.b_gamma"] = np.ones(width)
        tensors[f"cbn.{name}.w_beta"] = np.zeros((config.latent_dim, width))
        tensors[f"cbn.{name}.b_beta"] = np.zeros(width)
        buffers[f"cbn.{name}.running_mean"] = np.zeros(width)
        buffers[f"cbn.{name}.running_var"] = np.ones(width)

    cin = config.in_channels
    enc_pau = _uses_pau(config, "encoder")
    for s, (cout, stride) in enumerate(zip(config.encoder_channels, config.encoder_strides)):
        conv(f"encoder.stage{s}.conv1", 3, cin, cout)
        conv(f"encoder.stage{s}.conv2", 3, cout, cout)
        if cin != cout or stride != 1:
            conv(f"encoder.stage{s}.skip", 1, cin, cout)
        if enc_pau:
            pau_site(f"encoder.stage{s}.pau0")
            pau_site(f"encoder.stage{s}.pau1")
        cin = cout
    dense("encoder.latent", config.skip_width, config.latent_dim)
    if config.use_aux_head:
        conv("encoder.aux", 1, cin, 1)

    if config.use_patches:
        c1, c2 = config.patch_channels
        conv("patch_encoder.conv1", 3, config.in_channels, c1)
        conv("patch_encoder.conv2", 3, c1, c2)
        if enc_pau:
            pau_site("patch_encoder.pau0")

    width = config.decoder_width
    dense("decoder.in_p", 3, width)
    dense("decoder.in_g", config.latent_dim, width, bias=False)
    if config.use_patches:
        dense("decoder.in_l", config.local_dim, width, bias=False)
    dec_pau = _uses_pau(config, "decoder")
    for i in range(config.decoder_blocks):
        cbn(f"block{i}.bn0", width)
        dense(f"decoder.block{i}.fc0", width, width)
        cbn(f"block{i}.bn1", width)
        dense(f"decoder.block{i}.fc1", width, width, scale=0.0)
        if dec_pau:
            pau_site(f"decoder.block{i}.pau0")
            pau_site(f"decoder.block{i}.pau1")
    cbn("out.bn", width)
    dense("decoder.out", width, 1)
    if dec_pau:
        pau_site("decoder.out.pau")

    return ModelParams(
        config,
        {k: tn.parameter(v, k) for k, v in tensors.items()},
        buffers,
    )


# ------------------------------------------------------------------ forward


def _act(x, params: ModelParams, site: str):
    num = params.tensors.get(site + ".num")
    if num is None:
        return tn.relu(x)
    return tn.pau(x, num, params.tensors[site + ".den"])


def prepare_global_input(volumes: Sequence[Volume | np.ndarray], config: OssNetConfig) -> np.ndarray:
    """Downscale and stack volumes to the channels-last encoder input."""
    arrays = []
    for v in volumes:
        data = v.data if isinstance(v, Volume) else np.asarray(v)
        if data.shape[0] != config.in_channels:
            raise ShapeError(f"volume has {data.shape[0]} channels, config expects {config.in_channels}")
        data = data.astype(np.float64)
        if config.downscale > 1:
            data = block_reduce(data, config.downscale)
        arrays.append(np.moveaxis(data, 0, -1))
    if len({a.shape for a in arrays}) != 1:
        raise ShapeError("volumes in one forward pass must share a shape")
    return np.stack(arrays)


def encode_global(global_input: np.ndarray, params: ModelParams, mode: str = "eval"):
    """Encode (B, d, h, w, C) downscaled volumes.

    Returns ``(latent, aux)`` with latent (B, latent_dim) and aux the (B, a, a, a)
    probability grid, or None when the auxiliary head is disabled.
    """
    cfg = params.config
    p = params.tensors
    x = tn.as_tensor(global_input)
    if x.data.ndim != 5 or x.shape[-1] != cfg.in_channels:
        raise ShapeError(f"encoder input {x.shape} does not match {cfg.in_channels} channels")
    pooled = []
    for s, stride in enumerate(cfg.encoder_strides):
        pre = f"encoder.stage{s}"
        h = tn.conv3d(x, p[pre + ".conv1.w"], p[pre + ".conv1.b"], stride=stride, padding=1)
        h = _act(h, params, pre + ".pau0")
        h = tn.conv3d(h, p[pre + ".conv2.w"], p[pre + ".conv2.b"], stride=1, padding=1)
        skip = x
        if pre + ".skip.w" in p:
            skip = tn.conv3d(x, p[pre + ".skip.w"], p[pre + ".skip.b"], stride=stride)
        x = _act(tn.add(h, skip), params, pre + ".pau1")
        if cfg.use_output_skips or s == cfg.encoder_stages - 1:
            pooled.append(tn.global_avg_pool(x))
    features = tn.concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
    latent = tn.linear(features, p["encoder.latent.w"], p["encoder.latent.b"])
    aux = None
    if cfg.use_aux_head:
        logits = tn.conv3d(x, p["encoder.aux.w"], p["encoder.aux.b"])
        aux = tn.sigmoid(tn.reshape(logits, logits.shape[:4]))
    return latent, aux


def encode_patches(patches: np.ndarray, params: ModelParams) -> Tensor:
    """One flattened local latent per 7^3 patch: two valid 3^3 convolutions.

    Each convolution is applied as a single dense matrix acting on whole
    flattened patches, which is much faster than im2col for tiny volumes.
    """
    cfg = params.config
    p = params.tensors
    patches = np.asarray(patches, dtype=np.float64)
    expected = (PATCH_SIZE,) * 3 + (cfg.in_channels,)
    if patches.ndim != 5 or patches.shape[1:] != expected:
        raise ShapeError(f"patches must be (n, 7, 7, 7, {cfg.in_channels}), got {patches.shape}")
    n = len(patches)
    if n == 0:
        return tn.Tensor(np.zeros((0, cfg.local_dim)))
    c1, c2 = cfg.patch_channels
    mid = PATCH_SIZE - 2
    h = tn.matmul(patches.reshape(n, -1), tn.conv3d_matrix(p["patch_encoder.conv1.w"], (PATCH_SIZE,) * 3))
    h = tn.add(tn.reshape(h, (n, mid ** 3, c1)), p["patch_encoder.conv1.b"])
    h = _act(tn.reshape(h, (n, -1)), params, "patch_encoder.pau0")
    h = tn.matmul(h, tn.conv3d_matrix(p["patch_encoder.conv2.w"], (mid,) * 3))
    h = tn.add(tn.reshape(h, (n, (mid - 2) ** 3, c2)), p["patch_encoder.conv2.b"])
    return tn.reshape(h, (n, -1))


def normalize_locations(locations: np.ndarray, shape) -> np.ndarray:
    """Map the continuous extent of a ``shape`` volume onto [-1, 1]^3."""
    shape = np.asarray(shape, dtype=np.float64)
    return (np.asarray(locations, dtype=np.float64) + 0.5) / shape * 2.0 - 1.0


def decode_occupancy(locations: np.ndarray, global_latent, local_latents, params: ModelParams,
                     mode: str = "eval", groups: np.ndarray | None = None,
                     update_stats: bool = True) -> Tensor:
    """Occupancy probabilities (N,) for normalised locations (N, 3).

    ``global_latent`` is (G, latent_dim); ``groups`` maps each location to
    its volume's latent row.
    """
    cfg = params.config
    p = params.tensors
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    n = len(locations)
    global_latent = tn.as_tensor(global_latent)
    if global_latent.data.ndim == 1:
        global_latent = tn.reshape(global_latent, (1, -1))
    if global_latent.shape[1] != cfg.latent_dim:
        raise ShapeError(f"global latent width {global_latent.shape[1]} != {cfg.latent_dim}")
    if groups is None:
        groups = np.zeros(n, dtype=np.int64)

    h = tn.linear(locations, p["decoder.in_p.w"], p["decoder.in_p.b"])
    h = tn.add(h, tn.take_rows(tn.linear(global_latent, p["decoder.in_g.w"]), groups))
    if cfg.use_patches:
        local_latents = tn.as_tensor(local_latents)
        if local_latents.shape != (n, cfg.local_dim):
            raise ShapeError(f"local latents {local_latents.shape} != ({n}, {cfg.local_dim})")
        h = tn.add(h, tn.linear(local_latents, p["decoder.in_l.w"]))

    def cbn(x, name):
        pre = f"cbn.{name}"
        return tn.cond_batchnorm(
            x, global_latent, p[pre + ".w_gamma"], p[pre + ".b_gamma"], p[pre + ".w_beta"],
            p[pre + ".b_beta"], params.buffers[pre + ".running_mean"],
            params.buffers[pre + ".running_var"], mode, groups, update_stats,
        )

    for i in range(cfg.decoder_blocks):
        pre = f"decoder.block{i}"
        net = tn.linear(_act(cbn(h, f"block{i}.bn0"), params, pre + ".pau0"),
                        p[pre + ".fc0.w"], p[pre + ".fc0.b"])
        dx = tn.linear(_act(cbn(net, f"block{i}.bn1"), params, pre + ".pau1"),
                       p[pre + ".fc1.w"], p[pre + ".fc1.b"])
        h = tn.add(h, dx)
    logits = tn.linear(_act(cbn(h, "out.bn"), params, "decoder.out.pau"),
                       p["decoder.out.w"], p["decoder.out.b"])
    return tn.sigmoid(tn.reshape(logits, (n,)))


def forward(volumes, batches, params: ModelParams, mode: str = "eval", update_stats: bool = True):
    """Full pass over one or more (volume, batch) pairs.

    Returns ``(probabilities, aux)``: probabilities for all locations of all
    batches in order, and the (k, a, a, a) auxiliary grid or None.
    """
    if isinstance(volumes, (Volume, np.ndarray)):
        volumes, batches = [volumes], [batches]
    if len(volumes) != len(batches):
        raise ShapeError("need one batch per volume")
    cfg = params.config
    latent, aux = encode_global(prepare_global_input(volumes, cfg), params, mode)
    locs, groups, patches = [], [], []
    for i, (vol, batch) in enumerate(zip(volumes, batches)):
        shape = vol.shape if isinstance(vol, Volume) else np.asarray(vol).shape[1:]
        locs.append(normalize_locations(batch.locations, shape))
        groups.append(np.full(len(batch), i, dtype=np.int64))
        if cfg.use_patches:
            if batch.patches is None:
                raise ShapeError("this model needs local patches but the batch has none")
            patches.append(batch.patches)
    local = encode_patches(np.concatenate(patches), params) if cfg.use_patches else None
    probs = decode_occupancy(np.concatenate(locs), latent, local, params, mode,
                             np.concatenate(groups), update_stats)
    return probs, aux


class Predictor:
    """Eval-mode occupancy of one volume at arbitrary locations.

    The global latent and the padded patch source are computed once; every
    query then runs the patch encoder and decoder only.  Eval mode uses the
    running statistics, so each location's output is independent of the
    other locations in its call.
    """

    def __init__(self, params: ModelParams, volume: Volume):
        from .sampling import PatchSampler

        self.params = params
        self.volume = volume
        self.shape = volume.shape
        latent, aux = encode_global(prepare_global_input([volume], params.config), params, "eval")
        self.latent = latent.data
        self.aux = None if aux is None else aux.data[0]
        self.sampler = PatchSampler(volume, params.config.patch_source_size) \
            if params.config.use_patches else None

    def __call__(self, locations: np.ndarray) -> np.ndarray:
        locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
        local = encode_patches(self.sampler(locations), self.params) if self.sampler else None
        probs = decode_occupancy(normalize_locations(locations, self.shape), self.latent, local,
                                 self.params, "eval")
        return probs.data


def predict(params: ModelParams, volume: Volume, locations: np.ndarray,
            max_batch: int = 8192) -> np.ndarray:
    """Eval-mode probabilities at ``locations``, evaluated ``max_batch`` rows at a time."""
    run = Predictor(params, volume)
    locations = np.asarray(locations, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(locations))
    for lo in range(0, len(locations), max_batch):
        out[lo:lo + max_batch] = run(locations[lo:lo + max_batch])
    return out


# --------------------------------------------------------------- checkpoint


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Write parameters, running statistics and optimizer state to ``path``."""
    registry, chunks, offset = [], [], 0
    sections = (("param", {k: t.data for k, t in params.tensors.items()}),
                ("buffer", params.buffers), ("optimizer", params.optimizer_state))
    for kind, table in sections:
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            registry.append({"name": name, "kind": kind, "shape": list(arr.shape),
                             "offset": offset})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
    manifest = {"version": 1, "config": params.config.to_dict(), "tensors": registry,
                "payload_bytes": offset, "extra": extra or {}}
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(f"{len(text)}\n".encode("ascii"))
        fh.write(text)
        for chunk in chunks:
            fh.write(chunk)


def read_manifest(path) -> dict:
    return _read_checkpoint(path)[0]


def _read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not an OSSCKPT1 checkpoint")
    rest = blob[len(CKPT_MAGIC):]
    line_end = rest.find(b"\n")
    try:
        size = int(rest[:line_end])
        manifest = json.loads(rest[line_end + 1:line_end + 1 + size].decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint manifest: {exc}") from exc
    payload = rest[line_end + 1 + size:]
    if len(payload) != manifest["payload_bytes"]:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, manifest says "
                          f"{manifest['payload_bytes']}")
    return manifest, payload


def load_checkpoint(path) -> ModelParams:
    manifest, payload = _read_checkpoint(path)
    config = OssNetConfig.from_dict(manifest["config"])
    tables = {"param": {}, "buffer": {}, "optimizer": {}}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        tables[entry["kind"]][entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    reference = init_params(config)
    missing = set(reference.tensors) - set(tables["param"])
    if missing:
        raise FormatError(f"{path}: checkpoint lacks tensors {sorted(missing)[:3]}...")
    return ModelParams(
        config,
        {k: tn.parameter(v, k) for k, v in tables["param"].items()},
        tables["buffer"],
        tables["optimizer"],
    )


def with_config(params: ModelParams, **changes) -> ModelParams:
    """Same tensors under a modified (shape-compatible) configuration."""
    return ModelParams(replace(params.config, **changes), params.tensors, params.buffers,
                       params.optimizer_state)
