"""Two-branch descriptor model over precomputed frame features.

Both branches share one frame encoder and one whitening (FC) layer. The
sequence branch stacks the per-frame whitened descriptors, pools them with
seqgem along the temporal axis, and L2-normalizes the result. The image
branch emits the whitened descriptor of a single frame, normalized, for
the cosine-margin classification loss.

The pixel backbone of a full system is out of scope here: the encoder
operates on precomputed feature vectors and comes in three kinds
(identity, affine, two-layer tanh MLP). All parameters live in one flat
dict of float64 arrays; the sequence and image branches literally share
the same array objects.

Checkpoints use the SPCK container documented in ``save_checkpoint``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .aggregate import SeqGemParams, seqgem, seqgem_backward
from .diffcore import l2_normalize, l2_normalize_backward
from .errors import FormatError, TrainingDivergedError
from .geo import GroupSchedule, PlaceClass
from .losses import LossWeights

Array = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"SPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    """Frame encoder family and dimensions (raw feature dim -> model dim)."""

    kind: str  # identity | affine | mlp2
    d_in: int
    d_out: int
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("identity", "affine", "mlp2"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "identity" and self.d_in != self.d_out:
            raise ValueError("identity encoder requires d_in == d_out")
        if self.kind == "mlp2" and self.hidden < 1:
            object.__setattr__(self, "hidden", max(self.d_in, self.d_out))


@dataclass
class TrainState:
    """All learnable parameters plus optimizer moments and bookkeeping.

    ``params`` maps names to float64 arrays; the Adam moment dicts mirror
    its shapes. ``class_rows`` maps each place class to (group index, row
    within that group's cosface weight matrix).
    """

    params: dict[str, Array]
    adam_m: dict[str, Array]
    adam_v: dict[str, Array]
    iteration: int
    lr: float
    loss_weights: LossWeights
    encoder: EncoderSpec
    d_prime: int
    gem_mode: str = "clamp"
    gem_eps: float = 1e-6
    prenorm_frames: bool = False
    cosface_scale: float = 30.0
    cosface_margin: float = 0.4
    schedule: GroupSchedule | None = None
    class_rows: dict[PlaceClass, tuple[int, int]] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def gem_params(self) -> SeqGemParams:
        return SeqGemParams(
            p=float(self.params["gem.p"]), input_mode=self.gem_mode, clamp_eps=self.gem_eps
        )


def _tiled_eye(d_out: int, d_in: int) -> Array:
    """Identity-like init: row i reads input coordinate i mod d_in."""
    w = np.zeros((d_out, d_in))
    w[np.arange(d_out), np.arange(d_out) % d_in] = 1.0
    return w


def init_encoder_params(spec: EncoderSpec, rng: np.random.Generator) -> dict[str, Array]:
    if spec.kind == "identity":
        return {}
    if spec.kind == "affine":
        return {
            "enc.W": _tiled_eye(spec.d_out, spec.d_in) + 0.01 * rng.standard_normal((spec.d_out, spec.d_in)),
            "enc.b": np.zeros(spec.d_out),
        }
    h = spec.hidden
    return {
        "enc.W1": rng.standard_normal((h, spec.d_in)) / np.sqrt(spec.d_in),
        "enc.b1": np.zeros(h),
        "enc.W2": rng.standard_normal((spec.d_out, h)) / np.sqrt(h),
        "enc.b2": np.zeros(spec.d_out),
    }


def init_state(
    rng: np.random.Generator,
    encoder: EncoderSpec,
    d_prime: int,
    lr: float = 1e-5,
    loss_weights: LossWeights = LossWeights(),
    schedule: GroupSchedule | None = None,
    gem_p: float = 3.0,
    gem_mode: str = "clamp",
    gem_eps: float = 1e-6,
    prenorm_frames: bool = False,
    cosface_scale: float = 30.0,
    cosface_margin: float = 0.4,
) -> TrainState:
    """Fresh state: identity-like encoder/whitening init, gem p, unit-norm
    class weights for every group in the schedule."""
    params = init_encoder_params(encoder, rng)
    params["whiten.W"] = _tiled_eye(d_prime, encoder.d_out) + 0.01 * rng.standard_normal(
        (d_prime, encoder.d_out)
    )
    params["whiten.b"] = np.zeros(d_prime)
    params["gem.p"] = np.array(gem_p, dtype=np.float64)

    class_rows: dict[PlaceClass, tuple[int, int]] = {}
    if schedule is not None:
        for gi, group in enumerate(schedule.groups):
            w = rng.standard_normal((len(group), d_prime))
            w /= np.linalg.norm(w, axis=1, keepdims=True)
            params[f"cosface.g{gi}"] = w
            for row, cls in enumerate(group):
                class_rows[cls] = (gi, row)

    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(
        params=params,
        adam_m=zeros,
        adam_v={k: np.zeros_like(v) for k, v in params.items()},
        iteration=0,
        lr=lr,
        loss_weights=loss_weights,
        encoder=encoder,
        d_prime=d_prime,
        gem_mode=gem_mode,
        gem_eps=gem_eps,
        prenorm_frames=prenorm_frames,
        cosface_scale=cosface_scale,
        cosface_margin=cosface_margin,
        schedule=schedule,
        class_rows=class_rows,
    )


# ---------------------------------------------------------------------------
# encoder / whitening, batched over the L frames of one sequence


def encode_forward(x: Array, spec: EncoderSpec, params: dict[str, Array]) -> tuple[Array, dict]:
    """Encode (L, d_in) raw features to (L, d_out); returns output + cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise ValueError(f"expected (L, {spec.d_in}) input, got {x.shape}")
    if spec.kind == "identity":
        return x, {"x": x}
    if spec.kind == "affine":
        y = x @ params["enc.W"].T + params["enc.b"]
        return y, {"x": x}
    h_pre = x @ params["enc.W1"].T + params["enc.b1"]
    h = np.tanh(h_pre)
    y = h @ params["enc.W2"].T + params["enc.b2"]
    return y, {"x": x, "h": h}


def encode_backward(
    spec: EncoderSpec, params: dict[str, Array], cache: dict, grad_y: Array
) -> tuple[Array, dict[str, Array]]:
    g = np.asarray(grad_y, dtype=np.float64)
    if spec.kind == "identity":
        return g, {}
    x = cache["x"]
    if spec.kind == "affine":
        return g @ params["enc.W"], {"enc.W": g.T @ x, "enc.b": g.sum(axis=0)}
    h = cache["h"]
    gh = (g @ params["enc.W2"]) * (1.0 - h * h)
    grads = {
        "enc.W2": g.T @ h,
        "enc.b2": g.sum(axis=0),
        "enc.W1": gh.T @ x,
        "enc.b1": gh.sum(axis=0),
    }
    return gh @ params["enc.W1"], grads


def whiten_forward(x: Array, params: dict[str, Array]) -> tuple[Array, dict]:
    y = x @ params["whiten.W"].T + params["whiten.b"]
    return y, {"x": x}


def whiten_backward(params: dict[str, Array], cache: dict, grad_y: Array) -> tuple[Array, dict[str, Array]]:
    g = np.asarray(grad_y, dtype=np.float64)
    x = cache["x"]
    return g @ params["whiten.W"], {"whiten.W": g.T @ x, "whiten.b": g.sum(axis=0)}


# ---------------------------------------------------------------------------
# descriptor branches


def frame_descriptors(state: TrainState, frames: Array) -> tuple[Array, dict]:
    """Shared prefix of both branches: encode + whiten per frame."""
    enc_out, enc_cache = encode_forward(frames, state.encoder, state.params)
    whit_out, whit_cache = whiten_forward(enc_out, state.params)
    return whit_out, {"enc": enc_cache, "whit": whit_cache}


def frame_descriptors_backward(state: TrainState, cache: dict, grad: Array) -> dict[str, Array]:
    g_enc_out, whit_grads = whiten_backward(state.params, cache["whit"], grad)
    _, enc_grads = encode_backward(state.encoder, state.params, cache["enc"], g_enc_out)
    return {**whit_grads, **enc_grads}


def seq_descriptor(state: TrainState, frames: Array) -> tuple[Array, dict]:
    """Sequence descriptor: encode, whiten, seqgem over frames, normalize.

    ``frames`` is the (L, d_raw) stack of raw per-frame features; the
    output dimension is d_prime for every L >= 1.
    """
    whit, cache = frame_descriptors(state, frames)
    stack = whit
    prenorm_norms = None
    if state.prenorm_frames:
        prenorm_norms = np.linalg.norm(stack, axis=1, keepdims=True)
        if np.any(prenorm_norms == 0.0):
            raise ValueError("zero frame descriptor cannot be pre-normalized")
        stack = stack / prenorm_norms
    pooled = seqgem(stack, state.gem_params)
    desc = l2_normalize(pooled)
    cache.update({"stack": stack, "pooled": pooled, "prenorm": prenorm_norms, "raw_whit": whit})
    return desc, cache


def seq_descriptor_backward(state: TrainState, cache: dict, upstream: Array) -> dict[str, Array]:
    """Gradients of the sequence branch w.r.t. all shared params and gem p."""
    g_pooled = l2_normalize_backward(cache["pooled"], upstream)
    g_stack, g_p = seqgem_backward(cache["stack"], state.gem_params, g_pooled)
    if state.prenorm_frames:
        norms = cache["prenorm"]
        whit = cache["raw_whit"]
        # rows were divided by their norms; chain through per-row normalize
        unit = whit / norms
        g_stack = (g_stack - (g_stack * unit).sum(axis=1, keepdims=True) * unit) / norms
    grads = frame_descriptors_backward(state, cache, g_stack)
    grads["gem.p"] = np.array(g_p, dtype=np.float64)
    return grads


def im_descriptor(state: TrainState, features: Array) -> tuple[Array, dict]:
    """Image descriptor: encode + whiten one frame, L2-normalized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single (d_raw,) frame, got shape {x.shape}")
    whit, cache = frame_descriptors(state, x[None, :])
    desc = l2_normalize(whit[0])
    cache["whit_row"] = whit[0]
    return desc, cache


def im_descriptor_backward(state: TrainState, cache: dict, upstream: Array) -> dict[str, Array]:
    g_whit = l2_normalize_backward(cache["whit_row"], upstream)
    return frame_descriptors_backward(state, cache, g_whit[None, :])


def make_extractor(state: TrainState, aggregator: str = "seqgem"):
    """Descriptor extractor closure for evaluation.

    ``seqgem`` runs the full sequence branch; avg/max/concat aggregate the
    whitened frame descriptors instead of pooling with seqgem, then
    normalize. The returned callable maps an (L, d_raw) stack to a
    descriptor vector.
    """
    from .aggregate import baseline_aggregate

    if aggregator == "seqgem":
        def extract(frames: Array) -> Array:
            desc, _ = seq_descriptor(state, frames)
            return desc
    elif aggregator in ("avg", "max", "concat"):
        def extract(frames: Array) -> Array:
            whit, _ = frame_descriptors(state, frames)
            return l2_normalize(baseline_aggregate(aggregator, whit))
    else:
        raise ValueError(f"unknown aggregator {aggregator!r}")
    return extract


def identity_baseline_extractor(aggregator: str = "avg"):
    """Untrained reference: aggregate raw features directly, normalize."""
    from .aggregate import baseline_aggregate

    def extract(frames: Array) -> Array:
        return l2_normalize(baseline_aggregate(aggregator, np.asarray(frames, dtype=np.float64)))

    return extract


# ---------------------------------------------------------------------------
# optimizer


def adam_update(state: TrainState, grads: dict[str, Array]) -> TrainState:
    """One Adam step over every parameter named in ``grads``.

    Uses beta1=0.9, beta2=0.999, eps=1e-8 with bias correction; increments
    the iteration counter. Parameters not named in ``grads`` are left
    untouched, moments included.
    """
    for name, g in grads.items():
        if name not in state.params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if np.asarray(g).shape != state.params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name!r}")

    state.iteration += 1
    t = state.iteration
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step = state.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        state.params[name] -= step
    return state


def renormalize_class_weights(state: TrainState) -> None:
    """Restore the unit-norm invariant of every cosface weight row."""
    for name, w in state.params.items():
        if name.startswith("cosface."):
            norms = np.linalg.norm(w, axis=1, keepdims=True)
            np.divide(w, norms, out=w)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(state: TrainState, path) -> None:
    """Write the SPCK v1 container.

    Layout: magic ``SPCK``; version as 4-byte little-endian unsigned;
    header length as 8-byte little-endian unsigned; a UTF-8 JSON header
    listing metadata and the (name, shape) of each array in order; then
    the raw little-endian float64 array bytes, C-contiguous, concatenated
    in header order. Byte-identical for identical states.
    """
    arrays: list[tuple[str, Array]] = []
    for prefix, d in (("p", state.params), ("m", state.adam_m), ("v", state.adam_v)):
        for name in sorted(d):
            arrays.append((f"{prefix}:{name}", np.ascontiguousarray(d[name], dtype="<f8")))

    meta = {
        "iteration": state.iteration,
        "lr": state.lr,
        "loss_weights": [state.loss_weights.seq2seq, state.loss_weights.im2im],
        "encoder": {
            "kind": state.encoder.kind,
            "d_in": state.encoder.d_in,
            "d_out": state.encoder.d_out,
            "hidden": state.encoder.hidden,
        },
        "d_prime": state.d_prime,
        "gem_mode": state.gem_mode,
        "gem_eps": state.gem_eps,
        "prenorm_frames": state.prenorm_frames,
        "cosface_scale": state.cosface_scale,
        "cosface_margin": state.cosface_margin,
        "schedule": None
        if state.schedule is None
        else {
            "rotation_period": state.schedule.rotation_period,
            "current_group": state.schedule.current_group,
            "groups": [[[c.cell_u, c.cell_v, c.heading_bucket] for c in g] for g in state.schedule.groups],
        },
        "metrics": state.metrics,
    }
    header = {
        "meta": meta,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint32(CHECKPOINT_VERSION).astype("<u4").tobytes())
        f.write(np.uint64(len(blob)).astype("<u8").tobytes())
        f.write(blob)
        for _, a in arrays:
            f.write(a.tobytes())


def load_checkpoint(path) -> TrainState:
    """Read an SPCK v1 container back into a TrainState."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header_len = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        try:
            header = json.loads(f.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt checkpoint header: {e}") from e
        dicts: dict[str, dict[str, Array]] = {"p": {}, "m": {}, "v": {}}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise FormatError("truncated checkpoint payload")
            arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            prefix, name = entry["name"].split(":", 1)
            dicts[prefix][name] = arr.copy()

    meta = header["meta"]
    enc = meta["encoder"]
    schedule = None
    class_rows: dict[PlaceClass, tuple[int, int]] = {}
    if meta["schedule"] is not None:
        groups = [
            [PlaceClass(int(u), int(v), int(h)) for u, v, h in g] for g in meta["schedule"]["groups"]
        ]
        schedule = GroupSchedule(
            groups=groups,
            rotation_period=int(meta["schedule"]["rotation_period"]),
            current_group=int(meta["schedule"]["current_group"]),
        )
        for gi, group in enumerate(groups):
            for row, cls in enumerate(group):
                class_rows[cls] = (gi, row)

    return TrainState(
        params=dicts["p"],
        adam_m=dicts["m"],
        adam_v=dicts["v"],
        iteration=int(meta["iteration"]),
        lr=float(meta["lr"]),
        loss_weights=LossWeights(*meta["loss_weights"]),
        encoder=EncoderSpec(enc["kind"], enc["d_in"], enc["d_out"], enc["hidden"]),
        d_prime=int(meta["d_prime"]),
        gem_mode=meta["gem_mode"],
        gem_eps=float(meta["gem_eps"]),
        prenorm_frames=bool(meta["prenorm_frames"]),
        cosface_scale=float(meta["cosface_scale"]),
        cosface_margin=float(meta["cosface_margin"]),
        schedule=schedule,
        class_rows=class_rows,
        metrics={k: float(v) for k, v in meta.get("metrics", {}).items()},
    )
