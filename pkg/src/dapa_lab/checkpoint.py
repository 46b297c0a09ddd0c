"""Binary checkpoints for regressors, optimizer state and pose priors.

Layout: an 8-byte magic, a little-endian uint32 format version, then a
sequence of sections. Each section is

    uint32 name length | name | uint64 header length | header JSON |
    uint64 payload length | payload | uint32 crc32(header + payload)

The header is canonical JSON (sorted keys) listing the arrays packed in the
payload as raw little-endian float64. Writing is deterministic, so
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, MLPParams, Tensor
from .prior import PriorParams
from .regressor import RegressorParams

MAGIC = b"DAPACKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


# -- low-level sections --------------------------------------------------------

def _pack_section(name: str, meta: dict, arrays: dict) -> bytes:
    order = list(arrays)
    specs = [{"name": k, "shape": list(np.shape(arrays[k]))} for k in order]
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in order)
    raw = name.encode()
    return (struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(header)) + header
            + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(header + payload)))


def _read_exact(buf: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointCorruptError(f"truncated file: {what} needs {n} bytes at offset {pos}, "
                                     f"only {len(buf) - pos} left")
    return buf[pos:pos + n], pos + n


def _unpack_sections(buf: bytes) -> dict:
    head, pos = _read_exact(buf, 0, len(MAGIC) + 4, "file header")
    if head[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", head[len(MAGIC):])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if pos == len(buf):
        raise CheckpointCorruptError(f"truncated file: no sections after the {pos}-byte header")
    sections = {}
    while pos < len(buf):
        b, pos = _read_exact(buf, pos, 4, "section name length")
        name_raw, pos = _read_exact(buf, pos, struct.unpack("<I", b)[0], "section name")
        name = name_raw.decode(errors="replace")
        b, pos = _read_exact(buf, pos, 8, f"section {name!r} header length")
        header, pos = _read_exact(buf, pos, struct.unpack("<Q", b)[0], f"section {name!r} header")
        b, pos = _read_exact(buf, pos, 8, f"section {name!r} payload length")
        payload, pos = _read_exact(buf, pos, struct.unpack("<Q", b)[0], f"section {name!r} payload")
        b, pos = _read_exact(buf, pos, 4, f"section {name!r} checksum")
        if struct.unpack("<I", b)[0] != zlib.crc32(header + payload):
            raise CheckpointCorruptError(f"checksum mismatch in section {name!r}")
        info = json.loads(header)
        arrays, off = {}, 0
        for spec in info["arrays"]:
            n = int(np.prod(spec["shape"], dtype=np.int64)) * 8
            if off + n > len(payload):
                raise CheckpointCorruptError(f"section {name!r}: array {spec['name']!r} overruns payload")
            arrays[spec["name"]] = np.frombuffer(payload[off:off + n], dtype="<f8").reshape(spec["shape"]).copy()
            off += n
        if off != len(payload):
            raise CheckpointCorruptError(f"section {name!r}: {len(payload) - off} unexplained payload bytes")
        sections[name] = (info["meta"], arrays)
    return sections


def _write(path, sections: list[bytes]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
        for s in sections:
            fh.write(s)
    os.replace(tmp, path)


def _read(path) -> dict:
    return _unpack_sections(Path(path).read_bytes())


# -- component codecs ------------------------------------------------------------

def _mlp_arrays(mlp: MLPParams, prefix: str) -> tuple[dict, dict]:
    arrays = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"{prefix}.w{i}"] = w.data
        arrays[f"{prefix}.b{i}"] = b.data
    return {f"{prefix}.activations": list(mlp.activations)}, arrays


def _mlp_from(meta: dict, arrays: dict, prefix: str) -> MLPParams:
    acts = meta[f"{prefix}.activations"]
    ws = [Tensor(arrays[f"{prefix}.w{i}"], requires_grad=True, name=f"{prefix}.w{i}") for i in range(len(acts))]
    bs = [Tensor(arrays[f"{prefix}.b{i}"], requires_grad=True, name=f"{prefix}.b{i}") for i in range(len(acts))]
    return MLPParams(ws, bs, acts)


def _regressor_section(params: RegressorParams) -> bytes:
    meta, arrays = _mlp_arrays(params.mlp, "reg")
    meta["n_iter"] = params.n_iter
    arrays["mean_params"] = params.mean_params
    return _pack_section("regressor", meta, arrays)


def _optimizer_section(opt: AdamState) -> bytes:
    meta = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
            "n": len(opt.m)}
    arrays = {f"m{i}": m for i, m in enumerate(opt.m)}
    arrays.update({f"v{i}": v for i, v in enumerate(opt.v)})
    return _pack_section("optimizer", meta, arrays)


def _prior_section(prior: PriorParams) -> bytes:
    meta_e, arr_e = _mlp_arrays(prior.encoder, "enc")
    meta_d, arr_d = _mlp_arrays(prior.decoder, "dec")
    return _pack_section("prior", {**meta_e, **meta_d, "latent_dim": prior.latent_dim}, {**arr_e, **arr_d})


# -- public API --------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to resume a run. Randomness is keyed by (seed, step),
    so ``seed`` and ``step`` together are the RNG state."""

    regressor: RegressorParams
    optimizer: AdamState | None = None
    step: int = 0
    seed: int = 0
    tree_fingerprint: str = ""
    config: dict = field(default_factory=dict)
    prior_ref: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    version: int = FORMAT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {"version": ckpt.version, "step": ckpt.step, "seed": ckpt.seed,
            "tree_fingerprint": ckpt.tree_fingerprint, "config": ckpt.config, "prior_ref": ckpt.prior_ref,
            "rng": {"seed": ckpt.seed, "step": ckpt.step}}
    sections = [_pack_section("meta", meta, {}), _regressor_section(ckpt.regressor)]
    if ckpt.optimizer is not None:
        sections.append(_optimizer_section(ckpt.optimizer))
    sections.append(_pack_section("history", {"rows": ckpt.history}, {}))
    _write(path, sections)


def load_checkpoint(path) -> Checkpoint:
    sections = _read(path)
    for required in ("meta", "regressor"):
        if required not in sections:
            raise CheckpointCorruptError(f"missing section {required!r}")
    meta, _ = sections["meta"]
    rmeta, rarr = sections["regressor"]
    reg = RegressorParams(_mlp_from(rmeta, rarr, "reg"), rarr["mean_params"], rmeta["n_iter"])
    opt = None
    if "optimizer" in sections:
        ometa, oarr = sections["optimizer"]
        n = ometa["n"]
        opt = AdamState(ometa["lr"], ometa["beta1"], ometa["beta2"], ometa["eps"], ometa["step"],
                        [oarr[f"m{i}"] for i in range(n)], [oarr[f"v{i}"] for i in range(n)])
    history = sections["history"][0]["rows"] if "history" in sections else []
    return Checkpoint(reg, opt, meta["step"], meta["seed"], meta["tree_fingerprint"], meta["config"],
                      meta["prior_ref"], history, meta["version"])


def save_prior(path, prior: PriorParams, meta: dict | None = None) -> None:
    _write(path, [_pack_section("meta", {"kind": "prior", **(meta or {})}, {}), _prior_section(prior)])


def load_prior(path) -> tuple[PriorParams, dict]:
    sections = _read(path)
    if "prior" not in sections:
        raise CheckpointCorruptError("file holds no prior section")
    pmeta, parr = sections["prior"]
    prior = PriorParams(_mlp_from(pmeta, parr, "enc"), _mlp_from(pmeta, parr, "dec"), pmeta["latent_dim"])
    return prior, sections["meta"][0]


def file_digest(path) -> str:
    """crc32 of a file, hex; used to reference a prior from a regressor checkpoint."""
    return f"{zlib.crc32(Path(path).read_bytes()):08x}"
