"""Binary checkpoints for trained weights.

Layout (all integers little-endian):

    magic    8 bytes  b"MELTCKPT"
    version  u32
    seed     u64      seed the stored run was launched with
    digest   32 bytes sha256 of the structural signature text
    count    u32      number of tensor records
    record   name_len u16, name utf-8, kind u8, ndim u8,
             dims u32 * ndim, payload float64 * prod(dims)

kind distinguishes dense weights from low-rank adapter halves. The digest
binds a checkpoint to the exact model structure (encoder shapes, denoiser
shape, schedule, vocabulary); loading refuses on mismatch rather than
silently reinterpreting bytes. Writes go to a sibling temp file first and
are moved into place atomically.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, DenoiserConfig, DiffusionSchedule, Pipeline
from .encoders import EncoderBank, EncoderConfig, TextEncoder
from .errors import CheckpointError
from .lora import AdaptedEncoder, attach
from .rng import Rng
from .text import Vocabulary

MAGIC = b"MELTCKPT"
VERSION = 1
KIND_DENSE = 0
KIND_LORA_A = 1
KIND_LORA_B = 2
_KINDS = (KIND_DENSE, KIND_LORA_A, KIND_LORA_B)


@dataclass(frozen=True)
class TensorRecord:
    name: str
    kind: int
    array: np.ndarray


def digest_of(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def save_checkpoint(path: str, seed: int, digest: bytes,
                    records: list[TensorRecord]) -> None:
    if len(digest) != 32:
        raise CheckpointError(f"digest must be 32 bytes, got {len(digest)}")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<Q", seed)
    blob += digest
    blob += struct.pack("<I", len(records))
    for rec in records:
        if rec.kind not in _KINDS:
            raise CheckpointError(f"unknown tensor kind {rec.kind} for {rec.name!r}")
        name = rec.name.encode("utf-8")
        arr = np.ascontiguousarray(rec.array, dtype=np.float64)
        blob += struct.pack("<H", len(name)) + name
        blob += struct.pack("<BB", rec.kind, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes(order="C")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at byte {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u(self, fmt: str, what: str) -> int:
        return struct.unpack("<" + fmt, self.take(struct.calcsize(fmt), what))[0]


def load_checkpoint(path: str, expected_digest: bytes | None = None
                    ) -> tuple[int, list[TensorRecord]]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(8, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0, not a checkpoint")
    version = r.u("I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    seed = r.u("Q", "seed")
    digest = r.take(32, "digest")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(
            f"{path}: structural digest mismatch; this checkpoint was written "
            "for a different model configuration")
    count = r.u("I", "tensor count")
    records: list[TensorRecord] = []
    for _ in range(count):
        nlen = r.u("H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        kind = r.u("B", f"kind of {name!r}")
        if kind not in _KINDS:
            raise CheckpointError(f"{path}: unknown tensor kind {kind} for {name!r}")
        ndim = r.u("B", f"ndim of {name!r}")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"dims of {name!r}"))
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = r.take(8 * size, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        records.append(TensorRecord(name, kind, arr))
    if r.off != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.off} trailing bytes at {r.off}")
    return seed, records


# ---------------------------------------------------------------------------
# structural signatures


def pipeline_signature(enc_cfgs: tuple[EncoderConfig, ...], den_cfg: DenoiserConfig,
                       schedule: DiffusionSchedule, vocab: Vocabulary) -> str:
    lines = [f"encoder {c.name} vocab={c.vocab_size} d={c.d_model} L={c.n_layers} "
             f"h={c.n_heads} f={c.d_ffn} maxlen={c.max_len}" for c in enc_cfgs]
    lines.append(f"denoiser hidden={den_cfg.hidden} t_dim={den_cfg.t_dim}")
    lines.append(f"schedule T={schedule.n_steps} "
                 f"b0={schedule.betas[0]!r} b1={schedule.betas[-1]!r}")
    lines.append("vocab " + " ".join(vocab.words))
    return "\n".join(lines)


def variant_signature(pipeline_sig: str, variant) -> str:
    extra = f"variant subset={variant.subset} mode={variant.mode}"
    if variant.mode == "lora":
        lc = variant.lora
        extra += f" rank={lc.rank} alpha={lc.alpha!r} targets={lc.targets}"
    return pipeline_sig + "\n" + extra


# ---------------------------------------------------------------------------
# whole-pipeline checkpoints (frozen stage-0 output)


def save_pipeline_ckpt(path: str, pipeline: Pipeline, vocab: Vocabulary, seed: int) -> None:
    bank, denoiser = pipeline.bank, pipeline.denoiser
    sig = pipeline_signature(tuple(t.cfg for t in bank.teachers),
                             denoiser.cfg, pipeline.schedule, vocab)
    records = [TensorRecord(f"enc{n}.{pname}", KIND_DENSE, t.data)
               for n in range(1, bank.n + 1)
               for pname, t in bank.teacher(n).params.items()]
    records += [TensorRecord(f"den.{pname}", KIND_DENSE, t.data)
                for pname, t in denoiser.params.items()]
    save_checkpoint(path, seed, digest_of(sig), records)


def load_pipeline_ckpt(path: str, enc_cfgs: tuple[EncoderConfig, ...],
                       den_cfg: DenoiserConfig, schedule: DiffusionSchedule,
                       vocab: Vocabulary) -> tuple[Pipeline, int]:
    sig = pipeline_signature(enc_cfgs, den_cfg, schedule, vocab)
    seed, records = load_checkpoint(path, digest_of(sig))
    by_name = {rec.name: rec for rec in records}

    teachers = []
    for n, cfg in enumerate(enc_cfgs, start=1):
        enc = TextEncoder(cfg, Rng(0).child("ckpt", cfg.name), trainable=False)
        _fill(enc.params, f"enc{n}.", by_name, path)
        teachers.append(enc)
    bank = EncoderBank(teachers)
    denoiser = Denoiser(bank.embedding_dim(), schedule.n_steps, den_cfg,
                        Rng(0).child("ckpt", "den"), trainable=False)
    _fill(denoiser.params, "den.", by_name, path)
    if by_name:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(by_name)[:4]}")
    return Pipeline(bank, denoiser, schedule), seed


def _fill(params: dict, prefix: str, by_name: dict[str, TensorRecord], path: str) -> None:
    for pname, tensor in params.items():
        rec = by_name.pop(prefix + pname, None)
        if rec is None:
            raise CheckpointError(f"{path}: missing tensor {prefix + pname!r}")
        if rec.array.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: tensor {rec.name!r} has shape {rec.array.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = rec.array


# ---------------------------------------------------------------------------
# attacked-student checkpoints (delta on top of a stage-0 pipeline)


def save_variant_ckpt(path: str, pipeline: Pipeline, bank_attacked: EncoderBank,
                      variant, vocab: Vocabulary, seed: int) -> None:
    sig = variant_signature(
        pipeline_signature(tuple(t.cfg for t in pipeline.bank.teachers),
                           pipeline.denoiser.cfg, pipeline.schedule, vocab), variant)
    records: list[TensorRecord] = []
    for n in variant.subset:
        student = bank_attacked.students[n]
        if variant.mode == "full":
            records += [TensorRecord(f"enc{n}.{pname}", KIND_DENSE, t.data)
                        for pname, t in student.params.items()]
        else:
            for key, (a, b) in student.adapters.items():
                records.append(TensorRecord(f"enc{n}.{key}.A", KIND_LORA_A, a.data))
                records.append(TensorRecord(f"enc{n}.{key}.B", KIND_LORA_B, b.data))
    save_checkpoint(path, seed, digest_of(sig), records)


def load_variant_ckpt(path: str, pipeline: Pipeline, variant,
                      vocab: Vocabulary) -> tuple[EncoderBank, int]:
    sig = variant_signature(
        pipeline_signature(tuple(t.cfg for t in pipeline.bank.teachers),
                           pipeline.denoiser.cfg, pipeline.schedule, vocab), variant)
    seed, records = load_checkpoint(path, digest_of(sig))
    by_name = {rec.name: rec for rec in records}

    students: dict[int, object] = {}
    for n in variant.subset:
        teacher = pipeline.bank.teacher(n)
        if variant.mode == "full":
            student = teacher.clone(trainable=False)
            _fill(student.params, f"enc{n}.", by_name, path)
        else:
            student = attach(teacher.clone(trainable=False), variant.lora,
                             Rng(0).child("ckpt", "lora", str(n)))
            pairs = {f"enc{n}.{key}.A": a for key, (a, _) in student.adapters.items()}
            pairs.update({f"enc{n}.{key}.B": b for key, (_, b) in student.adapters.items()})
            for name, tensor in pairs.items():
                rec = by_name.pop(name, None)
                if rec is None:
                    raise CheckpointError(f"{path}: missing tensor {name!r}")
                if rec.array.shape != tensor.data.shape:
                    raise CheckpointError(
                        f"{path}: tensor {name!r} has shape {rec.array.shape}, "
                        f"expected {tensor.data.shape}")
                tensor.data = rec.array
            student.freeze()
        students[n] = student
    if by_name:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(by_name)[:4]}")
    return pipeline.bank.with_students(students), seed
