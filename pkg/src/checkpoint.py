"""Directory checkpoints: a text manifest plus one little-endian float32 blob.

``manifest.txt`` starts with ``# key value`` header lines (format version,
network kind, construction metadata as JSON, SHA-256 of the blob and of the
manifest itself) followed by one ``path<TAB>shape<TAB>offset`` line per
parameter in enumeration order.  ``params.bin`` is the concatenation of the
parameters in the same order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from src.errors import CheckpointError
from src.layers import Module
from src.models import BranchPlan, TaskSplit
from src.networks import (
    AmalgamatedNet,
    Architecture,
    GeneratorStack,
    TargetNet,
    TeacherNet,
    build_generator,
    build_generator_filters,
    regroup,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "params.bin"
BLOB_DTYPE = np.dtype("<f4")


def describe(net: Module) -> Tuple[str, Dict[str, Any]]:
    """Network kind and the metadata needed to rebuild an empty copy of it."""

    if isinstance(net, TeacherNet):
        return "teacher", {"arch": net.arch.to_dict(), "label_names": net.label_names}
    if isinstance(net, GeneratorStack):
        arch = _generator_arch(net)
        meta: Dict[str, Any] = {"arch": arch, "noise_dim": net.noise_dim, "trained": net.trained}
        if net.filters is not None:
            first = next(iter(net.filters.filters.values()))
            meta["num_teachers"] = max(m for _, m in net.filters.filters)
            meta["filter_reduction"] = first.reduction
        return "generator", meta
    if isinstance(net, TargetNet):
        return "target", {
            "arch": net.arch.to_dict(),
            "num_teachers": net.num_teachers,
            "filter_reduction": next(iter(net.filters.filters.values())).reduction,
            "trained_blocks": sorted(net.trained_blocks),
        }
    if isinstance(net, AmalgamatedNet):
        if net.arch is None or net.split is None:
            raise CheckpointError("amalgamated network was not assembled by regroup")
        return "amalgamated", {
            "arch": net.arch.to_dict(),
            "S": list(net.plan.S),
            "label_sets": net.split.label_sets,
            "teacher_label_names": net.teacher_label_names,
            "customized": net.customized_labels,
            "filter_reduction": net.branches[0].filter.reduction,
        }
    raise CheckpointError(f"cannot checkpoint a {type(net).__name__}")


def _generator_arch(gen: GeneratorStack) -> Dict[str, Any]:
    if getattr(gen, "arch", None) is None:
        raise CheckpointError("generator has no architecture attached")
    return gen.arch.to_dict()


def build_from_meta(kind: str, meta: Dict[str, Any]) -> Module:
    arch = Architecture.from_dict(meta["arch"])
    if kind == "teacher":
        return TeacherNet(arch, meta["label_names"])
    if kind == "generator":
        gen = build_generator(arch, int(meta["noise_dim"]))
        if "num_teachers" in meta:
            gen.filters = build_generator_filters(
                arch, int(meta["num_teachers"]), int(meta["filter_reduction"]), np.random.default_rng(0)
            )
        gen.trained = bool(meta.get("trained", False))
        return gen
    if kind == "target":
        target = TargetNet(arch, int(meta["num_teachers"]), int(meta["filter_reduction"]))
        target.trained_blocks = set(meta.get("trained_blocks", []))
        return target
    if kind == "amalgamated":
        names = meta["teacher_label_names"]
        target = TargetNet(arch, len(names), int(meta["filter_reduction"]))
        teachers = [TeacherNet(arch, labels) for labels in names]
        split = TaskSplit(label_sets=meta["label_sets"], customized=meta["customized"])
        return regroup(target, teachers, split, BranchPlan(S=list(meta["S"])))
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def _render_shape(shape: Tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape)


def _parse_shape(text: str) -> Tuple[int, ...]:
    return tuple(int(d) for d in text.split("x")) if text else ()


def _digest(lines: List[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def save_checkpoint(net: Module, path: str) -> Path:
    kind, meta = describe(net)
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    chunks: List[bytes] = []
    entries: List[str] = []
    offset = 0
    for name, param in net.named_parameters():
        raw = np.ascontiguousarray(param.data, dtype=BLOB_DTYPE).tobytes()
        entries.append(f"{name}\t{_render_shape(param.shape)}\t{offset}")
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = [
        f"# version {FORMAT_VERSION}",
        f"# kind {kind}",
        f"# meta {json.dumps(meta, sort_keys=True)}",
        f"# blob_sha256 {hashlib.sha256(blob).hexdigest()}",
    ]
    body = header + entries
    lines = header + [f"# manifest_sha256 {_digest(body)}"] + entries
    (directory / BLOB).write_bytes(blob)
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("saved %s checkpoint with %d parameters to %s", kind, len(entries), directory)
    return directory


def read_manifest(path: str) -> Tuple[Dict[str, str], List[Tuple[str, Tuple[int, ...], int]]]:
    manifest = Path(path) / MANIFEST
    if not manifest.exists():
        raise CheckpointError("checkpoint manifest is missing", str(manifest))
    try:
        text = manifest.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"checkpoint manifest is not valid text: {exc}", str(manifest)) from exc
    lines = text.rstrip("\n").split("\n")
    header: Dict[str, str] = {}
    body: List[str] = []
    entries: List[Tuple[str, Tuple[int, ...], int]] = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            header[key] = value
            if key != "manifest_sha256":
                body.append(line)
            continue
        body.append(line)
        parts = line.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"malformed manifest entry {line!r}", str(manifest))
        try:
            entries.append((parts[0], _parse_shape(parts[1]), int(parts[2])))
        except ValueError:
            raise CheckpointError(f"malformed manifest entry {line!r}", parts[0]) from None
    if header.get("manifest_sha256") != _digest(body):
        raise CheckpointError("checkpoint manifest digest mismatch", str(manifest))
    if header.get("version") != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}", str(manifest))
    return header, entries


def load_checkpoint(path: str, into: Optional[Module] = None) -> Module:
    """Restore a network saved by :func:`save_checkpoint`.

    Without ``into`` the network is rebuilt from the manifest metadata;
    with it, the checkpoint must describe exactly that network's parameters.
    """

    header, entries = read_manifest(path)
    blob = (Path(path) / BLOB).read_bytes() if (Path(path) / BLOB).exists() else None
    if blob is None:
        raise CheckpointError("checkpoint blob is missing", str(Path(path) / BLOB))
    expected_size = sum(int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize for _, shape, _ in entries)
    if len(blob) != expected_size:
        raise CheckpointError(f"checkpoint blob holds {len(blob)} bytes, manifest describes {expected_size}", str(path))
    if hashlib.sha256(blob).hexdigest() != header.get("blob_sha256"):
        raise CheckpointError("checkpoint blob digest mismatch", str(Path(path) / BLOB))

    try:
        meta = json.loads(header["meta"])
        kind = header["kind"]
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is incomplete: {exc}", str(path)) from exc
    net = into if into is not None else build_from_meta(kind, meta)

    params = dict(net.named_parameters())
    stored = {name for name, _, _ in entries}
    unknown = [name for name, _, _ in entries if name not in params]
    if unknown:
        roots = sorted({name.split(".")[0] for name in unknown})
        raise CheckpointError(
            f"checkpoint parameters have no counterpart in the network (unmatched: {', '.join(roots)})", unknown[0]
        )
    missing = [name for name in params if name not in stored]
    if missing:
        roots = sorted({name.split(".")[0] for name in missing})
        raise CheckpointError(f"network parameters absent from the checkpoint (missing: {', '.join(roots)})", missing[0])

    for name, shape, offset in entries:
        param = params[name]
        if tuple(param.shape) != shape:
            raise CheckpointError(f"shape {shape} does not match network shape {param.shape}", name)
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset)
        param.data = values.reshape(shape).astype(np.float32)
    if kind == "generator" and isinstance(net, GeneratorStack):
        net.trained = bool(meta.get("trained", False))
    if kind == "target" and isinstance(net, TargetNet):
        net.trained_blocks = set(meta.get("trained_blocks", []))
    logger.info("loaded %s checkpoint from %s", kind, path)
    return net


def checkpoint_kind(path: str) -> str:
    header, _ = read_manifest(path)
    return header.get("kind", "")
