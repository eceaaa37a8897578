"""Binary checkpoint container for networks and optimizer state.

Layout: magic ``SBMC``, u16 version, then a sequence of named sections
(u16 name length, name bytes, u64 payload length, payload). Per network the
writer emits ``<name>/widths`` (f32), ``<name>/activations`` (u8 codes) and
``<name>/params`` (f32); Adam state and free-form byte sections (config hash,
notes) ride along under their own names. All integers little-endian.

Parameters live in float64 in memory and are stored as f32, so a save/load
round trip quantizes to f32 (deterministically).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError
from .nn import ACTIVATION_CODES, ACTIVATIONS, Adam, DenseNet

MAGIC = b"SBMC"
VERSION = 1


def _pack_section(name: str, payload: bytes) -> bytes:
    name_b = name.encode("utf-8")
    return struct.pack("<H", len(name_b)) + name_b + struct.pack("<Q", len(payload)) + payload


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.asarray(arr, dtype="<f4").tobytes()


def sections_for_net(name: str, net: DenseNet) -> dict[str, bytes]:
    return {
        f"{name}/widths": _f32_bytes(np.asarray(net.widths, dtype=np.float64)),
        f"{name}/activations": bytes(ACTIVATION_CODES[a] for a in net.activations),
        f"{name}/params": _f32_bytes(net.params),
    }


def write_checkpoint(
    path,
    nets: dict[str, DenseNet],
    adam: Optional[dict[str, Adam]] = None,
    extra: Optional[dict[str, bytes]] = None,
) -> None:
    sections: dict[str, bytes] = {}
    for name, net in nets.items():
        sections.update(sections_for_net(name, net))
    for name, state in (adam or {}).items():
        sections[f"{name}/adam_m"] = _f32_bytes(state.m)
        sections[f"{name}/adam_v"] = _f32_bytes(state.v)
        sections[f"{name}/adam_meta"] = _f32_bytes(
            np.array([state.lr, state.beta1, state.beta2, state.eps, state.step_count])
        )
    sections.update(extra or {})
    blob = MAGIC + struct.pack("<H", VERSION)
    for name in sections:  # insertion order keeps writes deterministic
        blob += _pack_section(name, sections[name])
    Path(path).write_bytes(blob)


def read_sections(path) -> dict[str, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    sections: dict[str, bytes] = {}
    pos = 6
    while pos < len(data):
        if pos + 2 > len(data):
            raise FormatError(f"{path}: truncated section header")
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + name_len + 8 > len(data):
            raise FormatError(f"{path}: truncated section header")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (payload_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if pos + payload_len > len(data):
            raise FormatError(f"{path}: truncated payload in section {name!r}")
        sections[name] = data[pos : pos + payload_len]
        pos += payload_len
    return sections


def net_from_sections(sections: dict[str, bytes], name: str) -> DenseNet:
    try:
        widths_b = sections[f"{name}/widths"]
        act_b = sections[f"{name}/activations"]
        params_b = sections[f"{name}/params"]
    except KeyError as exc:
        raise FormatError(f"checkpoint has no network {name!r} ({exc})") from exc
    widths = tuple(int(round(v)) for v in np.frombuffer(widths_b, dtype="<f4"))
    activations = tuple(ACTIVATIONS[code] for code in act_b)
    params = np.frombuffer(params_b, dtype="<f4").astype(np.float64)
    return DenseNet(widths=widths, activations=activations, params=params)


def net_names(sections: dict[str, bytes]) -> list[str]:
    return sorted({n[: -len("/params")] for n in sections if n.endswith("/params")})
