"""Versioned binary checkpoint container.

Layout (little-endian):

    bytes 0..7    magic  b"FGCKPT\\x00\\x01"  (last byte = container version)
    bytes 8..15   uint64 byte length of the JSON header
    header        UTF-8 JSON: model_config, token_registry, extra, and a
                  tensor index [{name, dtype, shape, offset, nbytes}, ...]
                  with offsets relative to the start of the payload
    payload       raw tensor bytes, concatenated in index order

Tensor names are sorted and the JSON is emitted with sorted keys and fixed
separators, so identical contents produce byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserUNet, ModelConfig
from .errors import MissingEMAError, ParseError

MAGIC = b"FGCKPT\x00\x01"

_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


@dataclass
class CheckpointData:
    """In-memory checkpoint: raw + EMA parameters, config, token registry."""

    model_config: ModelConfig
    token_registry: dict
    model_state: dict
    ema_state: dict = None
    extra: dict = field(default_factory=dict)

    def build_model(self, ema: bool = False) -> DenoiserUNet:
        """Reconstruct the network; ema=True loads the shadow parameters."""
        model = DenoiserUNet(self.model_config, num_tokens=len(self.token_registry))
        state = ema_swap(self) if ema else self.model_state
        model.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
        return model


def ema_swap(ckpt: CheckpointData) -> dict:
    """Return the EMA shadow parameters for sampling/evaluation."""
    if not ckpt.ema_state:
        raise MissingEMAError("checkpoint carries no EMA shadow parameters")
    return ckpt.ema_state


def _flatten(state: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": np.ascontiguousarray(v.detach().cpu().numpy())
            for k, v in state.items()}


def save_checkpoint(path, ckpt: CheckpointData) -> None:
    tensors = _flatten(ckpt.model_state, "model")
    if ckpt.ema_state is not None:
        tensors.update(_flatten(ckpt.ema_state, "ema"))
    index = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = tensors[name]
        if arr.dtype.name not in _DTYPES:
            raise ParseError(f"unsupported tensor dtype {arr.dtype.name}")
        nbytes = arr.nbytes
        index.append({"name": name, "dtype": arr.dtype.name,
                      "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format_version": 1,
        "model_config": asdict(ckpt.model_config),
        "token_registry": ckpt.token_registry,
        "extra": ckpt.extra,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(tensors[name].astype(tensors[name].dtype.newbyteorder("<"),
                                          copy=False).tobytes())


def load_checkpoint(path) -> CheckpointData:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ParseError(f"{path} is not a fewgen checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header in {path}: {exc}") from exc
    payload = raw[16 + hlen:]

    model_state, ema_state = {}, {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"),
                            count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensor = torch.from_numpy(arr.astype(dtype, copy=True))
        group, name = entry["name"].split(".", 1)
        (model_state if group == "model" else ema_state)[name] = tensor
    cfg = header["model_config"]
    for key in ("channel_multipliers", "attention_resolutions"):
        cfg[key] = tuple(cfg[key])
    return CheckpointData(
        model_config=ModelConfig(**cfg),
        token_registry=dict(header["token_registry"]),
        model_state=model_state,
        ema_state=ema_state or None,
        extra=header.get("extra", {}),
    )
