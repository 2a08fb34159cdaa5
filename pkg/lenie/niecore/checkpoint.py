import logging
import struct
from typing import List

import numpy as np

from lenie.niecore.gnn import self_weights, relation_weights, layer_bias, OUT_WEIGHTS as GNN_OUT_WEIGHTS, \
    OUT_BIAS as GNN_OUT_BIAS
from lenie.niecore.models import TrainedModel, ModelError, MODEL_KINDS, KIND_PAGERANK, KIND_PPR, KIND_LINREG, \
    KIND_MLP, HYPER, WEIGHTS, BIAS, HIDDEN_WEIGHTS, HIDDEN_BIAS, OUT_WEIGHTS, OUT_BIAS, SCORES

logger = logging.getLogger(__name__)

LENM_MAGIC = b"LENM"
LENM_HEADER = struct.Struct("<4sBI")
U32 = struct.Struct("<I")


def tensor_names(kind: str, hyper: np.ndarray) -> List[str]:
    """
    Canonical tensor order of model kind, hyper-parameter tensor first
    """
    if kind in (KIND_PAGERANK, KIND_PPR):
        return [HYPER, SCORES]
    if kind == KIND_LINREG:
        return [HYPER, WEIGHTS, BIAS]
    if kind == KIND_MLP:
        return [HYPER, HIDDEN_WEIGHTS, HIDDEN_BIAS, OUT_WEIGHTS, OUT_BIAS]
    names = [HYPER]
    for layer in range(int(hyper[0])):
        names += [self_weights(layer), relation_weights(layer), layer_bias(layer)]
    return names + [GNN_OUT_WEIGHTS, GNN_OUT_BIAS]


def save_checkpoint(model: TrainedModel, path: str) -> None:
    """
    Writes LENM file: magic, kind byte, u32 tensor count, then per tensor u32 rank, u32 dims, f32 payload
    :raises CheckpointError
    """
    names = tensor_names(model.kind, model.params[HYPER])
    if list(model.params) != names:
        raise CheckpointError(f"Model tensors {list(model.params)} do not match layout of '{model.kind}'")
    try:
        with open(path, "wb") as fh:
            fh.write(LENM_HEADER.pack(LENM_MAGIC, MODEL_KINDS.index(model.kind), len(names)))
            for name in names:
                tensor = np.asarray(model.params[name])
                fh.write(U32.pack(tensor.ndim))
                for size in tensor.shape:
                    fh.write(U32.pack(size))
                fh.write(tensor.astype("<f4").tobytes(order="C"))
    except OSError as e:
        raise CheckpointError(f"Issue writing checkpoint '{path}'") from e
    logger.info(f"Saved '{model.kind}' checkpoint into '{path}'")


def load_checkpoint(path: str) -> TrainedModel:
    """
    Reads LENM file. Parameters come back as float64 arrays of the stored float32 values
    :raises CheckpointError
    """
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as e:
        raise CheckpointError(f"Issue reading checkpoint '{path}'") from e
    try:
        magic, kind_code, count = LENM_HEADER.unpack_from(payload)
        if magic != LENM_MAGIC:
            raise CheckpointError(f"Incorrect magic {magic!r} in '{path}'. Should be {LENM_MAGIC!r}")
        if kind_code >= len(MODEL_KINDS):
            raise CheckpointError(f"Unknown model kind code {kind_code} in '{path}'")
        offset = LENM_HEADER.size
        tensors = []
        for _ in range(count):
            (rank,) = U32.unpack_from(payload, offset)
            offset += U32.size
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += U32.size * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            tensors.append(data.reshape(shape).astype(np.float64))
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"Truncated or corrupt checkpoint '{path}'") from e
    if offset != len(payload):
        raise CheckpointError(f"Trailing {len(payload) - offset} bytes in checkpoint '{path}'")
    kind = MODEL_KINDS[kind_code]
    if not tensors:
        raise CheckpointError(f"Checkpoint '{path}' holds no tensors")
    names = tensor_names(kind, tensors[0])
    if len(names) != len(tensors):
        raise CheckpointError(f"Checkpoint '{path}' holds {len(tensors)} tensors, '{kind}' needs {len(names)}")
    return TrainedModel(kind, dict(zip(names, tensors)), [])


class CheckpointError(ModelError):
    pass
