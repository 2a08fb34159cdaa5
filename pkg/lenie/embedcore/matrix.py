import logging
import struct
from typing import List

import numpy as np

logger = logging.getLogger(__name__)

LENB_MAGIC = b"LENB"
LENB_HEADER = struct.Struct("<4sII")
UNIT_NORM_TOLERANCE = 1e-6


class EmbeddingMatrix:
    """
    Row-per-text dense vectors, stored as float32
    """

    def __init__(self, data: np.ndarray):
        """
        :param data: 2D array of shape (rows, dim)
        :raises EmbeddingMatrixError
        """
        array = np.asarray(data, dtype=np.float32)
        if array.ndim != 2:
            raise EmbeddingMatrixError(f"Embedding data should be 2D, is {array.ndim}D")
        if not np.all(np.isfinite(array)):
            raise EmbeddingMatrixError("Embedding data contains non-finite values")
        self.data = array

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.data.astype(np.float64), axis=1)

    def is_unit_norm(self, tolerance: float = UNIT_NORM_TOLERANCE) -> bool:
        return bool(np.all(np.abs(self.row_norms() - 1.0) <= tolerance))

    def take(self, indices: List[int]) -> "EmbeddingMatrix":
        """
        Returns new matrix made of selected rows in given order
        """
        return EmbeddingMatrix(self.data[np.asarray(indices, dtype=np.int64)])

    def save(self, path: str) -> None:
        """
        Writes matrix in LENB format: magic, u32 rows, u32 dim, little-endian f32 row-major payload
        :param path: output file
        :raises EmbeddingFileError
        """
        try:
            with open(path, "wb") as fh:
                fh.write(LENB_HEADER.pack(LENB_MAGIC, self.rows, self.dim))
                fh.write(self.data.astype("<f4").tobytes(order="C"))
        except OSError as e:
            raise EmbeddingFileError(f"Issue writing embeddings into '{path}'") from e
        logger.info(f"Saved {self.rows}x{self.dim} embeddings into '{path}'")

    def __eq__(self, other):
        return isinstance(other, EmbeddingMatrix) and self.data.shape == other.data.shape and \
            self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"EmbeddingMatrix(rows={self.rows}, dim={self.dim})"


def load_embeddings(path: str) -> EmbeddingMatrix:
    """
    Reads LENB file
    :param path: file written by EmbeddingMatrix.save
    :raises EmbeddingFileError
    """
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as e:
        raise EmbeddingFileError(f"Issue reading embeddings from '{path}'") from e
    if len(payload) < LENB_HEADER.size:
        raise EmbeddingFileError(f"File '{path}' is too short for LENB header")
    magic, rows, dim = LENB_HEADER.unpack_from(payload)
    if magic != LENB_MAGIC:
        raise EmbeddingFileError(f"Incorrect magic {magic!r} in '{path}'. Should be {LENB_MAGIC!r}")
    expected = LENB_HEADER.size + rows * dim * 4
    if len(payload) != expected:
        raise EmbeddingFileError(f"Incorrect payload size in '{path}'. Should be {expected} bytes, "
                                 f"is {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4", offset=LENB_HEADER.size).reshape(rows, dim)
    try:
        return EmbeddingMatrix(data.astype(np.float32))
    except EmbeddingMatrixError as e:
        raise EmbeddingFileError(f"Incorrect embedding values in '{path}'") from e


class EmbeddingMatrixError(Exception):
    pass


class EmbeddingFileError(EmbeddingMatrixError):
    pass
