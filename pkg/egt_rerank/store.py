# pylint: disable=logging-fstring-interpolation
"""Ingest, validate and persist descriptors, local features, labels,
ground truth and submissions.

Binary formats (all integers and floats little-endian, floats 32 bit):
    GDS1: magic | dim u32 | count u64 | count x (id_len u16 | id | dim x f32)
    GLF1: magic | dim u32 | image_count u64 |
          image_count x (id_len u16 | id | n u32 | n x (x f32 | y f32 | dim x f32))
"""
import re
import struct
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .exceptions import CorruptionError, FormatError, ParseError, ValidationError
from .utils import to_path

LOGGER = logging.getLogger(__name__)

GDS_MAGIC = b"GDS1"
GLF_MAGIC = b"GLF1"
ROLES = ("query", "index", "train")
NORM_TOLERANCE = 1e-5

_HEADER = struct.Struct("<4sIQ")
_ID_LEN = struct.Struct("<H")
_N_KEYPOINTS = struct.Struct("<I")
_FLOAT = np.dtype("<f4")

LABELS_HEADER = ("id", "landmark_id")
IMAGES_HEADER = ("id", "images")


def validate_image_id(image_id: str) -> str:
    """ Image ids are non-empty and contain no whitespace. """
    if not isinstance(image_id, str) or not image_id:
        raise ValidationError(f"Invalid image id {image_id!r}: must be a non-empty string")
    if any(char.isspace() for char in image_id):
        raise ValidationError(f"Invalid image id {image_id!r}: contains whitespace")
    return image_id


def _check_unique(ids: Sequence[str], what: str) -> None:
    seen = set()
    for image_id in ids:
        if image_id in seen:
            raise ValidationError(f"Duplicate id {image_id!r} in {what}")
        seen.add(image_id)


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """ Compare float32 arrays as raw 32 bit patterns. """
    if a.shape != b.shape:
        return False
    return bool(np.array_equal(a.view(np.uint32), b.view(np.uint32)))


def normalize_rows(vectors: np.ndarray) -> tuple[np.ndarray, int]:
    """L2-normalize every row whose norm deviates from 1 by more than
    NORM_TOLERANCE. Rows already within tolerance are left untouched, so
    unit vectors keep their exact bits.
    Returns:
        vectors (np.ndarray): float32 array with unit rows.
        count (int): number of rows that were rescaled.
    """
    if vectors.shape[0] == 0:
        return vectors, 0
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        row = int(np.flatnonzero(norms == 0.0)[0])
        raise ValidationError(f"Descriptor in row {row} has zero norm")
    off = np.abs(norms - 1.0) > NORM_TOLERANCE
    count = int(off.sum())
    if count:
        vectors = vectors.copy()
        vectors[off] = (vectors[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    return vectors, count


@dataclass(eq=False)
class DescriptorSet:
    """Global descriptors of one image collection, one row per id.
    Rows keep the order they were created or loaded in."""

    ids: list[str]
    vectors: np.ndarray
    role: str = "index"
    renormalized: int = 0
    _rows: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.ids = list(self.ids)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValidationError(f"Descriptors must be a 2d array, got {self.vectors.shape=}")
        if self.vectors.shape[0] != len(self.ids):
            raise ValidationError(
                f"{len(self.ids)} ids but {self.vectors.shape[0]} descriptor rows"
            )
        if self.vectors.shape[1] < 1:
            raise ValidationError("Descriptor dimension must be at least 1")
        if self.role not in ROLES:
            raise ValidationError(f"Unknown role {self.role!r}, expected one of {ROLES}")
        for image_id in self.ids:
            validate_image_id(image_id)
        _check_unique(self.ids, f"{self.role} descriptors")
        if not np.all(np.isfinite(self.vectors)):
            row = int(np.flatnonzero(~np.isfinite(self.vectors).all(axis=1))[0])
            raise ValidationError(f"Non-finite component in descriptor {self.ids[row]!r}")
        self._rows = {image_id: row for row, image_id in enumerate(self.ids)}

    @classmethod
    def from_mapping(
        cls, entries: Mapping[str, Sequence[float]], role: str = "index", dim: Optional[int] = None
    ) -> "DescriptorSet":
        """ Build a set from {id: vector}. dim is needed for empty mappings. """
        ids = list(entries)
        if ids:
            vectors = np.asarray([entries[i] for i in ids], dtype=np.float32)
        else:
            if dim is None:
                raise ValidationError("dim is required to build an empty descriptor set")
            vectors = np.zeros((0, dim), dtype=np.float32)
        return cls(ids, vectors, role)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._rows

    def __getitem__(self, image_id: str) -> np.ndarray:
        return self.vectors[self._rows[image_id]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return (
            self.role == other.role
            and self.ids == other.ids
            and _bits_equal(self.vectors, other.vectors)
        )

    def index_of(self, image_id: str) -> int:
        return self._rows[image_id]

    def subset(self, ids: Iterable[str]) -> "DescriptorSet":
        ids = list(ids)
        rows = [self._rows[i] for i in ids]
        return DescriptorSet(ids, self.vectors[rows], self.role)

    def sorted_by_id(self) -> "DescriptorSet":
        """ Same set with rows in ascending id order. """
        return self.subset(sorted(self.ids))

    def with_vectors(self, vectors: np.ndarray) -> "DescriptorSet":
        return DescriptorSet(self.ids, vectors, self.role)


@dataclass
class DescriptorSets:
    """ The descriptor collections used by one pipeline stage. """

    query: DescriptorSet
    index: DescriptorSet
    train: Optional[DescriptorSet] = None

    def __post_init__(self) -> None:
        if self.query.dim != self.index.dim:
            raise ValidationError(
                f"Query dim {self.query.dim} does not match index dim {self.index.dim}"
            )
        if self.train is not None and self.train.dim != self.index.dim:
            raise ValidationError(
                f"Train dim {self.train.dim} does not match index dim {self.index.dim}"
            )

    def roles(self) -> dict[str, str]:
        """ Vertex roles of the query and index images. """
        roles = {image_id: "index" for image_id in self.index.ids}
        for image_id in self.query.ids:
            if image_id in roles:
                raise ValidationError(f"Image {image_id!r} is both query and index")
            roles[image_id] = "query"
        return roles


class _Reader:
    """ Cursor over a binary payload that reports truncation as corruption. """

    def __init__(self, data: bytes, path: Path):
        self.data = memoryview(data)
        self.offset = 0
        self.path = path

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, size: int, what: str) -> memoryview:
        if size > self.remaining:
            raise CorruptionError(
                f"{self.path}: truncated while reading {what} at byte {self.offset}"
            )
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple:
        return layout.unpack(self.take(layout.size, what))

    def read_id(self) -> str:
        (length,) = self.unpack(_ID_LEN, "id length")
        raw = self.take(length, "id")
        try:
            image_id = bytes(raw).decode("utf-8")
        except UnicodeDecodeError as err:
            raise CorruptionError(f"{self.path}: id at byte {self.offset - length} is not UTF-8") from err
        return validate_image_id(image_id)

    def read_floats(self, count: int, what: str) -> np.ndarray:
        raw = self.take(count * _FLOAT.itemsize, what)
        return np.frombuffer(raw, dtype=_FLOAT).astype(np.float32)


def _read_header(data: bytes, magic: bytes, path: Path) -> tuple[_Reader, int, int]:
    if data[: len(magic)] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {bytes(data[:4])!r}")
    reader = _Reader(data, path)
    _, dim, count = reader.unpack(_HEADER, "header")
    if dim < 1:
        raise CorruptionError(f"{path}: declared dimension {dim} is not positive")
    return reader, dim, count


def _encode_id(image_id: str) -> bytes:
    raw = validate_image_id(image_id).encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValidationError(f"Id {image_id[:32]!r}... longer than 65535 bytes")
    return _ID_LEN.pack(len(raw)) + raw


def load_descriptors(
    path: Union[str, Path], role: str = "index", normalize: bool = True
) -> DescriptorSet:
    """Load a GDS1 descriptor file.
    Args:
        path (str, Path): File to read.
        role (str): One of query, index, train.
        normalize (bool): Rescale rows that are not unit norm. Default: True.
    Returns:
        descriptors (DescriptorSet): The records in file order.
    """
    path = to_path(path)
    reader, dim, count = _read_header(path.read_bytes(), GDS_MAGIC, path)
    record_floor = _ID_LEN.size + 1 + dim * _FLOAT.itemsize
    if count * record_floor > reader.remaining:
        raise CorruptionError(
            f"{path}: declares {count} records of dim {dim} but only {reader.remaining} bytes follow"
        )
    ids = []
    vectors = np.empty((count, dim), dtype=np.float32)
    for row in range(count):
        ids.append(reader.read_id())
        vectors[row] = reader.read_floats(dim, f"record {row}")
    if reader.remaining:
        raise CorruptionError(f"{path}: {reader.remaining} bytes after the last of {count} records")
    _check_unique(ids, str(path))
    if not np.all(np.isfinite(vectors)):
        row = int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])
        raise ValidationError(f"{path}: non-finite component in descriptor {ids[row]!r}")
    renormalized = 0
    if normalize:
        vectors, renormalized = normalize_rows(vectors)
        if renormalized:
            LOGGER.warning(f"{path}: normalized {renormalized} of {count} descriptors to unit norm")
    descriptors = DescriptorSet(ids, vectors, role)
    descriptors.renormalized = renormalized
    LOGGER.debug(f"Loaded {count} descriptors of {dim=} from {path}")
    return descriptors


def save_descriptors(descriptors: DescriptorSet, path: Union[str, Path]) -> None:
    """ Write a GDS1 descriptor file that load_descriptors reads back bit-exactly. """
    path = to_path(path)
    vectors = descriptors.vectors.astype(_FLOAT)
    chunks = [_HEADER.pack(GDS_MAGIC, descriptors.dim, len(descriptors))]
    for row, image_id in enumerate(descriptors.ids):
        chunks.append(_encode_id(image_id))
        chunks.append(vectors[row].tobytes())
    path.write_bytes(b"".join(chunks))


@dataclass(eq=False)
class Keypoints:
    """ Keypoint locations (n x 2, pixels) and local descriptors (n x dim) of one image. """

    xy: np.ndarray
    desc: np.ndarray

    def __post_init__(self) -> None:
        self.xy = np.ascontiguousarray(self.xy, dtype=np.float32).reshape(-1, 2)
        self.desc = np.ascontiguousarray(self.desc, dtype=np.float32)
        if self.desc.ndim != 2 or self.desc.shape[0] != self.xy.shape[0]:
            raise ValidationError(
                f"{self.xy.shape[0]} keypoints but descriptor array of shape {self.desc.shape}"
            )
        if not np.all(np.isfinite(self.xy)):
            raise ValidationError("Non-finite keypoint coordinate")

    def __len__(self) -> int:
        return int(self.xy.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Keypoints):
            return NotImplemented
        return _bits_equal(self.xy, other.xy) and _bits_equal(self.desc, other.desc)


@dataclass(eq=False)
class LocalFeatureSet:
    """ Keypoints per image; every descriptor has length dim. """

    dim: int
    entries: dict[str, Keypoints] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValidationError(f"Invalid local descriptor {self.dim=}")
        for image_id, keypoints in self.entries.items():
            validate_image_id(image_id)
            if keypoints.desc.shape[1] != self.dim and len(keypoints):
                raise ValidationError(
                    f"Keypoints of {image_id!r} have dim {keypoints.desc.shape[1]}, expected {self.dim}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self.entries

    def get(self, image_id: str) -> Optional[Keypoints]:
        return self.entries.get(image_id)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LocalFeatureSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and list(self.entries) == list(other.entries)
            and all(self.entries[i] == other.entries[i] for i in self.entries)
        )


def load_local_features(path: Union[str, Path]) -> LocalFeatureSet:
    """ Load a GLF1 local feature file. """
    path = to_path(path)
    reader, dim, count = _read_header(path.read_bytes(), GLF_MAGIC, path)
    if count * (_ID_LEN.size + 1 + _N_KEYPOINTS.size) > reader.remaining:
        raise CorruptionError(f"{path}: declares {count} images but only {reader.remaining} bytes follow")
    entries: dict[str, Keypoints] = {}
    width = 2 + dim
    for row in range(count):
        image_id = reader.read_id()
        if image_id in entries:
            raise ValidationError(f"Duplicate id {image_id!r} in {path}")
        (n_keypoints,) = reader.unpack(_N_KEYPOINTS, f"keypoint count of {image_id!r}")
        values = reader.read_floats(n_keypoints * width, f"keypoints of image {row}")
        values = values.reshape(n_keypoints, width)
        entries[image_id] = Keypoints(values[:, :2], values[:, 2:])
    if reader.remaining:
        raise CorruptionError(f"{path}: {reader.remaining} bytes after the last of {count} images")
    LOGGER.debug(f"Loaded local features of {count} images with {dim=} from {path}")
    return LocalFeatureSet(dim, entries)


def save_local_features(features: LocalFeatureSet, path: Union[str, Path]) -> None:
    """ Write a GLF1 local feature file. """
    path = to_path(path)
    chunks = [_HEADER.pack(GLF_MAGIC, features.dim, len(features))]
    for image_id, keypoints in features.entries.items():
        chunks.append(_encode_id(image_id))
        chunks.append(_N_KEYPOINTS.pack(len(keypoints)))
        desc = keypoints.desc.reshape(len(keypoints), features.dim)
        block = np.hstack([keypoints.xy, desc]).astype(_FLOAT)
        chunks.append(block.tobytes())
    path.write_bytes(b"".join(chunks))


@dataclass
class LabelTable:
    """ Landmark label of every training image. """

    entries: dict[str, int] = field(default_factory=dict)

    @property
    def label_count(self) -> int:
        return len(set(self.entries.values()))

    def members(self) -> dict[int, list[str]]:
        """ Image ids per label, labels ascending, ids in table order. """
        groups: dict[int, list[str]] = {}
        for image_id, label in self.entries.items():
            groups.setdefault(label, []).append(image_id)
        return dict(sorted(groups.items()))

    def __getitem__(self, image_id: str) -> int:
        return self.entries[image_id]

    def __contains__(self, image_id: object) -> bool:
        return image_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class GroundTruth:
    """ Relevant index images per query. """

    entries: dict[str, set[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


def _read_csv(path: Path, header: tuple[str, ...]) -> list[tuple[int, list[str]]]:
    """Read a CSV with a fixed header into (line number, fields) rows.
    Blank lines are skipped but still counted."""
    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            na_filter=False,
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError as err:
        raise FormatError(f"{path}: empty file, expected header {','.join(header)}") from err
    except pd.errors.ParserError as err:
        match = re.search(r"line (\d+)", str(err))
        raise ParseError(f"{path}: {err}", int(match.group(1)) if match else None) from err
    if tuple(frame.columns) != header:
        raise FormatError(f"{path}: expected header {','.join(header)}, found {','.join(frame.columns)}")
    rows = []
    for position, values in enumerate(frame.itertuples(index=False, name=None)):
        fields = ["" if pd.isna(value) else str(value) for value in values]
        if all(value == "" for value in fields):
            continue
        rows.append((position + 2, fields))
    return rows


def load_labels(path: Union[str, Path]) -> LabelTable:
    """ Load the `id,landmark_id` CSV of training labels. """
    path = to_path(path)
    entries: dict[str, int] = {}
    for line, (image_id, label) in _read_csv(path, LABELS_HEADER):
        try:
            validate_image_id(image_id)
        except ValidationError as err:
            raise ParseError(f"{path}: {err}", line) from err
        if not re.fullmatch(r"\d+", label.strip()):
            raise ParseError(f"{path}: label {label!r} is not a non-negative integer", line)
        if image_id in entries:
            raise ValidationError(f"{path}: duplicate row for {image_id!r} at line {line}")
        entries[image_id] = int(label)
    table = LabelTable(entries)
    LOGGER.debug(f"Loaded {len(table)} labels, L={table.label_count}, from {path}")
    return table


def save_labels(labels: LabelTable, path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        {"id": list(labels.entries), "landmark_id": list(labels.entries.values())},
        columns=list(LABELS_HEADER),
    )
    frame.to_csv(to_path(path), index=False, lineterminator="\n")


def _split_images(path: Path, line: int, images: str) -> list[str]:
    ids = images.split()
    for image_id in ids:
        try:
            validate_image_id(image_id)
        except ValidationError as err:
            raise ParseError(f"{path}: {err}", line) from err
    return ids


def load_ground_truth(
    path: Union[str, Path], index_ids: Optional[Iterable[str]] = None
) -> GroundTruth:
    """Load the `id,images` ground-truth CSV.
    Args:
        path (str, Path): File to read.
        index_ids (iterable): If given, every relevant id must be one of them.
    """
    path = to_path(path)
    known = set(index_ids) if index_ids is not None else None
    entries: dict[str, set[str]] = {}
    for line, (query_id, images) in _read_csv(path, IMAGES_HEADER):
        try:
            validate_image_id(query_id)
        except ValidationError as err:
            raise ParseError(f"{path}: {err}", line) from err
        if query_id in entries:
            raise ValidationError(f"{path}: duplicate row for {query_id!r} at line {line}")
        relevant = set(_split_images(path, line, images))
        if known is not None and not relevant <= known:
            missing = sorted(relevant - known)[:5]
            raise ValidationError(f"{path}: line {line} lists ids not in the index set: {missing}")
        entries[query_id] = relevant
    return GroundTruth(entries)


def save_ground_truth(truth: GroundTruth, path: Union[str, Path]) -> None:
    queries = sorted(truth.entries)
    frame = pd.DataFrame(
        {"id": queries, "images": [" ".join(sorted(truth.entries[q])) for q in queries]},
        columns=list(IMAGES_HEADER),
    )
    frame.to_csv(to_path(path), index=False, lineterminator="\n")


def save_submission(
    rankings: Mapping[str, Sequence[str]], path: Union[str, Path], limit: int = 100
) -> None:
    """Write the `id,images` submission CSV, queries in ascending id order,
    at most limit index ids per row."""
    queries = sorted(rankings)
    images = []
    for query_id in queries:
        ranked = [validate_image_id(i) for i in list(rankings[query_id])[:limit]]
        images.append(" ".join(ranked))
    frame = pd.DataFrame({"id": queries, "images": images}, columns=list(IMAGES_HEADER))
    frame.to_csv(to_path(path), index=False, lineterminator="\n")


def load_submission(path: Union[str, Path]) -> dict[str, list[str]]:
    """ Read a submission CSV back into {query: ranked index ids}. """
    path = to_path(path)
    rankings: dict[str, list[str]] = {}
    for line, (query_id, images) in _read_csv(path, IMAGES_HEADER):
        if query_id in rankings:
            raise ValidationError(f"{path}: duplicate row for {query_id!r} at line {line}")
        rankings[query_id] = _split_images(path, line, images)
    return rankings
