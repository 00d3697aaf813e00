"""Binary and text file formats shared across the package.

Sequence container (little-endian):
    magic "DVBFSEQ1"; u32 n_seqs, T, obs_channels, obs_h, obs_w,
    control_dim, state_dim; float32 arrays observations
    [n_seqs][T][c][h][w], controls [n_seqs][T-1][control_dim],
    states [n_seqs][T][state_dim].

Checkpoint container:
    magic "DVBFCKP1"; u32-length-prefixed UTF-8 config echo; then named
    float32 blobs: u32 name_len, name, u32 rank, u32 extents[rank], data.

Plus PGM/PPM writers for image strips and the flat "key = value" metrics
file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SEQ_MAGIC = b"DVBFSEQ1"
CKP_MAGIC = b"DVBFCKP1"


class FormatError(Exception):
    pass


@dataclass
class SequenceBatch:
    """Observations x_{1:T}, controls u_{1:T-1} and ground-truth states."""

    observations: np.ndarray  # [n, T, c, h, w] float32
    controls: np.ndarray      # [n, T-1, control_dim] float32
    states: np.ndarray        # [n, T, state_dim] float32

    @property
    def n_seqs(self) -> int:
        return self.observations.shape[0]

    @property
    def horizon(self) -> int:
        return self.observations.shape[1]

    @property
    def obs_shape(self) -> tuple:
        return tuple(self.observations.shape[2:])

    @property
    def control_dim(self) -> int:
        return self.controls.shape[2]

    def validate(self) -> None:
        n, t = self.observations.shape[:2]
        if self.controls.shape[:2] != (n, t - 1):
            raise FormatError(
                f"controls {self.controls.shape} inconsistent with obs {self.observations.shape}"
            )
        if self.states.shape[:2] != (n, t):
            raise FormatError(
                f"states {self.states.shape} inconsistent with obs {self.observations.shape}"
            )

    def subset(self, idx) -> "SequenceBatch":
        return SequenceBatch(self.observations[idx], self.controls[idx], self.states[idx])


def write_sequences(path, batch: SequenceBatch) -> None:
    batch.validate()
    n, t, c, h, w = batch.observations.shape
    header = SEQ_MAGIC + struct.pack(
        "<7I", n, t, c, h, w, batch.control_dim, batch.states.shape[2]
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(batch.observations, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(batch.controls, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(batch.states, dtype="<f4").tobytes())


def read_sequences(path) -> SequenceBatch:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != SEQ_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    n, t, c, h, w, nu, ns = struct.unpack_from("<7I", raw, 8)
    off = 8 + 28
    sizes = [n * t * c * h * w, n * (t - 1) * nu, n * t * ns]
    if len(raw) != off + 4 * sum(sizes):
        raise FormatError(f"{path}: size {len(raw)} != expected {off + 4 * sum(sizes)}")
    arrays = []
    for count in sizes:
        arrays.append(np.frombuffer(raw, dtype="<f4", count=count, offset=off).copy())
        off += 4 * count
    batch = SequenceBatch(
        arrays[0].reshape(n, t, c, h, w),
        arrays[1].reshape(n, t - 1, nu),
        arrays[2].reshape(n, t, ns),
    )
    batch.validate()
    return batch


def sequence_file_size(n, t, c, h, w, nu, ns) -> int:
    return 8 + 28 + 4 * (n * t * c * h * w + n * (t - 1) * nu + n * t * ns)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def write_checkpoint(path, config_text: str, blobs: dict[str, np.ndarray]) -> None:
    cfg = config_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKP_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        for name, arr in blobs.items():
            nb = name.encode("utf-8")
            a = np.asarray(arr, dtype="<f4")  # tobytes() emits C order
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
            f.write(a.tobytes())


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != CKP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    off = 8
    (cfg_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    config_text = raw[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    blobs: dict[str, np.ndarray] = {}
    while off < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if shape else 1
        blobs[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off) \
            .copy().reshape(shape)
        off += 4 * count
    return config_text, blobs


# ---------------------------------------------------------------------------
# images and metrics
# ---------------------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM from a [h, w] array of values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM from a [h, w, 3] array of values in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_metrics(path, values: dict[str, float]) -> None:
    lines = [f"{k} = {values[k]!r}" for k in sorted(values)]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_metrics(path) -> dict[str, float]:
    out: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = float(val.strip())
    return out
