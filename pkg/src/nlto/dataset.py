"""Problem sampling, channel encoding, the shard file format and metrics.

A sample pairs one optimization problem with its optimized design. The
problem is drawn uniformly: load row on the right edge, load angle over
[0, 2pi), volume fraction over [0.2, 0.8], plus scenario-specific magnitude
and filter-radius ranges. Channels are placed top-left on a zero 64x64
canvas so every scenario shares one tensor shape.

Shard format (little endian throughout):

    magic   b"NLTO"
    version u16
    header  utf-8 "key=value" lines terminated by one empty line; declares
            scenario, mesh size, channel names, record parameter names,
            sample count and the engine decisions fingerprint
    records count times: status u8 (1 ok, 0 tombstone), parameters as f32,
            input channels as f32, target as f32, crc32 u32 of the record
            bytes before the checksum

Records are fixed-size, so readers can seek. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    ShardChecksumError,
    ShardMagicError,
    ShardTruncatedError,
    ShardVersionError,
)

CANVAS = 64
SHARD_MAGIC = b"NLTO"
SHARD_VERSION = 1
RMIN_CHANNEL_SCALE = 0.10  # meters; the largest sampled filter radius
PARAM_NAMES = ("load_row", "theta", "magnitude", "v_f", "r_min")

SCENARIOS = ("linear", "neohookean", "stress")

# Paper-style defaults per scenario: mesh size, fixed or sampled magnitude
# and filter radius, and material constants (bulk/shear moduli in Pa).
_SCENARIO_DEFAULTS = {
    "linear": dict(nx=32, ny=32, magnitude=1.0, magnitude_max=None,
                   r_min=0.125, r_min_range=None,
                   kappa=2.0e8, mu=2.0e6, sigma_lim=None),
    "neohookean": dict(nx=50, ny=50, magnitude=None, magnitude_max=150_000.0,
                       r_min=0.08, r_min_range=None,
                       kappa=2.0e8, mu=2.0e6, sigma_lim=None),
    "stress": dict(nx=50, ny=50, magnitude=None, magnitude_max=1.0e6,
                   r_min=None, r_min_range=(0.03, 0.10),
                   kappa=4.07e9 / (3 * (1 - 2 * 0.34)),
                   mu=4.07e9 / (2 * (1 + 0.34)),
                   sigma_lim=16.44e6),
}

# Modeling choices baked into every artifact this engine emits. The
# fingerprint guards the shard/surrogate contract: data generated under
# different decisions must not silently train a model.
ENGINE_DECISIONS = {
    "format_version": SHARD_VERSION,
    "canvas": CANVAS,
    "kinematics": {"linear": "plane_stress", "stress": "plane_stress",
                   "neohookean": "plane_strain"},
    "thickness_m": 1.0,
    "quadrature": "gauss_2x2",
    "penal": 3.0,
    "density_floor": 1e-3,
    "filter": "cone_density_row_normalized",
    "initial_design": "uniform_vf",
    "convergence": "max_drho_lt_0.01_or_100_iters",
    "padding": "top_left_zero_fill",
    "rmin_channel_scale_m": RMIN_CHANNEL_SCALE,
    "binarize_tie": "solid",
    "linear_load_normalized": True,
    "stress_aggregation": {"q": 10.0, "eta": 3.0, "xi": 1e-7},
    "newton": {"rtol": 1e-6, "max_iter": 50, "increments": 10, "max_halvings": 4},
    "mma": {"asy_init": 0.5, "asy_expand": 1.2, "asy_shrink": 0.7,
            "move": 0.2, "albefa": 0.1},
}


def decisions_fingerprint() -> str:
    blob = json.dumps(ENGINE_DECISIONS, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ProblemSpec:
    """One optimization task, fully replayable from its fields."""

    scenario: str
    nx: int
    ny: int
    load_row: int
    theta: float
    magnitude: float
    v_f: float
    r_min: float
    kappa: float
    mu: float
    sigma_lim: float | None = None
    width: float = 1.0
    height: float = 1.0
    penal: float = 3.0
    kinematics: str | None = None  # override of the scenario default mode
    seed: object = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not 0.0 < self.v_f <= 1.0:
            raise ValueError(f"volume fraction must be in (0, 1], got {self.v_f}")
        if not 0 <= self.load_row <= self.ny:
            raise ValueError(f"load_row {self.load_row} outside [0, {self.ny}]")
        if self.r_min <= 0:
            raise ValueError("filter radius must be positive")
        if self.scenario == "stress" and self.sigma_lim is None:
            raise ValueError("stress scenario requires sigma_lim")


def default_spec(scenario: str, **overrides) -> ProblemSpec:
    """Paper-default ProblemSpec for a scenario, with field overrides."""
    d = _SCENARIO_DEFAULTS[scenario]
    base = dict(scenario=scenario, nx=d["nx"], ny=d["ny"],
                load_row=d["ny"] // 2, theta=0.0,
                magnitude=d["magnitude"] if d["magnitude"] is not None else d["magnitude_max"],
                v_f=0.35, r_min=d["r_min"] if d["r_min"] is not None else 0.05,
                kappa=d["kappa"], mu=d["mu"], sigma_lim=d["sigma_lim"])
    base.update(overrides)
    return ProblemSpec(**base)


def sample_problem(seed, scenario: str) -> ProblemSpec:
    """Uniformly sampled ProblemSpec; a (seed, index) pair is a valid seed."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}")
    d = _SCENARIO_DEFAULTS[scenario]
    rng = np.random.default_rng(seed)
    load_row = int(rng.integers(0, d["ny"] + 1))
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    v_f = float(rng.uniform(0.2, 0.8))
    if d["magnitude"] is not None:
        magnitude = d["magnitude"]
    else:
        magnitude = float(rng.uniform(0.0, d["magnitude_max"]))
    if d["r_min"] is not None:
        r_min = d["r_min"]
    else:
        r_min = float(rng.uniform(*d["r_min_range"]))
    return ProblemSpec(scenario=scenario, nx=d["nx"], ny=d["ny"],
                       load_row=load_row, theta=theta, magnitude=magnitude,
                       v_f=v_f, r_min=r_min, kappa=d["kappa"], mu=d["mu"],
                       sigma_lim=d["sigma_lim"],
                       seed=list(seed) if isinstance(seed, (tuple, list)) else seed)


def channel_names(scenario: str) -> tuple:
    names = ("ux", "uy", "px", "py", "vf")
    return names + ("rmin",) if scenario == "stress" else names


@dataclass
class ChannelTensor:
    """Stacked input channels plus the target density image for one sample."""

    inputs: np.ndarray   # (C, 64, 64) float32
    target: np.ndarray   # (1, 64, 64) float32
    names: tuple
    nx: int
    ny: int


def encode_channels(spec: ProblemSpec, design: np.ndarray) -> ChannelTensor:
    """Encode one problem/design pair into the padded channel tensor.

    Nodal channels (ux, uy, px, py) are (ny+1, nx+1) images; element
    channels (vf, rmin, target) are (ny, nx); each sits at the top-left of
    a zeroed 64x64 canvas. Load pixels hold the direction cosines, scaled
    by magnitude / magnitude_max for scenarios where magnitude matters.
    """
    if spec.nx + 1 > CANVAS or spec.ny + 1 > CANVAS:
        raise ValueError(f"mesh {spec.nx}x{spec.ny} does not fit a {CANVAS}x{CANVAS} canvas")
    design = np.asarray(design, dtype=np.float32).reshape(spec.ny, spec.nx)

    names = channel_names(spec.scenario)
    inputs = np.zeros((len(names), CANVAS, CANVAS), dtype=np.float32)

    ux, uy = inputs[0], inputs[1]
    rows = np.arange(spec.ny + 1)
    ux[rows, 0] = 1.0
    uy[rows, 0] = 1.0

    d = _SCENARIO_DEFAULTS[spec.scenario]
    if d["magnitude_max"] is None:
        scale = 1.0
    else:
        scale = spec.magnitude / d["magnitude_max"]
    inputs[2][spec.load_row, spec.nx] = np.float32(scale * np.cos(spec.theta))
    inputs[3][spec.load_row, spec.nx] = np.float32(scale * np.sin(spec.theta))

    inputs[4][: spec.ny, : spec.nx] = spec.v_f
    if spec.scenario == "stress":
        inputs[5][: spec.ny, : spec.nx] = spec.r_min / RMIN_CHANNEL_SCALE

    target = np.zeros((1, CANVAS, CANVAS), dtype=np.float32)
    target[0, : spec.ny, : spec.nx] = design

    return ChannelTensor(inputs=inputs, target=target, names=names,
                         nx=spec.nx, ny=spec.ny)


def binarize(densities: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a density field; exact ties bind to solid."""
    return (np.asarray(densities) >= threshold).astype(np.uint8)


def dsc(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Dice similarity of two binary images; both-empty counts as identical."""
    y = np.asarray(y).astype(bool)
    y_hat = np.asarray(y_hat).astype(bool)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    denom = int(y.sum()) + int(y_hat.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((y & y_hat).sum()) / denom


def export_image(field: np.ndarray, path, invert: bool = False) -> None:
    """Write a density field in [0, 1] as an 8-bit binary PGM (0 = void)."""
    field = np.asarray(field, dtype=float)
    if field.ndim != 2:
        raise ValueError("image export expects a 2D field")
    vals = np.round(np.clip(field, 0.0, 1.0) * 255.0).astype(np.uint8)
    if invert:
        vals = 255 - vals
    with open(path, "wb") as fh:
        fh.write(f"P5\n{field.shape[1]} {field.shape[0]}\n255\n".encode())
        fh.write(vals.tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PGM written by export_image back into [0, 1] floats."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    fields, idx = [], 2
    while len(fields) < 3:
        while idx < len(data) and data[idx] in b" \t\r\n":
            idx += 1
        if data[idx:idx + 1] == b"#":
            while data[idx] not in b"\r\n":
                idx += 1
            continue
        start = idx
        while data[idx] not in b" \t\r\n":
            idx += 1
        fields.append(int(data[start:idx]))
    w, h, maxval = fields
    raw = np.frombuffer(data[idx + 1: idx + 1 + w * h], dtype=np.uint8)
    return raw.reshape(h, w).astype(float) / maxval


@dataclass
class SampleRecord:
    """One shard record: parameters plus tensors, or a tombstone."""

    params: np.ndarray           # float32, PARAM_NAMES order
    tensor: ChannelTensor | None
    ok: bool = True
    error: str | None = None


def make_record(spec: ProblemSpec, tensor: ChannelTensor) -> SampleRecord:
    params = np.array([spec.load_row, spec.theta, spec.magnitude,
                       spec.v_f, spec.r_min], dtype=np.float32)
    return SampleRecord(params=params, tensor=tensor, ok=True)


def tombstone_record(spec: ProblemSpec) -> SampleRecord:
    params = np.array([spec.load_row, spec.theta, spec.magnitude,
                       spec.v_f, spec.r_min], dtype=np.float32)
    return SampleRecord(params=params, tensor=None, ok=False)


@dataclass
class Shard:
    scenario: str
    nx: int
    ny: int
    names: tuple
    fingerprint: str
    seed: object
    records: list


def _header_text(scenario, nx, ny, names, count, seed) -> str:
    lines = [
        f"scenario={scenario}",
        f"nx={nx}",
        f"ny={ny}",
        f"canvas={CANVAS}",
        f"channels={','.join(names)}",
        f"params={','.join(PARAM_NAMES)}",
        f"count={count}",
        f"seed={seed}",
        f"fingerprint={decisions_fingerprint()}",
    ]
    return "\n".join(lines) + "\n\n"


def write_shard(path, records, scenario: str, nx: int, ny: int, seed=None) -> None:
    """Serialize records (index order) with per-record CRC32 checksums."""
    names = channel_names(scenario)
    c = len(names)
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<H", SHARD_VERSION))
        fh.write(_header_text(scenario, nx, ny, names, len(records), seed).encode())
        for rec in records:
            body = struct.pack("<B", 1 if rec.ok else 0)
            body += rec.params.astype("<f4").tobytes()
            if rec.ok:
                body += rec.tensor.inputs.astype("<f4").tobytes()
                body += rec.tensor.target.astype("<f4").tobytes()
            else:
                body += b"\x00" * (4 * (c + 1) * CANVAS * CANVAS)
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))


def read_shard(path) -> Shard:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SHARD_MAGIC:
        raise ShardMagicError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != SHARD_VERSION:
        raise ShardVersionError(f"{path}: unsupported version {version}")
    end = data.find(b"\n\n", 6)
    if end < 0:
        raise ShardTruncatedError(f"{path}: unterminated header")
    header = {}
    for line in data[6:end].decode().splitlines():
        key, _, value = line.partition("=")
        header[key] = value
    names = tuple(header["channels"].split(","))
    nx, ny, count = int(header["nx"]), int(header["ny"]), int(header["count"])
    c = len(names)
    body_len = 1 + 4 * len(PARAM_NAMES) + 4 * (c + 1) * CANVAS * CANVAS
    rec_len = body_len + 4

    records = []
    offset = end + 2
    for i in range(count):
        chunk = data[offset: offset + rec_len]
        if len(chunk) < rec_len:
            raise ShardTruncatedError(f"{path}: record {i} truncated")
        body, (crc,) = chunk[:body_len], struct.unpack_from("<I", chunk, body_len)
        if zlib.crc32(body) != crc:
            raise ShardChecksumError(f"{path}: record {i} failed its checksum")
        ok = body[0] == 1
        params = np.frombuffer(body, dtype="<f4", count=len(PARAM_NAMES), offset=1)
        tensor = None
        if ok:
            floats = np.frombuffer(body, dtype="<f4", offset=1 + 4 * len(PARAM_NAMES))
            inputs = floats[: c * CANVAS * CANVAS].reshape(c, CANVAS, CANVAS).copy()
            target = floats[c * CANVAS * CANVAS:].reshape(1, CANVAS, CANVAS).copy()
            tensor = ChannelTensor(inputs=inputs, target=target, names=names,
                                   nx=nx, ny=ny)
        records.append(SampleRecord(params=params.copy(), tensor=tensor, ok=ok))
        offset += rec_len

    return Shard(scenario=header["scenario"], nx=nx, ny=ny, names=names,
                 fingerprint=header["fingerprint"], seed=header.get("seed"),
                 records=records)


def _generate_one(args):
    """Worker body: sample, optimize, encode. Returns (index, record, seconds)."""
    from .topopt import optimize  # runtime import keeps module loading acyclic

    seed, index, scenario = args
    spec = sample_problem((seed, index), scenario)
    start = time.perf_counter()
    try:
        result = optimize(spec)
        tensor = encode_channels(spec, result.densities)
        rec = make_record(spec, tensor)
    except Exception as err:  # tombstone, keep the batch going
        rec = tombstone_record(spec)
        rec.error = str(err)
    return index, rec, time.perf_counter() - start


def effective_workers(requested: int | None) -> int:
    cap = os.environ.get("NLTO_THREADS")
    workers = requested or os.cpu_count() or 1
    if cap:
        workers = min(workers, max(1, int(cap)))
    return max(1, workers)


def generate_dataset(scenario: str, count: int, seed: int,
                     workers: int | None = None, log=None):
    """Generate `count` (problem, design) records deterministically.

    Sample i depends only on (seed, i), so results are identical for any
    worker count; a single writer later serializes them in index order.
    """
    workers = effective_workers(workers)
    tasks = [(seed, i, scenario) for i in range(count)]
    results = {}
    if workers == 1 or count <= 1:
        for t in tasks:
            idx, rec, secs = _generate_one(t)
            results[idx] = (rec, secs)
            if log:
                log(idx, rec, secs)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, rec, secs in pool.map(_generate_one, tasks, chunksize=1):
                results[idx] = (rec, secs)
                if log:
                    log(idx, rec, secs)
    ordered = [results[i][0] for i in range(count)]
    timings = [results[i][1] for i in range(count)]
    return ordered, timings
