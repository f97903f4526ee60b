"""Paired tracer/flow trajectories: generation, storage and windowed replay.

On-disk layout of a dataset directory::

    manifest.json       all numeric values as decimal strings
    topography.bin      float64 little-endian, solver grid
    chunk_0000.bin ...  16-byte header + float32 little-endian records

Chunk header: magic ``b"LGDA"``, then uint32 version, record count and
CRC32 of the payload.  Each record is ``psi1, psi2`` on the stored grid
followed by the ``(I, 2)`` observed tracer positions.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .qg import QGModel, QGParams, standard_topography, rescaled_hyperviscosity
from .tracers import initial_tracers, observe, tracer_step

__all__ = [
    "GenerationConfig",
    "DatasetManifest",
    "Dataset",
    "DatasetError",
    "generate",
    "subsample_tracers",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1
MAGIC = b"LGDA"
HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


@dataclass
class GenerationConfig:
    grid_n: int = 32
    kd: float = 10.0
    beta: float = 22.0
    U: float = 1.0
    kappa: float = 9.0
    nu: float | None = None  # None: rescaled from the 128-grid reference
    s: int = 4
    dt: float = 2e-3
    topography: str = "standard"  # "standard" or "flat"
    n_tracers: int = 64
    tracer_sigma: float = 0.1
    tracer_center: float = float(np.pi)
    tracer_spread: float = 0.1
    obs_noise_std: float = 0.01
    psi_noise_std: float = 0.01
    dt_obs: float = 0.2
    warmup_steps: int = 1000
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 250
    spatial_stride: int = 1
    chunk_records: int = 500
    init_pv_std: float = 10.0
    interpolation: str = "bilinear"
    seed: int = 0

    @property
    def n_steps(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def substeps(self) -> int:
        return int(round(self.dt_obs / self.dt))

    def qg_params(self) -> QGParams:
        nu = rescaled_hyperviscosity(self.grid_n, s=self.s) if self.nu is None else self.nu
        topo = standard_topography(self.grid_n) if self.topography == "standard" else None
        if self.topography not in ("standard", "flat"):
            raise ValueError(f"unknown topography {self.topography!r}")
        return QGParams(kd=self.kd, beta=self.beta, U=self.U, kappa=self.kappa, nu=nu, s=self.s,
                        dt=self.dt, grid_n=self.grid_n, topography=topo)


def _to_str(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _stringify(obj):
    if isinstance(obj, dict):
        return {k: _stringify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_stringify(v) for v in obj]
    return _to_str(obj)


def _num(s: str):
    return float(s) if any(c in s for c in ".eEn") else int(s)


@dataclass
class DatasetManifest:
    grid_n: int
    solver_grid_n: int
    layers: int
    n_tracers: int
    n_steps: int
    dt: float
    dt_obs: float
    subsample: int
    spatial_stride: int
    obs_noise_std: float
    psi_noise_std: float
    tracer_sigma: float
    warmup_steps: int
    seed: int
    splits: dict  # name -> [start, stop)
    chunks: list  # {"file", "start", "n_records", "crc32"}
    qg: dict  # kd, beta, U, kappa, nu, s
    topography_crc32: int
    generation: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def record_floats(self) -> int:
        return self.layers * self.grid_n**2 + 2 * self.n_tracers

    def split_range(self, split: str) -> tuple[int, int]:
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}")
        a, b = self.splits[split]
        return int(a), int(b)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(_stringify(d), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        gen = raw.pop("generation", {})
        d = {}
        for k, v in raw.items():
            if k == "splits":
                d[k] = {s: [int(a), int(b)] for s, (a, b) in v.items()}
            elif k == "chunks":
                d[k] = [{"file": c["file"], "start": int(c["start"]), "n_records": int(c["n_records"]),
                         "crc32": int(c["crc32"])} for c in v]
            elif k == "qg":
                d[k] = {kk: _num(vv) for kk, vv in v.items()}
            else:
                d[k] = _num(v)
        d["generation"] = gen
        m = cls(**d)
        if m.format_version != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset format version {m.format_version}")
        return m


def _encode_record(psi: np.ndarray, pos: np.ndarray) -> bytes:
    return np.concatenate([psi.ravel(), pos.ravel()]).astype("<f4").tobytes()


def _write_chunk(path: Path, payload: bytes, n_records: int) -> int:
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, n_records, crc))
        fh.write(payload)
    return crc


def generate(config: GenerationConfig, out_dir, progress=None) -> "Dataset":
    """Integrate the tracer-flow system and write a dataset directory.

    Warm-up steps are discarded.  Observation noise is added to the tracer
    positions and to the stored stream functions.  The output depends only
    on ``config``.
    """
    if config.n_steps <= 0:
        raise DatasetError("empty dataset")
    if config.dt_obs <= 0:
        raise DatasetError("dt_obs must be positive")
    sub = config.substeps
    if sub < 1 or abs(sub * config.dt - config.dt_obs) > 1e-9 * config.dt_obs:
        raise DatasetError("dt_obs must be a positive multiple of dt")
    if config.grid_n % config.spatial_stride:
        raise DatasetError("grid_n must be divisible by spatial_stride")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    params = config.qg_params()
    model = QGModel(params)
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    rng_flow, rng_tr, rng_psi = (np.random.default_rng(s) for s in (seeds[0], seeds[1], seeds[4]))
    tracer_seed = int(seeds[2].generate_state(1)[0])
    obs_seed = int(seeds[3].generate_state(1)[0])

    state = model.random_state(rng_flow, config.init_pv_std)
    tracers = initial_tracers(config.n_tracers, rng_tr, config.tracer_center, config.tracer_spread,
                              config.tracer_sigma, tracer_seed)

    def advance(state, tracers, n):
        for _ in range(n):
            snap = model.snapshot(state)
            tracers = tracer_step(tracers, snap, params.dt, config.interpolation)
            state = model.step(state)
        return state, tracers

    state, tracers = advance(state, tracers, config.warmup_steps)
    stride = config.spatial_stride
    m = config.grid_n // stride

    chunks = []
    payload = []
    chunk_start = 0
    for n in range(config.n_steps):
        psi = model.snapshot(state).psi[:, ::stride, ::stride]
        psi = psi + config.psi_noise_std * rng_psi.standard_normal(psi.shape)
        rec = observe(tracers, config.obs_noise_std, obs_seed, n=n)
        payload.append(_encode_record(psi, rec.positions))
        if len(payload) == config.chunk_records or n == config.n_steps - 1:
            name = f"chunk_{len(chunks):04d}.bin"
            crc = _write_chunk(out / name, b"".join(payload), len(payload))
            chunks.append({"file": name, "start": chunk_start, "n_records": len(payload), "crc32": crc})
            chunk_start = n + 1
            payload = []
        if n < config.n_steps - 1:
            state, tracers = advance(state, tracers, sub)
        if progress is not None:
            progress(n)

    topo = np.zeros((config.grid_n, config.grid_n)) if params.topography is None else params.topography
    topo_bytes = np.ascontiguousarray(topo, "<f8").tobytes()
    (out / "topography.bin").write_bytes(topo_bytes)

    a, b = config.n_train, config.n_train + config.n_val
    manifest = DatasetManifest(
        grid_n=m, solver_grid_n=config.grid_n, layers=2, n_tracers=config.n_tracers, n_steps=config.n_steps,
        dt=config.dt, dt_obs=config.dt_obs, subsample=sub, spatial_stride=stride,
        obs_noise_std=config.obs_noise_std, psi_noise_std=config.psi_noise_std,
        tracer_sigma=config.tracer_sigma, warmup_steps=config.warmup_steps, seed=config.seed,
        splits={"train": [0, a], "val": [a, b], "test": [b, config.n_steps]},
        chunks=chunks,
        qg={"kd": params.kd, "beta": params.beta, "U": params.U, "kappa": params.kappa, "nu": params.nu,
            "s": params.s},
        topography_crc32=zlib.crc32(topo_bytes) & 0xFFFFFFFF,
        generation=_stringify(asdict(config)),
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return Dataset(out)


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, path, verify: bool = True):
        self.path = Path(path)
        mpath = self.path / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no manifest in {self.path}")
        self.manifest = DatasetManifest.from_json(mpath.read_text())
        if verify:
            self.verify()

    def verify(self) -> None:
        """Check every chunk header and CRC against the manifest."""
        fl = self.manifest.record_floats
        for ch in self.manifest.chunks:
            raw = (self.path / ch["file"]).read_bytes()
            magic, version, n_rec, crc = HEADER.unpack_from(raw)
            payload = raw[HEADER.size:]
            if magic != MAGIC or version != FORMAT_VERSION:
                raise DatasetError(f"{ch['file']}: bad header")
            if n_rec != ch["n_records"] or len(payload) != n_rec * fl * 4:
                raise DatasetError(f"{ch['file']}: record length mismatch")
            if (zlib.crc32(payload) & 0xFFFFFFFF) != crc or crc != ch["crc32"]:
                raise DatasetError(f"{ch['file']}: checksum mismatch")
        topo = (self.path / "topography.bin").read_bytes()
        if (zlib.crc32(topo) & 0xFFFFFFFF) != self.manifest.topography_crc32:
            raise DatasetError("topography checksum mismatch")

    def qg_params(self) -> QGParams:
        m = self.manifest
        n = m.solver_grid_n
        topo = np.frombuffer((self.path / "topography.bin").read_bytes(), "<f8").reshape(n, n).copy()
        q = m.qg
        return QGParams(kd=q["kd"], beta=q["beta"], U=q["U"], kappa=q["kappa"], nu=q["nu"], s=int(q["s"]),
                        dt=m.dt, grid_n=n, topography=None if not topo.any() else topo)

    def _read_records(self, start: int, length: int) -> np.ndarray:
        fl = self.manifest.record_floats
        out = np.empty((length, fl), dtype="<f4")
        filled = 0
        for ch in self.manifest.chunks:
            c0, cn = ch["start"], ch["n_records"]
            lo = max(start, c0)
            hi = min(start + length, c0 + cn)
            if hi <= lo:
                continue
            with open(self.path / ch["file"], "rb") as fh:
                fh.seek(HEADER.size + (lo - c0) * fl * 4)
                block = np.frombuffer(fh.read((hi - lo) * fl * 4), dtype="<f4")
            out[lo - start: hi - start] = block.reshape(hi - lo, fl)
            filled += hi - lo
        if filled != length:
            raise DatasetError("dataset chunks do not cover the requested records")
        return out

    def load_window(self, split: str, start: int, length: int) -> dict:
        """``length`` consecutive records starting ``start`` records into ``split``.

        Returns float32 arrays ``psi`` of shape ``(length, 2, n, n)`` and
        ``positions`` of shape ``(length, I, 2)``.
        """
        a, b = self.manifest.split_range(split)
        if start < 0 or length < 0 or a + start + length > b:
            raise DatasetError(f"window [{start}, {start + length}) outside split {split!r} of length {b - a}")
        m = self.manifest
        recs = self._read_records(a + start, length)
        nf = m.layers * m.grid_n**2
        psi = recs[:, :nf].reshape(length, m.layers, m.grid_n, m.grid_n)
        pos = recs[:, nf:].reshape(length, m.n_tracers, 2)
        return {"psi": psi, "positions": pos, "split": split, "start": start}

    def load_split(self, split: str) -> dict:
        a, b = self.manifest.split_range(split)
        return self.load_window(split, 0, b - a)

    def split_length(self, split: str) -> int:
        a, b = self.manifest.split_range(split)
        return b - a


def subsample_tracers(record: dict, k: int, seed) -> dict:
    """Keep a random subset of ``k`` tracers, the same subset at every step."""
    pos = record["positions"]
    n_tr = pos.shape[-2]
    if k > n_tr:
        raise DatasetError(f"cannot draw {k} tracers from {n_tr}")
    idx = np.random.default_rng(seed).choice(n_tr, size=k, replace=False)
    out = dict(record)
    out["positions"] = pos[..., idx, :]
    out["tracer_index"] = idx
    return out
