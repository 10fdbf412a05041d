"""Command-line entry points, run configuration and checkpoint files.

Commands: ``mera-optimize``, ``tnr-run``, ``scaling-dims`` and ``oracle``.
Settings come from an optional ``key = value`` file (``--config``) and are
overridden by command-line flags.  Every output lands in ``--out``.

Checkpoint layout (all integers little endian)::

    b"ISOT" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | float64 data )
    8-byte BLAKE2b digest of everything before it
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import math
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import mera, tnr
from .tensor import NumericalFailure

MAGIC = b"ISOT"
VERSION = 1
COMMANDS = ("mera-optimize", "tnr-run", "scaling-dims", "oracle")
CLI_METHODS = ("ev", "svd", "qr", "cayley", "cayley-smw", "cayley-iter", "mixed", "soft")


class ConfigError(ValueError):
    """Invalid configuration, with the offending line or field."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint file."""


# checkpoints

def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_checkpoint(tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", version, len(tensors)))
    for name, t in tensors.items():
        t = np.asarray(t, dtype=np.float64)
        if not np.all(np.isfinite(t)):
            raise CheckpointError(f"tensor {name!r} has non-finite entries")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t).astype("<f8").tobytes())
    body = buf.getvalue()
    return body + _digest(body)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    body, digest = data[:-8], data[-8:]
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if _digest(body) != digest:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(body):
                raise CheckpointError(f"tensor {name!r}: dims {dims} exceed the file")
            out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(dims).copy()
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# configuration

@dataclass
class RunConfig:
    command: str = "mera-optimize"
    model: str = "tfi"
    lam: float = 1.0
    chi: int = 6
    chi_schedule: list = field(default_factory=lambda: [(0, 4), (200, 6)])
    n: int = 2
    method: str = "mixed"
    eta: float = 1.0
    beta_m: float = 0.9
    beta_v: float = 0.99
    alpha: float = 4.0
    eps: float = 1e-8
    decay_period: int = 10
    decay_factor: float = 0.999
    cadence: int = 5
    soft_eta: float = 1e-2
    soft_eta_final: float = 1e-4
    lam_min: float = 1.0
    lam_max: float = 100.0
    lam_small: float = 1e-2
    lam_threshold: float = 1e-2
    lam_warmup: int = 20
    n_scale_invariant: int = 4
    z2: bool = True  # conserve spin-flip parity in MERA tensors
    beta: float = tnr.BETA_C
    beta_sweep: tuple | None = None  # (start, stop, step)
    L: int = 64
    iters: int = 200
    seed: int | None = None
    reset_iter: int = 700
    reset_threshold: float = 1.5e-3
    max_resets: int = 10
    out: str = "out"
    checkpoint: str | None = None  # input for scaling-dims
    count: int = 4
    scaling_sites: int = 1  # MERA scaling map: 1 (middle leg) or 2 (two-site)
    n_w: int = 2
    timing: bool = False
    jobs: int = 1

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        if self.command not in COMMANDS:
            bad("command", f"must be one of {COMMANDS}")
        if self.seed is None:
            bad("seed", "a seed is required")
        if self.model not in mera.MODELS:
            bad("model", f"must be one of {mera.MODELS}")
        if self.method not in CLI_METHODS:
            bad("method", f"must be one of {CLI_METHODS}")
        for name in ("chi", "n_scale_invariant", "cadence", "count", "n_w", "jobs"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.scaling_sites not in (1, 2):
            bad("scaling_sites", "must be 1 or 2")
        for name in ("n", "iters", "max_resets", "decay_period", "lam_warmup"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not 0 <= self.beta_m <= 1:
            bad("beta_m", "must lie in [0, 1]")
        if not 0 <= self.beta_v < 1:
            bad("beta_v", "must lie in [0, 1)")
        for name in ("eta", "alpha", "eps", "soft_eta", "soft_eta_final", "decay_factor"):
            if not getattr(self, name) > 0:
                bad(name, "must be positive")
        if self.lam_min > self.lam_max:
            bad("lam_min", "must not exceed lam_max")
        if self.beta < 0:
            bad("beta", "must be >= 0")
        if self.beta_sweep is not None:
            start, stop, step = self.beta_sweep
            if step <= 0 or start < 0 or stop < start:
                bad("beta_sweep", "need 0 <= start <= stop and step > 0")
        if self.command == "tnr-run":
            k = int(round(math.log2(self.L))) if self.L > 0 else 0
            if self.L != 2**k or k < 2:
                bad("L", "must be a power of two >= 4")
        chis = [c for _, c in self.chi_schedule]
        if any(b < a for a, b in zip(chis, chis[1:])) or any(c < 1 for c in chis):
            bad("chi_schedule", "bond dimensions must be positive and nondecreasing")
        if self.command == "scaling-dims" and not self.checkpoint:
            bad("checkpoint", "scaling-dims needs --checkpoint")

    def betas(self) -> list[float]:
        if self.beta_sweep is None:
            return [self.beta]
        start, stop, step = self.beta_sweep
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, text: str):
    text = text.strip()
    if name == "chi_schedule":
        out = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            it, _, chi = part.partition(":")
            out.append((int(it), int(chi)))
        return out
    if name == "beta_sweep":
        if text.lower() in ("", "none"):
            return None
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError("expected start,stop,step")
        return tuple(parts)
    if name in ("seed", "checkpoint") and text.lower() == "none":
        return None
    default = _FIELDS[name].default
    if name == "seed":
        return int(text)
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(name: str, value) -> str:
    if value is None:
        return "none"
    if name == "chi_schedule":
        return ",".join(f"{i}:{c}" for i, c in value)
    if name == "beta_sweep":
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Read ``key = value`` lines (``#`` starts a comment)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from exc
    return dataclasses.replace(base or RunConfig(), **values)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {_format_value(f.name, getattr(cfg, f.name))}\n"
                   for f in fields(RunConfig))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isotn", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value settings file")
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "lam":
            p.add_argument(flag, "--lambda", dest=f.name, default=None)
        elif f.name == "L":
            p.add_argument("--L", dest="L", default=None)
        elif f.name == "beta_sweep":
            p.add_argument(flag, "--sweep", dest=f.name, default=None,
                           help="start,stop,step; one run per beta with seed + index")
        elif isinstance(f.default, bool) and f.default:
            p.add_argument("--no-" + flag[2:], dest=f.name, action="store_const", const="false",
                           default=None)
        elif isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None)
    return p


def config_from_args(argv: list[str]) -> RunConfig:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(command=args.command)
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), cfg)
        cfg.command = args.command
    updates = {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if f.name == "command" or raw is None:
            continue
        try:
            updates[f.name] = _parse_value(f.name, raw)
        except ValueError as exc:
            raise ConfigError(f"--{f.name.replace('_', '-')}: {exc}") from exc
    cfg = dataclasses.replace(cfg, **updates)
    cfg.validate()
    return cfg


# commands

def _out_path(cfg: RunConfig, name: str) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def mera_config(cfg: RunConfig, seed: int | None = None) -> mera.MeraConfig:
    return mera.MeraConfig(
        model=cfg.model, lam=cfg.lam, chi=cfg.chi, n=cfg.n, method=cfg.method.replace("-", "_"),
        iters=cfg.iters, seed=cfg.seed if seed is None else seed,
        chi_schedule=tuple(cfg.chi_schedule), n_scale_invariant=cfg.n_scale_invariant,
        eta=cfg.eta, beta_m=cfg.beta_m, alpha=cfg.alpha, eps=cfg.eps,
        decay_period=cfg.decay_period, decay_factor=cfg.decay_factor, cadence=cfg.cadence,
        reset_iter=cfg.reset_iter, reset_threshold=cfg.reset_threshold,
        max_resets=cfg.max_resets, soft_eta=cfg.soft_eta,
        soft_eta_final=cfg.soft_eta_final, beta_v=cfg.beta_v,
        lam_min=cfg.lam_min, lam_max=cfg.lam_max, lam_small=cfg.lam_small,
        lam_threshold=cfg.lam_threshold, lam_warmup=cfg.lam_warmup, z2=cfg.z2,
        timing=cfg.timing)


MERA_COLUMNS = ("iter", "chi", "method", "energy", "energy_error", "n_resets", "wall_ms")
TNR_COLUMNS = ("layer", "chi", "iters", "delta_final", "a_norm")
SUMMARY_COLUMNS = ("beta", "lnZ_per_site", "onsager_lnZ", "abs_err")


def cmd_mera(cfg: RunConfig) -> int:
    mcfg = mera_config(cfg)
    try:
        mcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    log_path = _out_path(cfg, "mera_log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MERA_COLUMNS)

        def emit(rec):
            writer.writerow([_fmt(getattr(rec, c)) for c in MERA_COLUMNS])

        try:
            result = mera.optimize(mcfg, callback=emit)
        except NumericalFailure as exc:
            fh.flush()
            print(f"numerical failure: {exc}", file=sys.stderr)
            return 3
    save_checkpoint(_out_path(cfg, "mera.isot"), result.state.tensors())
    dims = mera.scaling_dimensions(result.state, cfg.count, cfg.scaling_sites)
    _write_dims(cfg, dims)
    if result.aborted:
        print(f"aborted after {result.n_resets} resets", file=sys.stderr)
        return 4
    last = result.log[-1] if result.log else None
    if last is not None:
        print(f"energy {last.energy!r} error {last.energy_error!r} resets {result.n_resets}")
    return 0


def _write_dims(cfg: RunConfig, dims) -> None:
    rows = [{"alpha": i, "delta": float(d)} for i, d in enumerate(dims)]
    _out_path(cfg, "scaling_dims.json").write_text(json.dumps(rows, indent=1) + "\n")


def _tnr_one(args):
    cfg, beta, seed = args
    method = cfg.method.replace("-", "_")
    if method not in tnr.METHODS:
        raise ConfigError(f"method: {cfg.method!r} is not available for tnr-run")
    return tnr.run_rg(beta, cfg.L, cfg.chi, cfg.iters, method, seed, cfg.eta)


def cmd_tnr(cfg: RunConfig) -> int:
    betas = cfg.betas()
    jobs = [(cfg, b, cfg.seed + i) for i, b in enumerate(betas)]
    try:
        if cfg.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                records = list(pool.map(_tnr_one, jobs))
        else:
            records = [_tnr_one(j) for j in jobs]
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    with open(_out_path(cfg, "tnr_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("beta",) + TNR_COLUMNS)
        for rec in records:
            # layer 0 is the bare Boltzmann tensor
            w.writerow([_fmt(rec.beta), 0, 2, 0, "", _fmt(rec.norms[0])])
            for i, layer in enumerate(rec.layers, start=1):
                w.writerow([_fmt(rec.beta), i, layer.w.shape[-1], cfg.iters,
                            _fmt(layer.delta), _fmt(layer.a_norm)])
    with open(_out_path(cfg, "tnr_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rec in records:
            exact = tnr.onsager_lnz(rec.beta)
            w.writerow([_fmt(rec.beta), _fmt(rec.lnZ_per_site), _fmt(exact),
                        _fmt(abs(rec.lnZ_per_site - exact))])
            print(f"beta {rec.beta!r} lnZ/site {rec.lnZ_per_site!r} onsager {exact!r}")
    tensors = {}
    for rec in records:
        tag = "" if len(records) == 1 else f"_{rec.beta!r}"
        tensors[f"A_top{tag}"] = rec.a_top
    save_checkpoint(_out_path(cfg, "tnr.isot"), tensors)
    return 0


def cmd_scaling_dims(cfg: RunConfig) -> int:
    tensors = load_checkpoint(cfg.checkpoint)
    if "w1" in tensors:
        dims = mera.scaling_dimensions(mera.MeraState.from_tensors(tensors), cfg.count,
                                        cfg.scaling_sites)
    else:
        key = sorted(k for k in tensors if k.startswith("A_top"))[0]
        dims = tnr.transfer_matrix_scaling_dims(tensors[key], cfg.n_w, cfg.count)
    _write_dims(cfg, dims)
    print(json.dumps([round(d, 6) for d in dims]))
    return 0


def cmd_oracle(cfg: RunConfig) -> int:
    with open(_out_path(cfg, "oracle.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("beta", "L", "onsager_lnZ", "finite_lnZ", "onsager_energy"))
        for b in cfg.betas():
            finite = (tnr.exact_enumeration_lnz(cfg.L, b) if cfg.L * cfg.L <= 36
                      else tnr.kaufman_lnz(cfg.L, b))
            w.writerow([_fmt(b), cfg.L, _fmt(tnr.onsager_lnz(b)), _fmt(finite),
                        _fmt(tnr.onsager_energy(b) if b > 0 else 0.0)])
    e = mera.exact_energy(cfg.model, cfg.lam)
    print(f"{cfg.model} lambda={cfg.lam!r}: exact energy per site {e!r}")
    return 0


DISPATCH = {"mera-optimize": cmd_mera, "tnr-run": cmd_tnr,
            "scaling-dims": cmd_scaling_dims, "oracle": cmd_oracle}


def run(cfg: RunConfig) -> int:
    cfg.validate()
    _out_path(cfg, "config.txt").write_text(serialize_config(cfg))
    return DISPATCH[cfg.command](cfg)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = config_from_args(argv)
        return run(cfg)
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
