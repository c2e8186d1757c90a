"""Command-line entry point: ``opath <subcommand>``.

Each subcommand reads an optional JSON config (``--config``) and lets flags
override it. Outputs are CSV/JSON files in ``--out``; with ``--plot`` PNG
figures are written next to them.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 numerical or regime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .environment import EnvironmentError_, EnvSeed
from .harness import ExperimentManifest
from .kernel import (Kernel, KernelError, conv_power_at_zero, describe, kernel_from_spec,
                     p_max, return_sum)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field '{field_name}': {message}")
        self.field = field_name


@dataclass
class Config:
    family: str = "nn"
    d: int = 1
    L: int | None = None
    profile: str | None = None
    p: list[float] = field(default_factory=lambda: [1.0])
    N: int | None = None
    N0: int | None = None
    replicas: int = 1000
    seed: int = 1
    stream: int = 0
    out: str = "opath-out"
    mode: str = "auto"
    min_survivors: int | None = None
    rel_tol: float = 1e-3
    horizon: int = 2000
    workers: int | None = None
    plot: bool = False

    def kernel(self) -> Kernel:
        try:
            return kernel_from_spec(self.family, self.d, self.L, self.profile)
        except KernelError as exc:
            raise ConfigError("family" if "family" in str(exc) else "L", str(exc)) from None

    def env0(self) -> EnvSeed:
        return EnvSeed(self.seed, self.stream)


FIELDS = {f for f in Config.__dataclass_fields__}


def _parse_seed(v) -> int:
    if isinstance(v, int):
        return v
    s = str(v).strip().lower()
    return int(s, 16) if s.startswith("0x") else int(s)


def _parse_p(v) -> list[float]:
    if isinstance(v, (int, float)):
        return [float(v)]
    if isinstance(v, list):
        return [float(x) for x in v]
    out = []
    for part in str(v).split(","):
        part = part.strip()
        if ":" in part:
            lo, hi, n = part.split(":")
            out += list(np.linspace(float(lo), float(hi), int(n)))
        elif part:
            out.append(float(Fraction(part)))
    return out


def build_config(args: argparse.Namespace) -> Config:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {args.config}: {exc}") from None
        if "kernel" in raw:
            raw.update(raw.pop("kernel"))
        unknown = set(raw) - FIELDS
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field")
    for name in FIELDS:
        v = getattr(args, name, None)
        if v is not None and v is not False:
            raw[name] = v
    cfg = Config()
    for name, v in raw.items():
        try:
            if name == "p":
                v = _parse_p(v)
            elif name == "seed":
                v = _parse_seed(v)
            elif name in ("d", "L", "N", "N0", "replicas", "stream", "min_survivors",
                          "horizon", "workers") and v is not None:
                v = int(v)
            elif name == "rel_tol":
                v = float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(name, f"cannot parse {v!r}: {exc}") from None
        setattr(cfg, name, v)
    return cfg


def _validate(cfg: Config, need: tuple[str, ...]) -> Kernel:
    if cfg.d < 1:
        raise ConfigError("d", "must be >= 1")
    k = cfg.kernel()
    pm = float(p_max(k))
    for name in need:
        v = getattr(cfg, name)
        if v is None:
            raise ConfigError(name, "required")
        if name in ("N", "N0") and v < 1:
            raise ConfigError(name, "must be >= 1")
        if name == "replicas" and v < 1:
            raise ConfigError(name, "must be >= 1")
        if name == "p":
            if not v:
                raise ConfigError("p", "empty p grid")
            for p in v:
                if not 0 < p <= pm:
                    raise ConfigError("p", f"{p} outside (0, p_max = {pm:g}]")
    if cfg.mode not in ("auto", "exact", "log"):
        raise ConfigError("mode", "must be auto, exact or log")
    if not 0 <= cfg.seed < 1 << 128:
        raise ConfigError("seed", "must fit in 128 bits")
    return k


def _p_value(p: float, k: Kernel):
    """Use the exact p_max when the requested p equals it, so all edges open."""
    pm = p_max(k)
    return pm if math.isclose(p, float(pm), rel_tol=0, abs_tol=1e-15) else p


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: Config) -> list[Path]:
    from .pathcount import growth_rate_estimate

    k = _validate(cfg, ("p", "N", "replicas"))
    out = Path(cfg.out)
    manifest = ExperimentManifest("simulate", describe(k), cfg.p, cfg.replicas,
                                  f"{cfg.seed:032x}", cfg.stream, N=cfg.N,
                                  extra={"mode": cfg.mode, "min_survivors": cfg.min_survivors})
    buf = io.StringIO()
    buf.write(manifest.csv_header())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "N", "replica", "logZ", "survived"])
    summary = []
    for p in cfg.p:
        g = growth_rate_estimate(_p_value(p, k), k, cfg.N, cfg.replicas, cfg.env0(), cfg.mode,
                                 cfg.min_survivors, cfg.workers)
        for i, s in enumerate(g.samples):
            w.writerow([_fmt(p), cfg.N, i, _fmt(s.logZ), int(s.survived)])
        summary.append({
            "p": p, "log_p": math.log(p),
            "estimate": g.estimate.to_json() if g.estimate else None,
            "half_horizon": g.half_horizon.to_json() if g.half_horizon else None,
            "drift": g.drift, "survival_fraction": g.survival_fraction,
            "replicas": g.replicas, "no_survivor": g.no_survivor,
        })
    files = [out / "simulate.csv", out / "simulate.json"]
    _write(files[0], buf.getvalue())
    _write(files[1], _dump({"manifest": manifest.to_json(), "manifest_sha256": manifest.sha256(),
                            "seed": cfg.env0().to_json(), "summary": summary}))
    if cfg.plot:
        from .plotting import plot_growth
        files.append(plot_growth(summary, out / "simulate.png"))
    return files


def cmd_criterion(cfg: Config) -> list[Path]:
    from .sizebias import criterion_estimate

    k = _validate(cfg, ("p", "N0", "replicas"))
    if len(cfg.p) != 1:
        raise ConfigError("p", "criterion takes a single p")
    p = _p_value(cfg.p[0], k)
    out = Path(cfg.out)
    manifest = ExperimentManifest("criterion", describe(k), cfg.p[0], cfg.replicas,
                                  f"{cfg.seed:032x}", cfg.stream, N0=cfg.N0,
                                  extra={"mode": cfg.mode})
    try:
        rep = criterion_estimate(k, p, cfg.N0, cfg.replicas, cfg.env0(), cfg.mode, cfg.workers)
    except ValueError as exc:
        if "replicas" in str(exc):
            raise ConfigError("replicas", str(exc)) from None
        raise
    buf = io.StringIO()
    buf.write(manifest.csv_header())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replica", "N0", "p", "logZbar"])
    for i, v in enumerate(rep.log_zbar):
        w.writerow([i, cfg.N0, _fmt(cfg.p[0]), _fmt(v)])
    files = [out / "criterion.csv", out / "criterion.json"]
    _write(files[0], buf.getvalue())
    _write(files[1], _dump({"manifest": manifest.to_json(), "manifest_sha256": manifest.sha256(),
                            "report": rep.to_json()}))
    if cfg.plot:
        from .plotting import plot_criterion
        files.append(plot_criterion(rep.log_zbar, rep.threshold, rep.mean_logZbar, rep.ci95,
                                    out / "criterion.png"))
    return files


def cmd_bounds(cfg: Config) -> list[Path]:
    from .bounds import all_bounds

    k = _validate(cfg, ())
    out = Path(cfg.out)
    bounds = all_bounds(k, cfg.rel_tol, cfg.horizon)
    doc = {"kernel": describe(k), "rel_tol": cfg.rel_tol, "horizon": cfg.horizon,
           "bounds": bounds}
    files = [out / "bounds.json"]
    _write(files[0], _dump(doc))
    if cfg.plot:
        from .plotting import plot_bounds
        png = plot_bounds(bounds, out / "bounds.png")
        if png is not None:
            files.append(png)
    if bounds and all("error" in b for b in bounds.values()):
        raise KernelError("no bound could be computed for this kernel")
    return files


# verification suites -------------------------------------------------------

def _suite_oracle() -> tuple[bool, str]:
    from .environment import materialize
    from .kernel import make_nn_kernel
    from .pathcount import count_paths, enumerate_oracle, exhaustive_count_check

    checked = bad = 0
    for d, N in ((1, 1), (1, 2), (1, 3), (2, 2)):
        c, m = exhaustive_count_check(make_nn_kernel(d), N)
        checked, bad = checked + c, bad + m
    # seeded environments: vectorised hash against the scalar hash via enumeration
    k = make_nn_kernel(2)
    for s in range(40):
        env = EnvSeed(0xC0FFEE, s)
        z, _ = count_paths(env, 2, k, 4, "exact")
        if z != enumerate_oracle(materialize(env, 2, k, 4), k, 4):
            bad += 1
        checked += 1
    return bad == 0, f"{checked} environments, {bad} mismatches"


def _suite_identity() -> tuple[bool, str]:
    from .kernel import make_nn_kernel
    from .sizebias import TEST_FUNCTIONS, sizebias_identity_check

    k = make_nn_kernel(1)
    worst = Fraction(0)
    for N in (1, 2, 3):
        for F in TEST_FUNCTIONS:
            worst = max(worst, abs(sizebias_identity_check(k, N, F)))
    return worst == 0, f"max |discrepancy| = {worst}"


def _suite_martingale() -> tuple[bool, str]:
    from .kernel import make_nn_kernel
    from .pathcount import martingale_defects

    n = bad = 0
    for N in (0, 1, 2):
        for p in (Fraction(1), Fraction(3, 2)):
            defects = martingale_defects(make_nn_kernel(1), N, p)
            n += len(defects)
            bad += sum(1 for x in defects if x != 0)
    return bad == 0, f"{n} conditional means, {bad} nonzero defects"


def _suite_supermultiplicativity() -> tuple[bool, str]:
    from .kernel import make_nn_kernel
    from .sizebias import supermultiplicativity_check

    res = supermultiplicativity_check(make_nn_kernel(2), 1, 6, 6, EnvSeed(0xBEEF), 500)
    return res.violations == 0, f"500 replicas, {res.violations} violations"


def _suite_bridges() -> tuple[bool, str]:
    from .kernel import make_nn_kernel
    from .sizebias import bridge_equivalence_check

    n = bad = 0
    for N in (1, 2, 3):
        c, m = bridge_equivalence_check(make_nn_kernel(1), N)
        n, bad = n + c, bad + m
    return bad == 0, f"{n} (environment, spine) pairs, {bad} mismatches"


SUITES: dict[str, list[tuple[str, Callable[[], tuple[bool, str]]]]] = {
    "oracle": [("oracle", _suite_oracle)],
    "identity": [("identity", _suite_identity)],
    "invariants": [("martingale", _suite_martingale),
                   ("supermultiplicativity", _suite_supermultiplicativity),
                   ("bridges", _suite_bridges)],
}


def cmd_verify(scope: str = "all", corrupt: bool = False, stream=None) -> int:
    from .environment import corrupted_uniforms
    import contextlib

    stream = stream or sys.stdout
    names = list(SUITES) if scope == "all" else [scope]
    ok_all = True
    ctx = corrupted_uniforms() if corrupt else contextlib.nullcontext()
    with ctx:
        for name in names:
            for suite, fn in SUITES[name]:
                t0 = time.perf_counter()
                ok, detail = fn()
                ok_all &= ok
                print(f"{'PASS' if ok else 'FAIL'}  {suite:<22} {detail}  "
                      f"({time.perf_counter() - t0:.1f}s)", file=stream)
    return EXIT_OK if ok_all else EXIT_VERIFY


def cmd_convolve(cfg: Config, power: int | None, do_sum: bool, exact: bool) -> dict:
    k = _validate(cfg, ())
    doc: dict = {"kernel": describe(k), "support_size": len(k), "p_max": str(p_max(k))}
    if power is not None:
        if power < 0:
            raise ConfigError("power", "must be >= 0")
        v = conv_power_at_zero(k, power, exact=exact if exact else None)
        doc["power"] = power
        doc["return_probability"] = str(v) if isinstance(v, Fraction) else float(v)
    if do_sum:
        rs = return_sum(k, cfg.rel_tol)
        doc["return_sum"] = {"partial": rs.value, "truncation_k": rs.truncation_k,
                             "tail_estimate": rs.tail_estimate, "total": rs.total,
                             "fit_residual": rs.fit_residual}
    return doc


# ---------------------------------------------------------------------------
# argument parsing

def _kernel_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("kernel")
    g.add_argument("--family", choices=["nn", "box", "profile"])
    g.add_argument("--d", type=int)
    g.add_argument("--L", type=int)
    g.add_argument("--profile", help="profile name for --family profile")


def _common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--out", help="output directory (default opath-out)")
    p.add_argument("--workers", type=int, help="worker processes (capped by OPATH_THREADS)")
    p.add_argument("--plot", action="store_true", help="also write PNG figures")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opath",
                                 description="Oriented percolation path counting toolkit.")
    ap.add_argument("--version", action="version", version=f"opath {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="Monte Carlo growth rate of Z_N")
    _common_args(sp)
    _kernel_args(sp)
    sp.add_argument("--p", help="value, comma list, or lo:hi:n grid")
    sp.add_argument("--N", type=int)
    sp.add_argument("--replicas", type=int)
    sp.add_argument("--seed", help="base seed, decimal or 0x-hex")
    sp.add_argument("--stream", type=int)
    sp.add_argument("--mode", choices=["auto", "exact", "log"])
    sp.add_argument("--min-survivors", dest="min_survivors", type=int)

    sc = sub.add_parser("criterion", help="finite-volume criterion E log Zbar_N0 > N0 log p")
    _common_args(sc)
    _kernel_args(sc)
    sc.add_argument("--p")
    sc.add_argument("--N0", type=int)
    sc.add_argument("--replicas", type=int)
    sc.add_argument("--seed")
    sc.add_argument("--stream", type=int)
    sc.add_argument("--mode", choices=["auto", "exact", "log"])

    sb = sub.add_parser("bounds", help="closed-form threshold bounds as JSON")
    _common_args(sb)
    _kernel_args(sb)
    sb.add_argument("--rel-tol", dest="rel_tol", type=float)
    sb.add_argument("--horizon", type=int)

    sv = sub.add_parser("verify", help="exhaustive verification suites")
    sv.add_argument("--scope", choices=["all", "oracle", "identity", "invariants"],
                    default="all")
    sv.add_argument("--corrupt-uniforms", action="store_true", help=argparse.SUPPRESS)

    sk = sub.add_parser("convolve", help="kernel utilities")
    sk.add_argument("--config")
    _kernel_args(sk)
    sk.add_argument("--power", type=int, help="print f^{*m}(0) for this m")
    sk.add_argument("--exact", action="store_true", help="rational arithmetic")
    sk.add_argument("--return-sum", dest="return_sum", action="store_true")
    sk.add_argument("--rel-tol", dest="rel_tol", type=float)
    sk.add_argument("--json-kernel", dest="json_kernel", action="store_true",
                    help="print the kernel's JSON serialisation")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args.scope, args.corrupt_uniforms)
        cfg = build_config(args)
        if args.command == "convolve":
            doc = cmd_convolve(cfg, args.power, args.return_sum, args.exact)
            if args.json_kernel:
                doc["entries"] = cfg.kernel().to_json()
            print(_dump(doc), end="")
            return EXIT_OK
        cmd = {"simulate": cmd_simulate, "criterion": cmd_criterion, "bounds": cmd_bounds}
        for path in cmd[args.command](cfg):
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"opath: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KernelError, EnvironmentError_, ArithmeticError, OverflowError) as exc:
        print(f"opath: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
