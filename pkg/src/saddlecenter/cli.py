"""Batch front-end: ``saddlecenter {normalize,portrait,return-map,hunt,check}``.

Every run writes into a flat output directory with a ``manifest.json`` index.
Exit status: 0 on success, 2 on configuration errors, 3 on invariant failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .annulus import (BAND_C1, admissible_alpha, check_kam_hypotheses, curve_area, hunt_homoclinic,
                      sample_twist_profile, unstable_intersection_curve, write_curve_csv)
from .birkhoff_nf import (ModelConfig, lambda_for_epsilon, normal_form_for, scale_and_reparametrize,
                          three_parameter_model)
from .dynamics import SaddleSystem, analytic_homoclinic, restricted_jacobian, write_return_csv
from .moser_local import conjugacy_error, local_normalization, sample_ball
from .poly_core import ContractError

log = logging.getLogger("saddlecenter")

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class PipelineConfig:
    max_degree: int = 10
    normalization: str = "Q"


@dataclass
class NumericsConfig:
    delta: float = 0.05
    epsilons: list = field(default_factory=lambda: [0.35])
    mus: list = field(default_factory=lambda: [0.0])
    nu_hat: float | None = None
    alphas: list | None = None
    n_alpha: int = 5
    n_samples: int = 32
    step: float = 0.01
    max_loops: int = 5
    tol: float = 1e-10
    lambdas: list | None = None


@dataclass
class PortraitConfig:
    alphas: list = field(default_factory=lambda: [-0.01, 0.0, 0.01])
    q_min: float = -1.0
    q_max: float = 2.5
    n_q: int = 401


@dataclass
class RunConfig:
    model: ModelConfig
    pipeline: PipelineConfig
    numerics: NumericsConfig
    portrait: PortraitConfig
    output: str = "run"

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "pipeline": asdict(self.pipeline), "numerics": asdict(self.numerics),
                "portrait": asdict(self.portrait), "output": self.output}


def _block(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = set(cls.__dataclass_fields__)
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' block: {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON configuration."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    for key in data:
        if key not in ("model", "pipeline", "numerics", "portrait", "output"):
            raise ConfigError(f"unknown key '{key}'")
    try:
        model = ModelConfig.from_dict(data.get("model", {}))
    except ContractError as exc:
        raise ConfigError(f"model: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"bad 'model' block: {exc}") from exc
    cfg = RunConfig(model, _block(PipelineConfig, data.get("pipeline"), "pipeline"),
                    _block(NumericsConfig, data.get("numerics"), "numerics"),
                    _block(PortraitConfig, data.get("portrait"), "portrait"), str(data.get("output", "run")))
    num = cfg.numerics
    if not num.epsilons or any(not (isinstance(e, (int, float)) and e > 0) for e in num.epsilons):
        raise ConfigError("'numerics.epsilons' must be a non-empty list of positive numbers")
    if any(not (isinstance(m, (int, float)) and m >= 0) for m in num.mus):
        raise ConfigError("'numerics.mus' must be non-negative")
    if not num.delta > 0:
        raise ConfigError("'numerics.delta' must be positive")
    if cfg.pipeline.normalization not in ("Q", "moser"):
        raise ConfigError("'pipeline.normalization' must be 'Q' or 'moser'")
    if cfg.pipeline.max_degree < 4:
        raise ConfigError("'pipeline.max_degree' must be at least 4")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        keys = re.findall(r'"([^"\\]+)"\s*:', text[: exc.pos])
        near = f" after key '{keys[-1]}'" if keys else ""
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}{near}: {exc.msg}") from exc
    return parse_config(data)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    return str(o)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


# ---------------------------------------------------------------------------------------
# shared construction
# ---------------------------------------------------------------------------------------


def build_system(cfg: RunConfig, eps: float, mu: float, nu_hat: float | None = None) -> SaddleSystem:
    """Scaled three-parameter model and local chart at ``(eps, nu_hat, mu)``."""
    float_cfg = ModelConfig(**{**cfg.model.__dict__, "mode": "float"})
    lam = lambda_for_epsilon(float_cfg, eps)
    scaled = scale_and_reparametrize(normal_form_for(float_cfg, lam), lam, c3=cfg.model.c3, rho0=cfg.model.rho0)
    nh = cfg.numerics.nu_hat if nu_hat is None else nu_hat
    model = three_parameter_model(scaled, eps**2 if nh is None else nh, mu, cfg.model.N0)
    chart = local_normalization(model, cfg.pipeline.max_degree, normalization=cfg.pipeline.normalization)
    sys_ = SaddleSystem(model, chart, cfg.numerics.delta, cfg.numerics.step)
    sys_.checks = smallness_checks(sys_)
    return sys_


def smallness_checks(sys_: SaddleSystem) -> dict:
    """The delta-smallness conditions, evaluated and logged rather than assumed."""
    d = sys_.delta
    ch = {"chart_radius": sys_.chart.radius, "delta_inside_chart": bool(2 * d < sys_.chart.radius),
          "band_inside_energy_window": bool(sys_.model.Omega / 2 * 0.07 * d**2 * sys_.model.eps**2 <= d**2),
          "cutoff_flat_beyond_section": bool(d <= sys_.model.rho0 / 2)}
    for k, v in ch.items():
        if v is False:
            log.warning("smallness condition %s fails at eps=%s", k, sys_.model.eps)
    return ch


def alpha_grid(cfg: RunConfig, sys_: SaddleSystem) -> list[float]:
    if cfg.numerics.alphas is not None:
        return [float(a) for a in cfg.numerics.alphas]
    top = admissible_alpha(sys_, BAND_C1)
    k = cfg.numerics.n_alpha
    return [top * (i + 1) / k for i in range(k)]


def _map(fn, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def _tag(**kw) -> str:
    return "_".join(f"{k}{v:g}" if isinstance(v, float) else f"{k}{v}" for k, v in kw.items())


# ---------------------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------------------


def cmd_normalize(cfg: RunConfig, out: Path, seed: int = 0, jobs: int = 1) -> dict:
    """Normal form bundle (``N``, generators, remainder) per parameter value."""
    exact = cfg.model.mode == "rational"
    if cfg.numerics.lambdas is not None:
        lams = [float(v) for v in cfg.numerics.lambdas]
    elif exact:
        lams = [0.0]
    else:
        lams = [lambda_for_epsilon(cfg.model, e) for e in cfg.numerics.epsilons]
    files, results = [], []
    rng = np.random.default_rng(seed)
    for i, lam in enumerate(lams):
        nf = normal_form_for(cfg.model, lam)
        tag = f"nf{i}"
        paths = [out / f"{tag}_N.txt", out / f"{tag}_remainder.txt"]
        paths[0].write_text(nf.N.to_text())
        paths[1].write_text(nf.remainder.to_text())
        for k, S in enumerate(nf.S_list):
            p = out / f"{tag}_S{k}.txt"
            p.write_text(S.to_text())
            paths.append(p)
        entry = {"index": i, "lambda": lam, "degree": nf.degree,
                 "residuals": {k: float(v) for k, v in nf.residuals.items()},
                 "n_generators": len(nf.S_list), "files": [p.name for p in paths]}
        if not exact:
            pts = rng.normal(size=(20, 4))
            pts *= 0.02 / np.linalg.norm(pts, axis=1, keepdims=True)
            entry["symplecticity_error"] = nf.transform.symplecticity_error(pts)
            if lam > 0:
                sc = scale_and_reparametrize(nf, lam, c3=cfg.model.c3, rho0=cfg.model.rho0)
                entry["scaled"] = {"eps": sc.eps, "omega": sc.omega, "c2": sc.c2, "c3": sc.c3,
                                   "scale_a": sc.scale_a, "cutoff_radius": sc.cutoff_radius}
        files += [p.name for p in paths]
        results.append(entry)
    return {"files": files, "results": results}


def portrait_level_sets(alphas, c3: float, q_min: float, q_max: float, n_q: int):
    """Rows ``(alpha, branch, q, p, closed)`` of ``p^2 = q^2 - 2 c3 q^3 + alpha``.

    ``closed`` is 1 when the cubic has three real roots, i.e. when the level set
    has a bounded component inside the homoclinic loop.
    """
    rows = []
    q = np.linspace(q_min, q_max, n_q)
    for a in alphas:
        # discriminant of -2 c3 q^3 + q^2 + a
        disc = -4 * a - 27 * (2 * c3) ** 2 * a**2
        closed = int(disc > 0)
        f = q**2 - 2 * c3 * q**3 + a
        ok = f >= 0
        for branch in (1, -1):
            for qq, ff in zip(q[ok], f[ok]):
                rows.append((float(a), branch, float(qq), float(branch * math.sqrt(ff)), closed))
    return rows


def cmd_portrait(cfg: RunConfig, out: Path, seed: int = 0, jobs: int = 1) -> dict:
    """Level sets of the degree-3 normal form and the analytic homoclinic."""
    pc = cfg.portrait
    c3 = cfg.model.c3
    rows = portrait_level_sets(pc.alphas, c3, pc.q_min, pc.q_max, pc.n_q)
    lv = out / "portrait_levels.csv"
    if rows:
        lines = ["alpha,branch,q,p,closed"] + [f"{a!r},{b},{q!r},{p!r},{c}" for a, b, q, p, c in rows]
        lv.write_text("\n".join(lines) + "\n")
    else:
        lv.write_text("")
    t = np.linspace(-10, 10, 401)
    q, p = analytic_homoclinic(t, c3)
    hm = out / "portrait_homoclinic.csv"
    hm.write_text("t,q,p\n" + "".join(f"{a!r},{b!r},{c!r}\n" for a, b, c in zip(t.tolist(), q.tolist(), p.tolist())))
    return {"files": [lv.name, hm.name], "results": {"n_alpha": len(pc.alphas), "c3": c3, "rows": len(rows)}}


def read_portrait_levels(path):
    text = Path(path).read_text()
    if not text.strip():
        return np.zeros((0, 5))
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _return_map_task(args):
    cfg, eps, mu, out = args
    S = build_system(cfg, eps, mu)
    files, res = [], []
    for alpha in alpha_grid(cfg, S):
        prof, rec = sample_twist_profile(S, alpha, 6, 8)
        tag = _tag(eps=eps, mu=mu, alpha=alpha)
        p = write_return_csv(Path(out) / f"return_{tag}.csv", rec)
        rep = check_kam_hypotheses(prof)
        tw = {"alpha": alpha, "eps": eps, "mu": mu, "rho_grid": prof.rho_grid, "alpha_values": prof.alpha_values,
              "twist_derivative": prof.twist_derivative(), "nu_bar": prof.nu_bar, "kam": rep.as_dict(),
              "max_abs_dI2": float(np.max(np.abs(rec.diagnostics["dI2"]))),
              "T_range": [float(np.min(rec.T)), float(np.max(rec.T))], "checks": S.checks}
        q = write_json(Path(out) / f"twist_{tag}.json", tw)
        files += [p.name, q.name]
        res.append({"alpha": alpha, "eps": eps, "mu": mu, "twist_negative": rep.twist_negative,
                    "max_abs_dI2": tw["max_abs_dI2"]})
    return files, res


def cmd_return_map(cfg: RunConfig, out: Path, seed: int = 0, jobs: int = 1) -> dict:
    tasks = [(cfg, float(e), float(m), str(out)) for e in cfg.numerics.epsilons for m in cfg.numerics.mus]
    files, results = [], []
    for f, r in _map(_return_map_task, tasks, jobs):
        files += f
        results += r
    return {"files": files, "results": results}


def _hunt_task(args):
    cfg, eps, mu, out = args
    S = build_system(cfg, eps, mu)
    files, res = [], []
    for alpha in alpha_grid(cfg, S):
        h = hunt_homoclinic(S, alpha, max_loops=cfg.numerics.max_loops, n=cfg.numerics.n_samples)
        tag = _tag(eps=eps, mu=mu, alpha=alpha)
        man = h.manifest(S)
        p = write_json(Path(out) / f"hunt_{tag}.json", man)
        files.append(p.name)
        c = write_curve_csv(Path(out) / f"curve_s_{tag}.csv", h.stable_curve)
        files.append(c.name)
        for k, cu in enumerate(h.curves):
            c = write_curve_csv(Path(out) / f"curve_u{k + 1}_{tag}.csv", cu)
            files.append(c.name)
        res.append({k: man[k] for k in ("alpha", "epsilon", "mu", "loop_count", "status")})
    return files, res


def cmd_hunt(cfg: RunConfig, out: Path, seed: int = 0, jobs: int = 1) -> dict:
    tasks = [(cfg, float(e), float(m), str(out)) for e in cfg.numerics.epsilons for m in cfg.numerics.mus]
    files, results = [], []
    for f, r in _map(_hunt_task, tasks, jobs):
        files += f
        results += r
    return {"files": files, "results": results}


def run_checks(cfg: RunConfig, seed: int = 0) -> list[dict]:
    """Invariant suite at the first configured epsilon with ``mu = 0``."""
    eps = float(cfg.numerics.epsilons[0])
    checks = []

    def add(name, value, bound, ok):
        checks.append({"name": name, "value": float(value), "bound": bound, "passed": bool(ok)})

    float_cfg = ModelConfig(**{**cfg.model.__dict__, "mode": "float"})
    nf = normal_form_for(float_cfg, lambda_for_epsilon(float_cfg, eps))
    add("normal_form_adjoint_invariance", nf.residuals["adjoint_invariance"], 1e-10,
        nf.residuals["adjoint_invariance"] <= 1e-10)
    S = build_system(cfg, eps, 0.0)
    ln, m = S.chart, S.model
    conj = conjugacy_error(ln, m, n=1000, seed=seed)
    add("moser_conjugacy", conj, 1e-8, conj <= 1e-8)
    z = sample_ball(100, ln.radius, seed)
    symp = ln.F.symplecticity_error(z)
    add("moser_symplecticity", symp, 1e-8, symp <= 1e-8)
    lin = max(abs(ln.K.coefficient((1, 0)) + 1), abs(ln.K.coefficient((0, 1)) - m.Omega / 2))
    add("moser_linear_part", lin, 1e-10, lin <= 1e-10)
    alpha = alpha_grid(cfg, S)[-1]
    prof, rec = sample_twist_profile(S, alpha, 6, 8)
    dI2 = float(np.max(np.abs(rec.diagnostics["dI2"])))
    add("I2_conservation_mu0", dI2, 1e-10, dI2 <= 1e-10)
    d = prof.twist_derivative()
    add("twist_negative_max", float(np.max(d)), 0.0, np.all(d < 0))
    cu = unstable_intersection_curve(S, alpha, 64)
    rel = abs(curve_area(cu) / (math.pi * alpha) - 1)
    add("unstable_curve_area", rel, 1e-4, rel <= 1e-4)
    J = restricted_jacobian(S, alpha, rec.start.coords[:8][:, [1, 3]])
    det = np.linalg.det(J)
    dev = float(np.max(np.abs(det - 1)))
    add("restricted_map_jacobian", dev, 1e-6, dev <= 1e-6)
    hres = hunt_homoclinic(S, alpha, max_loops=cfg.numerics.max_loops, n=cfg.numerics.n_samples)
    add("hunt_loop_count_mu0", -1 if hres.loop_count is None else hres.loop_count, 1, hres.loop_count == 1)
    return checks


def cmd_check(cfg: RunConfig, out: Path, seed: int = 0, jobs: int = 1) -> dict:
    checks = run_checks(cfg, seed)
    p = write_json(out / "check_report.json", {"checks": checks})
    return {"files": [p.name], "results": checks, "passed": all(c["passed"] for c in checks)}


COMMANDS = {"normalize": cmd_normalize, "portrait": cmd_portrait, "return-map": cmd_return_map,
            "hunt": cmd_hunt, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="saddlecenter", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default=None, help="output directory (default: the config's 'output')")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for parameter sweeps")
    ap.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
    ap.add_argument("--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = COMMANDS[args.command](cfg, out, seed=args.seed, jobs=max(1, args.jobs))
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = {"command": args.command, "version": __version__, "seed": args.seed, "config": cfg.to_dict(),
                "files": res["files"], "results": res["results"]}
    if "passed" in res:
        manifest["passed"] = res["passed"]
    write_json(out / "manifest.json", manifest)
    if res.get("passed") is False:
        failed = [c["name"] for c in res["results"] if not c["passed"]]
        print(f"invariant failure: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
