"""Pipeline orchestration: layer ordering, artifacts, manifests, reports.

Layer k training requires layers < k on disk; the dependency check names
the missing file. All artifacts are written atomically and recorded in a
manifest (config hash, seed, package version, artifact checksums) so a
run can be reproduced byte-for-byte from its manifest in single-threaded
mode.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from . import __version__, bsde, margin, serialize
from . import engine as eng
from . import portfolio as pf
from . import reference as refmod
from .config import RunConfig


class MissingPrerequisite(Exception):
    pass


class PipelineError(Exception):
    pass


MODEL_FILES = {1: "models/layer1.bin", 2: "models/layer2.bin",
               3: "models/layer3.bin", 4: "models/layer4.bin"}
CURVE_FILES = {1: "metrics/curves_layer1.csv", 3: "metrics/curves_layer3.csv",
               4: "metrics/curves_layer4.csv"}


def artifact(out: str, rel: str) -> str:
    return os.path.join(out, rel)


def require(out: str, layer: int) -> str:
    path = artifact(out, MODEL_FILES[layer])
    if not os.path.exists(path):
        raise MissingPrerequisite(f"layer {layer} artifact missing: {path}")
    return path


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path: str, header: list[str], rows) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(_fmt(v) for v in row) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in f if line.strip()]
    return header, rows


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(cfg: RunConfig, out: str, step: str, artifacts: list[str]) -> None:
    path = artifact(out, "manifest.json")
    manifest = {"schema": 1, "config_sha256": cfg.sha256, "seed": cfg.seed,
                "version": __version__, "steps": {}, "artifacts": {}}
    if os.path.exists(path):
        with open(path) as f:
            manifest = json.load(f)
        if manifest.get("config_sha256") != cfg.sha256 or manifest.get("seed") != cfg.seed:
            raise PipelineError(f"{out} holds artifacts from a different config/seed; use a fresh --out")
    manifest["steps"][step] = {"completed": True}
    for rel in artifacts:
        manifest["artifacts"][rel] = _sha256(artifact(out, rel))
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _dump_curves(out: str, rel: str, curves: list[dict]) -> None:
    keys: list[str] = []
    for row in curves:
        for k in row:
            if k not in keys:
                keys.append(k)
    rows = [[row.get(k, "") if isinstance(row.get(k, 0.0), str) else row.get(k, 0.0) for k in keys]
            for row in curves]
    write_csv(artifact(out, rel), keys, rows)


# ---------------------------------------------------------------------------
# Steps.
# ---------------------------------------------------------------------------

def run_validate(cfg: RunConfig) -> dict:
    return cfg.derived


def run_simulate(cfg: RunConfig, out: str, n_paths: int = 64, fmt: str = "csv",
                 tilt_kind: str = "none") -> str:
    """Optional path dump for debugging: CSV or the binary container."""
    tilt = cfg.tilts.get(tilt_kind, eng.DriftTilt.none(cfg.market.dim)) \
        if tilt_kind != "none" else eng.DriftTilt.none(cfg.market.dim)
    dw = eng.sample_increments(cfg.seed, cfg.grid, cfg.corr, n_paths, stream="dump")
    batch = eng.simulate(cfg.market, tilt, dw, cfg.grid)
    eng.detect_defaults(batch, cfg.market, cfg.grid)
    if fmt == "bin":
        rel = "paths.bin"
        serialize.save_container(artifact(out, rel),
                                 {"kind": "path-dump", "measure": batch.measure,
                                  "arrays": [{"name": "states"}, {"name": "increments"},
                                             {"name": "n_tau"}]},
                                 [batch.states, batch.increments, batch.n_tau.astype(np.float64)])
    elif fmt == "csv":
        rel = "paths.csv"
        header = ["path", "step", *[f"x{i + 1}" for i in range(cfg.market.dim)]]
        rows = [[p, n, *batch.states[p, n, :]]
                for p in range(n_paths) for n in range(cfg.grid.n_steps + 1)]
        write_csv(artifact(out, rel), header, rows)
    else:
        raise PipelineError(f"unknown dump format {fmt!r}")
    update_manifest(cfg, out, "simulate", [rel])
    return artifact(out, rel)


def run_layer1(cfg: RunConfig, out: str) -> bsde.CleanModel:
    curves: list[dict] = []
    model = bsde.train_layer1(cfg.market, cfg.corr, cfg.grid, cfg.portfolio, cfg.layer1,
                              curves=curves)
    model.save(artifact(out, MODEL_FILES[1]))
    _dump_curves(out, CURVE_FILES[1], curves)
    update_manifest(cfg, out, "layer1", [MODEL_FILES[1], CURVE_FILES[1]])
    return model


def _layer2_dataset(cfg: RunConfig, clean: bsde.CleanModel, chunk: int = 1 << 12):
    """Simulate the layer-2 sample pool in path chunks: states and values."""
    m = cfg.layer2_samples
    d = cfg.market.n_assets
    n1 = cfg.grid.n_steps + 1
    xhat = np.empty((m, n1, d))
    vhat = np.empty((m, n1, cfg.portfolio.n_contracts))
    corr_d = cfg.corr.sub(d)
    assets = cfg.market.assets_only()
    for p0 in range(0, m, chunk):
        take = min(chunk, m - p0)
        dw = eng.sample_increments(cfg.seed, cfg.grid, corr_d, take, p0, stream="layer2")
        batch = eng.simulate(assets, eng.DriftTilt.none(d), dw, cfg.grid, path0=p0)
        xhat[p0:p0 + take] = batch.states
        vhat[p0:p0 + take] = bsde.clean_values(clean, cfg.portfolio, cfg.grid, batch.states, dw)
    return xhat, vhat


def run_layer2(cfg: RunConfig, out: str) -> margin.ImModel:
    clean = bsde.CleanModel.load(require(out, 1))
    xhat, vhat = _layer2_dataset(cfg, clean)
    model = margin.train_layer2(xhat, vhat, cfg.risk, cfg.layer2)
    model.save(artifact(out, MODEL_FILES[2]))
    update_manifest(cfg, out, "layer2", [MODEL_FILES[2]])
    return model


def run_layer3(cfg: RunConfig, out: str) -> bsde.XvaModel:
    clean = bsde.CleanModel.load(require(out, 1))
    im = margin.ImModel.load(require(out, 2))
    curves: list[dict] = []
    model = bsde.train_layer3(cfg.market, cfg.corr, cfg.grid, cfg.portfolio, cfg.rates,
                              clean, im, cfg.tilts, cfg.layer3, curves=curves)
    model.save(artifact(out, MODEL_FILES[3]))
    _dump_curves(out, CURVE_FILES[3], curves)
    update_manifest(cfg, out, "layer3", [MODEL_FILES[3], CURVE_FILES[3]])
    return model


def run_layer4(cfg: RunConfig, out: str) -> bsde.FvaModel:
    clean = bsde.CleanModel.load(require(out, 1))
    im = margin.ImModel.load(require(out, 2))
    xva = bsde.XvaModel.load(require(out, 3))
    curves: list[dict] = []
    model = bsde.train_layer4(cfg.market, cfg.corr, cfg.grid, cfg.portfolio, cfg.rates,
                              clean, im, xva, cfg.tilts["fva"], cfg.layer4, curves=curves)
    model.save(artifact(out, MODEL_FILES[4]))
    _dump_curves(out, CURVE_FILES[4], curves)
    update_manifest(cfg, out, "layer4", [MODEL_FILES[4], CURVE_FILES[4]])
    return model


# ---------------------------------------------------------------------------
# Reporting.
# ---------------------------------------------------------------------------

def _eval_batches(cfg: RunConfig, tilt: eng.DriftTilt):
    m = cfg.evaluation.paths
    dw = eng.sample_increments(cfg.seed, cfg.grid, cfg.corr, m, stream="eval")
    pair = [eng.DriftTilt.none(cfg.market.dim)]
    if not tilt.is_zero:
        pair.append(tilt)
    out = []
    for q in pair:
        b = eng.simulate(cfg.market, q, dw, cfg.grid)
        eng.detect_defaults(b, cfg.market, cfg.grid)
        out.append((q, b))
    return out


def run_report(cfg: RunConfig, out: str) -> list[str]:
    """Emit every metrics CSV the figure suite and acceptance tests consume."""
    clean = bsde.CleanModel.load(require(out, 1))
    im = margin.ImModel.load(artifact(out, MODEL_FILES[2])) \
        if os.path.exists(artifact(out, MODEL_FILES[2])) else None
    xva = bsde.XvaModel.load(artifact(out, MODEL_FILES[3])) \
        if os.path.exists(artifact(out, MODEL_FILES[3])) else None
    fva = bsde.FvaModel.load(artifact(out, MODEL_FILES[4])) \
        if os.path.exists(artifact(out, MODEL_FILES[4])) else None
    written: list[str] = []

    m = cfg.evaluation.paths
    d = cfg.market.n_assets
    base = _eval_batches(cfg, eng.DriftTilt.none(cfg.market.dim))[0][1]
    xhat = base.states[:, :, :d]
    dwhat = base.increments[:, :, :d]
    vhat = bsde.clean_values(clean, cfg.portfolio, cfg.grid, xhat, dwhat)
    times = cfg.grid.times()

    # clean value percentiles, approximate vs analytic
    sig = cfg.market.vols[:d]
    rho = cfg.corr.rho[:d, :d]
    mat = cfg.portfolio.maturity_indices(cfg.grid)
    live = (np.arange(cfg.grid.n_steps + 1)[:, None] < mat[None, :]).astype(np.float64)
    v_live = (vhat * live[None, :, :]).sum(axis=2)
    rows = []
    for n in range(cfg.grid.n_steps + 1):
        ana = (pf.portfolio_analytic_values(cfg.portfolio, times[n], xhat[:, n, :], cfg.market.rate,
                                            sig, rho) * live[None, n, :]).sum(axis=1)
        rows.append([n, times[n],
                     v_live[:, n].mean(), np.percentile(v_live[:, n], 1), np.percentile(v_live[:, n], 99),
                     ana.mean(), np.percentile(ana, 1), np.percentile(ana, 99)])
    rel = "metrics/clean_percentiles.csv"
    write_csv(artifact(out, rel),
              ["step", "t", "mean_approx", "p01_approx", "p99_approx",
               "mean_analytic", "p01_analytic", "p99_analytic"], rows)
    written.append(rel)

    # representative IM paths
    if im is not None:
        r = cfg.evaluation.representative
        rows = []
        for n in range(cfg.grid.n_steps):
            fc, tc = margin.eval_im(im, n, xhat[:r, n, :], vhat[:r, n, :])
            for p in range(r):
                rows.append([p, n, times[n], fc[p], tc[p]])
        rel = "metrics/im_paths.csv"
        write_csv(artifact(out, rel), ["path", "step", "t", "im_fc", "im_tc"], rows)
        written.append(rel)

    # xva representative paths and terminal errors
    if xva is not None:
        cleanq = bsde._clean_quantities(clean, cfg.portfolio, cfg.grid, im, xhat, dwhat)
        kinds = list(bsde.XVA_KINDS) + (["fva"] if fva is not None else [])
        base_data = bsde.build_path_data(base, cfg.market, cfg.grid, cfg.portfolio, cfg.rates,
                                         eng.DriftTilt.none(cfg.market.dim), cleanq)
        series = {k: bsde.xva_values(k, xva.x0[k], xva.znets[k], base_data, cfg.rates,
                                     cfg.market, cfg.grid) for k in bsde.XVA_KINDS}
        if fva is not None:
            tva_low = (series["colva"] + series["cva"] - series["dva"] + series["mva"])
            series["fva"] = bsde.xva_values("fva", fva.fva0, fva.znet, base_data, cfg.rates,
                                            cfg.market, cfg.grid, tva_lower=tva_low)
        r = cfg.evaluation.representative
        rows = []
        for p in range(r):
            for n in range(cfg.grid.n_steps + 1):
                rows.append([p, n, times[n], *[series[k][p, n] for k in kinds]])
        rel = "metrics/xva_paths.csv"
        write_csv(artifact(out, rel), ["path", "step", "t", *kinds], rows)
        written.append(rel)

        cols, errs = [], []
        for k in kinds:
            tilt = xva.tilts[k] if k != "fva" else fva.tilt
            for q, batch in _eval_batches(cfg, tilt):
                data = bsde.build_path_data(batch, cfg.market, cfg.grid, cfg.portfolio,
                                            cfg.rates, q, cleanq)
                if k == "fva":
                    tl = bsde.lower_tva_series(xva, data, cfg.rates, cfg.market, cfg.grid)
                    vals = bsde.xva_values("fva", fva.fva0, fva.znet, data, cfg.rates,
                                           cfg.market, cfg.grid, tva_lower=tl)
                    target = np.zeros(m)
                else:
                    vals = bsde.xva_values(k, xva.x0[k], xva.znets[k], data, cfg.rates,
                                           cfg.market, cfg.grid)
                    target = data.terminal[k]
                stop = np.minimum(batch.n_tau, cfg.grid.n_steps)
                cols.append(f"{k}_{'q2' if not q.is_zero else 'q1'}")
                errs.append(vals[np.arange(m), stop] - target)
        rel = "metrics/terminal_errors.csv"
        write_csv(artifact(out, rel), cols, np.stack(errs, axis=1))
        written.append(rel)

        # tva decomposition (needs all four layers for the full identity)
        if fva is not None:
            dec = bsde.tva_decomposition(xva, fva)
            rel = "metrics/tva_summary.csv"
            write_csv(artifact(out, rel), list(dec.keys()), [list(dec.values())])
            written.append(rel)

    # merged training curves
    curve_rows, curve_cols = [], []
    for layer, rel_in in sorted(CURVE_FILES.items()):
        path = artifact(out, rel_in)
        if not os.path.exists(path):
            continue
        header, data = read_csv(path)
        for k in header:
            if k not in curve_cols:
                curve_cols.append(k)
        for row in data:
            lookup = dict(zip(header, row))
            curve_rows.append([lookup.get(k, 0.0) for k in curve_cols])
    if curve_rows:
        rel = "metrics/training_curves.csv"
        write_csv(artifact(out, rel), curve_cols, curve_rows)
        written.append(rel)

    update_manifest(cfg, out, "report", written)
    return [artifact(out, rel) for rel in written]


def run_reference(cfg: RunConfig, out: str, kinds=("clean", "colva", "cva", "mva"),
                  refine: int = 2, m_ref: int = 1 << 12, n_targets: int = 4) -> str:
    """Nested-MC references at representative (path, step) targets."""
    clean = bsde.CleanModel.load(require(out, 1))
    im = margin.ImModel.load(artifact(out, MODEL_FILES[2])) \
        if os.path.exists(artifact(out, MODEL_FILES[2])) else None
    xva = bsde.XvaModel.load(artifact(out, MODEL_FILES[3])) \
        if os.path.exists(artifact(out, MODEL_FILES[3])) else None
    fva = bsde.FvaModel.load(artifact(out, MODEL_FILES[4])) \
        if os.path.exists(artifact(out, MODEL_FILES[4])) else None
    needs = {"colva": 2, "cva": 2, "dva": 2, "mva": 2, "fva": 4, "clean": 1}
    for k in kinds:
        if needs[k] >= 2 and im is None:
            raise MissingPrerequisite(f"{k} reference needs {MODEL_FILES[2]}")
        if needs[k] >= 4 and (xva is None or fva is None):
            raise MissingPrerequisite(f"{k} reference needs layers 3 and 4")
    ctx = refmod.ReferenceContext(cfg.market, cfg.corr, cfg.grid, cfg.portfolio, cfg.rates,
                                  clean, im_model=im, xva_model=xva, fva_model=fva)
    spec = refmod.ReferenceSpec(refine=refine, m_ref=m_ref, seed=cfg.seed)
    base = _eval_batches(cfg, eng.DriftTilt.none(cfg.market.dim))[0][1]
    d = cfg.market.n_assets
    vhat = bsde.clean_values(clean, cfg.portfolio, cfg.grid, base.states[:, :, :d],
                             base.increments[:, :, :d])
    steps = [int(s) for s in np.linspace(0, cfg.grid.n_steps - 1, n_targets)]
    rows = []
    for p in range(min(cfg.evaluation.representative, base.n_paths)):
        for n in steps:
            if base.n_tau[p] <= n:
                continue
            branch_x = base.states[p, n, :]
            branch_v = vhat[p, n, :]
            branch_xva = None
            if xva is not None and fva is not None:
                cleanq = None
            for k in kinds:
                if k == "fva":
                    continue  # per-path lower-layer branch values handled in reports
                res = refmod.nested_mc_value(ctx, spec, k, n, branch_x,
                                             branch_vhat=branch_v, path_id=p)
                rows.append([res.kind, res.path_id, res.step, res.t, res.value, res.se,
                             res.m_ref, res.n_ref])
    rel = "metrics/reference.csv"
    write_csv(artifact(out, rel),
              ["kind", "path", "step", "t", "value", "se", "m_ref", "n_ref"], rows)
    update_manifest(cfg, out, "reference", [rel])
    return artifact(out, rel)


def run_full_pipeline(cfg: RunConfig, out: str) -> None:
    run_layer1(cfg, out)
    run_layer2(cfg, out)
    run_layer3(cfg, out)
    run_layer4(cfg, out)
    run_report(cfg, out)
