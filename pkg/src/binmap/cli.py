"""Command-line interface: ``binmap <command> [options]``.

Every command reads an optional YAML/JSON config (``--config``), honours
``BINMAP_*`` environment overrides and writes into ``--out``. Failures print
one ``error: <category>: <message>`` line on stderr and exit with:

0 success, 1 invalid input or internal failure, 2 malformed config or usage,
3 missing file, 4 fingerprint mismatch, 5 malformed container.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import evaluation, localize, manifold, ppam, spectro, synth, vessl
from .config import TABLE_PREFIX, ConfigError, RunConfig, load_config
from .container import (ArrayContainer, ContainerError, FingerprintMismatch, model_entries,
                        scales_in)

logger = logging.getLogger("binmap")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_FINGERPRINT, EXIT_FORMAT = range(6)


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- output helpers

def _num(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_table(path: Path, columns: Sequence[str], rows: Sequence[Sequence], cfg: RunConfig,
                extra: Optional[List[str]] = None) -> None:
    """Tab-delimited table preceded by ``#`` lines carrying the run config."""
    lines = [TABLE_PREFIX + json.dumps(cfg.as_dict(), sort_keys=True)]
    lines += ["# " + e for e in (extra or [])]
    lines.append("\t".join(columns))
    lines += ["\t".join(_num(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_json(path: Path, payload: dict, cfg: RunConfig) -> None:
    payload = dict(payload, config=cfg.as_dict())
    path.write_text(json.dumps(payload, sort_keys=True, indent=1, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _container(arrays: Dict[str, np.ndarray], cfg: RunConfig, **meta) -> ArrayContainer:
    return ArrayContainer(arrays, cfg.fingerprint, dict(meta, config=cfg.as_dict()))


def _load(path, what: str) -> ArrayContainer:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} {path} not found")
    return ArrayContainer.load(path)


def _read_wav(path) -> spectro.AudioBuffer:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"audio file {path} not found")
    return spectro.read_wav(path)


def _observations(audio: spectro.AudioBuffer, cfg: RunConfig):
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(f"audio is sampled at {audio.sample_rate} Hz, "
                         f"configuration expects {cfg.sample_rate} Hz")
    left, right = spectro.stft(audio, cfg.window_ms, cfg.hop_ms)
    ispec = spectro.interaural_cues(left, right, cfg.threshold_db)
    return left, right, ispec, localize.SparseObservationSet.from_spectrogram(ispec, cfg.band)


def _models(container: ArrayContainer, cfg: RunConfig) -> Dict[int, ppam.PpamModel]:
    container.require_fingerprint(cfg.fingerprint, "model")
    scales = scales_in(container)
    if not scales:
        raise ContainerError("model file holds no models")
    return {K: ppam.PpamModel.from_arrays({n: container[f"K{K}/{n}"]
                                           for n in ("c", "gamma", "A", "b", "sigma2")})
            for K in scales}


# ---------------------------------------------------------------- commands

def cmd_extract(args, cfg: RunConfig) -> None:
    audio = _read_wav(args.wav)
    _, _, ispec, obs = _observations(audio, cfg)
    out = Path(args.out)
    _container({"y": obs.y, "avail": obs.avail, "chi": ispec.chi}, cfg,
               missing_fraction=ispec.missing_fraction).save(out / "observations.bac")
    dmap = cfg.band.dim_map()
    names = [f"{dmap[d][0]}@{dmap[d][1]}" for d in range(len(dmap))]
    rows = [[t] + [v if a else "nan" for v, a in zip(obs.y[t], obs.avail[t])]
            for t in range(obs.T)]
    write_table(out / "observations.tsv", ["frame"] + names, rows, cfg)


def cmd_grid(args, cfg: RunConfig) -> None:
    head = synth.VirtualHead(seed=cfg.head_seed, params=cfg.stft)
    ts = synth.build_training_grid(head, cfg.grid_step, cfg.seed, delta=args.delta,
                                   az_range=tuple(args.az_range), el_range=tuple(args.el_range),
                                   band=cfg.band, threshold_db=cfg.threshold_db)
    out = Path(args.out)
    _container({"X": ts.X, "Y": ts.Y}, cfg, delta=args.delta).save(out / "trainset.bac")
    write_table(out / "trainset.tsv", ["azimuth", "elevation"], ts.X.tolist(), cfg)


def cmd_train(args, cfg: RunConfig) -> None:
    data = _load(args.trainset, "training set")
    data.require_fingerprint(cfg.fingerprint, "training set")
    X, Y = data["X"], data["Y"]
    scales = list(cfg.ladder) if args.ladder else [cfg.K]
    arrays, rows, traces = {}, [], {}
    for K in scales:
        model, trace = ppam.train(X, Y, K, init=cfg.init, max_iter=cfg.em_max_iter,
                                  tol=cfg.em_tol, seed=cfg.seed)
        arrays.update(model_entries(model.arrays(), K))
        traces[K] = trace
        rows += [[K, i, ll] for i, ll in enumerate(trace)]
        logger.info("K=%d: %d iterations, log-likelihood %.6g", K, len(trace), trace[-1])
    out = Path(args.out)
    _container(arrays, cfg, scales=scales).save(out / "model.bac")
    write_table(out / "train.tsv", ["K", "iteration", "log_likelihood"], rows, cfg)


def cmd_localize(args, cfg: RunConfig) -> None:
    models = _models(_load(args.model, "model file"), cfg)
    K = args.scale if args.scale is not None else max(models)
    if K not in models:
        raise ValueError(f"model file has no K={K} model (has {sorted(models)})")
    _, _, _, obs = _observations(_read_wav(args.wav), cfg)
    if not obs.avail.any():
        raise ValueError("no time-frequency cell passes the power threshold")
    mean, post = localize.localize_point(models[K], obs)
    rows = [[k, post.rho[k], *post.m[k], *post.V[k].ravel()] for k in range(models[K].K)]
    out = Path(args.out)
    write_table(out / "posterior.tsv",
                ["k", "weight", "mean_az", "mean_el", "cov_aa", "cov_ae", "cov_ea", "cov_ee"],
                rows, cfg)
    write_table(out / "direction.tsv", ["azimuth", "elevation"], [list(mean)], cfg)
    write_json(out / "localization.json", {"direction": mean, "K": K}, cfg)


def cmd_separate(args, cfg: RunConfig) -> None:
    models = _models(_load(args.model, "model file"), cfg)
    audio = _read_wav(args.wav)
    left, right, ispec, obs = _observations(audio, cfg)
    if not obs.avail.any():
        raise ValueError("no time-frequency cell passes the power threshold")
    dmap = cfg.band.dim_map()
    res = vessl.run(models, obs, args.sources, seed=cfg.seed, max_iter=cfg.vem_max_iter,
                    tol=cfg.vem_tol, dim_bins=dmap.bins, n_bins=left.shape[0])
    x_map, k_map, w_map = vessl.map_estimates(res.qxz, res.qw)
    labels = vessl.bin_labels(w_map, dmap, left.shape[0])
    buffers = vessl.separate(left, right, labels, args.sources, len(audio), audio.sample_rate,
                             cfg.window_ms, cfg.hop_ms)
    out = Path(args.out)
    for m, buf in enumerate(buffers):
        spectro.write_wav(out / f"source_{m + 1}.wav", buf)
    _container({"labels": labels, "w_map": w_map, "q": res.qw.q, "x_map": x_map},
               cfg, sources=args.sources).save(out / "masks.bac")
    write_table(out / "sources.tsv", ["source", "azimuth", "elevation", "k_map"],
                [[m + 1, *x_map[m], k_map[m]] for m in range(args.sources)], cfg)
    write_table(out / "free_energy.tsv", ["K", "iteration", "free_energy"],
                [[K, i, f] for K in sorted(res.traces) for i, f in enumerate(res.traces[K])], cfg)
    post_rows = [[m + 1, k, res.qxz.alpha[m, k], *res.qxz.mu[m, k]]
                 for m in range(args.sources) for k in range(res.qxz.alpha.shape[1])]
    write_table(out / "source_posteriors.tsv", ["source", "k", "weight", "mean_az", "mean_el"],
                post_rows, cfg)
    az = np.arange(synth.AZ_RANGE[0], synth.AZ_RANGE[1] + 1e-9, cfg.grid_step)
    el = np.arange(synth.EL_RANGE[0], synth.EL_RANGE[1] + 1e-9, cfg.grid_step)
    grids = np.stack([res.qxz.source(m).grid_density(az, el) for m in range(args.sources)])
    _container({"azimuth": az, "elevation": el, "log_density": grids}, cfg,
               sources=args.sources).save(out / "posterior_grids.bac")
    write_json(out / "report.json", {"directions": x_map, "k_map": k_map,
                                     "iterations": {str(k): v for k, v in res.iterations.items()},
                                     "free_energy": {str(k): v for k, v in res.traces.items()},
                                     "missing_fraction": ispec.missing_fraction}, cfg)


def cmd_embed(args, cfg: RunConfig) -> None:
    data = _load(args.observations, "observation file")
    if "Y" in data:
        points = data["Y"]
    else:
        points = data["y"][data["avail"].all(axis=1)]
    if args.method == "pca":
        emb = manifold.pca_embed(points, args.dim)
    else:
        emb = manifold.ltsa_embed(points, args.k, args.intrinsic_dim, args.dim,
                                  eigen_order=args.eigen_order)
    out = Path(args.out)
    write_table(out / "embedding.tsv", ["index"] + [f"coord_{i + 1}" for i in range(emb.coords.shape[1])],
                [[int(i), *c] for i, c in zip(emb.kept_indices, emb.coords)], cfg,
                extra=["eigenvalues: " + " ".join(_num(v) for v in emb.eigvals),
                       "dropped: " + " ".join(str(int(i)) for i in emb.dropped_indices)])


def _scene_from_file(path, cfg: RunConfig):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scene file {path} not found")
    try:
        spec = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scene {path}: {exc}") from None
    if not isinstance(spec, dict) or not spec.get("sources"):
        raise ConfigError("scene must be a mapping with a non-empty 'sources' list")
    seed = int(spec.get("seed", cfg.seed))
    duration = float(spec.get("duration", 1.0))
    rng = np.random.default_rng(seed)
    sources = []
    n = int(round(duration * cfg.sample_rate))
    for i, src in enumerate(spec["sources"]):
        try:
            direction = tuple(float(v) for v in src["direction"])
            kind = src.get("signal", "noise_bursts")
        except (KeyError, TypeError, ValueError):
            raise ConfigError(f"source {i} needs a two-value 'direction'") from None
        if kind == "noise_bursts":
            sig = synth.noise_bursts(duration, cfg.sample_rate, rng)
        elif kind == "white_noise":
            sig = synth.white_noise(duration, cfg.sample_rate, rng)
        else:
            wav_path = Path(kind)
            if not wav_path.is_absolute():
                wav_path = path.parent / wav_path
            buf = _read_wav(wav_path)
            if buf.sample_rate != cfg.sample_rate:
                raise ValueError(f"{wav_path} is sampled at {buf.sample_rate} Hz")
            sig = buf.samples_left[:n]
            sig = np.concatenate([sig, np.zeros(n - sig.size)])
        sources.append((direction, sig))
    noise = spec.get("noise_level")
    try:
        return synth.Scene(sources, None if noise is None else float(noise), seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args, cfg: RunConfig) -> None:
    scene = _scene_from_file(args.scene, cfg)
    head = synth.VirtualHead(seed=cfg.head_seed, params=cfg.stft)
    images = synth.render_images(head, scene, cfg.sample_rate)
    mixture = synth.render_scene(head, scene, cfg.sample_rate)
    specs = [spectro.stft(img, cfg.window_ms, cfg.hop_ms) for img in images]
    out = Path(args.out)
    spectro.write_wav(out / "mixture.wav", mixture)
    _container({"directions": scene.directions,
                "images": np.stack([img.stereo for img in images]),
                "mixture": mixture.stereo,
                "spectrograms": np.stack([[l.values, r.values] for l, r in specs])},
               cfg, sources=len(images)).save(out / "truth.bac")
    write_table(out / "truth.tsv", ["source", "azimuth", "elevation"],
                [[m + 1, *d] for m, d in enumerate(scene.directions)], cfg)


def _score_run(run_dir: Path, truth: ArrayContainer, cfg: RunConfig) -> List[list]:
    truth.require_fingerprint(cfg.fingerprint, "truth sidecar")
    masks = _load(run_dir / "masks.bac", "separation result")
    masks.require_fingerprint(cfg.fingerprint, "separation result")
    sr = cfg.sample_rate
    def to_buf(a):
        return spectro.AudioBuffer(a[:, 0], a[:, 1], sr)

    refs = [to_buf(a) for a in truth["images"]]
    mixture = to_buf(truth["mixture"])
    M = len(refs)
    x_map = masks["x_map"]
    if x_map.shape[0] != M:
        raise ValueError(f"{run_dir} separated {x_map.shape[0]} sources, truth has {M}")
    perm = evaluation.permutation_align(x_map, truth["directions"])
    az, el = evaluation.angular_error(x_map[list(perm)], truth["directions"])
    estimates = []
    for m in range(M):
        path = run_dir / f"source_{m + 1}.wav"
        estimates.append(_read_wav(path))
    left, right = spectro.stft(mixture, cfg.window_ms, cfg.hop_ms)
    oracle_labels = evaluation.oracle_mask(
        [(spectro.ComplexSpectrogram(s[0], np.zeros(s.shape[-1]), left.freq_resolution, left.hop),
          spectro.ComplexSpectrogram(s[1], np.zeros(s.shape[-1]), left.freq_resolution, left.hop))
         for s in truth["spectrograms"]], M)
    oracle = vessl.separate(left, right, oracle_labels, M, len(mixture), sr,
                            cfg.window_ms, cfg.hop_ms)
    s_mix = evaluation.score_separation([mixture] * M, refs)
    s_alg = evaluation.score_separation(estimates, refs, perm)
    s_orc = evaluation.score_separation(oracle, refs)
    return [[run_dir.name, m + 1, az[m], el[m], s_mix.sdr_db[m], s_alg.sdr_db[m], s_orc.sdr_db[m],
             s_mix.sir_db[m], s_alg.sir_db[m], s_orc.sir_db[m]] for m in range(M)]


def cmd_eval(args, cfg: RunConfig) -> None:
    if len(args.runs) != len(args.truth):
        raise ValueError(f"{len(args.runs)} result directories for {len(args.truth)} truth files")
    rows = []
    for run_dir, truth_path in zip(args.runs, args.truth):
        rows += _score_run(Path(run_dir), _load(truth_path, "truth sidecar"), cfg)
    columns = ["run", "source", "az_err", "el_err", "sdr_mixture", "sdr_vessl", "sdr_oracle",
               "sir_mixture", "sir_vessl", "sir_oracle"]
    out = Path(args.out)
    table = evaluation.format_table([dict(zip(columns, r)) for r in rows], columns)
    header = TABLE_PREFIX + json.dumps(cfg.as_dict(), sort_keys=True) + "\n"
    (out / "metrics.tsv").write_text(header + table)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON settings file")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="binmap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", parents=[common], help="WAV to cue observations")
    p.add_argument("wav")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("grid", parents=[common], help="synthetic training set on a direction grid")
    p.add_argument("--delta", type=float, help="decimate to this sparsity (degrees)")
    p.add_argument("--az-range", type=float, nargs=2, default=list(synth.AZ_RANGE))
    p.add_argument("--el-range", type=float, nargs=2, default=list(synth.EL_RANGE))
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("train", parents=[common], help="fit PPAM models")
    p.add_argument("trainset")
    p.add_argument("--K", type=int, help="component count (overrides config)")
    p.add_argument("--ladder", action="store_true", help="train every scale of the ladder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("localize", parents=[common], help="single-source localization")
    p.add_argument("wav")
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=int, help="which K to use (default: largest)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("separate", parents=[common], help="multi-source separation")
    p.add_argument("wav")
    p.add_argument("--model", required=True, help="model ladder file")
    p.add_argument("--sources", type=int, default=2)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("embed", parents=[common], help="low-dimensional embedding of cues")
    p.add_argument("observations")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--intrinsic-dim", type=int, default=2)
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--method", choices=("ltsa", "pca"), default="ltsa")
    p.add_argument("--eigen-order", choices=("smallest", "largest"), default="smallest")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("simulate", parents=[common], help="render a synthetic scene")
    p.add_argument("scene")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", parents=[common], help="score separation runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def _fail(category: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        overrides = {"seed": args.seed}
        if getattr(args, "K", None) is not None:
            overrides["K"] = args.K
        cfg = load_config(args.config, overrides)
        if getattr(args, "sources", 1) < 1:
            raise ConfigError("--sources must be at least 1")
        out = Path(args.out)
        if out.exists() and not out.is_dir():
            raise ConfigError(f"--out {out} is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(max(1, args.threads)):
            args.func(args, cfg)
        return EXIT_OK
    except UsageError as exc:
        return _fail("usage", exc, EXIT_CONFIG)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc, EXIT_MISSING)
    except FingerprintMismatch as exc:
        return _fail("fingerprint", exc, EXIT_FINGERPRINT)
    except ContainerError as exc:
        return _fail("format", exc, EXIT_FORMAT)
    except (ValueError, ppam.DegenerateModelError) as exc:
        return _fail("invalid-input", exc, EXIT_FAIL)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail("internal", f"{type(exc).__name__}: {exc}", EXIT_FAIL)


if __name__ == "__main__":
    sys.exit(main())
