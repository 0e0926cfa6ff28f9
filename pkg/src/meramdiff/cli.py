"""``meramdiff`` command line.

Every command reads the shared YAML config (``--config``), writes under a
fixed layout below ``--out``, and takes a mandatory ``--seed``.  Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 missing upstream
artifact.  Log lines go to stderr; data files never carry timestamps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import zlib
from pathlib import Path

import numpy as np

from . import ddpm, stats
from .calibrate import (
    CalibResult,
    FitOptions,
    InfeasiblePulseError,
    NoImprovementError,
    discretize_gaussian,
    eps_grid,
    fit_probabilities,
    probabilities_to_pulses,
)
from .config import ConfigError, load_config, parse_list, parse_range
from .macrospin import DeviceParams, LookupTable, build_lookup, sweep, write_csv
from .markov import empirical_eps, epsilon_distribution, UnitConfig
from .sampler import (
    BankDigestError,
    BankFormatError,
    BankNoise,
    IdealNoise,
    NoiseBank,
    StreamConfigError,
    StreamSpec,
    load_bank,
    open_stream,
    save_bank,
    write_bank_csv,
)

log = logging.getLogger("meramdiff")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 2, 3, 4
LAYOUT = ("device", "calib", "noise", "train", "gen", "eval")
CALIB_TRIALS = 385  # trials giving a 95% Wilson half-width <= 0.05 at p = 0.5


class MissingArtifact(RuntimeError):
    pass


def subseed(seed: int, *names) -> int:
    """Stable child seed for a named purpose."""
    key = [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence([int(seed), *key]).generate_state(1)[0])


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _device(cfg) -> DeviceParams:
    return DeviceParams.from_dict(cfg["device"]) if cfg["device"] else DeviceParams()


def _mkdir(args, name: str) -> Path:
    d = Path(args.out) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _warn_trials(trials: int):
    if trials < CALIB_TRIALS:
        log.warning("%d trials give 95%% CIs wider than the 0.05 calibration threshold (need >= %d)",
                    trials, CALIB_TRIALS)


# ----------------------------------------------------------------------------
# device


def _saturation_width(widths, p_mean, tol):
    """Smallest width from which the mean probability stays within ``tol`` of 0.5."""
    inside = np.abs(np.asarray(p_mean) - 0.5) <= tol
    for i in range(len(widths)):
        if inside[i:].all():
            return float(widths[i])
    return None


def cmd_device_sweep(args, cfg):
    sc = cfg["sweep"]
    voltages = parse_range(args.voltages) if args.voltages else [float(v) for v in sc["voltages"]]
    widths = [w * 1e-9 for w in parse_range(args.widths or sc["widths_ns"])]
    trials = int(args.trials or sc["trials"])
    relax = float(sc["relax_ns"]) * 1e-9
    params = _device(cfg)
    _warn_trials(trials)
    pts = sweep(params, voltages, widths, trials, seed=args.seed, relax_time=relax,
                threads=args.threads, min_trials=1)
    out = _mkdir(args, "device")
    write_csv(out / "sweep.csv", pts)
    summary = {"v_c_model": params.v_c, "trials": trials, "voltages": {}}
    v_c_est = None
    for v in voltages:
        rows = [p for p in pts if p.voltage == v]
        pm = np.array([0.5 * (p.p_pa + p.p_ap) for p in rows])
        ci = max(p.ci_half_width for p in rows)
        j = int(np.argmax(pm))
        summary["voltages"][repr(v)] = {
            "p_max": float(pm[j]),
            "width_at_p_max_ns": rows[j].width * 1e9,
            "p_last": float(pm[-1]),
            "saturation_width_ns": (lambda w: None if w is None else w * 1e9)(
                _saturation_width([p.width for p in rows], pm, max(ci, args.tol))),
            "max_ci": ci,
        }
        if v_c_est is None and pm[j] >= 0.5 - ci:
            v_c_est = v
    summary["v_c_estimate"] = v_c_est
    _dump_json(out / "sweep_summary.json", summary)
    log.info("wrote %d points to %s", len(pts), out / "sweep.csv")


def cmd_device_lookup(args, cfg):
    lc = cfg["lookup"]
    voltage = float(args.voltage if args.voltage is not None else lc["voltage"])
    widths = [w * 1e-9 for w in parse_range(args.widths or lc["widths_ns"])]
    trials = int(args.trials or lc["trials"])
    _warn_trials(trials)
    table = build_lookup(_device(cfg), voltage, widths, trials, seed=args.seed,
                         relax_time=float(lc["relax_ns"]) * 1e-9, threads=args.threads, max_ci=1.0)
    worst = float(np.max(table.ci))
    if worst > float(lc["max_ci"]):
        log.warning("largest CI half-width %.3f exceeds %.3f", worst, float(lc["max_ci"]))
    out = _mkdir(args, "device")
    table.write_csv(out / "lookup.csv")
    log.info("wrote lookup with %d widths to %s", len(widths), out / "lookup.csv")


# ----------------------------------------------------------------------------
# calibration and noise


def cmd_calibrate(args, cfg):
    cc = cfg["calibrate"]
    n_bits = int(cc["n_bits"])
    target = discretize_gaussian(float(cc["sigma"]), eps_grid(n_bits))
    lookup_path = Path(args.lookup) if args.lookup else Path(args.out) / "device" / "lookup.csv"
    if args.lookup:
        _require(lookup_path, "lookup table")
    opts = FitOptions(starts=int(cc["starts"]), seed=args.seed, metric=cc["metric"], symmetric=bool(cc["symmetric"]))
    res = fit_probabilities(target, n_bits, opts)
    extra = {}
    if lookup_path.is_file():
        table = LookupTable.read_csv(lookup_path, relax_time=float(cfg["lookup"]["relax_ns"]) * 1e-9)
        pm = probabilities_to_pulses(table, res.config, tol=float(cc["pulse_tol"]), strict=args.strict)
        res.pulses, res.residuals = pm.pulses, [float(r) for r in pm.residuals]
        realized = epsilon_distribution(pm.realized)
        extra = {"realized_unit": pm.realized.to_dict(),
                 "realized_tv": float(0.5 * np.abs(realized.probs - target.probs).sum()),
                 "infeasible_bits": [int(i) + 1 for i in np.flatnonzero(~pm.feasible)]}
        if extra["infeasible_bits"]:
            log.warning("bits %s have no width within %.3f at %.2f V", extra["infeasible_bits"],
                        float(cc["pulse_tol"]), table.voltage)
    else:
        log.info("no lookup table at %s; writing probabilities without pulses", lookup_path)
    out = _mkdir(args, "calib")
    _dump_json(out / "calib.json", {**res.to_dict(), **extra})
    (out / "report.txt").write_text(res.report())
    law = epsilon_distribution(res.config)
    with open(out / "eps_law.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "fitted", "target"])
        for v, p, q in zip(law.support, law.probs, target.probs):
            w.writerow([repr(float(v)), repr(float(p)), repr(float(q))])
    log.info("achieved TV %.4f (all-coins %.4f)", res.achieved_tv, res.baseline_tv)


def _load_calib(args) -> tuple[CalibResult, dict]:
    path = _require(Path(args.out) / "calib" / "calib.json", "calibration (run `calibrate` first)")
    d = json.loads(path.read_text())
    return CalibResult.from_dict(d), d


def _stream_spec(args, cfg) -> StreamSpec:
    sc = dict(cfg["stream"])
    for key in ("backend", "mode", "burn_in", "defect_rate", "defect_kind", "n_units", "scale", "offset"):
        val = getattr(args, key, None)
        if val is not None:
            sc[key] = val
    return StreamSpec.from_dict({**sc, "seed": subseed(args.seed, "stream")})


def _histogram_rows(values, config: UnitConfig, target, exact):
    emp = empirical_eps(values, config)
    counts = np.rint(emp.probs * len(values)).astype(int)
    return [[repr(float(v)), int(c), repr(float(e)), repr(float(t)), repr(float(x))]
            for v, c, e, t, x in zip(emp.support, counts, emp.probs, target.probs, exact.probs)]


def cmd_sample(args, cfg):
    res, raw = _load_calib(args)
    spec = _stream_spec(args, cfg)
    n = int(args.n or cfg["sample"]["n"])
    device = pulses = None
    if spec.backend == "physical":
        if not res.pulses:
            raise MissingArtifact("physical backend needs calibrated pulses (run device-lookup, then calibrate)")
        device, pulses = _device(cfg), res.pulses
    stream = open_stream(res.config, spec, device, pulses)
    bank = NoiseBank(stream.draw(n), {"stream": spec.to_dict(), "calib_fit": raw.get("fit", {})}, stream.digest)
    out = _mkdir(args, "noise")
    save_bank(out / "bank.bin", bank)
    write_bank_csv(out / "bank.csv", bank)
    target = discretize_gaussian(res.sigma, eps_grid(res.config.n_bits, res.config.frac_bits))
    exact = stream.exact_law()
    raw_eps = (bank.values - spec.offset) / spec.scale
    report = {"n": n, "moments": stats.moments(bank.values).to_dict(), "by_size": {}}
    for size in sorted({int(s) for s in cfg["sample"]["hist_sizes"]} | {n}):
        if size > n:
            continue
        part = raw_eps[:size]
        with open(out / f"hist_{size}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "count", "empirical", "target", "exact"])
            w.writerows(_histogram_rows(part, res.config, target, exact))
        gof = stats.chi2_gof(part, target)
        report["by_size"][str(size)] = {"chi2_target": gof.to_dict(), "chi2_exact": stats.chi2_gof(part, exact).to_dict()}
    _dump_json(out / "stats.json", report)
    log.info("bank of %d values written to %s", n, out / "bank.bin")


def _bank(args) -> NoiseBank:
    res, _ = _load_calib(args) if (Path(args.out) / "calib" / "calib.json").is_file() else (None, None)
    path = _require(Path(args.out) / "noise" / "bank.bin", "noise bank (run `sample` first)")
    expected = None
    if res is not None:
        from .sampler import config_digest

        expected = config_digest(res.config)
    return load_bank(path, expected)


def _noise_source(kind: str, bank: NoiseBank | None, seed: int, replacement: bool):
    if kind == "ideal":
        return IdealNoise(seed)
    if kind == "meram":
        return BankNoise(bank, seed, replacement)
    raise ConfigError(f"unknown noise source {kind!r}; use ideal or meram")


# ----------------------------------------------------------------------------
# diffusion


def _dataset(args, cfg) -> np.ndarray:
    dc = cfg["dataset"]
    return ddpm.make_letter_dataset(dc["letter"], int(dc["size"]), int(dc["n"]), int(dc["jitter"]),
                                    float(dc["flip"]), float(dc["smooth"]), rng=subseed(args.seed, "dataset"))


def _sources(args, cfg) -> list[str]:
    srcs = parse_list(args.sources) if args.sources else list(cfg["evaluate"]["sources"])
    for s in srcs:
        if s not in ("ideal", "meram"):
            raise ConfigError(f"unknown noise source {s!r}; use ideal or meram")
    return srcs


def _train(args, cfg, source: str, bank, epochs: int, callback=None):
    dc = cfg["ddpm"]
    X = _dataset(args, cfg)
    schedule = ddpm.letter_schedule(int(dc["T"]))
    noise = _noise_source(source, bank, subseed(args.seed, "train-noise"), bool(cfg["sample"]["replacement"]))
    res = ddpm.train(X, schedule, noise, epochs, float(dc["lr"]), int(dc["batch_size"]),
                     subseed(args.seed, "train"), int(dc["hidden"]), callback=callback,
                     ema=dc["ema"] if dc["ema"] else None)
    res.noise_source = source
    return X, schedule, res


def cmd_train(args, cfg):
    srcs = _sources(args, cfg)
    bank = _bank(args) if "meram" in srcs else None
    epochs = int(args.epochs if args.epochs is not None else cfg["ddpm"]["epochs"])
    results = []
    for s in srcs:
        _, schedule, res = _train(args, cfg, s, bank, epochs)
        results.append((s, schedule, res))
        log.info("%s: loss %.4f -> %.4f", s, res.initial_loss, res.final_loss)
    out = _mkdir(args, "train")
    for s, schedule, res in results:
        ddpm.save_checkpoint(out / f"{s}.ckpt", res.denoiser, schedule)
    ddpm.write_loss_csv(out / "loss.csv", [r for _, _, r in results])


def _generate(args, cfg, denoiser, schedule, source, bank, n, tag):
    size = int(cfg["dataset"]["size"])
    noise = _noise_source(source, bank, subseed(args.seed, "gen-noise", tag), bool(cfg["sample"]["replacement"]))
    return ddpm.generate(denoiser, schedule, noise, n, (size, size))


def cmd_generate(args, cfg):
    srcs = _sources(args, cfg)
    ckpts = {s: _require(Path(args.out) / "train" / f"{s}.ckpt", f"{s} checkpoint (run `train` first)") for s in srcs}
    bank = _bank(args) if "meram" in srcs else None
    n = int(args.n or cfg["generate"]["n"])
    outputs = {}
    for s in srcs:
        denoiser, schedule = ddpm.load_checkpoint(ckpts[s])
        if schedule is None:
            schedule = ddpm.letter_schedule(int(cfg["ddpm"]["T"]))
        outputs[s] = _generate(args, cfg, denoiser, schedule, s, bank, n, s)
    for s, imgs in outputs.items():
        out = _mkdir(args, f"gen/{s}")
        for i, img in enumerate(imgs):
            ddpm.write_pgm(out / f"img_{i:03d}.pgm", img)
        ddpm.write_images_csv(out / "images.csv", imgs)
        labels = ddpm.nearest_template(imgs)
        with open(out / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label"])
            w.writerows(enumerate(labels))
        log.info("%s: %d/%d images match %s", s, labels.count(cfg["dataset"]["letter"]), n, cfg["dataset"]["letter"])


def cmd_evaluate(args, cfg):
    ec = cfg["evaluate"]
    srcs = _sources(args, cfg)
    epochs = sorted(set(parse_list(args.epochs, int) if args.epochs else [int(e) for e in ec["epochs"]]))
    if not epochs or epochs[0] < 1:
        raise ConfigError("evaluation epochs must be positive integers")
    bank = _bank(args) if "meram" in srcs else None
    n_img = int(args.n or ec["n_images"])
    letter = cfg["dataset"]["letter"]
    rows = []
    for s in srcs:
        snaps = {}

        def keep(epoch, model, snaps=snaps):
            if epoch in epochs:
                snaps[epoch] = model.copy()

        X, schedule, res = _train(args, cfg, s, bank, max(epochs), callback=keep)
        ref = X[: min(len(X), 200)]
        bw = stats.median_bandwidth(ref)
        for e in epochs:
            imgs = _generate(args, cfg, snaps[e], schedule, s, bank, n_img, f"eval-{e}")
            rep = stats.mmd2(imgs, ref, bandwidth=bw, n_perm=int(ec["n_perm"]), seed=subseed(args.seed, "mmd", e))
            acc = ddpm.nearest_template(imgs).count(letter) / n_img
            rows.append([e, s, repr(res.losses[e]), repr(rep.mmd2), repr(rep.p_value), repr(bw), repr(acc)])
    gof = {}
    if bank is not None:
        res_cal, _ = _load_calib(args)
        target = discretize_gaussian(res_cal.sigma, eps_grid(res_cal.config.n_bits, res_cal.config.frac_bits))
        spec = StreamSpec.from_dict(bank.provenance["stream"])
        eps = (bank.values - spec.offset) / spec.scale
        for size in sorted({int(x) for x in cfg["sample"]["hist_sizes"]}):
            if size <= bank.count:
                gof[str(size)] = {
                    "chi2": stats.chi2_gof(eps[:size], target).to_dict(),
                    "ks": stats.ks_statistic(eps[:size], 0.0, res_cal.sigma, grid_step=target.step).to_dict(),
                    "moments": stats.moments(eps[:size]).to_dict(),
                }
    out = _mkdir(args, "eval")
    with open(out / "quality.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "source", "train_loss", "mmd2", "mmd_p", "bandwidth", "template_acc"])
        w.writerows(rows)
    if gof:
        _dump_json(out / "noise_gof.json", gof)
    log.info("wrote %d quality rows to %s", len(rows), out / "quality.csv")


# ----------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config (defaults are built in)")
    p.add_argument("--out", default="runs", help="output root (default: runs)")
    p.add_argument("--seed", type=int, required=True, help="master seed; every random stream derives from it")
    p.add_argument("--threads", type=int, default=1, help="worker threads; outputs do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="meramdiff", description="MeRAM noise generation and diffusion pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("device-sweep", help="switching probability versus voltage and pulse width")
    _common(p)
    p.add_argument("--voltages", help="gate voltages in V, e.g. 2.1,2.4,2.7 or a:b:n")
    p.add_argument("--widths", help="pulse widths in ns as a:b:n (inclusive) or a list")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per point and direction")
    p.add_argument("--tol", type=float, default=0.05, help="band around 0.5 for the saturation width")
    p.set_defaults(func=cmd_device_sweep)

    p = sub.add_parser("device-lookup", help="probability lookup table at one voltage")
    _common(p)
    p.add_argument("--voltage", type=float, help="gate voltage in V")
    p.add_argument("--widths", help="pulse widths in ns as a:b:n (inclusive) or a list")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per width and direction")
    p.set_defaults(func=cmd_device_lookup)

    p = sub.add_parser("calibrate", help="fit per-bit probabilities to a discrete Gaussian")
    _common(p)
    p.add_argument("--lookup", help="lookup CSV (default: <out>/device/lookup.csv when present)")
    p.add_argument("--strict", action="store_true", help="fail (exit 3) if a bit has no feasible pulse")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("sample", help="draw a noise bank from the calibrated unit")
    _common(p)
    p.add_argument("--n", type=int, help="number of draws (default 40000)")
    p.add_argument("--backend", choices=("markov", "physical"))
    p.add_argument("--mode", choices=("sequential", "independent"))
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--defect-rate", dest="defect_rate", type=float)
    p.add_argument("--defect-kind", dest="defect_kind", choices=("stuck_P", "stuck_AP", "random"))
    p.add_argument("--n-units", dest="n_units", type=int)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train a denoiser per noise source")
    _common(p)
    p.add_argument("--sources", help="comma list of ideal,meram")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from trained checkpoints")
    _common(p)
    p.add_argument("--sources", help="comma list of ideal,meram")
    p.add_argument("--n", type=int, help="images per source")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="quality versus training epochs, plus noise goodness of fit")
    _common(p)
    p.add_argument("--sources", help="comma list of ideal,meram")
    p.add_argument("--epochs", help="comma list of epoch checkpoints, e.g. 10,25,50,100")
    p.add_argument("--n", type=int, help="images generated per checkpoint")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        args.func(args, cfg)
    except MissingArtifact as e:
        log.error("%s", e)
        return EXIT_MISSING
    except (NoImprovementError, InfeasiblePulseError, FloatingPointError, ArithmeticError,
            np.linalg.LinAlgError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (ConfigError, StreamConfigError, BankFormatError, BankDigestError, ValueError, TypeError, KeyError) as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
