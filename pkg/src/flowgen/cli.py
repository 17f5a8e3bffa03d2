"""Command-line orchestration: dataset generation, training, sampling,
rollout, evaluation, and the two toy experiment pipelines.

Every run writes its artifacts plus a run manifest (config snapshot, code
version, wall clock, output checksums) into --out.  Exit codes: 0 success,
2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as cf
from . import diffusion as df
from . import experiments as ex
from . import fluids2d as fl
from . import io as fio
from . import metrics as mx
from . import nn
from . import toymodels as tm
from .rng import RngStream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    pass


def _load_config(args):
    if args.config:
        try:
            doc = fio.read_json(args.config)
        except FileNotFoundError:
            raise cf.ConfigError(f"config: file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise cf.ConfigError(f"config: invalid JSON: {e}")
    else:
        doc = {"experiment": getattr(args, "experiment", "toy1")}
    cfg = cf.validate_config(doc)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    if getattr(args, "threads", None):
        cfg["threads"] = args.threads
    return cfg


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    started = time.time()
    rng = RngStream(cfg["seed"])
    artifacts = []
    if cfg["experiment"] in ("toy1", "toy2"):
        toy = cf.build_toy_config(cfg)
        ds = tm.generate_toy_dataset(toy, rng)
        cols = ["input"] + [f"output_{i}" for i in range(ds.target.shape[1])]
        rows = [
            [ds.cond[i, 0]] + list(ds.target[i]) for i in range(len(ds))
        ]
        fio.write_csv(os.path.join(out, "dataset.csv"), cols, rows)
        artifacts.append("dataset.csv")
    else:
        spec = cf.build_ensemble_spec(cfg)
        members = fl.ensemble_ground_truth(spec, rng, threads=cfg["threads"])
        fio.save_ensemble(out, members, spec.to_json(), cfg["seed"])
        artifacts.append("manifest.json")
        artifacts += [
            f"member_{m.macro_id:04d}_{m.micro_id:04d}.bin" for m in members
        ]
    fio.write_run_manifest(out, cfg, artifacts, started)
    print(f"wrote {len(artifacts)} artifact(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_toy_dataset(data_dir):
    path = os.path.join(data_dir, "dataset.csv")
    if not os.path.isfile(path):
        raise DataError(f"dataset not found: {path}")
    header, rows = fio.read_csv(path)
    vals = np.array([[float(v) for v in r] for r in rows])
    return df.TrainSet(vals[:, :1], vals[:, 1:])


def _load_ensemble_pairs(data_dir):
    if not os.path.isfile(os.path.join(data_dir, "manifest.json")):
        raise DataError(f"ensemble manifest not found in {data_dir}")
    manifest, members = fio.load_ensemble(data_dir)
    sets = []
    for _, _, traj, _ in members:
        sets.append(df.pairs_from_trajectory(traj.times, traj.fields))
    cond = np.concatenate([s.cond for s in sets])
    target = np.concatenate([s.target for s in sets])
    lead = np.concatenate([s.lead for s in sets])
    return df.TrainSet(cond, target, lead), manifest


def _build_model(cfg):
    kind = cfg["model"]
    if kind == "deterministic-mlp":
        tcfg = cf.build_train_config(cfg)
        out_dim = 1 if cfg["experiment"] == "toy1" else 2
        return nn.MlpRegressor(1, out_dim, tcfg.det_width, tcfg.det_layers)
    if kind == "diffusion-mlp":
        tcfg = cf.build_train_config(cfg)
        dim = 1 if cfg["experiment"] == "toy1" else 2
        if tcfg.diffusion_param == ex.VP_COSINE:
            return df.MlpEpsModel(dim, 1, tcfg.diff_width, tcfg.diff_layers)
        return df.MlpDenoiser(dim, 1, tcfg.diff_width, tcfg.diff_layers)
    desc = cf.build_uvit_descriptor(cfg)
    if kind == "mini-uvit-diffusion":
        return df.UvitDenoiser(desc)
    return nn.UvitRegressor(desc)


def _toy_loss_fn(cfg, model, tcfg):
    if cfg["model"] == "deterministic-mlp":
        return lambda p, b, r: nn.regression_loss(model, p, b, r)
    if tcfg.diffusion_param == ex.VP_COSINE:
        return lambda p, b, r: df.vp_cosine_loss(model, p, b, r, tcfg.vp_steps)
    return lambda p, b, r: df.diffusion_loss(model, p, b, r, tcfg.schedule)


def cmd_train(args):
    cfg = _load_config(args)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    started = time.time()
    data_dir = args.data or cfg["data_dir"] or cfg["out_dir"]
    model = _build_model(cfg)
    if cfg["experiment"] in ("toy1", "toy2"):
        tcfg = cf.build_train_config(cfg)
        dataset = tcfg.cast(_load_toy_dataset(data_dir))
        opt = tcfg.optimizer()
        schedule_json = tcfg.schedule.to_json()
        dtype = np.dtype(tcfg.dtype)
        loss_fn = _toy_loss_fn(cfg, model, tcfg)
    else:
        dataset, _ = _load_ensemble_pairs(data_dir)
        opt = cf.build_optimizer(cfg)
        schedule_json = cfg["schedule"]
        dtype = np.dtype(cfg["train_dtype"])
        dataset = df.TrainSet(
            dataset.cond.astype(dtype), dataset.target.astype(dtype), dataset.lead
        )
        schedule = cf.build_schedule(cfg)
        if cfg["model"] == "mini-uvit-diffusion":
            lam_sq = cfg.get("lam_sq", 0.0)
            loss_fn = lambda p, b, r: df.diffusion_loss(model, p, b, r, schedule,
                                                        lam_sq)
        else:
            loss_fn = lambda p, b, r: nn.regression_loss(model, p, b, r)

    rng = RngStream(cfg["seed"])
    start_epoch = 0
    adam_state = None
    prior_history = []
    if args.resume:
        params0, meta, state = fio.load_checkpoint(args.resume)
        if meta["model"] != model.to_json():
            raise DataError("resume checkpoint model does not match config")
        if state is None:
            raise DataError("checkpoint has no training state; cannot resume")
        from .optim import AdamState

        params0 = params0.astype(dtype)
        sj = state["json"]
        adam_state = AdamState(
            m=state["m"].astype(dtype), v=state["v"].astype(dtype), t=sj["t"],
            lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps,
        )
        start_epoch = meta["epoch"]
        rng.set_state(sj["rng_state"])
        hist_path = os.path.join(args.resume, "loss_history.csv")
        if os.path.isfile(hist_path):
            _, rows = fio.read_csv(hist_path)
            prior_history = [float(r[1]) for r in rows]
    else:
        params0 = model.init_params(rng.child(0), dtype)

    ckpt_cb = None
    every = cfg.get("checkpoint_every", 0)
    if every:
        def ckpt_cb(epoch, params, loss):
            if (epoch + 1) % every == 0:
                _write_checkpoint(out, cfg, model, params, schedule_json, opt,
                                  epoch + 1, rng, None)
            return False

    result = df.train(model, params0, dataset, loss_fn, opt, rng,
                      callback=ckpt_cb, adam_state=adam_state,
                      start_epoch=start_epoch)
    history = prior_history + result.loss_history
    _write_checkpoint(out, cfg, model, result.params, schedule_json, opt,
                      result.epochs_run, rng, result.adam_state)
    fio.write_csv(
        os.path.join(out, "loss_history.csv"),
        ["epoch", "loss"],
        [[i, v] for i, v in enumerate(history)],
    )
    artifacts = ["params.bin", "meta.json", "loss_history.csv"]
    fio.write_run_manifest(out, cfg, artifacts, started)
    print(f"trained {result.epochs_run} epoch(s); final loss "
          f"{history[-1] if history else float('nan'):.6g}; checkpoint in {out}")
    return EXIT_OK


def _write_checkpoint(out, cfg, model, params, schedule_json, opt, epoch, rng,
                      adam_state):
    training_state = None
    if adam_state is not None:
        training_state = {
            "json": {"t": adam_state.t, "rng_state": rng.state()},
            "m": adam_state.m,
            "v": adam_state.v,
        }
    fio.save_checkpoint(
        out, params, model.to_json(), schedule_json, opt.to_json(),
        cfg["seed"], epoch, layout_fields=model.layout().describe(),
        training_state=training_state,
    )


# ---------------------------------------------------------------------------
# sample / rollout


def _load_model_from_checkpoint(ckpt):
    params, meta, _ = fio.load_checkpoint(ckpt)
    model = df.model_from_json(meta["model"])
    schedule = df.DiffusionSchedule.from_json(meta["schedule"]) if meta.get(
        "schedule") else df.DiffusionSchedule()
    return model, params, schedule, meta


def _load_condition(args, model):
    if args.condition_file:
        cond = fio.load_tensor(args.condition_file)
    elif args.condition is not None:
        cond = np.array([float(v) for v in args.condition.split(",")])
    else:
        raise DataError("provide --condition or --condition-file")
    want = tuple(model.cond_shape)
    cond = np.asarray(cond, dtype=np.float64).reshape(want)
    return cond


def cmd_sample(args):
    cfg_steps = args.steps
    model, params, schedule, meta = _load_model_from_checkpoint(args.checkpoint)
    cond = _load_condition(args, model)
    rng = RngStream(args.seed)
    started = time.time()
    out = args.out
    os.makedirs(out, exist_ok=True)
    if isinstance(model, df.MlpEpsModel):
        samples = df.vp_cosine_sample(model, params, cond, rng,
                                      steps=cfg_steps or 200,
                                      n_samples=args.n_samples)
    else:
        schedule = df.DiffusionSchedule(**{**schedule.to_json(),
                                           "steps": cfg_steps or schedule.steps})
        samples = df.em_sample_ve(model, params, cond, args.lead_time, schedule,
                                  rng, n_samples=args.n_samples)
    fio.save_tensor(os.path.join(out, "samples"), samples, "float64")
    fio.write_json(
        os.path.join(out, "samples.manifest.json"),
        {
            "kind": "samples",
            "n_samples": int(args.n_samples),
            "steps": int(cfg_steps or schedule.steps),
            "seed": int(args.seed),
            "checkpoint": os.path.abspath(args.checkpoint),
            "state_shape": list(samples.shape[1:]),
        },
    )
    fio.write_run_manifest(
        out, {"command": "sample", "seed": args.seed, "steps": cfg_steps},
        ["samples.bin", "samples.json", "samples.manifest.json"], started,
    )
    print(f"wrote {args.n_samples} sample(s) to {out}")
    return EXIT_OK


def cmd_rollout(args):
    model, params, schedule, meta = _load_model_from_checkpoint(args.checkpoint)
    if isinstance(model, df.MlpEpsModel):
        raise cf.ConfigError(
            "rollout chains the VE reverse sampler; this checkpoint holds a "
            "VP epsilon-predictor (train with diffusion_param=edm_ve)"
        )
    cond = _load_condition(args, model)
    times = [float(t) for t in args.times.split(",")]
    started = time.time()
    out = args.out
    os.makedirs(out, exist_ok=True)
    if args.steps:
        schedule = df.DiffusionSchedule(**{**schedule.to_json(), "steps": args.steps})
    rng = RngStream(args.seed)
    trajs = []
    for s in range(args.n_samples):
        traj = df.rollout(model, params, cond, times, schedule, rng.child(s))
        trajs.append(traj)
    arr = np.stack(trajs)
    fio.save_tensor(os.path.join(out, "rollout"), arr, "float64")
    fio.write_json(
        os.path.join(out, "rollout.manifest.json"),
        {"kind": "rollout", "times": times, "n_samples": args.n_samples,
         "seed": args.seed},
    )
    fio.write_run_manifest(out, {"command": "rollout", "seed": args.seed},
                           ["rollout.bin", "rollout.json",
                            "rollout.manifest.json"], started)
    print(f"wrote rollout with {len(times)} step(s) x {args.n_samples} sample(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _resolve_ensemble_array(path, time_index=-1, macro_id=None):
    """Directory -> (members, ...) array: sample sets or solver ensembles."""
    sm = os.path.join(path, "samples.manifest.json")
    if os.path.isfile(sm):
        return fio.load_tensor(os.path.join(path, "samples"))
    if os.path.isfile(os.path.join(path, "manifest.json")):
        manifest, members = fio.load_ensemble(path)
        arrs = []
        for macro, micro, traj, _ in members:
            if macro_id is not None and macro != macro_id:
                continue
            arrs.append(traj.fields[time_index])
        if not arrs:
            raise DataError(f"no members matched in {path}")
        return np.stack(arrs)
    raise DataError(f"no sample or ensemble manifest found in {path}")


def cmd_eval(args):
    started = time.time()
    gen = _resolve_ensemble_array(args.generated, args.time_index, args.macro_id)
    ref = _resolve_ensemble_array(args.reference, args.time_index, args.macro_id)
    if gen.shape[1:] != ref.shape[1:]:
        raise DataError(f"grid mismatch: {gen.shape[1:]} vs {ref.shape[1:]}")
    out = args.out
    os.makedirs(out, exist_ok=True)
    n_ch = gen.shape[-1]
    rows = []
    summary = {}

    def record(metric, mode, values):
        vals = np.atleast_1d(values)
        for ch in range(len(vals)):
            rows.append([f"ch{ch}", metric, mode, float(vals[ch])])
        summary[f"{metric}{'_' + mode if mode else ''}"] = [
            float(v) for v in vals
        ]

    record("mean_error", "relative", mx.mean_error(ref, gen, relative=True))
    record("mean_error", "absolute", mx.mean_error(ref, gen, relative=False))
    record("std_error", "", mx.std_error(ref, gen))
    record("wasserstein1", "mean", mx.wasserstein1_pointwise(ref, gen))
    record("crps_global", "paper_squared",
           mx.crps_global(gen, ref, mx.CRPS_PAPER_SQUARED))
    record("crps_global", "absolute", mx.crps_global(gen, ref, mx.CRPS_ABSOLUTE))
    fio.write_csv(os.path.join(out, "report.csv"),
                  ["channel", "metric", "mode", "value"], rows)
    fio.write_json(os.path.join(out, "report.json"), summary)
    artifacts = ["report.csv", "report.json"]
    if gen.ndim == 4:  # field ensembles: emit mean spectra
        for name, arr in (("generated", gen), ("reference", ref)):
            sp_members = [mx.energy_spectrum(m) for m in arr]
            e = np.mean([s.energy for s in sp_members], axis=0)
            fio.write_csv(
                os.path.join(out, f"spectrum_{name}.csv"),
                ["k", "energy"], list(zip(sp_members[0].k.tolist(), e)),
            )
            artifacts.append(f"spectrum_{name}.csv")
    fio.write_run_manifest(out, {"command": "eval"}, artifacts, started)
    print(f"wrote evaluation report to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# toy experiment pipelines


def cmd_toy1(args):
    cfg = _load_config(args)
    cfg["experiment"] = "toy1"
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    started = time.time()
    toy = cf.build_toy_config(cfg)
    tcfg = cf.build_train_config(cfg)
    rng = RngStream(cfg["seed"])
    artifacts = []
    results = {}
    run_det = args.mode in ("det", "both")
    run_diff = args.mode in ("diff", "both")
    if run_det:
        model, res = ex.train_toy1_deterministic(toy, tcfg, rng.child(1))
        mets = ex.toy1_deterministic_metrics(model, res.params, toy)
        results["deterministic"] = {**mets, "epochs": res.epochs_run}
        u = ex.probe_conditions(1024)
        pred = model.predict(res.params, u[:, None]).data[:, 0]
        fio.write_csv(os.path.join(out, "toy1_deterministic.csv"),
                      ["input", "prediction", "map", "mean"],
                      list(zip(u, pred, tm.s_delta(u, toy), toy.mean(u))))
        artifacts.append("toy1_deterministic.csv")
    if run_diff:
        model, res = ex.train_toy1_diffusion(toy, tcfg, rng.child(2))
        mets = ex.toy1_diffusion_metrics(
            model, res.params, toy, tcfg, rng.child(3),
            n_cond=cfg["sample"]["n_conditions"],
            n_samples=cfg["sample"]["n_samples"],
        )
        samples = mets.pop("samples")
        conds = mets.pop("conditions")
        results["diffusion"] = {**mets, "epochs": res.epochs_run}
        results["diffusion"].pop("per_condition_w1")
        rows = []
        for i, c in enumerate(conds):
            for s in samples[i, :, 0]:
                rows.append([c, s])
        fio.write_csv(os.path.join(out, "toy1_diffusion_scatter.csv"),
                      ["input", "sample"], rows)
        artifacts.append("toy1_diffusion_scatter.csv")
    fio.write_json(os.path.join(out, "toy1_metrics.json"), results)
    artifacts.append("toy1_metrics.json")
    fio.write_run_manifest(out, cfg, artifacts, started)
    print(json.dumps(results, indent=2, default=float))
    return EXIT_OK


def cmd_toy2(args):
    cfg = _load_config(args)
    cfg["experiment"] = "toy2"
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    started = time.time()
    toy = cf.build_toy_config(cfg)
    tcfg = cf.build_train_config(cfg)
    rng = RngStream(cfg["seed"])
    artifacts = []
    results = {}
    det_model = det_res = None
    diff_model = diff_res = None
    if args.mode in ("det", "both"):
        det_model, det_res = ex.train_toy2_deterministic(toy, tcfg, rng.child(1))
        results["deterministic"] = {
            **ex.toy2_deterministic_metrics(det_model, det_res.params, toy),
            "epochs": det_res.epochs_run,
        }
    if args.mode in ("diff", "both"):
        diff_model, diff_res = ex.train_toy2_diffusion(toy, tcfg, rng.child(2))
        mets = ex.toy2_diffusion_metrics(
            diff_model, diff_res.params, toy, tcfg, rng.child(3),
            n_cond=cfg["sample"]["n_conditions"],
            n_samples=cfg["sample"]["n_samples"],
        )
        samples = mets.pop("samples")
        conds = mets.pop("conditions")
        results["diffusion"] = {**mets, "epochs": diff_res.epochs_run}
        rows = []
        for i, c in enumerate(conds):
            for s in samples[i]:
                rows.append([c, s[0], s[1]])
        fio.write_csv(os.path.join(out, "toy2_diffusion_scatter.csv"),
                      ["input", "sample_x", "sample_y"], rows)
        artifacts.append("toy2_diffusion_scatter.csv")
    if det_model is not None and diff_model is not None:
        spec_data = ex.toy2_spectrum_data(
            toy, det_model, det_res.params, diff_model, diff_res.params,
            tcfg, rng.child(4),
        )
        fio.write_csv(
            os.path.join(out, "toy2_spectrum.csv"),
            ["k", "target", "deterministic", "diffusion"],
            list(zip(spec_data["k"].tolist(), spec_data["target"],
                     spec_data["deterministic"], spec_data["diffusion"])),
        )
        artifacts.append("toy2_spectrum.csv")
        k = toy.k
        results["spectrum_at_k"] = {
            "target": float(spec_data["target"][k]),
            "deterministic": float(spec_data["deterministic"][k]),
            "diffusion": float(spec_data["diffusion"][k]),
        }
    fio.write_json(os.path.join(out, "toy2_metrics.json"), results)
    artifacts.append("toy2_metrics.json")
    fio.write_run_manifest(out, cfg, artifacts, started)
    print(json.dumps(results, indent=2, default=float))
    return EXIT_OK


def cmd_print_config(args):
    print(json.dumps(cf.default_config(args.experiment), indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="flowgen",
        description="Conditional diffusion for statistical flow simulation",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("print-config", help="print a full default config")
    sp.add_argument("--experiment", choices=cf.EXPERIMENTS, default="toy1")
    sp.set_defaults(fn=cmd_print_config)

    sp = sub.add_parser("gen-data", help="generate a toy CSV or solver ensemble")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model on generated data")
    common(sp)
    sp.add_argument("--data", default=None, help="dataset directory")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sample", help="draw conditional samples from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--condition", default=None,
                    help="comma-separated condition values")
    sp.add_argument("--condition-file", default=None,
                    help="tensor file (without .bin/.json suffix)")
    sp.add_argument("--n-samples", type=int, default=100)
    sp.add_argument("--steps", type=int, default=None,
                    help="reverse steps (default 128 VE / 200 VP)")
    sp.add_argument("--lead-time", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("rollout", help="autoregressive sampling over a time list")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--condition", default=None)
    sp.add_argument("--condition-file", default=None)
    sp.add_argument("--times", required=True, help="comma-separated times")
    sp.add_argument("--n-samples", type=int, default=1)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_rollout)

    sp = sub.add_parser("eval", help="compare generated vs reference ensembles")
    sp.add_argument("--generated", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--time-index", type=int, default=-1)
    sp.add_argument("--macro-id", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("toy1", help="oscillatory scalar-map experiment")
    common(sp)
    sp.add_argument("--mode", choices=("det", "diff", "both"), default="both")
    sp.set_defaults(fn=cmd_toy1)

    sp = sub.add_parser("toy2", help="unit-circle spectral experiment")
    common(sp)
    sp.add_argument("--mode", choices=("det", "diff", "both"), default="both")
    sp.set_defaults(fn=cmd_toy2)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except cf.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (fl.CflError, fl.EnergyGrowthError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
