"""Command line entry point: ``tactile-vla <subcommand> [options]``.

Global flags come before the subcommand::

    tactile-vla --out runs --seed 0 collect --task circle2
    tactile-vla --out runs pretrain-tactile
    tactile-vla --out runs train --demos runs/demos_circle2.tvep --variant VisionOnly
    tactile-vla --out runs eval --checkpoint runs/policy_VisionOnly.ckpt --task circle2 --episodes 30
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import dataset as D
from ..checkpoint import load_encoder, load_policy, save_encoder
from ..policy import adapter_count
from . import ablate as AB
from . import probe as PR
from . import training as TR
from .config import ConfigKeyError, KEYS, load_config
from .evaluate import EPISODE_COLUMNS, SERIES_COLUMNS, evaluate, write_csv
from .report import SchemaError, report

log = logging.getLogger("tactile_vla")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tactile-vla", description="Tactile-conditioned VLA policies on a simulated insertion bench.",
                                epilog="config keys: " + ", ".join(KEYS))
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides the config file)")
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    c = sub.add_parser("collect", help="record scripted-expert demonstrations")
    c.add_argument("--task", required=True)
    c.add_argument("--demos", type=int, default=None)
    c.add_argument("--noise", type=float, default=None)

    c = sub.add_parser("pretrain-tactile", help="generate probe sets and pretrain the tactile encoder")
    c.add_argument("--probe-n", type=int, default=None)
    c.add_argument("--steps", type=int, default=None)

    c = sub.add_parser("probe", help="probe accuracy table for tactile encoders")
    c.add_argument("--encoder", type=Path, required=True)
    c.add_argument("--probes", type=Path, default=None, help="directory with probe_*.tvpr (default: --out)")

    c = sub.add_parser("train", help="behaviour cloning from scratch")
    c.add_argument("--demos", type=Path, nargs="+", required=True)
    c.add_argument("--variant", default=None)
    c.add_argument("--encoder", type=Path, default=None)
    c.add_argument("--steps", type=int, default=None)

    c = sub.add_parser("finetune", help="LoRA finetune a VisionOnly checkpoint into a tactile variant")
    c.add_argument("--base", type=Path, required=True)
    c.add_argument("--demos", type=Path, nargs="+", required=True)
    c.add_argument("--encoder", type=Path, required=True)
    c.add_argument("--variant", default=None)
    c.add_argument("--steps", type=int, default=None)

    c = sub.add_parser("eval", help="seeded rollout evaluation")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--expert", action="store_true", help="bypass the policy and run the scripted expert")
    c.add_argument("--task", required=True)
    c.add_argument("--episodes", type=int, default=None)
    c.add_argument("--camera", default="Clean", choices=["Clean", "Dim80", "Freeze50"])

    c = sub.add_parser("ablate", help="depth or camera ablation sweep")
    c.add_argument("--suite", required=True, choices=["depth", "camera"])
    c.add_argument("--checkpoint", action="append", default=[], metavar="METHOD=PATH", help="camera suite policies")
    c.add_argument("--task", default="circle3", help="camera suite task")
    c.add_argument("--base", type=Path, help="depth suite: VisionOnly checkpoint to finetune from")
    c.add_argument("--demos", type=Path, nargs="*", default=[])
    c.add_argument("--encoder", type=Path)
    c.add_argument("--episodes", type=int, default=None)

    c = sub.add_parser("report", help="tables and plot data from per-episode CSVs")
    c.add_argument("--inputs", type=Path, nargs="*", default=[])
    c.add_argument("--series", type=Path, nargs="*", default=[])
    return p


def _cmd_collect(a, cfg) -> int:
    recs = D.collect_demos(a.task, cfg.demos, cfg.noise_scale, cfg.seed)
    path = D.write_episodes(recs, a.out / f"demos_{a.task}.tvep")
    steps = [len(r) for r in recs]
    print(f"wrote {len(recs)} episodes ({sum(steps)} steps, mean {sum(steps) / max(len(steps), 1):.1f}) to {path}")
    return 0


def _cmd_pretrain(a, cfg) -> int:
    sets = PR.make_probe_sets(cfg.probe_n, cfg.seed)
    for t, ps in sets.items():
        D.write_probes(ps, a.out / f"probe_{t.value}.tvpr")
    enc, losses = PR.pretrain_tactile(sets, steps=cfg.probe_steps, seed=cfg.seed)
    path = save_encoder(enc, a.out / "tactile_encoder.ckpt", cfg.seed, {"final_loss": losses[-1] if losses else None})
    print(f"wrote frozen tactile encoder to {path}")
    return 0


def _cmd_probe(a, cfg) -> int:
    folder = a.probes or a.out
    sets = {t: D.read_probes(folder / f"probe_{t.value}.tvpr") for t in PR.PROBE_TASKS}
    encoders = {"pretrained": load_encoder(a.encoder), "random": PR.random_encoder(seed=cfg.seed + 1)}
    table = PR.probe_eval(encoders, sets, cfg.seed)
    path = PR.write_probe_table(table, a.out / "probe_table.csv")
    print(path.read_text(), end="")
    return 0


def _encoder_or_none(path):
    return load_encoder(path) if path else None


def _cmd_train(a, cfg) -> int:
    res = TR.train(a.demos, cfg, _encoder_or_none(a.encoder), a.out)
    print(f"final loss {res.losses[-1]:.4f}; checkpoint {res.checkpoints[-1]}")
    return 0


def _cmd_finetune(a, cfg) -> int:
    base = load_policy(a.base, cfg.dtype)
    res = TR.finetune(base, a.demos, cfg, load_encoder(a.encoder), out_dir=a.out)
    print(f"adapter parameters {adapter_count(res.policy)}; final loss {res.losses[-1]:.4f}; checkpoint {res.checkpoints[-1]}")
    return 0


def _cmd_eval(a, cfg) -> int:
    policy = None if a.expert else load_policy(a.checkpoint, cfg.dtype)
    res = evaluate(policy, a.task, cfg.episodes, a.camera, cfg.base_seed, expert_noise=cfg.noise_scale)
    method = res.rows[0]["method"] if res.rows else "none"
    stem = f"eval_{method}_{a.task}_{a.camera}"
    write_csv(res.rows, a.out / f"{stem}.csv", EPISODE_COLUMNS)
    write_csv(res.series, a.out / f"{stem}_forces.csv", SERIES_COLUMNS)
    m = res.metrics
    print(f"{method} {a.task} {a.camera}: success {m.success_rate:.1f}% direct {m.direct_rate:.1f}% "
          f"force {m.avg_max_force:.2f}±{m.std_max_force:.2f} N time {m.avg_time:.2f}±{m.std_time:.2f} s -> {a.out / stem}.csv")
    return 0


def _cmd_ablate(a, cfg) -> int:
    if a.suite == "camera":
        if not a.checkpoint:
            raise SystemExit("ablate --suite camera needs --checkpoint METHOD=PATH (one per method)")
        policies = {}
        for spec in a.checkpoint:
            method, _, path = spec.partition("=")
            policies[method] = load_policy(path, cfg.dtype)
        rows, eps = AB.camera_suite(policies, a.task, n_episodes=cfg.episodes, base_seed=cfg.base_seed)
    else:
        if not (a.base and a.demos and a.encoder):
            raise SystemExit("ablate --suite depth needs --base, --demos and --encoder")
        base, enc = load_policy(a.base, cfg.dtype), load_encoder(a.encoder)

        def make(dv):
            return TR.finetune(base, a.demos, replace(cfg, depth_variant=dv.value), enc, "TacFiLM").policy

        rows, eps = AB.depth_suite(make, n_episodes=cfg.episodes, base_seed=cfg.base_seed)
    paths = AB.write_ablation(rows, eps, a.out, a.suite)
    print(paths["summary"].read_text(), end="")
    return 0


def _cmd_report(a, cfg) -> int:
    paths = report(a.inputs, a.out / "report", a.series)
    print(paths["table"].read_text(), end="")
    return 0


COMMANDS = {
    "collect": _cmd_collect,
    "pretrain-tactile": _cmd_pretrain,
    "probe": _cmd_probe,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    overrides = {"seed": a.seed}
    for key in ("steps", "variant", "episodes"):
        overrides[key] = getattr(a, key, None)
    if getattr(a, "demos", None) is not None and a.command == "collect":
        overrides["demos"] = a.demos
    if a.command == "collect":
        overrides["noise_scale"] = a.noise
    if a.command == "pretrain-tactile":
        overrides["probe_n"], overrides["probe_steps"] = a.probe_n, a.steps
        overrides["steps"] = None
    try:
        cfg = load_config(a.config, **overrides)
    except ConfigKeyError as e:
        parser.print_usage(sys.stderr)
        print(f"tactile-vla: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        parser.print_usage(sys.stderr)
        print(f"tactile-vla: error: {e}", file=sys.stderr)
        return 2
    a.out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[a.command](a, cfg)
    except (D.FormatError, SchemaError, FileNotFoundError, ValueError) as e:
        print(f"tactile-vla {a.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
