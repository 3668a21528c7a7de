"""Command-line entry point: every check and report as a scriptable run.

Subcommands: shapes | gradcheck | flops | toy-train | parity.
Exit codes are a contract: 0 = all checks passed, 1 = a check failed,
2 = usage or configuration error.

Configuration is one JSON document (strict: unknown keys rejected),
optionally overridden with repeatable ``--set dotted.key=value`` flags.
The defaults reproduce the six-scale SSD300 setup with part=2, C=256.
"""

from __future__ import annotations

import copy
import datetime
import json
import statistics
import sys
from pathlib import Path

import click
import numpy as np

from cfsam import backend, fixtures, flops, gradcheck as gc
from cfsam import tensor as T
from cfsam.harness import (
    DEFAULT_TASK_SHAPES,
    SyntheticTask,
    gen_pyramid,
    records_to_csv,
    toy_train,
)
from cfsam.module import (
    SSD300_SHAPES,
    CfsamConfig,
    ConfigError,
    FeaturePyramid,
    cfsam_forward,
    combine,
    flatten_concat,
    fuse_restore,
    init_weights,
    local_extract,
    partition,
    transform_blocks,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2

DEFAULT_CONFIG = {
    "pyramid": {"shapes": [list(s) for s in SSD300_SHAPES]},
    "cfsam": {
        "channels": 256,
        "part": 2,
        "num_heads": 4,
        "transformer_layers": 1,
        "ffn_ratio": 2.0,
        "use_positional_embedding": False,
        "residual_input": False,
        "seed": 0,
        "precision": "f64",
    },
    "task": {
        "shapes": [list(s) for s in DEFAULT_TASK_SHAPES],
        "seed": 1234,
        "n_examples": 8,
        "label_dim": 2,
        "noise": 0.01,
        "cross_scale_weight": 1.0,
    },
    "train": {"steps": 300, "lr": 0.05, "seeds": [0, 1, 2, 3, 4]},
    "gradcheck": {
        "shapes": [[4, 4, 6], [2, 2, 6]],
        "channels": 4,
        "num_heads": 1,
        "seeds": [0],
        "h": 1e-5,
        "tol": 1e-4,
    },
}


class CliConfigError(Exception):
    pass


def _merge_strict(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise CliConfigError(f"unknown configuration key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliConfigError(f"{here} must be an object")
            out[key] = _merge_strict(base[key], value, here)
        else:
            out[key] = value
    return out


def _apply_set(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliConfigError(f"--set expects key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise CliConfigError(f"unknown configuration key: {dotted}")
        node = node[k]
    last = keys[-1]
    if not isinstance(node, dict) or last not in node:
        raise CliConfigError(f"unknown configuration key: {dotted}")
    try:
        node[last] = json.loads(raw)
    except json.JSONDecodeError:
        node[last] = raw


def load_config(config_path, sets, precision=None, seed=None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliConfigError(f"cannot read config {config_path}: {exc}") from exc
        config = _merge_strict(config, doc)
    for assignment in sets:
        _apply_set(config, assignment)
    if precision is not None:
        config["cfsam"]["precision"] = precision
    if seed is not None:
        config["cfsam"]["seed"] = int(seed)
    return config


def build_cfsam_config(config: dict) -> CfsamConfig:
    return CfsamConfig(**config["cfsam"])


def pyramid_shapes(config: dict) -> list[tuple[int, int, int]]:
    return [tuple(s) for s in config["pyramid"]["shapes"]]


def write_report(out_dir: Path, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    # timestamp is the only non-deterministic entry; it stays on one line
    doc = {"timestamp": datetime.datetime.now().isoformat()}
    doc.update(payload)
    path = out_dir / "report.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def common_options(f):
    f = click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON configuration document.")(f)
    f = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                     help="Dotted-key override, repeatable.")(f)
    f = click.option("--out", "out_dir", type=click.Path(), default="cfsam-out",
                     help="Output directory.")(f)
    f = click.option("--precision", type=click.Choice(["f32", "f64"]), default=None)(f)
    f = click.option("--seed", type=int, default=None)(f)
    return f


@click.group()
def main():
    """Cross-layer feature self-attention checks and reports."""


def _load_or_die(config_path, sets, precision, seed) -> dict:
    try:
        return load_config(config_path, sets, precision, seed)
    except CliConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@main.command()
@common_options
@click.option("--inject-fault", "inject_fault", type=click.Choice(["restore"]), default=None,
              hidden=True, help="Test hook: corrupt a stage's weights.")
def shapes(config_path, sets, out_dir, precision, seed, inject_fault):
    """Run the full pipeline on a seeded pyramid and verify the shape contract."""
    config = _load_or_die(config_path, sets, precision, seed)
    try:
        cfg = build_cfsam_config(config)
        shapes_in = pyramid_shapes(config)
    except (ConfigError, TypeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    pyramid = gen_pyramid(shapes_in, seed=cfg.seed, precision=cfg.precision)
    weights = init_weights(cfg, pyramid.channel_list)
    if inject_fault == "restore":
        rng = np.random.default_rng(0)
        bad = [(T.Tensor(rng.standard_normal((cfg.channels, ci + 1)).astype(cfg.dtype)),
                T.Tensor(np.zeros(ci + 1, dtype=cfg.dtype)))
               for ci in pyramid.channel_list]
        weights.restore = bad

    stage = "local_extract"
    try:
        locals_ = local_extract(pyramid, weights, cfg)
        stage = "flatten_concat"
        L = flatten_concat(locals_)
        stage = "partition"
        ps = partition(L, cfg.part)
        stage = "transformer"
        psp = transform_blocks(ps, weights, cfg)
        stage = "combine"
        Lp = combine(psp)
        stage = "fuse_restore"
        out = fuse_restore(L, Lp, weights, pyramid.shapes)
    except (T.TensorError, ConfigError) as exc:
        click.echo(f"FAIL at stage {stage}: {exc}", err=True)
        write_report(Path(out_dir), {"command": "shapes", "passed": False,
                                     "failed_stage": stage, "error": str(exc)})
        sys.exit(EXIT_CHECK_FAILED)

    rows = []
    ok = True
    for i, (s_in, s_out) in enumerate(zip(pyramid.shapes, out.shapes)):
        match = tuple(s_in) == tuple(s_out)
        ok = ok and match
        rows.append({"scale": i, "input": list(s_in), "output": list(s_out), "match": match})
        click.echo(f"scale {i}: in {tuple(s_in)}  out {tuple(s_out)}  {'ok' if match else 'MISMATCH'}")
    write_report(Path(out_dir), {"command": "shapes", "passed": ok, "scales": rows,
                                 "backend": backend.ACTIVE_BACKEND})
    sys.exit(EXIT_OK if ok else EXIT_CHECK_FAILED)


@main.command("gradcheck")
@common_options
@click.option("--single-op", "single_op", type=click.Choice(["matmul"]), default=None,
              help="Sanity mode: check one primitive instead of the pipeline.")
@click.option("--inject-fault", "inject_fault", default=None, hidden=True,
              help="Test hook: corrupt the analytic gradient of this weight-group prefix.")
def gradcheck_cmd(config_path, sets, out_dir, precision, seed, single_op, inject_fault):
    """Finite-difference check of the end-to-end analytic gradients (forces f64)."""
    config = _load_or_die(config_path, sets, precision, seed)
    gconf = config["gradcheck"]
    tol = float(gconf["tol"])
    h = float(gconf["h"])

    if single_op == "matmul":
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        err = gc.check_tensor_op(lambda: T.sum_all(T.matmul(a, b)), [a, b], h=h)
        passed = err < tol
        click.echo(f"matmul: max rel err {err:.3e}  {'pass' if passed else 'FAIL'}")
        write_report(Path(out_dir), {"command": "gradcheck", "mode": "matmul",
                                     "max_rel_err": err, "tol": tol, "passed": passed})
        sys.exit(EXIT_OK if passed else EXIT_CHECK_FAILED)

    try:
        cfg = CfsamConfig(
            channels=int(gconf["channels"]),
            part=config["cfsam"]["part"],
            num_heads=int(gconf["num_heads"]),
            transformer_layers=config["cfsam"]["transformer_layers"],
            ffn_ratio=config["cfsam"]["ffn_ratio"],
            precision="f64",  # the tolerance is unattainable at f32
        )
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    shapes_ = [tuple(s) for s in gconf["shapes"]]

    worst: dict[str, float] = {}
    for s in gconf["seeds"]:
        res = gc.gradcheck_cfsam(cfg, shapes_, seed=int(s), h=h, corrupt_group=inject_fault)
        for name, err in res.items():
            worst[name] = max(worst.get(name, 0.0), err)
    passed = all(e < tol for e in worst.values())
    offenders = sorted(name for name, e in worst.items() if e >= tol)
    for name in sorted(worst):
        click.echo(f"{name}: max rel err {worst[name]:.3e}")
    click.echo(f"gradcheck: {'pass' if passed else 'FAIL ' + ', '.join(offenders)}")
    write_report(Path(out_dir), {"command": "gradcheck", "groups": worst, "tol": tol,
                                 "passed": passed, "offenders": offenders})
    sys.exit(EXIT_OK if passed else EXIT_CHECK_FAILED)


@main.command("flops")
@common_options
def flops_cmd(config_path, sets, out_dir, precision, seed):
    """Write the analytic MAC/parameter report, with a part=1 comparison."""
    config = _load_or_die(config_path, sets, precision, seed)
    try:
        cfg = build_cfsam_config(config)
        shapes_ = pyramid_shapes(config)
    except (ConfigError, TypeError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    report = flops.count_cfsam(cfg, shapes_)
    n_tokens = sum(h * w for h, w, _ in shapes_)
    quad_part = flops.attention_quadratic_macs(n_tokens, cfg.channels, cfg.part)
    quad_one = flops.attention_quadratic_macs(n_tokens, cfg.channels, 1)
    comparison = {
        "tokens": n_tokens,
        "part": cfg.part,
        "quadratic_macs_at_part": quad_part,
        "quadratic_macs_at_part_1": quad_one,
        "ratio": quad_part / quad_one if quad_one else None,
    }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "flops.csv").write_text(report.to_csv())
    write_report(out, {"command": "flops", "report": report.to_dict(),
                       "part_comparison": comparison})
    click.echo(report.to_csv().rstrip())
    click.echo(f"quadratic attention MACs: part={cfg.part}: {quad_part}  part=1: {quad_one}")
    sys.exit(EXIT_OK)


@main.command("toy-train")
@common_options
def toytrain_cmd(config_path, sets, out_dir, precision, seed):
    """Train the attention arm and the passthrough baseline; compare medians."""
    config = _load_or_die(config_path, sets, precision, seed)
    tconf = config["task"]
    task = SyntheticTask(
        shapes=[tuple(s) for s in tconf["shapes"]],
        seed=int(tconf["seed"]),
        n_examples=int(tconf["n_examples"]),
        label_dim=int(tconf["label_dim"]),
        noise=float(tconf["noise"]),
        cross_scale_weight=float(tconf["cross_scale_weight"]),
        precision=config["cfsam"]["precision"],
    )
    steps = int(config["train"]["steps"])
    lr = float(config["train"]["lr"])
    seeds = [int(s) for s in config["train"]["seeds"]]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    finals: dict[str, list[float]] = {"cfsam": [], "baseline": []}
    diverged: dict[str, list[int]] = {"cfsam": [], "baseline": []}
    for arm in ("cfsam", "baseline"):
        for s in seeds:
            records = toy_train(arm, task, steps=steps, lr=lr, seed=s)
            (out / f"{arm}_seed{s}.csv").write_text(records_to_csv(records))
            last = records[-1]
            finals[arm].append(last.loss)
            if last.diverged:
                diverged[arm].append(s)
            click.echo(f"{arm} seed {s}: final loss {last.loss:.6g}"
                       + (" (diverged)" if last.diverged else ""))

    med = {arm: statistics.median(v) for arm, v in finals.items()}
    lower = min(med, key=med.get)
    click.echo(f"median final loss: cfsam {med['cfsam']:.6g}  baseline {med['baseline']:.6g}"
               f"  -> {lower} arm is lower")
    write_report(out, {"command": "toy-train", "median_final_loss": med,
                       "lower_arm": lower, "final_losses": finals,
                       "diverged_seeds": diverged,
                       "steps": steps, "lr": lr, "seeds": seeds})
    any_diverged = any(diverged.values())
    sys.exit(EXIT_CHECK_FAILED if any_diverged else EXIT_OK)


def _weights_by_name(weights):
    return dict(weights.named_tensors())


@main.command("parity")
@click.argument("fixture_dir", type=click.Path())
@click.option("--generate", is_flag=True, help="Write self-consistent fixtures into the directory.")
@click.option("--tol", type=float, default=None,
              help="Max |out - expected| (default 1e-6 at f32, 1e-10 at f64).")
@common_options
def parity_cmd(fixture_dir, generate, tol, config_path, sets, out_dir, precision, seed):
    """Golden-fixture run: forward the stored pyramid and compare outputs."""
    config = _load_or_die(config_path, sets, precision, seed)
    root = Path(fixture_dir)

    if generate:
        try:
            cfg = build_cfsam_config(config)
            shapes_ = pyramid_shapes(config)
        except (ConfigError, TypeError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        pyramid = gen_pyramid(shapes_, seed=cfg.seed, precision=cfg.precision)
        weights = init_weights(cfg, pyramid.channel_list)
        out_pyr = cfsam_forward(pyramid, weights, cfg)
        root.mkdir(parents=True, exist_ok=True)
        fixtures.write_bundle(root / "input", [(f"map.{i}", m) for i, m in enumerate(pyramid.maps)])
        fixtures.write_bundle(root / "weights", list(weights.named_tensors()))
        fixtures.write_bundle(root / "expected", [(f"map.{i}", m) for i, m in enumerate(out_pyr.maps)])
        (root / "parity_config.json").write_text(json.dumps(config["cfsam"], indent=2) + "\n")
        click.echo(f"fixtures written to {root}")
        sys.exit(EXIT_OK)

    try:
        cfsam_doc = json.loads((root / "parity_config.json").read_text())
        cfg = CfsamConfig(**cfsam_doc)
        in_maps = fixtures.read_bundle(root / "input")
        stored = dict(fixtures.read_bundle(root / "weights"))
        expected = fixtures.read_bundle(root / "expected")
    except (OSError, json.JSONDecodeError, fixtures.FixtureFormatError, ConfigError, TypeError) as exc:
        click.echo(f"fixture error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)

    pyramid = FeaturePyramid([T.Tensor(arr) for _, arr in in_maps])
    weights = init_weights(cfg, pyramid.channel_list)
    named = _weights_by_name(weights)
    if set(named) != set(stored):
        click.echo("fixture error: weight manifest does not match configuration", err=True)
        sys.exit(EXIT_CONFIG)
    for name, arr in stored.items():
        if named[name].shape != arr.shape:
            click.echo(f"fixture error: {name} shaped {arr.shape}, expected {named[name].shape}", err=True)
            sys.exit(EXIT_CONFIG)
        named[name].data = np.ascontiguousarray(arr.astype(cfg.dtype))

    out_pyr = cfsam_forward(pyramid, weights, cfg)
    if tol is None:
        tol = 1e-6 if cfg.precision == "f32" else 1e-10
    worst = 0.0
    for (name, exp), got in zip(expected, out_pyr.maps):
        if exp.shape != got.shape:
            click.echo(f"FAIL: {name} shaped {got.shape}, expected {exp.shape}", err=True)
            sys.exit(EXIT_CHECK_FAILED)
        worst = max(worst, float(np.max(np.abs(exp - got.data))))
    passed = worst <= tol
    click.echo(f"parity: max abs deviation {worst:.3e} (tol {tol:.1e})  {'pass' if passed else 'FAIL'}")
    write_report(Path(out_dir), {"command": "parity", "max_abs_deviation": worst,
                                 "tol": tol, "passed": passed,
                                 "backend": backend.ACTIVE_BACKEND})
    sys.exit(EXIT_OK if passed else EXIT_CHECK_FAILED)


if __name__ == "__main__":
    main()
