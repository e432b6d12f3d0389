"""Command-line front end: load, generate, perturb, initialize, optimize, evaluate.

Exit codes: 0 on success/convergence, 1 on I/O or parse errors, 2 when the
linear system is not positive definite (usually an unconstrained gauge -
no fixed variable).

The optional --config JSON file carries a RunConfig (solver settings,
kernel policy entries, seed); explicitly passed flags override it.  Config
files round-trip byte-identically through dump -> load -> dump.

Stats files contain the deterministic per-iteration fields only (seeded
reruns are byte-identical); pass --stats-times to append wall times.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataio, solver as sv
from . import manifold as mf
from .factors import IcpFactor
from .graph import CorrespondencePool, FactorGraph, Variable, VariableStatus
from .robust import RobustifierPolicy, parse_kernel_spec
from .solver import LmConfig, SolverConfig
from .sparse_block import NotPositiveDefinite


@dataclass
class RunConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    kernels: list = field(default_factory=list)  # "kind:c[:factor-type]" strings
    seed: int = 0

    def to_json(self) -> str:
        doc = {
            "solver": {
                "algorithm": self.solver.algorithm,
                "max_iterations": self.solver.max_iterations,
                "epsilon": self.solver.epsilon,
                "lm": asdict(self.solver.lm),
                "dgn_lambda": self.solver.dgn_lambda,
                "auto_fix_first": self.solver.auto_fix_first,
                "recompute_H_inliers": self.solver.recompute_H_inliers,
                "ordering": self.solver.ordering,
            },
            "kernels": list(self.kernels),
            "seed": self.seed,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        doc = json.loads(text)
        s = doc.get("solver", {})
        lm = LmConfig(**s.get("lm", {}))
        cfg = SolverConfig(
            algorithm=s.get("algorithm", "gn"),
            max_iterations=s.get("max_iterations", 25),
            epsilon=s.get("epsilon", 1e-6),
            lm=lm,
            dgn_lambda=s.get("dgn_lambda", 1e-3),
            auto_fix_first=s.get("auto_fix_first", False),
            recompute_H_inliers=s.get("recompute_H_inliers", False),
            ordering=s.get("ordering", "amd"),
        )
        return RunConfig(cfg, list(doc.get("kernels", [])), int(doc.get("seed", 0)))


def _policy_from_specs(specs):
    rules = {}
    default = None
    for spec in specs or []:
        kernel, ftype = parse_kernel_spec(spec)
        if ftype is None:
            default = kernel
        else:
            rules[ftype] = kernel
    policy = RobustifierPolicy(rules)
    if default is not None:
        orig = policy.kernel_for

        def kernel_for(factor):
            if getattr(factor, "kernel", None) is not None:
                return factor.kernel
            return rules.get(factor.type_tag, default)

        policy.kernel_for = kernel_for
    return policy


def _apply_fix(graph, fix):
    if fix is None:
        return
    if fix == "first":
        keys = sorted(graph.variables)
        poses = [
            k
            for k in keys
            if isinstance(graph.variables[k].value, (mf.Isometry3, mf.Isometry2))
        ]
        target = poses[0] if poses else keys[0]
    else:
        target = int(fix)
        if target not in graph.variables:
            raise dataio.ParseError(0, f"--fix: no variable with key {target}")
    graph.variables[target].status = VariableStatus.FIXED


def _merge_config(args) -> RunConfig:
    run = RunConfig()
    if getattr(args, "config", None):
        with open(args.config) as fh:
            run = RunConfig.from_json(fh.read())
    if getattr(args, "algorithm", None) is not None:
        run.solver.algorithm = args.algorithm
    if getattr(args, "iterations", None) is not None:
        run.solver.max_iterations = args.iterations
    if getattr(args, "epsilon", None) is not None:
        run.solver.epsilon = args.epsilon
    if getattr(args, "kernel", None):
        run.kernels = list(args.kernel)
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    return run


def _write_stats(path, stats, include_times):
    with open(path, "w") as fh:
        fh.write("\n".join(sv.stats_lines(stats, include_times=include_times)) + "\n")


def _parse_vec6(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 6:
        raise ValueError("transform needs 6 comma-separated values: x,y,z,phi,gamma,psi")
    return np.array(vals)


def cmd_optimize(args):
    graph = dataio.load_pose_graph(args.graph)
    run = _merge_config(args)
    _apply_fix(graph, args.fix)
    policy = _policy_from_specs(run.kernels)
    t0 = time.perf_counter()
    stats = sv.solve(graph, run.solver, policy)
    wall = time.perf_counter() - t0
    if args.output:
        dataio.save_pose_graph(graph, args.output)
    if args.stats:
        _write_stats(args.stats, stats, args.stats_times)
    final = stats[-1]
    print(f"iterations: {len(stats)}")
    print(f"final_chi2: {final.chi2!r}")
    print(f"wall_time_s: {wall:.6f}")
    return 0


def cmd_generate(args):
    rules = dataio.EdgeRules(loop_closures=not args.no_closures, closure_prob=args.closure_prob)
    gt, measured = dataio.generate_synthetic(args.kind, args.poses, rules, args.seed)
    dataio.save_pose_graph(measured, args.output)
    if args.ground_truth:
        dataio.save_pose_graph(gt, args.ground_truth)
    print(f"generated {args.kind} graph: {len(measured.variables)} vertices, "
          f"{len(measured.factors)} edges -> {args.output}")
    return 0


def cmd_perturb(args):
    graph = dataio.load_pose_graph(args.graph)
    spec = dataio.NoiseSpec(
        sigma_t=_parse_diag(args.noise_t, 3),
        sigma_r=_parse_diag(args.noise_r, 3),
        sigma_land=_parse_diag(args.noise_land, 3),
        seed=args.seed if args.seed is not None else 0,
    )
    noisy = dataio.perturb_awgn(graph, spec)
    dataio.save_pose_graph(noisy, args.output)
    print(f"perturbed {len(noisy.factors)} edges -> {args.output}")
    return 0


def _parse_diag(text, n):
    if text is None:
        return np.zeros(n)
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise ValueError(f"expected 1 or {n} comma-separated variances, got {len(vals)}")
    return np.array(vals)


def cmd_init(args):
    graph = dataio.load_pose_graph(args.graph)
    dataio.breadth_first_init(graph, args.root)
    dataio.save_pose_graph(graph, args.output)
    print(f"initialized from root {args.root} -> {args.output}")
    return 0


def cmd_ate(args):
    est = dataio.load_pose_graph(args.estimate)
    gt = dataio.load_pose_graph(args.ground_truth)
    m = dataio.ate_rmse(est, gt, align=not args.no_align)
    print(f"ate_pos: {m.ate_pos!r}")
    print(f"ate_rot: {m.ate_rot!r}")
    return 0


def cmd_icp(args):
    run = _merge_config(args)
    if args.generate:
        if args.transform is None:
            raise ValueError("--generate requires --transform (the ground-truth isometry)")
        rng = dataio.StreamRng(run.seed)
        fixed = np.array([[rng.uniform() * 4 - 2 for _ in range(3)] for _ in range(args.generate)])
        T_gt = mf.v2t(_parse_vec6(args.transform))
        moving = fixed @ T_gt.R.T + T_gt.t
        pairs = [(i, i) for i in range(len(fixed))]
    else:
        if not (args.fixed and args.moving):
            raise ValueError("either --generate or both --fixed and --moving are required")
        fixed = dataio.load_point_cloud(args.fixed)
        moving = dataio.load_point_cloud(args.moving)
        if args.correspondences:
            pairs = dataio.load_correspondences(args.correspondences)
        else:
            if len(fixed) != len(moving):
                raise ValueError("clouds differ in size; provide --correspondences")
            pairs = [(i, i) for i in range(len(fixed))]
        T_gt = mf.v2t(_parse_vec6(args.transform)) if args.transform else None

    graph = FactorGraph()
    graph.add_variable(Variable(0, mf.Isometry3.identity()))
    template = IcpFactor(0, 0, np.zeros(3), np.zeros(3))
    graph.add_factor(CorrespondencePool(0, template, fixed, moving, pairs))
    policy = _policy_from_specs(run.kernels)
    stats = sv.solve(graph, run.solver, policy)
    if args.stats:
        _write_stats(args.stats, stats, args.stats_times)
    X = graph.variables[0].value
    est = dataio.stable_quat(X.R)
    print(f"iterations: {len(stats)}")
    print(f"final_chi2: {stats[-1].chi2!r}")
    print("estimate_t:", " ".join(repr(float(v)) for v in X.t))
    print("estimate_q:", " ".join(repr(float(v)) for v in est))
    if T_gt is not None:
        e_pos, e_rot = dataio.registration_error(X, T_gt)
        print(f"e_pos: {e_pos!r}")
        print(f"e_rot: {e_rot!r}")
    return 0


def cmd_dump_config(args):
    run = _merge_config(args)
    text = run.to_json()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fgopt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_solver_flags(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--algorithm", choices=["gn", "lm", "dgn"])
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--kernel", action="append", help="kind:threshold[:factor-type]")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--stats", help="write per-iteration stats to this file")
        sp.add_argument(
            "--stats-times", action="store_true", help="append wall times to stats records"
        )

    sp = sub.add_parser("optimize", help="optimize a pose-graph file")
    sp.add_argument("graph")
    add_solver_flags(sp)
    sp.add_argument("--fix", help="variable id to fix, or 'first'")
    sp.add_argument("--output", help="write the optimized graph here")
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("generate", help="generate a synthetic pose graph")
    sp.add_argument("kind", choices=["ring", "grid", "sphere", "torus"])
    sp.add_argument("--poses", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-closures", action="store_true")
    sp.add_argument("--closure-prob", type=float, default=1.0)
    sp.add_argument("--output", required=True)
    sp.add_argument("--ground-truth", help="also save the ground-truth graph")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("perturb", help="inject seeded white noise into edges")
    sp.add_argument("graph")
    sp.add_argument("--noise-t", help="translation variances, e.g. 0.1,0.1,0.1")
    sp.add_argument("--noise-r", help="rotation variances")
    sp.add_argument("--noise-land", help="landmark variances")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_perturb)

    sp = sub.add_parser("init", help="breadth-first initialization from a root")
    sp.add_argument("graph")
    sp.add_argument("--root", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("ate", help="absolute trajectory error between two graphs")
    sp.add_argument("estimate")
    sp.add_argument("ground_truth")
    sp.add_argument("--no-align", action="store_true")
    sp.set_defaults(func=cmd_ate)

    sp = sub.add_parser("icp", help="point-cloud registration via a correspondence pool")
    sp.add_argument("--fixed", help="fixed cloud (x y z lines)")
    sp.add_argument("--moving", help="moving cloud (x y z lines)")
    sp.add_argument("--correspondences", help="moving_idx fixed_idx lines")
    sp.add_argument("--generate", type=int, help="make a synthetic cloud of N points")
    sp.add_argument("--transform", help="ground-truth x,y,z,phi,gamma,psi")
    add_solver_flags(sp)
    sp.set_defaults(func=cmd_icp)

    sp = sub.add_parser("dump-config", help="print the effective RunConfig as JSON")
    add_solver_flags(sp)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_dump_config)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NotPositiveDefinite as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (dataio.ParseError, OSError, ValueError, KeyError, dataio.Disconnected) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
