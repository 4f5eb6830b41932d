"""Pipeline command line.

Subcommands: synth (generate a synthetic scene directory), match (broad plus
narrow matching from keypoint files), cluster (dendrogram report), sam (full
reconstruction), eval (score a model against the generating scene).  Errors
are reported as one JSON object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import clustering, engine, fileio, graph, synthetic
from .tracks import TrackSet


class CliError(Exception):
    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


def _add_config_flags(parser):
    parser.add_argument("--config", help="pipeline config file")
    for f in dataclasses.fields(fileio.PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None)


def _load_config(args) -> fileio.PipelineConfig:
    config = (
        fileio.read_config(args.config) if args.config else fileio.PipelineConfig()
    )
    config = config.apply_env(os.environ)
    overrides = []
    for f in dataclasses.fields(fileio.PipelineConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides.append(f"{f.name} = {v}")
    if overrides:
        parsed = fileio.PipelineConfig.parse("\n".join(overrides))
        for f in dataclasses.fields(fileio.PipelineConfig):
            if getattr(args, f.name, None) is not None:
                setattr(config, f.name, getattr(parsed, f.name))
    return config


def _require_dir(path, what):
    if not path or not os.path.isdir(path):
        raise CliError(f"{what} directory not found: {path}")
    return path


def _require_file(path, what):
    if not path or not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_images(directory, intrinsics=None):
    data = fileio.read_image_directory(directory)
    if not data:
        raise CliError(f"no keypoint files in {directory}")
    images = {}
    for img, (size, kps, desc) in data.items():
        images[img] = engine.ImageInfo(
            width=size[0],
            height=size[1],
            keypoints=kps,
            intrinsics=None if intrinsics is None else intrinsics.get(img),
        )
    return images, data


def _verify_pairs(data, pairs, config, candidate_matches=None):
    edges = []
    rejections = []
    diag = float(np.hypot(*data[next(iter(data))][0]))
    vcfg = config.verify_config(diag)
    for i, j in pairs:
        matches = None if candidate_matches is None else candidate_matches.get((i, j))
        if candidate_matches is not None and matches is None:
            continue
        out = graph.narrow_phase_verify(
            (i, j),
            data[i][1],
            data[j][1],
            data[i][2],
            data[j][2],
            vcfg,
            candidate_matches=matches,
        )
        if isinstance(out, graph.EpipolarEdge):
            edges.append(out)
        else:
            rejections.append(out)
    return edges, rejections


def _propose_pairs(data, config):
    """Broad phase: histogram over the high-scale descriptor subsets, then
    the repeated maximum spanning tree selection."""
    ids = sorted(data)
    subsets = []
    for img in ids:
        size, kps, desc = data[img]
        if desc is None:
            raise CliError(f"image {img} has no descriptors; supply matches instead")
        order = np.argsort(-kps[:, 2], kind="stable")[: config.keypoints_per_image]
        subsets.append(desc[order])
    hist = graph.broad_phase_histogram(subsets)
    try:
        sel = graph.extract_m_connected_subgraph(hist, m=config.edge_connectivity)
    except graph.GraphDisconnected as exc:
        raise CliError(f"match graph disconnected: components {exc.components}")
    return [(ids[a], ids[b]) for a, b in sel.edges], sel


def _tracks_from_edges(edges, config) -> TrackSet:
    return graph.build_tracks(edges, min_track_length=config.final_min_track_length)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    config = _load_config(args)
    scene = synthetic.generate(
        args.kind,
        args.cameras,
        args.points,
        seed=args.seed,
        noise_sigma=args.noise,
        outlier_rate=args.outliers,
        image_size=(args.width, args.height),
    )
    fileio.write_scene(scene, args.out)
    fileio.write_config(config, os.path.join(args.out, "config.txt"))
    print(f"wrote scene '{args.kind}' ({args.cameras} cameras) to {args.out}")
    return 0


def cmd_match(args):
    config = _load_config(args)
    _require_dir(args.input, "input")
    images, data = _load_images(args.input)
    matches_path = os.path.join(args.input, "matches.txt")
    if os.path.isfile(matches_path) and not args.broad_phase:
        candidate = fileio.read_matches(matches_path)
        pairs, sel = _select_pairs_from_counts(data, candidate, config)
        edges, rejections = _verify_pairs(data, pairs, config, candidate)
    else:
        pairs, sel = _propose_pairs(data, config)
        edges, rejections = _verify_pairs(data, pairs, config)
    out = args.out or os.path.join(args.input, "verified_matches.txt")
    fileio.write_edges(out, edges)
    print(
        f"verified {len(edges)} pairs "
        f"({len(rejections)} rejected, connectivity {sel.achieved_connectivity})"
    )
    return 0 if edges else 1


def _select_pairs_from_counts(data, candidate, config):
    """Broad-phase contract on supplied match counts: keep the union of
    repeated maximum spanning trees of the count graph."""
    ids = sorted(data)
    index = {img: k for k, img in enumerate(ids)}
    counts = np.zeros((len(ids), len(ids)), int)
    for (i, j), m in candidate.items():
        counts[index[i], index[j]] = counts[index[j], index[i]] = len(m)
    try:
        sel = graph.extract_m_connected_subgraph(
            graph.MatchHistogram(counts), m=config.edge_connectivity
        )
    except graph.GraphDisconnected as exc:
        raise CliError(f"match graph disconnected: components {exc.components}")
    return [(ids[a], ids[b]) for a, b in sel.edges], sel


def _load_edges_or_verify(args, config, data):
    verified = os.path.join(args.input, "verified_matches.txt")
    if os.path.isfile(verified):
        return fileio.read_edges(verified)
    matches_path = os.path.join(args.input, "matches.txt")
    if os.path.isfile(matches_path):
        candidate = fileio.read_matches(matches_path)
        pairs, _ = _select_pairs_from_counts(data, candidate, config)
        edges, _ = _verify_pairs(data, pairs, config, candidate)
        return edges
    pairs, _ = _propose_pairs(data, config)
    edges, _ = _verify_pairs(data, pairs, config)
    return edges


def cmd_cluster(args):
    config = _load_config(args)
    _require_dir(args.input, "input")
    images, data = _load_images(args.input)
    edges = _load_edges_or_verify(args, config, data)
    tracks = _tracks_from_edges(edges, config)
    usable = TrackSet([t for t in tracks if len(t) >= config.min_track_length])
    keypoints = {img: data[img][1] for img in data}
    sizes = {img: data[img][0] for img in data}
    affinity = clustering.affinity_matrix(usable, keypoints, sizes)
    root = clustering.build_balanced_dendrogram(1.0 - affinity, ell=config.ell)
    print(root.render())
    print(f"height {root.height} over {len(images)} images, {len(usable)} tracks")
    return 0


def cmd_sam(args):
    config = _load_config(args)
    _require_dir(args.input, "input")
    intrinsics = None
    if config.mode == engine.CALIBRATED:
        path = os.path.join(args.input, "intrinsics.txt")
        if not os.path.isfile(path):
            raise CliError("calibrated mode needs intrinsics.txt in the input")
        intrinsics = fileio.read_intrinsics(path)
    images, data = _load_images(args.input, intrinsics)
    edges = _load_edges_or_verify(args, config, data)
    tracks = _tracks_from_edges(edges, config)
    try:
        result = engine.run(images, tracks, edges, config.engine_config())
    except engine.NoModel as exc:
        raise CliError(str(exc), code=1)
    os.makedirs(args.out, exist_ok=True)
    for k, model in enumerate(result.models):
        fileio.write_model(model, args.out, stem=f"model_{k}", tracks=tracks)
    with open(os.path.join(args.out, "report.txt"), "w", newline="\n") as f:
        f.write("\n".join(result.report_lines) + "\n\n")
        f.write(result.dendrogram_text + "\n")
    for line in result.report_lines:
        print(line)
    print(
        f"{len(result.models)} model(s); largest has "
        f"{max(len(m.cameras) for m in result.models)} cameras"
    )
    return 0


def cmd_eval(args):
    from . import geometry as geo

    _require_dir(args.truth, "truth")
    _require_dir(args.model, "model")
    scene = fileio.read_scene(args.truth)
    model = fileio.read_model(args.model, stem=args.stem)

    est, true = [], []
    for tp in model.tie_points:
        members = getattr(tp, "observed_keypoints", None)
        if not members:
            continue
        votes = {}
        for img, kp in members.items():
            mapping = scene.kp_to_point.get(img)
            if mapping is not None and kp < len(mapping):
                p = int(mapping[kp])
                votes[p] = votes.get(p, 0) + 1
        if not votes:
            continue
        p = max(votes, key=lambda q: (votes[q], -q))
        est.append(tp.position)
        true.append(scene.points[p])
    if len(est) < 3:
        raise CliError("model shares too few points with the truth", code=1)
    est = np.array(est)
    true = np.array(true)
    s, R, t = geo.absolute_orientation_similarity(est, true)
    aligned = geo.apply_similarity(est, s, R, t)
    rms = float(np.sqrt(np.mean(np.sum((aligned - true) ** 2, axis=1))))
    print(f"control-point registration over {len(est)} points: RMS {rms:.6f}")

    focal_errors = []
    for img, cam in model.cameras.items():
        if cam.kind == "euclidean" and img in scene.cameras:
            true_f = scene.cameras[img].intrinsics.focal
            focal_errors.append(abs(cam.intrinsics.focal - true_f) / true_f)
    if focal_errors:
        print(f"median focal error {100 * float(np.median(focal_errors)):.3f}%")
    if args.rms_threshold is not None and rms > args.rms_threshold:
        raise CliError(f"RMS {rms} above {args.rms_threshold}", code=1)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hsfm", description="hierarchical structure-and-motion pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("--kind", default="ring",
                   choices=["ring", "grid", "two-cluster", "planar", "low-parallax"])
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--points", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--width", type=float, default=2880.0)
    p.add_argument("--height", type=float, default=2160.0)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("match", help="verify image pairs geometrically")
    p.add_argument("--input", required=True)
    p.add_argument("--out")
    p.add_argument("--broad-phase", action="store_true",
                   help="force descriptor broad phase even when matches.txt exists")
    _add_config_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("cluster", help="print the balanced dendrogram")
    p.add_argument("--input", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("sam", help="run the full reconstruction")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sam)

    p = sub.add_parser("eval", help="score a model against a synthetic truth")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--stem", default="model_0")
    p.add_argument("--rms-threshold", type=float, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return exc.code
    except (fileio.ParseError, OSError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
