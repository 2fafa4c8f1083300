"""Command-line entry points: attack, build-dict, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys

log = logging.getLogger("blackpatch")


def _cmd_attack(args) -> int:
    import yaml

    from .harness import experiment_from_config, report, run_experiment

    with open(args.config) as fh:
        cfg = yaml.safe_load(fh)
    config, handle, dataset, dictionary = experiment_from_config(cfg)
    summary, records = run_experiment(config, handle, dataset, dictionary)
    print(report(records))
    print(json.dumps(summary, indent=2))
    if config.results_path:
        log.info("results written to %s", config.results_path)
    return 0


def _parse_categories(text: str, dataset) -> list[int]:
    if text == "all":
        if hasattr(dataset, "categories"):
            return dataset.categories()
        return list(range(dataset.num_classes))
    return [int(t) for t in text.split(",") if t.strip()]


def _cmd_build_dict(args) -> int:
    from .textures import SynthesisConfig, build_dictionary, vgg19_backbone

    if args.dataset == "synthetic":
        from .data import SyntheticObjects

        dataset = SyntheticObjects(seed=args.dataset_seed)
    else:
        from .data import ImageFolder

        dataset = ImageFolder(args.dataset, resolution=args.resolution)
    if args.backbone == "vgg19":
        backbone = vgg19_backbone(weights_path=args.weights)
        resolution = args.resolution or backbone.input_size
    else:
        from .data import SyntheticObjects
        from .zoo import train_desk_backbone

        source = dataset if isinstance(dataset, SyntheticObjects) else None
        backbone = train_desk_backbone(source, seed=args.seed)
        resolution = args.resolution or 24
    categories = _parse_categories(args.categories, dataset)
    synthesis = SynthesisConfig(
        resolution=resolution,
        iterations=args.iterations,
        learning_rate=args.learning_rate,
    )

    def progress(cat, idx, loss):
        log.info("category %d texture %02d: loss %.4g", cat, idx, loss)

    dictionary = build_dictionary(
        backbone,
        dataset,
        categories,
        per_class=args.per_class,
        synthesis=synthesis,
        clusters=args.clusters,
        seed=args.seed,
        pca_dims=args.pca_dims,
        progress=progress,
    )
    dictionary.save(args.out)
    print(f"dictionary with {len(categories)} categories saved to {args.out}")
    return 0


def _cmd_report(args) -> int:
    from .harness import load_records, report

    print(report(load_records(args.results)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blackpatch",
        description="Black-box patch attacks on image classifiers.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="run an attack experiment")
    p_attack.add_argument("--config", required=True,
                          help="YAML experiment configuration")
    p_attack.set_defaults(func=_cmd_attack)

    p_dict = sub.add_parser("build-dict", help="build a texture dictionary")
    p_dict.add_argument("--dataset", required=True,
                        help="image folder root, or 'synthetic'")
    p_dict.add_argument("--categories", required=True,
                        help="comma-separated category ids, or 'all'")
    p_dict.add_argument("--per-class", type=int, required=True, dest="per_class")
    p_dict.add_argument("--out", required=True)
    p_dict.add_argument("--backbone", choices=("vgg19", "desk"), default="vgg19")
    p_dict.add_argument("--weights", help="backbone weights file (vgg19)")
    p_dict.add_argument("--resolution", type=int,
                        help="texture resolution (default: backbone input)")
    p_dict.add_argument("--iterations", type=int, default=10000)
    p_dict.add_argument("--learning-rate", type=float, default=0.01,
                        dest="learning_rate")
    p_dict.add_argument("--clusters", type=int, default=30)
    p_dict.add_argument("--seed", type=int, default=0)
    p_dict.add_argument("--dataset-seed", type=int, default=0, dest="dataset_seed")
    p_dict.add_argument("--pca-dims", type=int, default=None, dest="pca_dims")
    p_dict.set_defaults(func=_cmd_build_dict)

    p_report = sub.add_parser("report", help="summarize a results file")
    p_report.add_argument("--results", required=True)
    p_report.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
