import argparse
import logging
import sys
from pathlib import Path

from .backbones import BUILDERS
from .errors import ExtractorError, UsageError
from .extract import run_manifest
from .manifest import MODALITIES, ExtractionManifest, read_manifest


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(
        prog="cohesion-extract",
        description="Extract scene/face/skeleton feature files from images",
    )
    p.add_argument("--manifest", type=Path, required=True,
                   help="TSV of <image_id>\\t<path> lines")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--modalities", default="scene,face,skeleton",
                   help="comma-separated subset of scene,face,skeleton")
    for name in MODALITIES:
        p.add_argument(f"--weights-{name}", type=Path, default=None,
                       help=f"local state dict for the {name} backbone")
    p.add_argument("--keypoints", type=Path, default=None,
                   help="directory of <image_id>.json keypoint sidecars")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--min-face-area", type=int, default=None,
                   help="blob detector area threshold in pixels")
    return p


def dispatch(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    wanted = tuple(m for m in args.modalities.split(",") if m)
    try:
        for m in wanted:
            if m not in MODALITIES:
                raise UsageError(f"unknown modality {m!r}")
        if not wanted:
            raise UsageError("no modalities selected")

        entries = read_manifest(args.manifest)
        out = args.out_dir
        out.mkdir(parents=True, exist_ok=True)
        manifest = ExtractionManifest(
            images=tuple(entries),
            outputs={m: out / f"features_{m}.tsv" for m in wanted},
            sidecar=out / "skipped.tsv",
            device=args.device,
            batch_size=args.batch_size,
        )
        embedders = {
            m: BUILDERS[m](getattr(args, f"weights_{m}"), args.device)
            for m in wanted
        }
        detector = None
        if args.min_face_area is not None:
            from . import detect as detect_mod

            area = args.min_face_area
            detector = lambda img: detect_mod.detect_faces(img, min_area=area)
        counts = run_manifest(
            manifest, embedders, detector=detector, keypoints_dir=args.keypoints
        )
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        name = exc.filename if exc.filename else exc
        print(f"error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    total = sum(v for k, v in counts.items() if k != "skipped")
    log = logging.getLogger("cohesion_extractor")
    log.info("done: %d records, %d skipped", total, counts.get("skipped", 0))
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
