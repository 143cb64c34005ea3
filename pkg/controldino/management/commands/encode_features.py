import logging
from pathlib import Path

from controldino.errors import ContractError
from controldino.features import encode_frames, save_features
from controldino.management.base import ControlDinoCommand
from controldino.pca import features_to_rgb
from controldino.services import dataset
from controldino.services import frames as frame_io

logger = logging.getLogger(__name__)


class Command(ControlDinoCommand):
    help = "Encode PNG frames (one clip or a whole dataset) into CDKT feature files with the built-in encoder."

    flag_keys = {
        "patch": "encoder.patch",
        "feature_dim": "encoder.feature_dim",
        "upscale": "encoder.upscale",
        "normalize": "encoder.normalize",
        "seed": "encoder.seed",
    }

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        source = parser.add_mutually_exclusive_group(required=True)
        source.add_argument("--frames", help="directory of PNG frames")
        source.add_argument("--dataset", help="dataset root; writes <clip>/features.cdkt for every clip")
        parser.add_argument("--out", help="output tensor file (with --frames)")
        parser.add_argument("--patch", type=int)
        parser.add_argument("--feature-dim", type=int)
        parser.add_argument("--upscale", type=float)
        parser.add_argument("--normalize", action="store_true", default=None)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--preview", action="store_true", help="write PCA RGB previews next to the output")

    def handle(self, *args, **opts):
        spec = self.run_config(opts).encoder
        if opts.get("frames"):
            if not opts.get("out"):
                raise ContractError("--out is required with --frames")
            jobs = [(frame_io.read_frames(opts["frames"]), Path(opts["out"]))]
        else:
            root = Path(opts["dataset"])
            jobs = [(frame_io.read_frames(root / c["id"] / "frames"), root / c["id"] / "features.cdkt")
                    for c in dataset.read_manifest(root)]

        for video, out in jobs:
            grid = encode_frames(video, spec)
            save_features(grid, out)
            if opts["preview"]:
                frame_io.write_frames(out.parent / f"{out.stem}_preview", features_to_rgb(grid))
            logger.info("encoded %s → %s", tuple(video.shape), out)
            self.stdout.write(f"{out}: {list(grid.data.shape)}")
