from pathlib import Path

from controldino.augment import ToyVAE
from controldino.errors import ContractError
from controldino.features import load_features
from controldino.management.base import ControlDinoCommand
from controldino.rollout import RolloutPlan, rollout
from controldino.services import frames as frame_io
from controldino.trainer import load_checkpoint

BLOCK_PATTERN = "block_{:03d}.cdkt"


class Command(ControlDinoCommand):
    help = "Generate a long video block by block, reconditioning each block on the previous block's last frame."

    flag_keys = {
        "seed": "sample.seed",
        "scale": "control.scale",
        "steps": "sample.steps",
        "cfg": "sample.guidance",
        "drop_first_frame": "sample.drop_first_frame",
        "block_frames": "sample.block_frames",
        "prompt": "sample.prompt",
    }

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument("--checkpoint", required=True)
        parser.add_argument("--features-dir", required=True,
                            help=f"directory of per-block conditioning tensors named {BLOCK_PATTERN.format(0)}, ...")
        parser.add_argument("--num-blocks", type=int, required=True)
        parser.add_argument("--first-frame")
        parser.add_argument("--prompt")
        parser.add_argument("--style-keyword", default="")
        parser.add_argument("--loop", action="store_true", help="reuse the available blocks cyclically")
        parser.add_argument("--out", default="runs/rollout")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--scale", type=float)
        parser.add_argument("--steps", type=int)
        parser.add_argument("--cfg", type=float)
        parser.add_argument("--drop-first-frame", action="store_true", default=None)
        parser.add_argument("--block-frames", type=int)

    def handle(self, *args, **opts):
        state, run = load_checkpoint(opts["checkpoint"])
        run = self.run_config(opts, base=run)
        plan = RolloutPlan(
            block_frames=run.sample.block_frames,
            num_blocks=opts["num_blocks"],
            prompt=run.sample.prompt,
            style_keyword=opts["style_keyword"],
            loop=opts["loop"],
        )

        directory = Path(opts["features_dir"])
        blocks = []
        for k in range(plan.num_blocks):
            path = directory / BLOCK_PATTERN.format(k)
            if not path.is_file():
                if plan.loop and blocks:
                    break
                raise ContractError(f"missing feature block {k} ({path})")
            blocks.append(load_features(path))

        first = frame_io.read_frame(opts["first_frame"]) if opts.get("first_frame") else None
        vae = ToyVAE(run.backbone.latent_channels, seed=run.backbone.seed)
        result = rollout(state.model, vae, blocks, first, plan, run.sample, scale=run.control.residual_scale)
        paths = frame_io.write_frames(Path(opts["out"]), result.video)
        self.stdout.write(f"wrote {len(paths)} frames ({plan.num_blocks} blocks) to {opts['out']}")
