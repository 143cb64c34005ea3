from pathlib import Path

from controldino.augment import ToyVAE
from controldino.diffusion import latent_frame_count
from controldino.errors import ContractError
from controldino.features import load_features
from controldino.management.base import ControlDinoCommand
from controldino.rollout import build_prompt, infer_clip
from controldino.services import frames as frame_io
from controldino.services.tensorfile import read_tensor
from controldino.trainer import load_checkpoint
from controldino.voxels import mask_to_latent


class Command(ControlDinoCommand):
    help = "Generate one clip from a feature file and an optional first frame."

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
        parser.add_argument("--features", required=True, help="CDKT conditioning tensor (T, D, h, w)")
        parser.add_argument("--first-frame", help="PNG setting the target appearance")
        parser.add_argument("--prompt")
        parser.add_argument("--style-keyword", default="")
        parser.add_argument("--mask", help="CDKT binary hole mask, H×W or T×H×W (1 = valid)")
        parser.add_argument("--out", default="runs/infer")
        parser.add_argument("--seed", type=int)
        parser.add_argument("--scale", type=float, help="residual scale (default 0.8)")
        parser.add_argument("--steps", type=int)
        parser.add_argument("--cfg", type=float, help="guidance scale; 1.0 disables guidance")
        parser.add_argument("--drop-first-frame", action="store_true", default=None)
        parser.add_argument("--block-frames", type=int)

    def handle(self, *args, **opts):
        state, run = load_checkpoint(opts["checkpoint"])
        run = self.run_config(opts, base=run)
        model = state.model

        features = load_features(opts["features"])
        if features.frames != run.sample.block_frames:
            raise ContractError(f"feature tensor has {features.frames} frames, block_frames is "
                                f"{run.sample.block_frames}")
        first = frame_io.read_frame(opts["first_frame"]) if opts.get("first_frame") else None

        mask = None
        if opts.get("mask"):
            p = model.backbone.cfg.patch
            mask = mask_to_latent(read_tensor(opts["mask"]), tuple(g // p for g in features.grid))
            latent_frames = latent_frame_count(features.frames)
            if mask.shape[0] not in (1, latent_frames):
                raise ContractError(f"mask covers {mask.shape[0]} latent frames, clip has {latent_frames}")
            mask = mask.expand(latent_frames, -1, -1, -1).contiguous()

        vae = ToyVAE(run.backbone.latent_channels, seed=run.backbone.seed)
        prompt = build_prompt(run.sample.prompt, opts["style_keyword"])
        video = infer_clip(model, vae, features, first, prompt, run.sample, mask=mask,
                           scale=run.control.residual_scale)
        paths = frame_io.write_frames(Path(opts["out"]), video)
        self.stdout.write(f"wrote {len(paths)} frames to {opts['out']}")
