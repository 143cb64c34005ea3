import logging
from pathlib import Path

import torch

from controldino.augment import ToyVAE, build_pair, sample_group
from controldino.errors import ContractError
from controldino.features import encode_frames
from controldino.management.base import ControlDinoCommand
from controldino.services import dataset
from controldino.trainer import (
    MetricsLog,
    TrainState,
    fit_tail_drop_basis,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from controldino.utils import step_generator

logger = logging.getLogger(__name__)


class Command(ControlDinoCommand):
    help = "Train the temporal adapter and control branch on a clip dataset (synthetic clips when no root is set)."

    flag_keys = {
        "seed": "train.seed",
        "steps": "train.total_steps",
        "batch_size": "train.batch_size",
        "data": "data.root",
        "feature_downscale": "features.downscale",
    }

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--steps", type=int, help="total optimisation steps")
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--data", help="dataset root (defaults to CDK_DATA_ROOT)")
        parser.add_argument("--feature-downscale", type=int, help="pool conditioning features by this factor")
        parser.add_argument("--out", default="runs/train", help="output directory")
        parser.add_argument("--resume", help="checkpoint archive to continue from")
        parser.add_argument("--checkpoint-every", type=int, default=0)

    def handle(self, *args, **opts):
        if opts.get("resume"):
            state, run = load_checkpoint(opts["resume"])
            run = self.run_config(opts, base=run)
        else:
            run = self.run_config(opts)
            state = TrainState.create(run)
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)

        clips = self._load_clips(run, out)
        vae = ToyVAE(run.backbone.latent_channels, seed=run.backbone.seed)
        # encode once; features never depend on the augmentation
        clips = [(cid, video, feats if feats is not None else encode_frames(video, run.encoder), prompt) for cid, video, feats, prompt in clips]
        if run.train.tail_drop:
            state.basis = fit_tail_drop_basis([feats for _, _, feats, _ in clips], run.train)

        cfg = run.train
        metrics = None
        with MetricsLog(out / "metrics.jsonl") as log:
            while state.step < cfg.total_steps:
                g = step_generator(cfg.seed, state.step)
                picks = torch.randint(len(clips), (cfg.batch_size,), generator=g).tolist()
                batch = []
                for i in picks:
                    clip_id, video, feats, prompt = clips[i]
                    group = sample_group(g, run.augment)
                    batch.append(build_pair(video, group, run.encoder, vae, prompt=prompt, clip_id=clip_id,
                                            features=feats))
                state, metrics = train_step(state, batch, cfg, g)
                log.write(metrics)
                logger.info("step %d loss %.5f grad_norm %.4f lr %.3g",
                            metrics["step"], metrics["loss"], metrics["grad_norm"], metrics["lr"])
                every = opts.get("checkpoint_every") or 0
                if every and state.step % every == 0:
                    save_checkpoint(state, out / f"checkpoint_{state.step:06d}.zip", run)

        save_checkpoint(state, out / "checkpoint.zip", run)
        if metrics:
            self.stdout.write(f"trained to step {state.step}, final loss {metrics['loss']:.5f}")
        else:
            self.stdout.write(f"nothing to do: checkpoint already at step {state.step}")

    def _load_clips(self, run, out):
        """[(clip_id, video, features or None, prompt)] from the dataset root.

        Without a configured root a synthetic dataset is written under <out>/synthetic first.
        """
        root = run.data.resolved_root()
        data = run.data
        if not root:
            root = out / "synthetic"
            logger.info("no dataset root configured; training on %d synthetic clips", data.clips)
            dataset.make_synthetic_dataset(root, data.clips, data.frames, data.height, data.width, data.prompt,
                                           seed=run.train.seed)
        clips = []
        for entry in dataset.read_manifest(root):
            video, feats = dataset.read_clip(root, entry["id"])
            clips.append((entry["id"], video, feats, entry.get("prompt") or data.prompt))
        if not clips:
            raise ContractError(f"dataset {root} lists no clips")
        return clips
