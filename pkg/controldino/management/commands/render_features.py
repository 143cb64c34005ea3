from pathlib import Path

from controldino.management.base import ControlDinoCommand
from controldino.pca import features_to_rgb
from controldino.services import frames as frame_io
from controldino.services.pointcloud import read_cameras, read_point_cloud
from controldino.services.tensorfile import write_tensor
from controldino.voxels import DEFAULT_VOXEL_SIZE, render_sequence, voxelize, with_visibility_channel

MODE_VOXELS = "voxels"
MODE_POINTS = "points"


class Command(ControlDinoCommand):
    help = "Render a feature point cloud (voxelized or as point splats) into per-frame conditioning maps."

    def add_arguments(self, parser):
        parser.add_argument("--cloud", required=True, help="binary little-endian PLY (x, y, z float32)")
        parser.add_argument("--cloud-features", required=True, help="row-paired CDKT feature tensor (N, D)")
        parser.add_argument("--cameras", required=True, help="camera JSON array")
        parser.add_argument("--out", default="runs/render")
        parser.add_argument("--mode", choices=(MODE_VOXELS, MODE_POINTS), default=MODE_VOXELS)
        parser.add_argument("--voxel-size", type=float, default=DEFAULT_VOXEL_SIZE)
        parser.add_argument("--radius", type=float, default=1.0, help="point splat radius in output cells")
        parser.add_argument("--grid", type=int, nargs=2, default=(60, 90), metavar=("H", "W"))
        parser.add_argument("--visibility-channel", action="store_true",
                            help="append the hole mask as an extra feature channel")
        parser.add_argument("--preview", action="store_true", help="also write PCA RGB previews")

    def handle(self, *args, **opts):
        cloud = read_point_cloud(opts["cloud"], opts["cloud_features"])
        cameras = read_cameras(opts["cameras"])
        source = voxelize(cloud, opts["voxel_size"]) if opts["mode"] == MODE_VOXELS else cloud
        rendered = render_sequence(source, cameras, tuple(opts["grid"]), radius_px=opts["radius"])

        out = Path(opts["out"])
        grid = with_visibility_channel(rendered) if opts["visibility_channel"] else rendered.features
        write_tensor(out / "features.cdkt", grid.data)
        write_tensor(out / "mask.cdkt", rendered.mask)
        if opts["preview"]:
            frame_io.write_frames(out / "preview", features_to_rgb(rendered.features))
        holes = float(1.0 - rendered.mask.mean())
        self.stdout.write(f"rendered {len(cameras)} frames at {tuple(opts['grid'])}, hole fraction {holes:.3f}")
