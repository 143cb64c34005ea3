import json
from pathlib import Path

import numpy as np
from einops import rearrange

from controldino.errors import ContractError
from controldino.management.base import ControlDinoCommand
from controldino.pca import (
    FeatureMatrix,
    bottom_eigen_basis,
    disentanglement_report,
    random_orthogonal_basis,
    standard_pca,
    style_invariant_basis,
    tail_drop_basis,
)
from controldino.services.tensorfile import read_tensor

BASIS_CHOICES = ("standard", "style-invariant", "bottom", "random", "tail-drop")


def _matrix(path) -> FeatureMatrix:
    data = read_tensor(path)
    if data.dim() == 4:
        data = rearrange(data, "t d h w -> (t h w) d")
    if data.dim() != 2:
        raise ContractError(f"{path}: expected an (M, D) matrix or a (T, D, h, w) grid, got {list(data.shape)}")
    return FeatureMatrix(data.double().numpy())


class Command(ControlDinoCommand):
    help = "Build a projection basis from paired real/stylised features and report their agreement after projection."

    def add_arguments(self, parser):
        parser.add_argument("--real", required=True, help="CDKT features of the real clip")
        parser.add_argument("--styled", required=True, help="row-paired CDKT features of the stylised clip")
        parser.add_argument("--basis", choices=BASIS_CHOICES, default="standard")
        parser.add_argument("--k", type=int, default=8, help="output components")
        parser.add_argument("--k-style", type=int, default=16, help="style directions removed (style-invariant)")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--out", help="write the JSON report here instead of stdout")

    def handle(self, *args, **opts):
        real, styled = _matrix(opts["real"]), _matrix(opts["styled"])
        k, kind = opts["k"], opts["basis"]
        if kind == "standard":
            basis = standard_pca(real, k)
        elif kind == "style-invariant":
            basis = style_invariant_basis(real, styled, opts["k_style"], k)
        elif kind == "bottom":
            basis = bottom_eigen_basis(real, k)
        elif kind == "random":
            basis = random_orthogonal_basis(real.shape[1], k, np.random.default_rng(opts["seed"]), real)
        else:
            basis = tail_drop_basis(real, k, full=min(64, real.shape[1]))

        report = disentanglement_report(real, styled, basis)
        text = json.dumps(report, indent=2)
        if opts.get("out"):
            Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
            Path(opts["out"]).write_text(text + "\n")
        self.stdout.write(text)
