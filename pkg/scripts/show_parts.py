"""Contact sheet of reconstructions for a trained checkpoint.

    python scripts/show_parts.py runs/desk/cerberus/final.ckpt runs/desk/data/manifest.json parts.png

Columns: input, shaded reconstruction, parts coloured, parts seen from +90
degrees, summed probability maps.
"""

import argparse

import numpy as np
from PIL import Image

from cerberus.cli import PART_PALETTE
from cerberus.dataset import Manifest
from cerberus.renderer import LightRig, rasterize
from cerberus.training import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("manifest")
    ap.add_argument("output")
    ap.add_argument("--rows", type=int, default=8)
    ap.add_argument("--scale", type=int, default=2)
    args = ap.parse_args()

    man = Manifest.load(args.manifest)
    model, _ = load_model(args.checkpoint)
    stride = max(1, len(man.test) // args.rows)
    rows = []
    for s in man.test[::stride][: args.rows]:
        img = man.image(s["image"])
        cam = man.camera(s["azimuth"])
        bundle = model.encode(img)
        meshes = model.assemble(bundle, cam).meshes()
        colors = [PART_PALETTE[k % len(PART_PALETTE)] for k in range(len(meshes))]
        shaded = rasterize(meshes, cam, LightRig()).rgb
        parts = rasterize(meshes, cam, LightRig(), face_colors=colors).rgb
        side = rasterize(meshes, cam.with_azimuth(s["azimuth"] + np.pi / 2), LightRig(), face_colors=colors).rgb
        prob = bundle.prob_maps.data[0].sum(axis=0)
        prob = np.repeat((prob / prob.max())[..., None], 3, axis=-1)
        rows.append(np.concatenate([img, shaded, parts, side, prob], axis=1))
    sheet = (np.clip(np.concatenate(rows, axis=0), 0, 1) * 255).astype(np.uint8)
    h, w = sheet.shape[:2]
    Image.fromarray(sheet).resize((w * args.scale, h * args.scale), Image.NEAREST).save(args.output)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
