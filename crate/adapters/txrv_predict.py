"""Subprocess adapter for torchxrayvision DenseNet models.

Usage: txrv_predict.py --weights densenet121-res224-all IMAGE.png
Prints a JSON object mapping finding keys to probabilities.
"""
import argparse
import json

import numpy as np
import skimage.io
import torch
import torchvision
import torchxrayvision as xrv

KEYS = {
    "Cardiomegaly": "cardiomegaly",
    "Edema": "edema",
    "Effusion": "pleural_effusion",
    "Pneumonia": "pneumonia",
    "Hernia": "hernia",
    "Mass": "mass",
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--weights", required=True)
    ap.add_argument("image")
    args = ap.parse_args()

    img = skimage.io.imread(args.image, as_gray=True).astype(np.float32)
    if img.max() <= 1.0:
        img = img * 255.0
    img = xrv.datasets.normalize(img, 255)[None, ...]
    transform = torchvision.transforms.Compose(
        [xrv.datasets.XRayCenterCrop(), xrv.datasets.XRayResizer(224)]
    )
    img = torch.from_numpy(transform(img))[None, ...]

    model = xrv.models.DenseNet(weights=args.weights)
    model.eval()
    with torch.no_grad():
        out = model(img)[0].numpy()
    probs = {}
    for name, key in KEYS.items():
        if name in model.pathologies:
            v = float(out[model.pathologies.index(name)])
            if not np.isnan(v):
                probs[key] = v
    print(json.dumps(probs))


if __name__ == "__main__":
    main()
