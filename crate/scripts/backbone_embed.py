#!/usr/bin/env python3
"""Embed a folder of images with a pretrained vision backbone.

External-encoder protocol used by protoid:

    backbone_embed.py [--model NAME] --input DIR --output FILE

Every *.png/*.jpg in DIR is embedded in file-name order and FILE receives a
JSON list of float lists (one per image). Default backbone: DINOv2 base
(768-d CLS token), e.g.

    protoid build-set --encoder "external:768:224:python3 scripts/backbone_embed.py" ...
"""

import argparse
import json
import sys
from pathlib import Path

import torch
from PIL import Image
from transformers import AutoImageProcessor, AutoModel


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", default="facebook/dinov2-base")
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--input", required=True, type=Path)
    ap.add_argument("--output", required=True, type=Path)
    args = ap.parse_args()

    paths = sorted(p for p in args.input.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    processor = AutoImageProcessor.from_pretrained(args.model)
    model = AutoModel.from_pretrained(args.model).eval()

    out = []
    with torch.no_grad():
        for i in range(0, len(paths), args.batch_size):
            images = [Image.open(p).convert("RGB") for p in paths[i : i + args.batch_size]]
            inputs = processor(images=images, return_tensors="pt")
            hidden = model(**inputs).last_hidden_state
            out.extend(hidden[:, 0].float().tolist())

    args.output.write_text(json.dumps(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
