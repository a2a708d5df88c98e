"""Export the Keras VGG16 ImageNet convolution weights as a cityscope weight bundle.

    python scripts/convert_keras_vgg16.py OUT_DIR

Writes OUT_DIR/manifest.json plus one little-endian f32 file per tensor,
named block{b}_conv{i}.{weight,bias}. Keras kernels are already laid out
(kh, kw, in, out), so no transposition is needed.

Keras trained these weights on BGR, mean-subtracted pixels. Neither
cityscope scaling mode matches that exactly; fine-tuning absorbs the gap.
"""
import json
import sys
from pathlib import Path

import numpy as np


def main() -> None:
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)

    from tensorflow.keras.applications import VGG16

    model = VGG16(weights="imagenet", include_top=False)
    manifest = {}
    for layer in model.layers:
        if "_conv" not in layer.name:
            continue
        kernel, bias = layer.get_weights()
        for role, array in (("weight", kernel), ("bias", bias)):
            name = f"{layer.name}.{role}"
            data = np.ascontiguousarray(array, dtype="<f4")
            data.tofile(out / f"{name}.bin")
            manifest[name] = {
                "shape": list(data.shape),
                "file": f"{name}.bin",
                "dtype": "f32",
                "byte_order": "little",
            }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(manifest)} tensors to {out}")


if __name__ == "__main__":
    main()
