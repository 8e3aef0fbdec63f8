#!/usr/bin/env python3
"""Train the desk-scale digit ConvNet and export it with its data splits.

Writes float.cora-model, calib.cora-data, val.cora-data and probe.json into
the output directory. Needs torch, numpy, scipy and mlxtend (for the bundled
5000-image MNIST subset).
"""

import argparse
import json
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CHANNELS = [1, 8, 16, 32, 32, 64, 128]
POOL_AFTER = (1, 3)  # 2x2 max pool after these conv indices
NUM_CLASSES = 10
CALIB_COUNT = 1600
TRAIN_COUNT = 4000
MIN_ACCURACY = 0.97


# --- container -------------------------------------------------------------

class Blob:
    def __init__(self):
        self.data = bytearray()

    def _ref(self, dtype, raw):
        offset = len(self.data)
        self.data += raw
        return {"dtype": dtype, "offset": offset, "length": len(raw)}

    def f32(self, array):
        return self._ref("f32", np.ascontiguousarray(array, dtype="<f4").tobytes())

    def i32(self, array):
        return self._ref("i32", np.ascontiguousarray(array, dtype="<i4").tobytes())


def encode(manifest, blob):
    manifest = dict(manifest)
    manifest["blob_length"] = len(blob.data)
    text = json.dumps(manifest, separators=(",", ":"), ensure_ascii=True).encode()
    out = bytearray(b"CORA")
    out += struct.pack("<IQ", FORMAT_VERSION, len(text))
    out += text
    out += blob.data
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def header(kind):
    return {"format": kind, "format_version": FORMAT_VERSION}


def model_bytes(convs, fc_weight, fc_bias, provenance):
    """convs: list of (weight[m,n,3,3], bias[m]) as float arrays."""
    blob = Blob()
    m = header("cora-model")
    m["input_shape"] = [1, 28, 28]
    m["num_classes"] = NUM_CLASSES
    m["provenance"] = provenance
    layers = []
    for i, (w, b) in enumerate(convs):
        layers.append({
            "type": "conv", "name": f"conv{i}", "shape": list(w.shape),
            "stride": [1, 1], "padding": [1, 1],
            "weight": blob.f32(w), "bias": blob.f32(b),
        })
        layers.append({"type": "relu"})
        if i in POOL_AFTER:
            layers.append({"type": "maxpool", "kernel": 2, "stride": 2})
    layers.append({"type": "avgpool", "kernel": 7, "stride": 7})
    layers.append({"type": "flatten"})
    layers.append({"type": "dense", "name": "fc", "shape": list(fc_weight.shape),
                   "weight": blob.f32(fc_weight), "bias": blob.f32(fc_bias)})
    m["layers"] = layers
    return encode(m, blob)


def dataset_bytes(images, labels, split):
    blob = Blob()
    m = header("cora-data")
    m["split"] = split
    m["count"] = int(len(labels))
    m["image_shape"] = list(images.shape[1:])
    m["num_classes"] = NUM_CLASSES
    m["images"] = blob.f32(images)
    m["labels"] = blob.i32(labels)
    return encode(m, blob)


# --- model -----------------------------------------------------------------

def build_net(torch, batchnorm):
    nn = torch.nn
    F = torch.nn.functional

    class Net(nn.Module):
        def __init__(self):
            super().__init__()
            n = len(CHANNELS) - 1
            self.convs = nn.ModuleList(
                nn.Conv2d(CHANNELS[i], CHANNELS[i + 1], 3, padding=1, bias=not batchnorm) for i in range(n))
            self.norms = nn.ModuleList(
                nn.BatchNorm2d(CHANNELS[i + 1]) if batchnorm else nn.Identity() for i in range(n))
            self.fc = nn.Linear(CHANNELS[-1], NUM_CLASSES)

        def forward(self, x):
            for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
                x = F.relu(norm(conv(x)))
                if i in POOL_AFTER:
                    x = F.max_pool2d(x, 2)
            return self.fc(x.mean((2, 3)))

    return Net()


def folded_convs(torch, net):
    out = []
    for conv, norm in zip(net.convs, net.norms):
        w = conv.weight.detach().double()
        b = conv.bias.detach().double() if conv.bias is not None else torch.zeros(w.shape[0], dtype=torch.float64)
        if isinstance(norm, torch.nn.BatchNorm2d):
            g = norm.weight.double() / torch.sqrt(norm.running_var.double() + norm.eps)
            b = (b - norm.running_mean.double()) * g + norm.bias.double()
            w = w * g[:, None, None, None]
        out.append((w.detach().float().numpy(), b.detach().float().numpy()))
    return out


def plain_forward(torch, convs, fc_w, fc_b, x):
    F = torch.nn.functional
    for i, (w, b) in enumerate(convs):
        x = F.relu(F.conv2d(x, torch.from_numpy(w), torch.from_numpy(b), padding=1))
        if i in POOL_AFTER:
            x = F.max_pool2d(x, 2)
    return F.linear(x.mean((2, 3)), torch.from_numpy(fc_w), torch.from_numpy(fc_b))


# --- data ------------------------------------------------------------------

def load_digits(rng):
    from mlxtend.data import mnist_data
    x, y = mnist_data()
    x = x.reshape(-1, 28, 28).astype(np.float32) / 255.0
    perm = rng.permutation(len(x))
    return x, y.astype(np.int64), perm[:TRAIN_COUNT], perm[TRAIN_COUNT:]


def augment(x, y, pool, count, rng):
    import scipy.ndimage as ndi
    out = np.zeros((count, 1, 28, 28), np.float32)
    lab = np.zeros(count, np.int64)
    for i in range(count):
        j = pool[rng.integers(len(pool))]
        img = ndi.rotate(x[j], rng.uniform(-12, 12), reshape=False, order=1)
        out[i, 0] = ndi.shift(img, rng.uniform(-1.5, 1.5, 2), order=1)
        lab[i] = y[j]
    return out, lab


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent / "desk"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--augmented", type=int, default=24000)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batchnorm", action="store_true", help="train with BatchNorm and fold it on export")
    args = ap.parse_args()

    import torch
    torch.manual_seed(args.seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(args.seed)

    x, y, train_idx, val_idx = load_digits(rng)
    xtr, ytr = augment(x, y, train_idx, args.augmented, rng)
    calib_idx = train_idx[:CALIB_COUNT]
    assert not set(calib_idx.tolist()) & set(val_idx.tolist())

    net = build_net(torch, args.batchnorm)
    opt = torch.optim.Adam(net.parameters(), args.lr)
    xt, yt = torch.from_numpy(xtr), torch.from_numpy(ytr)
    F = torch.nn.functional
    for epoch in range(args.epochs):
        net.train()
        order = torch.randperm(len(xt))
        total = 0.0
        for start in range(0, len(xt), 64):
            i = order[start:start + 64]
            opt.zero_grad()
            loss = F.cross_entropy(net(xt[i]), yt[i])
            loss.backward()
            opt.step()
            total += loss.item() * len(i)
        print(f"epoch {epoch + 1}: loss {total / len(xt):.4f}", file=sys.stderr)
    net.eval()

    convs = folded_convs(torch, net)
    fc_w = net.fc.weight.detach().float().numpy()
    fc_b = net.fc.bias.detach().float().numpy()
    xv = torch.from_numpy(x[val_idx][:, None])
    with torch.no_grad():
        reference = net(xv)
        logits = plain_forward(torch, convs, fc_w, fc_b, xv)
    fold_error = float((logits - reference).abs().max())
    if fold_error > 1e-4:
        sys.exit(f"folded model deviates from the trained model by {fold_error:.3g}")
    accuracy = float((logits.argmax(1).numpy() == y[val_idx]).mean())
    print(f"validation accuracy {accuracy:.4f}", file=sys.stderr)
    if accuracy < MIN_ACCURACY:
        sys.exit(f"validation accuracy {accuracy:.4f} is below {MIN_ACCURACY}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = (f"digits convnet {'-'.join(map(str, CHANNELS))}, adam lr={args.lr}, epochs={args.epochs}, "
                  f"seed={args.seed}, batchnorm={'folded' if args.batchnorm else 'none'}")
    (out / "float.cora-model").write_bytes(model_bytes(convs, fc_w, fc_b, provenance))
    (out / "calib.cora-data").write_bytes(
        dataset_bytes(x[calib_idx][:, None], y[calib_idx], "calibration"))
    (out / "val.cora-data").write_bytes(dataset_bytes(x[val_idx][:, None], y[val_idx], "validation"))

    probe_count = 8
    probe = {
        "inputs": "val.cora-data",
        "count": probe_count,
        "logits": [[float(np.float32(v)) for v in row] for row in logits[:probe_count].numpy()],
        "validation_accuracy": accuracy,
        "validation_count": int(len(val_idx)),
        "calibration_count": int(len(calib_idx)),
        "epochs": args.epochs,
        "fold_max_abs_error": fold_error,
        "calibration_indices": calib_idx.tolist(),
        "validation_indices": val_idx.tolist(),
    }
    (out / "probe.json").write_text(json.dumps(probe, indent=1) + "\n")


if __name__ == "__main__":
    main()
