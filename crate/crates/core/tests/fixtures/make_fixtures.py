"""Regenerates the committed desk fixtures.

Trains a small digits CNN (sklearn's bundled 8x8 digits, upscaled to 32x32),
exports it to ONNX with the `conv_features`, `latent` and `logits` outputs, and
writes the image corpus, dataset manifests, model manifest and parity file.

    python3 make_fixtures.py
"""

import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from sklearn.datasets import load_digits

HERE = os.path.dirname(os.path.abspath(__file__))
DESK = os.path.join(HERE, "desk")
TOY = os.path.join(HERE, "toy")
SIZE = 32
N_TRAIN_CORPUS = 500
N_TEST = 200


class DeskNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(16, 10)

    def forward(self, x):
        conv = self.features(x)
        latent = conv.mean(dim=(2, 3))
        return conv, latent, self.fc(latent)


class Toy(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc = nn.Linear(2, 2)
        with torch.no_grad():
            self.fc.weight.copy_(torch.eye(2))
            self.fc.bias.zero_()

    def forward(self, x):
        latent = torch.flatten(x, 1)
        return latent, self.fc(latent)


def upscale(img8):
    im = Image.fromarray(np.uint8(np.round(img8 / 16.0 * 255.0)), mode="L")
    return np.asarray(im.resize((SIZE, SIZE), Image.BILINEAR), dtype=np.uint8)


def main():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    digits = load_digits()
    order = rng.permutation(len(digits.images))
    images = np.stack([upscale(digits.images[i]) for i in order])
    labels = digits.target[order]

    test_idx = np.arange(N_TEST)
    train_idx = np.arange(N_TEST, len(images))
    pix = images[train_idx].astype(np.float32) / 255.0
    mean, std = float(pix.mean()), float(pix.std())

    def norm(batch):
        return (torch.tensor(batch, dtype=torch.float32)[:, None] / 255.0 - mean) / std

    x_train, y_train = norm(images[train_idx]), torch.tensor(labels[train_idx])
    net = DeskNet()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for epoch in range(30):
        perm = torch.randperm(len(x_train))
        for s in range(0, len(perm), 64):
            b = perm[s:s + 64]
            xb = x_train[b].clone()
            # mean-fill erasing so partially occluded inputs stay in distribution
            for k in range(len(xb)):
                if torch.rand(1).item() < 0.5:
                    r, c = torch.randint(0, SIZE - 8, (2,)).tolist()
                    h, w = torch.randint(6, 20, (2,)).tolist()
                    xb[k, :, r:r + h, c:c + w] = 0.0
            _, _, logits = net(xb)
            loss = nn.functional.cross_entropy(logits, y_train[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        acc = (net(norm(images[test_idx]))[2].argmax(1).numpy() == labels[test_idx]).mean()
    print(f"test accuracy {acc:.3f}")

    os.makedirs(os.path.join(DESK, "images"), exist_ok=True)
    records = {"train": [], "test": []}
    for split, idx in (("train", train_idx[:N_TRAIN_CORPUS]), ("test", test_idx)):
        for n, i in enumerate(idx):
            rel = f"images/{split}_{n:04d}.png"
            Image.fromarray(images[i], mode="L").save(os.path.join(DESK, rel))
            records[split].append({"image_path": rel, "label": int(labels[i]), "split": split})
        with open(os.path.join(DESK, f"{split}.json"), "w") as f:
            json.dump(records[split], f, indent=1)

    torch.onnx.export(
        net, (torch.zeros(1, 1, SIZE, SIZE),), os.path.join(DESK, "model.onnx"),
        input_names=["input"], output_names=["conv_features", "latent", "logits"],
        dynamo=False, opset_version=13)
    manifest = {
        "input_shape": [1, SIZE, SIZE],
        "mean": [mean],
        "std": [std],
        "class_names": [str(d) for d in range(10)],
        "final_layer": {"weight_initializer": "fc.weight", "bias_initializer": "fc.bias"},
        "pooling": "gap",
    }
    with open(os.path.join(DESK, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)

    # parity file: magic, version, count, input_len, n_classes, then rows
    x = norm(images[test_idx[:10]])
    with torch.no_grad():
        logits = net(x)[2].numpy().astype("<f4")
    with open(os.path.join(DESK, "parity.bin"), "wb") as f:
        f.write(b"XPAR")
        f.write(struct.pack("<IIII", 1, 10, SIZE * SIZE, 10))
        for k in range(10):
            f.write(x[k].numpy().astype("<f4").reshape(-1).tobytes())
            f.write(logits[k].tobytes())

    os.makedirs(TOY, exist_ok=True)
    torch.onnx.export(
        Toy(), (torch.zeros(1, 1, 1, 2),), os.path.join(TOY, "linear.onnx"),
        input_names=["input"], output_names=["latent", "logits"],
        dynamo=False, opset_version=13)
    toy_manifest = {
        "input_shape": [1, 1, 2],
        "mean": [0.0],
        "std": [1.0],
        "class_names": ["a", "b"],
        "final_layer": {"weight_initializer": "fc.weight", "bias_initializer": "fc.bias"},
        "pooling": "other",
        "convolutional": False,
    }
    with open(os.path.join(TOY, "manifest.json"), "w") as f:
        json.dump(toy_manifest, f, indent=1)


if __name__ == "__main__":
    main()
