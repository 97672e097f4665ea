"""Train the shapes CNN and look at a plain gradient map.

Run from the repository root: python3 demos/01_golden_model.py
"""

import numpy as np

from dance import pipeline
from dance.model import accuracy, predict
from dance.render import render_map
from dance.saliency import SaliencyParams, saliency

cfg = pipeline.RunConfig()                 # seed 0, 1500 train / 300 test shapes
train, test = pipeline.load_data(cfg)
print("train", train.images.shape, "test", test.images.shape)
print("class balance", np.bincount(train.labels))

net = pipeline.build_model(cfg, train)     # two conv blocks, 3x3 filters and pooling
print("test accuracy", accuracy(net, test.images, test.labels))

# first correctly classified test image
i = pipeline.select_images(net, test, 1)[0]
x = pipeline.as_input(net, test.images[i])
p, c = predict(net, x)
print("image", i, "label", test.labels[i], "probabilities", np.round(p, 4))

m = saliency(net, x, c, SaliencyParams("vanilla"))
print("gradient range", m.scores.min(), m.scores.max())

# the truth mask marks the pixels of the drawn shape
truth = test.masks[i]
inside = np.abs(m.scores[0])[truth > 0].mean()
outside = np.abs(m.scores[0])[truth == 0].mean()
print("mean |gradient| on the shape", inside, "off the shape", outside)

render_map(m.scores[0], "vanilla.pgm", "signed")
render_map(test.images[i], "image.pgm")
print("wrote image.pgm and vanilla.pgm")
