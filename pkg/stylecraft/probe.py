#!/usr/bin/python3

"""
Surrogate scorer: a small convolutional classifier with a style head, a
content head and a 32-d embedding used for cosine similarities. Trained on
generator ground truth only.
"""

import logging

import numpy as np
from sklearn.metrics import accuracy_score
from sklearn.metrics.pairwise import cosine_similarity

from stylecraft import tensor as T
from stylecraft.datagen import image_batch, target_crops
from stylecraft.errors import ArgumentError, ProbeGateError
from stylecraft.utils.layers import Linear, Module
from stylecraft.utils.optim import Adam, cosine_lr
from stylecraft.utils.serialize import read_bundle, write_bundle

logger = logging.getLogger(__name__)

GATE = 0.95
EMBEDDING = 32


class ProbeModel(Module):

    def __init__(self, styles, contents, seed=0, embedding=EMBEDDING, image_size=32):
        rng = np.random.default_rng([seed, 5])
        self.styles = styles
        self.contents = contents
        self.image_size = image_size
        self.conv1 = Linear(rng, 3 * 3 * 3, 16)
        self.conv2 = Linear(rng, 4 * 4 * 16, 32)
        self.conv3 = Linear(rng, 4 * 4 * 32, 32)
        self.embed = Linear(rng, (image_size // 4) ** 2 * 32, embedding)
        self.style_head = Linear(rng, embedding, styles)
        self.content_head = Linear(rng, embedding, contents)
        self.style_prototypes = np.zeros((styles, embedding))
        self.content_prototypes = np.zeros((contents, embedding))
        self.style_acc = 0.0
        self.content_acc = 0.0

    def features(self, images):
        x = T.relu(self.conv1(T.unfold2d(T.as_tensor(images), 3, padding=1)))
        x = T.relu(self.conv2(T.unfold2d(x, 4, stride=2, padding=1)))
        x = T.relu(self.conv3(T.unfold2d(x, 4, stride=2, padding=1)))
        return self.embed(T.reshape(x, (x.shape[0], x.shape[1] * x.shape[2] * x.shape[3])))

    def __call__(self, images):
        emb = self.features(images)
        h = T.gelu(emb)
        return emb, self.style_head(h), self.content_head(h)

    def _batched(self, images, batch_size=128):
        images = np.asarray(images)
        out = [], [], []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                for bucket, value in zip(out, self(images[i:i + batch_size])):
                    bucket.append(value.data)
        return [np.concatenate(b) for b in out]

    def embeddings(self, images):
        return self._batched(images)[0].astype(np.float64)

    def predict(self, images):
        _, style_logits, content_logits = self._batched(images)
        return style_logits.argmax(axis=1), content_logits.argmax(axis=1)

    #=================================================================#
    # Training and the gate
    #=================================================================#

    def fit(self, dataset, steps=600, batch_size=64, lr=1e-3, seed=0, log_every=50):
        rng = np.random.default_rng([seed, 23])
        images = dataset.images('train')
        videos = dataset.videos('train', style_ids=None)
        params = list(self.named_parameters())
        optimizer = Adam(params, lr=lr)
        history = []
        for step in range(steps):
            index = rng.integers(0, len(images['style_id']), size=batch_size)
            batch = image_batch(images, index, rng)
            x = np.concatenate([batch['target'], batch['style_ref'][:, 0]])
            style = np.concatenate([batch['style_id'], batch['style_id']])
            content = batch['content_id']
            if len(videos['style_id']):
                v = rng.integers(0, len(videos['style_id']), size=max(1, batch_size // 8))
                t = rng.integers(0, videos['frames'].shape[1], size=len(v))
                x = np.concatenate([x, videos['frames'][v, t]])
                style = np.concatenate([style, videos['style_id'][v]])
                content = np.concatenate([content, videos['content_id'][v]])
            optimizer.zero_grad()
            _, style_logits, content_logits = self(x)
            # Style crops carry no reliable content label; only targets and video frames do.
            content_logits = T.concat([T.slice_axis(content_logits, 0, 0, batch_size),
                                       T.slice_axis(content_logits, 0, 2 * batch_size, len(x))], axis=0)
            loss = T.cross_entropy(style_logits, style) + T.cross_entropy(content_logits, content)
            loss.backward()
            optimizer.step(cosine_lr(lr, step, steps))
            if step % log_every == 0 or step == steps - 1:
                history.append({'step': step, 'loss': loss.item()})
                logger.info("probe step %d: loss %.4f" % (step, loss.item()))
        self.set_trainable([])
        self.fit_prototypes(images, videos)
        return history

    def fit_prototypes(self, images, videos=None):
        crops = target_crops(images['canvas'])
        emb = self.embeddings(crops)
        style_emb, style_ids = [emb], [images['style_id']]
        content_emb, content_ids = [emb], [images['content_id']]
        if videos is not None and len(videos['style_id']):
            frames = videos['frames']
            vemb = self.embeddings(frames.reshape((-1,) + frames.shape[2:]))
            style_emb.append(vemb)
            style_ids.append(np.repeat(videos['style_id'], frames.shape[1]))
            content_emb.append(vemb)
            content_ids.append(np.repeat(videos['content_id'], frames.shape[1]))
        style_emb, style_ids = np.concatenate(style_emb), np.concatenate(style_ids)
        content_emb, content_ids = np.concatenate(content_emb), np.concatenate(content_ids)
        for s in range(self.styles):
            if np.any(style_ids == s):
                self.style_prototypes[s] = style_emb[style_ids == s].mean(axis=0)
        for c in range(self.contents):
            if np.any(content_ids == c):
                self.content_prototypes[c] = content_emb[content_ids == c].mean(axis=0)

    def evaluate(self, dataset, split='val'):
        images = dataset.images(split)
        if len(images['style_id']) == 0:
            raise ArgumentError("The %s split holds no images." % split)
        style_pred, content_pred = self.predict(target_crops(images['canvas']))
        self.style_acc = accuracy_score(images['style_id'], style_pred)
        self.content_acc = accuracy_score(images['content_id'], content_pred)
        if min(self.style_acc, self.content_acc) < GATE + 0.02:
            logger.warning("Probe accuracy is close to the gate: style %.3f, content %.3f." % (self.style_acc, self.content_acc))
        return {'style_probe_acc': self.style_acc, 'content_probe_acc': self.content_acc}

    def require_gate(self, threshold=GATE):
        if self.style_acc < threshold or self.content_acc < threshold:
            raise ProbeGateError("Probe held-out accuracy (style %.3f, content %.3f) is below %.2f; no metric is trusted."
                                 % (self.style_acc, self.content_acc, threshold))

    def print_accuracy(self):
        print("Probe held-out accuracy:")
        print("style: %0.3f" % self.style_acc)
        print("content: %0.3f" % self.content_acc)
        print()

    #=================================================================#
    # Similarities
    #=================================================================#

    def cosine(self, a, b):
        """Row-wise cosine similarity of two embedding sets of equal length."""
        return np.array([cosine_similarity(x[None], y[None])[0, 0] for x, y in zip(a, b)])

    def prototype_similarity(self, embeddings, content_id):
        if content_id < 0 or content_id >= self.contents:
            raise ArgumentError("Content id must be in [0, %d), but you entered %d." % (self.contents, content_id))
        return cosine_similarity(embeddings, self.content_prototypes[content_id][None])[:, 0]

    #=================================================================#
    # Storage
    #=================================================================#

    def save(self, directory):
        tensors = self.state_dict()
        tensors['prototypes.style'] = self.style_prototypes
        tensors['prototypes.content'] = self.content_prototypes
        write_bundle(directory, tensors, {'styles': self.styles, 'contents': self.contents,
                                          'style_acc': float(self.style_acc), 'content_acc': float(self.content_acc),
                                          'image_size': self.image_size})
        return directory

    @classmethod
    def load(cls, directory):
        tensors, metadata = read_bundle(directory)
        probe = cls(metadata['styles'], metadata['contents'], image_size=metadata.get('image_size', 32))
        probe.style_prototypes = np.asarray(tensors.pop('prototypes.style'), dtype=np.float64)
        probe.content_prototypes = np.asarray(tensors.pop('prototypes.content'), dtype=np.float64)
        probe.load_state_dict(tensors)
        probe.style_acc = metadata.get('style_acc', 0.0)
        probe.content_acc = metadata.get('content_acc', 0.0)
        return probe


def train_probe(dataset, out=None, steps=600, batch_size=64, lr=1e-3, seed=0):
    probe = ProbeModel(dataset.styles, dataset.contents, seed=seed)
    probe.fit(dataset, steps, batch_size, lr, seed)
    probe.evaluate(dataset, 'val')
    if out is not None:
        probe.save(out)
    return probe
