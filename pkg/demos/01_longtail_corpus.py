"""Build a synthetic long-tail corpus and look at its shape.

The default profile mirrors the class frequencies of a public single-label
chest X-ray benchmark, scaled down so everything runs in seconds. Class 0
is the dominant "healthy" class at the origin; 18 pathology classes sit on
a circle with exponentially decaying counts.
"""

import numpy as np

from tailflow import chest_longtail_specs, generate_corpus, load_corpus, save_corpus

specs = chest_longtail_specs(total=2000, dimension=2)
corpus = generate_corpus(specs, dimension=2, seed=7)

print(f"corpus: {len(corpus)} samples, {corpus.num_classes} classes, D={corpus.dimension}")
print(f"embedding surrogate: E={corpus.embedding_dim}, jitter={corpus.noise_scale}")
print()

counts = corpus.class_counts()
total = len(corpus)
print("class histogram (log-ish long tail):")
for cid in sorted(counts):
    bar = "#" * max(1, int(60 * counts[cid] / max(counts.values())))
    healthy = " (healthy)" if cid == corpus.healthy_class_id() else ""
    print(f"  class {cid:2d}  {counts[cid]:5d}  {bar}{healthy}")
print(f"\ndominant share: {counts[0] / total:.1%}; rarest share: {min(counts.values()) / total:.2%}")
print(f"imbalance ratio (max/min): {max(counts.values()) / min(counts.values()):.0f}x")

# embeddings are fixed unit vectors per class plus per-sample jitter, so
# same-class samples point the same way
emb = corpus.embedding_matrix()
unit = emb / np.linalg.norm(emb, axis=1)[:, None]
same = unit[0] @ unit[1]  # two healthy samples
other = unit[0] @ unit[-1]  # healthy vs the rarest class
print(f"\ncosine(same class) = {same:.3f}, cosine(different class) = {other:.3f}")

# serialization is a plain-text line format with lossless floats
save_corpus(corpus, "/tmp/demo_corpus.txt")
again = load_corpus("/tmp/demo_corpus.txt")
print(f"\nround trip lossless: {np.array_equal(corpus.x_matrix(), again.x_matrix())}")
