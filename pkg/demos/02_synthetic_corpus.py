"""
A look at the synthetic paired corpus.

Each image holds a few latent concepts spread over its regions. Each spoken
caption is the concatenation of one waveform motif per concept, in random
order, plus noise. Retrieval means matching concept sets across the two
modalities.
"""
import tempfile

import numpy as np

from ctf_retrieval.data import CorpusConfig, concept_bank, generate_corpus, read_corpus, write_corpus

cfg = CorpusConfig(num_images=20, captions_per_image=5, seed=7)
corpus = generate_corpus(cfg)
bank = concept_bank(cfg)

print(f"{len(corpus.image_ids)} images, {len(corpus.caption_ids)} captions")
print("splits:", {k: len(v) for k, v in corpus.splits.items()})
print(f"region features {corpus.roi_features.shape}, boxes {corpus.boxes.shape}, signals {corpus.signals.shape}")

img = 3
print(f"\n{corpus.image_ids[img]} concepts {corpus.image_concepts[img].tolist()}")
for c in np.flatnonzero(np.array(corpus.caption_image_ids) == corpus.image_ids[img]):
    print(f"  {corpus.caption_ids[c]} says {corpus.caption_concepts[c].tolist()}")

# Matched filtering against the known motifs reads the concepts back off a caption.
m = cfg.motif_len
sig = corpus.signals[5 * img]
slots = sig[: m * cfg.concepts_per_image].reshape(cfg.concepts_per_image, m)
print("matched-filter decode of caption 0:", np.argmax(slots @ bank.motifs.T, axis=1).tolist())

with tempfile.TemporaryDirectory() as tmp:
    write_corpus(corpus, tmp)
    print("\nround trip equal:", read_corpus(tmp).equals(corpus))
