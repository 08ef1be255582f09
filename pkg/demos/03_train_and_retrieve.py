"""
Train the unified model briefly, then retrieve with all three modes.

Coarse retrieval ranks by the CLS dot product, fine retrieval runs the
cross-modal encoder on every pair, and coarse-to-fine reranks the coarse
top-k_c with the cross-modal encoder. A short run on a small corpus keeps
this to about a minute. The acceptance suite does the full
30-epoch run.
"""
import logging

from ctf_retrieval.data import CorpusConfig, generate_corpus
from ctf_retrieval.evaluation import encode_split, evaluate
from ctf_retrieval.model import ModelConfig
from ctf_retrieval.retrieval import coarse_retrieve, ctf_retrieve, fine_retrieve
from ctf_retrieval.training import TrainConfig, epoch_means, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = generate_corpus(CorpusConfig(num_images=120, captions_per_image=5, seed=17))
model_cfg = ModelConfig(model_dim=32, num_heads=4, xtrm_blocks=1, mlp_hidden=(64, 32, 1))
model, state = train(corpus, model_cfg, TrainConfig(epochs=25, peak_lr=2e-3, warmup_fraction=0.2))
print("epoch mean loss:", [round(x, 3) for x in epoch_means(state.history)])

for mode in ("coarse", "fine", "ctf"):
    rep = evaluate(model, corpus, "test", mode, k_c=10).to_json()
    print(f"{mode:6s} speech->image {rep['speech_to_image']}")

enc = encode_split(model, corpus, "test")
index, store = enc.image_targets()
query = enc.caption(0)
print(f"\nquery {enc.caption_ids[0]} (gold {enc.caption_image_ids[0]})")
for name, res in [("coarse", coarse_retrieve(query, index, 5)),
                  ("fine", fine_retrieve(model, query, store, 5)),
                  ("ctf", ctf_retrieve(model, query, index, store, k_c=10, k=5))]:
    print(f"  {name:6s} {res.ids}  passes={res.xmodal_passes}  {res.total_ms:.1f} ms")
