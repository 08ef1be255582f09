"""
Cross-modal passes and wall time per query as the target set grows.

Fine retrieval scores every target with the cross-modal encoder. Coarse-to-fine
scores only the top k_c coarse candidates, so its cost stays flat once N > k_c.
"""
import numpy as np

from ctf_retrieval import tensor as T
from ctf_retrieval.model import AudioEncoding, CrossModalRetriever, ModelConfig
from ctf_retrieval.retrieval import TargetStore, bench, build_index

model = CrossModalRetriever(ModelConfig())
rng = np.random.default_rng(0)


def boxes(n, r):
    lo = rng.uniform(0.0, 0.45, size=(n, r, 2))
    return np.concatenate([lo, lo + rng.uniform(0.1, 0.5, size=(n, r, 2))], axis=-1)


with T.no_grad():
    audio = model.encode_audio(rng.normal(size=(3, 64)))
queries = [AudioEncoding(audio.hi_res[i], audio.cls_and_lo_res[i], audio.cls_a[i]) for i in range(3)]

print(f"{'N':>6} {'mode':>7} {'passes':>7} {'ms/query':>9}")
for n in (50, 200, 1000, 2000):
    with T.no_grad():
        images = model.encode_image(rng.normal(size=(n, 8, 16)), boxes(n, 8))
    ids = [f"img{i}" for i in range(n)]
    rep = bench(model, queries, build_index(images, ids), TargetStore.from_encodings(images, ids), k_c=100)
    for mode, row in rep["modes"].items():
        print(f"{n:>6} {mode:>7} {row['xmodal_passes']:>7} {row['mean_ms']:>9.2f}")
