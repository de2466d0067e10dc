"""codemend: a desk-scale instruction-tuning pipeline for C vulnerability
identification, repair, description, and commit-comment generation.

Submodules:
    tokenizer   byte-level BPE with pinned special ids
    corpus      C function extraction, pairing, and synthetic pair generation
    dataset     instruction records, sequence packing, grouped splits
    model       decoder-only causal transformer
    trainer     Adam, supervised loop, finite-difference gradient checks
    decode      beam search, greedy, temperature sampling
    metrics     BLEU, Rouge-L, yes/no classification scores
    reward      embedding-cosine semantic reward, pairwise preference scorer
    ppo         clipped-surrogate PPO with KL anchor for comment compression
    checkpoint  binary tensor serialization with integrity checks
    cli         command line entry points
"""

__version__ = "0.1.0"
