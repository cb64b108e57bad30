//! Embed documentation segments, retrieve by cosine, re-rank with lexical overlap,
//! and round-trip the binary embedding cache.

use nlsql::extractor::{rerank_filter, RetrievalConfig, VectorStore};
use nlsql::fixtures::schools_docs;
use nlsql::gateway::{embed, BackendSpec, DEFAULT_EMBEDDING_DIM};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let embedder = BackendSpec::hash_embedder("hash", DEFAULT_EMBEDDING_DIM);
    let store = VectorStore::build(schools_docs(), &embedder)?;
    let question = "Which charter schools have a high excellence rate?";
    let q = embed(&embedder, question)?;

    let cfg = RetrievalConfig::default();
    let raw = store.retrieve(&q, cfg.k);
    println!("top {} by cosine:", raw.len());
    for s in &raw {
        println!("  {:<14} cos={:.3}", s.segment.id, s.cosine);
    }
    println!("after re-ranking (keep {}, threshold {}):", cfg.keep, cfg.score_threshold);
    for s in rerank_filter(&raw, question, &cfg) {
        println!("  {:<14} score={:.3}  {}", s.segment.id, s.score, s.segment.text);
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("schools.emb.bin");
    store.save(&path)?;
    let loaded = VectorStore::load(&path, schools_docs())?;
    println!("cache: {} bytes, {} vectors of dim {}", std::fs::metadata(&path)?.len(), loaded.len(), loaded.dim());
    Ok(())
}
