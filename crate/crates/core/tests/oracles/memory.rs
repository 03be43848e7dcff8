//! Cosine laws against the textbook formula, and retrieval against an
//! exhaustive scan that re-scores every record.

use std::collections::BTreeSet;

use datafactory_core::memory::{
    cosine_similarity, make_record, HashEmbedder, MemorySettings, QaMemory, QueryKind, StructSignature,
};
use rand::seq::SliceRandom;
use rand::Rng;

fn direct_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

/// Self-similarity, orthogonality, scale invariance, bounds and agreement
/// with the direct formula for one random pair.
pub fn check_cosine(seed: u64) -> Result<(), String> {
    let mut rng = super::rng(seed);
    let dim = rng.gen_range(2..=64);
    let u = random_vec(&mut rng, dim);
    let v = random_vec(&mut rng, dim);
    let cos = |a: &[f64], b: &[f64]| cosine_similarity(a, b).map_err(|e| e.to_string());
    let c = cos(&u, &v)?;
    if c.abs() > 1.0 {
        return Err(format!("|cos| = {} > 1", c.abs()));
    }
    if (c - direct_cosine(&u, &v)).abs() > 1e-9 {
        return Err(format!("cos {c} vs direct {}", direct_cosine(&u, &v)));
    }
    if (cos(&u, &u)? - 1.0).abs() > 1e-9 {
        return Err("self similarity is not 1".into());
    }
    let k = rng.gen_range(0.01..100.0);
    let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
    if (cos(&scaled, &v)? - c).abs() > 1e-9 {
        return Err(format!("scaling by {k} changed the similarity"));
    }
    // Gram-Schmidt: w is v with its u component removed
    let proj = direct_cosine(&u, &v) * v.iter().map(|x| x * x).sum::<f64>().sqrt()
        / u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let w: Vec<f64> = v.iter().zip(&u).map(|(b, a)| b - proj * a).collect();
    if w.iter().map(|x| x * x).sum::<f64>() > 1e-12 && cos(&u, &w)?.abs() > 1e-9 {
        return Err(format!("orthogonal pair scored {}", cos(&u, &w)?));
    }
    Ok(())
}

const WORDS: &[&str] = &[
    "city",
    "population",
    "largest",
    "team",
    "wins",
    "year",
    "album",
    "label",
    "how",
    "many",
];
const NAMES: &[&str] = &[
    "cities",
    "games",
    "Games",
    "year",
    "label",
    "City",
    "HAS_RECORD",
    "Record",
];

fn question(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(0..=4);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

fn names(rng: &mut impl Rng) -> BTreeSet<String> {
    NAMES
        .iter()
        .filter(|_| rng.gen_bool(0.3))
        .map(|s| s.to_string())
        .collect()
}

fn signature(rng: &mut impl Rng, kind: QueryKind) -> StructSignature {
    match kind {
        QueryKind::Sql => StructSignature::Sql {
            tables: names(rng),
            columns: names(rng),
        },
        QueryKind::Cypher => StructSignature::Cypher {
            labels: names(rng),
            rel_types: names(rng),
        },
    }
}

fn tagged(sig: &StructSignature) -> BTreeSet<String> {
    let (a, b) = match sig {
        StructSignature::Sql { tables, columns } => (tables, columns),
        StructSignature::Cypher { labels, rel_types } => (labels, rel_types),
    };
    a.iter()
        .map(|x| format!("0{}", x.to_lowercase()))
        .chain(b.iter().map(|x| format!("1{}", x.to_lowercase())))
        .collect()
}

fn jaccard(a: &StructSignature, b: &StructSignature) -> f64 {
    let (x, y) = (tagged(a), tagged(b));
    let union = x.union(&y).count();
    if union == 0 {
        0.0
    } else {
        x.intersection(&y).count() as f64 / union as f64
    }
}

/// Top-k of a store of up to `max_records` records equals the exhaustive
/// scan in ids, order and scores.
pub fn check_retrieval(seed: u64, max_records: usize) -> Result<(), String> {
    let mut rng = super::rng(seed);
    let settings = MemorySettings::default();
    let embed = HashEmbedder::new(settings.dim);
    let mem = QaMemory::in_memory(settings);
    let n = rng.gen_range(0..=max_records);
    let mut stored = Vec::new();
    for _ in 0..n {
        let kind = if rng.gen_bool(0.7) {
            QueryKind::Sql
        } else {
            QueryKind::Cypher
        };
        let mut q = question(&mut rng);
        if q.is_empty() {
            q = "city".into();
        }
        let rec = make_record(&embed, &q, "q", signature(&mut rng, kind), "", "t").map_err(|e| e.to_string())?;
        let id = mem.record_qa(rec.clone()).map_err(|e| e.to_string())?;
        stored.push((id, rec));
    }
    let kind = if rng.gen_bool(0.7) {
        QueryKind::Sql
    } else {
        QueryKind::Cypher
    };
    let q = question(&mut rng);
    let sig = rng.gen_bool(0.8).then(|| signature(&mut rng, kind));
    let k = rng.gen_range(1..=6);

    let q_emb = embed_or_none(&embed, &q);
    let mut want: Vec<(f64, u64)> = stored
        .iter()
        .filter(|(_, r)| r.query_kind == kind)
        .map(|(id, r)| {
            let cos = q_emb
                .as_ref()
                .map_or(0.0, |e| direct_cosine(e, &r.embedding).clamp(-1.0, 1.0));
            let st = sig.as_ref().map_or(0.0, |s| jaccard(s, &r.signature));
            (settings.alpha * cos + (1.0 - settings.alpha) * st, *id)
        })
        .collect();
    want.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
    want.truncate(k);

    let got: Vec<(f64, u64)> = mem
        .retrieve_similar(&embed, &q, kind, k, sig.as_ref())
        .into_iter()
        .map(|s| (s.score, s.record.id))
        .collect();
    let ids = |v: &[(f64, u64)]| v.iter().map(|x| x.1).collect::<Vec<_>>();
    if ids(&got) != ids(&want) {
        return Err(format!("n={n} k={k} q={q:?}: ids {:?} vs {:?}", ids(&got), ids(&want)));
    }
    for (g, w) in got.iter().zip(&want) {
        if (g.0 - w.0).abs() > 1e-12 {
            return Err(format!("record {}: score {} vs {}", g.1, g.0, w.0));
        }
    }
    Ok(())
}

fn embed_or_none(embed: &HashEmbedder, q: &str) -> Option<Vec<f64>> {
    use datafactory_core::memory::Embedder;
    embed.embed(q).ok()
}
