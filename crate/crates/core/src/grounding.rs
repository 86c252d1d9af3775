//! Domain-agnostic token representations: a frozen toy contextual
//! encoder, a static-embedding fallback, and the decontextualization
//! pipeline with a persisted table.
//!
//! The encoder is a small randomly-initialized transformer-style stack
//! whose weights never change after construction. `layer_index` selects
//! which hidden layer is read: layer 0 is the raw per-token base
//! embedding (context-free, position-free), layer `k >= 1` is the output
//! of the k-th mixing layer and is context-sensitive. All served vectors
//! are L2-normalized.
//!
//! Decontextualization averages a subword's contextual vectors over all
//! of its occurrences in a corpus. It runs over target-side text here:
//! the alignment scores target tokens against reference targets, so that
//! is the text whose occurrence statistics matter.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tokenizer::{Subword, Vocabulary};

/// A fixed-dimension real vector, unit-norm once served.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn euclidean_distance(&self, other: &EmbeddingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Divides by the L2 norm unless the vector is already unit within 1e-9,
/// in which case the bits are left untouched (a mean over one occurrence
/// must round-trip exactly).
fn normalize(values: &mut [f64]) -> Result<()> {
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Numeric(format!("cannot normalize vector with norm {norm}")));
    }
    if (norm - 1.0).abs() > 1e-9 {
        for x in values.iter_mut() {
            *x /= norm;
        }
    }
    Ok(())
}

fn split_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over seed ^ salt
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn fnv_checksum(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn gaussian_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x * scale
        })
        .collect()
}

struct EncoderLayer {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w1: Vec<f64>, // dim x ff
    w2: Vec<f64>, // ff x dim
}

/// Frozen context-sensitive embedder. None of its components is ever
/// updated by training.
pub struct ContextualEncoder {
    dim: usize,
    ff: usize,
    layers: Vec<EncoderLayer>,
    layer_index: usize,
    /// Weight of the attention/feed-forward contribution added onto the
    /// residual stream; keeps token identity dominant over context.
    context_mix: f64,
    pos_scale: f64,
    seed: u64,
}

impl ContextualEncoder {
    pub fn new(dim: usize, n_layers: usize, layer_index: usize, context_mix: f64, seed: u64) -> Result<ContextualEncoder> {
        if dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".into()));
        }
        if layer_index > n_layers {
            return Err(Error::Config(format!(
                "layer_index {layer_index} exceeds layer count {n_layers}"
            )));
        }
        let ff = 2 * dim;
        let scale = 1.0 / (dim as f64).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let mut rng = ChaCha12Rng::seed_from_u64(split_seed(seed, 100 + l as u64));
                EncoderLayer {
                    wq: gaussian_matrix(&mut rng, dim, dim, scale),
                    wk: gaussian_matrix(&mut rng, dim, dim, scale),
                    wv: gaussian_matrix(&mut rng, dim, dim, scale),
                    wo: gaussian_matrix(&mut rng, dim, dim, scale),
                    w1: gaussian_matrix(&mut rng, dim, ff, scale),
                    w2: gaussian_matrix(&mut rng, ff, dim, 1.0 / (ff as f64).sqrt()),
                }
            })
            .collect();
        Ok(ContextualEncoder {
            dim,
            ff,
            layers,
            layer_index,
            context_mix,
            pos_scale: 0.2,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    /// Per-id base embedding: a deterministic unit-norm gaussian vector.
    fn base_embedding(&self, id: usize) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(split_seed(self.seed, 7_000_000 + id as u64));
        let mut v = gaussian_matrix(&mut rng, 1, self.dim, 1.0);
        normalize(&mut v).expect("gaussian base embedding has nonzero norm");
        v
    }

    fn positional(&self, t: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for i in 0..self.dim / 2 {
            let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / self.dim as f64);
            v[2 * i] = (t as f64 * rate).sin() * self.pos_scale;
            v[2 * i + 1] = (t as f64 * rate).cos() * self.pos_scale;
        }
        v
    }

    /// One vector per subword, read from `layer_index`, L2-normalized.
    pub fn embed_contextual(&self, subwords: &[Subword]) -> Vec<EmbeddingVector> {
        self.embed_ids(&subwords.iter().map(|s| s.id).collect::<Vec<_>>())
    }

    /// Same as [`embed_contextual`](Self::embed_contextual) keyed by raw
    /// vocabulary ids.
    pub fn embed_ids(&self, ids: &[usize]) -> Vec<EmbeddingVector> {
        if ids.is_empty() {
            return Vec::new();
        }
        let n = ids.len();
        let d = self.dim;
        let mut hidden: Vec<f64> = Vec::with_capacity(n * d);
        for &id in ids {
            hidden.extend(self.base_embedding(id));
        }
        if self.layer_index == 0 {
            return self.serve_rows(&hidden, n);
        }
        for (t, row) in hidden.chunks_mut(d).enumerate() {
            for (x, p) in row.iter_mut().zip(self.positional(t)) {
                *x += p;
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            self.apply_layer(layer, &mut hidden, n);
            if l + 1 == self.layer_index {
                break;
            }
        }
        self.serve_rows(&hidden, n)
    }

    fn serve_rows(&self, hidden: &[f64], n: usize) -> Vec<EmbeddingVector> {
        let d = self.dim;
        (0..n)
            .map(|t| {
                let mut row = hidden[t * d..(t + 1) * d].to_vec();
                normalize(&mut row).expect("encoder output has nonzero norm");
                EmbeddingVector(row)
            })
            .collect()
    }

    fn apply_layer(&self, layer: &EncoderLayer, hidden: &mut Vec<f64>, n: usize) {
        let d = self.dim;
        let proj = |x: &[f64], w: &[f64], cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; n * cols];
            for t in 0..n {
                for j in 0..cols {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += x[t * d + k] * w[k * cols + j];
                    }
                    out[t * cols + j] = acc;
                }
            }
            out
        };
        let q = proj(hidden, &layer.wq, d);
        let k = proj(hidden, &layer.wk, d);
        let v = proj(hidden, &layer.wv, d);
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![0.0; n * d];
        for t in 0..n {
            let mut scores = vec![0.0; n];
            let mut max = f64::NEG_INFINITY;
            for u in 0..n {
                let mut s = 0.0;
                for j in 0..d {
                    s += q[t * d + j] * k[u * d + j];
                }
                scores[u] = s * scale;
                max = max.max(scores[u]);
            }
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            for u in 0..n {
                let w = scores[u] / total;
                for j in 0..d {
                    ctx[t * d + j] += w * v[u * d + j];
                }
            }
        }
        let attn_out = proj(&ctx, &layer.wo, d);
        for (x, a) in hidden.iter_mut().zip(&attn_out) {
            *x += self.context_mix * a;
        }
        let mut pre = proj(hidden, &layer.w1, self.ff);
        pre.iter_mut().for_each(|x| *x = x.tanh());
        let mut ff_out = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for h in 0..self.ff {
                    acc += pre[t * self.ff + h] * layer.w2[h * d + j];
                }
                ff_out[t * d + j] = acc;
            }
        }
        for (x, f) in hidden.iter_mut().zip(&ff_out) {
            *x += self.context_mix * f;
        }
    }

    /// Checksum over every frozen component; used to assert that training
    /// never mutates the encoder.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend(self.dim.to_le_bytes());
        bytes.extend(self.layer_index.to_le_bytes());
        bytes.extend(self.context_mix.to_le_bytes());
        bytes.extend(self.pos_scale.to_le_bytes());
        bytes.extend(self.seed.to_le_bytes());
        for layer in &self.layers {
            for w in [&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2] {
                for x in w.iter() {
                    bytes.extend(x.to_le_bytes());
                }
            }
        }
        fnv_checksum(&bytes)
    }
}

/// Where a grounding table's vectors came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Static,
    Decontextualized(String),
    ContextualCache,
}

/// Persisted map from embedder subword ids to fixed-dimension vectors.
#[derive(Debug, Clone)]
pub struct GroundingTable {
    dim: usize,
    entries: BTreeMap<usize, EmbeddingVector>,
    counts: BTreeMap<usize, u64>,
    provenance: Provenance,
}

impl GroundingTable {
    /// Builds a table from explicit `(id, vector, count)` records; vectors
    /// are normalized on the way in.
    pub fn from_entries(
        dim: usize,
        records: Vec<(usize, EmbeddingVector, u64)>,
        provenance: Provenance,
    ) -> Result<GroundingTable> {
        let mut entries = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (id, mut vector, count) in records {
            if vector.dim() != dim {
                return Err(Error::Config(format!(
                    "entry {id} has dimension {}, table expects {dim}",
                    vector.dim()
                )));
            }
            if count == 0 {
                return Err(Error::Config(format!("entry {id} has zero count")));
            }
            normalize(&mut vector.0)?;
            entries.insert(id, vector);
            counts.insert(id, count);
        }
        Ok(GroundingTable {
            dim,
            entries,
            counts,
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Stored vector for a subword id; absent for unseen subwords.
    pub fn lookup(&self, subword_id: usize) -> Option<&EmbeddingVector> {
        self.entries.get(&subword_id)
    }

    pub fn count(&self, subword_id: usize) -> Option<u64> {
        self.counts.get(&subword_id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(b"SAGT");
        out.extend(1u32.to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        out.extend((self.entries.len() as u64).to_le_bytes());
        match &self.provenance {
            Provenance::Static => out.push(0),
            Provenance::Decontextualized(domain) => {
                out.push(1);
                out.extend((domain.len() as u32).to_le_bytes());
                out.extend(domain.as_bytes());
            }
            Provenance::ContextualCache => out.push(2),
        }
        for (id, vec) in &self.entries {
            out.extend((*id as u64).to_le_bytes());
            out.extend(self.counts[id].to_le_bytes());
            for x in &vec.0 {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GroundingTable> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::Input(format!("truncated grounding table {}", path.display())));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };
        if take(&mut cursor, 4)? != b"SAGT" {
            return Err(Error::Input(format!("{} is not a grounding table", path.display())));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Input(format!("unsupported grounding table version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let provenance = match take(&mut cursor, 1)?[0] {
            0 => Provenance::Static,
            1 => {
                let len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
                let domain = String::from_utf8(take(&mut cursor, len)?.to_vec())
                    .map_err(|_| Error::Input("invalid domain name in grounding table".into()))?;
                Provenance::Decontextualized(domain)
            }
            2 => Provenance::ContextualCache,
            tag => return Err(Error::Input(format!("unknown provenance tag {tag}"))),
        };
        let mut entries = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            let id = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
            let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                values.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
            }
            entries.insert(id, EmbeddingVector(values));
            counts.insert(id, count);
        }
        Ok(GroundingTable {
            dim,
            entries,
            counts,
            provenance,
        })
    }

    pub fn checksum(&self) -> u64 {
        fnv_checksum(&self.to_bytes())
    }
}

/// Running sums of contextual vectors per subword id; the
/// pre-normalization view needed to verify averaging linearity.
pub struct DecontextAccumulator {
    dim: usize,
    sums: BTreeMap<usize, Vec<f64>>,
    counts: BTreeMap<usize, u64>,
}

impl DecontextAccumulator {
    pub fn new(dim: usize) -> DecontextAccumulator {
        DecontextAccumulator {
            dim,
            sums: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    /// Accumulates every subword occurrence of `corpus` in sentence order.
    pub fn add_corpus(&mut self, encoder: &ContextualEncoder, vocab: &Vocabulary, corpus: &[String]) {
        for sentence in corpus {
            let subwords = vocab.tokenize_with_spans(sentence);
            let vectors = encoder.embed_contextual(&subwords);
            for (sw, vec) in subwords.iter().zip(vectors) {
                let sum = self.sums.entry(sw.id).or_insert_with(|| vec![0.0; self.dim]);
                for (s, x) in sum.iter_mut().zip(&vec.0) {
                    *s += x;
                }
                *self.counts.entry(sw.id).or_default() += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &DecontextAccumulator) {
        for (id, sum) in &other.sums {
            let dst = self.sums.entry(*id).or_insert_with(|| vec![0.0; self.dim]);
            for (d, s) in dst.iter_mut().zip(sum) {
                *d += s;
            }
            *self.counts.entry(*id).or_default() += other.counts[id];
        }
    }

    /// Mean vector before re-normalization.
    pub fn mean(&self, id: usize) -> Option<Vec<f64>> {
        let sum = self.sums.get(&id)?;
        let count = self.counts[&id] as f64;
        Some(sum.iter().map(|x| x / count).collect())
    }

    pub fn count(&self, id: usize) -> Option<u64> {
        self.counts.get(&id).copied()
    }

    pub fn finish(self, provenance: Provenance) -> Result<GroundingTable> {
        let mut entries = BTreeMap::new();
        for (id, sum) in &self.sums {
            let count = self.counts[id] as f64;
            let mut mean: Vec<f64> = sum.iter().map(|x| x / count).collect();
            normalize(&mut mean)?;
            entries.insert(*id, EmbeddingVector(mean));
        }
        Ok(GroundingTable {
            dim: self.dim,
            entries,
            counts: self.counts,
            provenance,
        })
    }
}

/// Builds the decontextualized table: each entry is the mean of a
/// subword's contextual vectors over all corpus occurrences, then
/// re-normalized. Subwords absent from the corpus are absent here.
pub fn decontextualize(
    encoder: &ContextualEncoder,
    vocab: &Vocabulary,
    corpus: &[String],
    domain: &str,
) -> Result<GroundingTable> {
    if corpus.is_empty() {
        return Err(Error::Input("decontextualize needs a non-empty corpus".into()));
    }
    let mut acc = DecontextAccumulator::new(encoder.dim());
    acc.add_corpus(encoder, vocab, corpus);
    acc.finish(Provenance::Decontextualized(domain.to_string()))
}

/// Context-insensitive fallback: one base-embedding entry per
/// non-special vocabulary id.
pub fn static_table(encoder: &ContextualEncoder, vocab: &Vocabulary) -> GroundingTable {
    let mut entries = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for id in crate::tokenizer::SPECIALS.len()..vocab.size() {
        let mut v = encoder.base_embedding(id);
        normalize(&mut v).expect("base embedding has unit norm");
        entries.insert(id, EmbeddingVector(v));
        counts.insert(id, 1);
    }
    GroundingTable {
        dim: encoder.dim(),
        entries,
        counts,
        provenance: Provenance::Static,
    }
}
