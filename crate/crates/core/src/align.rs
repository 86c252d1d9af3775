//! Span matching between two tokenizations, alignment scores over
//! grounding embeddings, and the dense / top-n target builders.
//!
//! A model token's score against a reference text is one minus half the
//! minimal Euclidean distance from its grounding vector to any reference
//! grounding vector. Halving maps the unit-sphere distance range [0, 2]
//! onto scores in [0, 1], so scores are directly comparable to
//! probabilities; this is a deliberate rescaling of the raw
//! one-minus-distance form.

use crate::error::{Error, Result};
use crate::grounding::{ContextualEncoder, EmbeddingVector, GroundingTable};
use crate::tokenizer::{Vocabulary, EOS, SPECIALS, UNK};

/// Total matching from model-subword indices to embedder-subword indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanMatching {
    /// `pairs[i]` is the embedder-subword index matched to model subword `i`.
    pub pairs: Vec<usize>,
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    hi.saturating_sub(lo)
}

fn validate_spans(name: &str, spans: &[(usize, usize)]) -> Result<()> {
    let mut prev_end = 0usize;
    for (i, &(start, end)) in spans.iter().enumerate() {
        if start >= end {
            return Err(Error::Input(format!("{name} span {i} is empty: ({start}, {end})")));
        }
        if i > 0 && start < prev_end {
            return Err(Error::Input(format!(
                "{name} spans are unordered or overlapping at index {i}"
            )));
        }
        prev_end = end;
    }
    Ok(())
}

/// Merged coverage intervals of an ordered span list.
fn coverage(spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for &(start, end) in spans {
        match merged.last_mut() {
            Some(last) if last.1 == start => last.1 = end,
            _ => merged.push((start, end)),
        }
    }
    merged
}

/// Matches each model span to the embedder span of maximal character
/// overlap (ties toward the earlier embedder span) in a single
/// two-pointer sweep over both ordered lists.
pub fn align_to_grounding(
    model_spans: &[(usize, usize)],
    emb_spans: &[(usize, usize)],
) -> Result<SpanMatching> {
    validate_spans("model", model_spans)?;
    validate_spans("embedder", emb_spans)?;
    if coverage(model_spans) != coverage(emb_spans) {
        return Err(Error::Input(
            "model and embedder spans do not tile the same character set".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(model_spans.len());
    let mut j = 0usize;
    for &(start, end) in model_spans {
        while j + 1 < emb_spans.len() && emb_spans[j].1 <= start {
            j += 1;
        }
        let mut best_j = j;
        let mut best = overlap((start, end), emb_spans[j]);
        let mut k = j;
        while k + 1 < emb_spans.len() && emb_spans[k + 1].0 < end {
            k += 1;
            let cov = overlap((start, end), emb_spans[k]);
            if cov > best {
                best = cov;
                best_j = k;
            }
        }
        pairs.push(best_j);
        j = k;
    }
    Ok(SpanMatching { pairs })
}

/// Reference implementation of the matcher: full overlap table with the
/// same earliest-index tie rule. Quadratic; used to cross-check the sweep.
pub fn brute_force_matching(
    model_spans: &[(usize, usize)],
    emb_spans: &[(usize, usize)],
) -> SpanMatching {
    let pairs = model_spans
        .iter()
        .map(|&m| {
            let mut best_j = 0usize;
            let mut best = 0usize;
            for (j, &e) in emb_spans.iter().enumerate() {
                let cov = overlap(m, e);
                if cov > best {
                    best = cov;
                    best_j = j;
                }
            }
            best_j
        })
        .collect();
    SpanMatching { pairs }
}

/// Score of a token embedding against reference embeddings:
/// `1 - min_j ||e - e_r^j|| / 2`, in [0, 1] for unit-norm inputs.
pub fn alignment_score(
    token_emb: &EmbeddingVector,
    reference_embs: &[EmbeddingVector],
) -> Result<f64> {
    if reference_embs.is_empty() {
        return Err(Error::Input("alignment_score needs at least one reference embedding".into()));
    }
    let mut min_dist = f64::INFINITY;
    for reference in reference_embs {
        let d = token_emb.euclidean_distance(reference);
        if d < min_dist {
            min_dist = d;
        }
    }
    Ok((1.0 - min_dist / 2.0).clamp(0.0, 1.0))
}

/// One grounding vector per model-vocabulary entry, assigned by tokenizing
/// the entry's text with the embedder tokenizer and matching the entry's
/// full span to the embedder subword of maximal overlap. Entries whose
/// matched subword is absent from the table stay ungrounded and score 0.
pub struct VocabGrounding {
    vectors: Vec<Option<EmbeddingVector>>,
}

impl VocabGrounding {
    pub fn build(
        model_vocab: &Vocabulary,
        emb_vocab: &Vocabulary,
        table: &GroundingTable,
    ) -> VocabGrounding {
        let vectors = (0..model_vocab.size())
            .map(|id| {
                if model_vocab.is_special(id) {
                    return None;
                }
                let text = model_vocab.entry_text(id);
                let pieces = emb_vocab.tokenize_fragment(text, model_vocab.is_word_initial(id));
                let full = (0usize, text.chars().count());
                let mut best: Option<(usize, usize)> = None; // (overlap, emb id)
                for piece in &pieces {
                    if piece.id == UNK {
                        continue;
                    }
                    let cov = overlap(full, piece.span);
                    if best.map_or(true, |(b, _)| cov > b) {
                        best = Some((cov, piece.id));
                    }
                }
                best.and_then(|(_, emb_id)| table.lookup(emb_id).cloned())
            })
            .collect();
        VocabGrounding { vectors }
    }

    pub fn vector(&self, model_id: usize) -> Option<&EmbeddingVector> {
        self.vectors.get(model_id).and_then(|v| v.as_ref())
    }
}

/// Dense per-vocabulary alignment scores against one reference text.
///
/// Special tokens score 0, except `<eos>` which scores 1 at the terminal
/// step slot; non-special scores are step-independent.
#[derive(Debug, Clone)]
pub struct DenseTargets {
    scores: Vec<f64>,
}

impl DenseTargets {
    pub fn vocab_size(&self) -> usize {
        self.scores.len()
    }

    /// Base scores (eos slot at 0).
    pub fn base_scores(&self) -> &[f64] {
        &self.scores
    }

    /// Scores for one prediction step.
    pub fn step_scores(&self, terminal: bool) -> Vec<f64> {
        let mut scores = self.scores.clone();
        if terminal {
            scores[EOS] = 1.0;
        }
        scores
    }

    /// Hand-built targets for tests and oracles.
    pub fn from_scores(scores: Vec<f64>) -> DenseTargets {
        DenseTargets { scores }
    }
}

/// Grounding vectors of a reference text's embedder subwords.
pub struct ReferenceGrounding {
    pub vectors: Vec<EmbeddingVector>,
}

/// Source of token vectors for sequential targets.
pub enum VectorSource<'a> {
    /// Embed within the full surrounding text via the frozen encoder.
    Contextual(&'a ContextualEncoder),
    /// Context-insensitive lookup of decontextualized or static vectors.
    Table(&'a GroundingTable),
}

/// Embeds a reference text once for reuse across steps and hypotheses.
pub fn ground_reference(
    reference: &str,
    source: &VectorSource,
    emb_vocab: &Vocabulary,
) -> Result<ReferenceGrounding> {
    let subwords = emb_vocab.tokenize_with_spans(reference);
    if subwords.is_empty() {
        return Err(Error::Input("reference tokenizes to no subwords".into()));
    }
    let vectors = match source {
        VectorSource::Contextual(encoder) => encoder.embed_contextual(&subwords),
        VectorSource::Table(table) => subwords
            .iter()
            .filter_map(|sw| table.lookup(sw.id).cloned())
            .collect(),
    };
    Ok(ReferenceGrounding { vectors })
}

/// Builds dense vocabulary targets for a reference: every grounded
/// vocabulary token scores its alignment against the reference's
/// grounding vectors, ungrounded tokens score 0.
pub fn build_vocab_targets(
    reference: &str,
    model_vocab: &Vocabulary,
    grounding: &VocabGrounding,
    table: &GroundingTable,
    emb_vocab: &Vocabulary,
) -> Result<DenseTargets> {
    let reference_grounding =
        ground_reference(reference, &VectorSource::Table(table), emb_vocab)?;
    let refs = &reference_grounding.vectors;
    let scores = (0..model_vocab.size())
        .map(|id| match grounding.vector(id) {
            Some(vec) if !refs.is_empty() => alignment_score(vec, refs),
            _ => Ok(0.0),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DenseTargets { scores })
}

/// Sparse top-n targets: alignment scores on the n most probable token
/// ids, exactly zero elsewhere. `values` spans the full vocabulary so the
/// implicit zeros are real coordinates; the loss reads `support` only.
#[derive(Debug, Clone)]
pub struct SparseTargets {
    pub support: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseTargets {
    pub fn nonzero_count(&self) -> usize {
        self.support.iter().filter(|&&id| self.values[id] != 0.0).count()
    }
}

/// The n highest-probability ids, ties toward the lower id.
pub fn top_n_ids(distribution: &[f64], n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..distribution.len()).collect();
    ids.sort_by(|&a, &b| {
        distribution[b]
            .partial_cmp(&distribution[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(n);
    ids
}

/// Builds top-n sparse targets for one prediction step of a hypothesis.
///
/// Each selected candidate is embedded within the complete hypothesis
/// (substituted at the step position) when the source is contextual, or
/// looked up from the table otherwise, and scored against the reference
/// grounding. Special tokens take their conventional targets: 0, except
/// `<eos>` scoring 1 at the terminal slot (a step whose hypothesis token
/// is `<eos>`).
#[allow(clippy::too_many_arguments)]
pub fn build_topn_targets(
    step_distribution: &[f64],
    hypothesis: &[usize],
    step_index: usize,
    reference: &ReferenceGrounding,
    source: &VectorSource,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
    n: usize,
) -> Result<SparseTargets> {
    let vocab_size = model_vocab.size();
    if step_distribution.len() != vocab_size {
        return Err(Error::Input(format!(
            "step distribution has {} entries for vocabulary of {vocab_size}",
            step_distribution.len()
        )));
    }
    let sum: f64 = step_distribution.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("step distribution sums to {sum}")));
    }
    let mut n = n;
    if n > vocab_size {
        eprintln!("warning: top-n {n} exceeds vocabulary size {vocab_size}; clamping");
        n = vocab_size;
    }
    let terminal = hypothesis.get(step_index) == Some(&EOS);
    let support = top_n_ids(step_distribution, n);
    let mut values = vec![0.0; vocab_size];
    for &candidate in &support {
        if candidate < SPECIALS.len() {
            if candidate == EOS && terminal {
                values[candidate] = 1.0;
            }
            continue;
        }
        let vector = match source {
            VectorSource::Table(table) => candidate_vector_from_table(
                candidate, hypothesis, step_index, table, emb_vocab, model_vocab,
            ),
            VectorSource::Contextual(encoder) => candidate_vector_contextual(
                candidate, hypothesis, step_index, encoder, emb_vocab, model_vocab,
            ),
        };
        if let Some(vector) = vector {
            if !reference.vectors.is_empty() {
                values[candidate] = alignment_score(&vector, &reference.vectors)?;
            }
        }
    }
    Ok(SparseTargets { support, values })
}

/// Embedder subword matched to the candidate's span within the
/// substituted hypothesis text.
fn matched_emb_subword(
    candidate: usize,
    hypothesis: &[usize],
    step_index: usize,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
) -> Option<(usize, Vec<crate::tokenizer::Subword>, usize)> {
    let mut substituted = hypothesis.to_vec();
    if step_index >= substituted.len() {
        return None;
    }
    substituted[step_index] = candidate;
    let (text, spans) = model_vocab.decode_with_spans(&substituted);
    let candidate_span = spans[step_index]?;
    let pieces = emb_vocab.tokenize_with_spans(&text);
    let mut best: Option<(usize, usize)> = None; // (overlap, piece index)
    for (idx, piece) in pieces.iter().enumerate() {
        let cov = overlap(candidate_span, piece.span);
        if cov > 0 && best.map_or(true, |(b, _)| cov > b) {
            best = Some((cov, idx));
        }
    }
    best.map(|(_, idx)| (pieces[idx].id, pieces, idx))
}

fn candidate_vector_from_table(
    candidate: usize,
    hypothesis: &[usize],
    step_index: usize,
    table: &GroundingTable,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
) -> Option<EmbeddingVector> {
    let (emb_id, _, _) =
        matched_emb_subword(candidate, hypothesis, step_index, emb_vocab, model_vocab)?;
    table.lookup(emb_id).cloned()
}

fn candidate_vector_contextual(
    candidate: usize,
    hypothesis: &[usize],
    step_index: usize,
    encoder: &ContextualEncoder,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
) -> Option<EmbeddingVector> {
    let (_, pieces, piece_idx) =
        matched_emb_subword(candidate, hypothesis, step_index, emb_vocab, model_vocab)?;
    let vectors = encoder.embed_contextual(&pieces);
    vectors.into_iter().nth(piece_idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::decontextualize;
    use crate::tokenizer::train_tokenizer;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identical_tokenizations_match_identically() {
        let spans = vec![(0, 2), (2, 5), (6, 9)];
        let m = align_to_grounding(&spans, &spans).unwrap();
        assert_eq!(m.pairs, vec![0, 1, 2]);
    }

    #[test]
    fn hand_example_with_tie_toward_earlier() {
        // Overlaps: model 0 vs emb {2, 1, 0}; model 1 vs emb {0, 2, 2}
        // (tie broken toward the earlier embedder span).
        let model = vec![(0, 3), (3, 7)];
        let emb = vec![(0, 2), (2, 5), (5, 7)];
        let m = align_to_grounding(&model, &emb).unwrap();
        assert_eq!(m.pairs, vec![0, 1]);
        assert_eq!(brute_force_matching(&model, &emb).pairs, vec![0, 1]);
    }

    #[test]
    fn rejects_malformed_spans() {
        assert!(align_to_grounding(&[(3, 3)], &[(0, 1)]).is_err());
        assert!(align_to_grounding(&[(0, 3), (2, 5)], &[(0, 5)]).is_err());
        assert!(align_to_grounding(&[(0, 3)], &[(0, 4)]).is_err());
    }

    /// Random pair of tilings of the same character set.
    fn random_tilings(rng: &mut ChaCha12Rng) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        // Words separated by gaps, each word partitioned twice.
        let n_words = rng.random_range(1..6);
        let mut pos = 0usize;
        let mut model = Vec::new();
        let mut emb = Vec::new();
        for _ in 0..n_words {
            let len = rng.random_range(1..9);
            let partition = |rng: &mut ChaCha12Rng, out: &mut Vec<(usize, usize)>| {
                let mut start = pos;
                while start < pos + len {
                    let piece = rng.random_range(1..=(pos + len - start));
                    out.push((start, start + piece));
                    start += piece;
                }
            };
            partition(rng, &mut model);
            partition(rng, &mut emb);
            pos += len + rng.random_range(1..3);
        }
        (model, emb)
    }

    #[test]
    fn sweep_equals_brute_force_on_random_tilings() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..300 {
            let (model, emb) = random_tilings(&mut rng);
            let fast = align_to_grounding(&model, &emb).unwrap();
            let slow = brute_force_matching(&model, &emb);
            assert_eq!(fast, slow, "model={model:?} emb={emb:?}");
        }
    }

    fn unit(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector(values.to_vec())
    }

    #[test]
    fn score_is_one_for_verbatim_match() {
        let e = unit(&[1.0, 0.0]);
        let score = alignment_score(&e, &[unit(&[0.0, 1.0]), e.clone()]).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn score_is_zero_for_antipodal() {
        let score = alignment_score(&unit(&[1.0, 0.0]), &[unit(&[-1.0, 0.0])]).unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn score_matches_hand_euclidean_computation() {
        // refs (0,1) and (0.6,0.8): distances sqrt(2) and sqrt(0.8),
        // min = sqrt(0.8) ~ 0.8944 -> score ~ 0.5528.
        let score =
            alignment_score(&unit(&[1.0, 0.0]), &[unit(&[0.0, 1.0]), unit(&[0.6, 0.8])]).unwrap();
        let expected = 1.0 - 0.8f64.sqrt() / 2.0;
        assert!((score - expected).abs() < 1e-12);
    }

    #[test]
    fn score_errors_on_empty_reference() {
        assert!(alignment_score(&unit(&[1.0, 0.0]), &[]).is_err());
    }

    #[test]
    fn score_is_permutation_invariant_and_monotone() {
        let token = unit(&[1.0, 0.0]);
        let refs = vec![unit(&[0.0, 1.0]), unit(&[0.6, 0.8]), unit(&[-1.0, 0.0])];
        let mut permuted = refs.clone();
        permuted.reverse();
        assert_eq!(
            alignment_score(&token, &refs).unwrap(),
            alignment_score(&token, &permuted).unwrap()
        );
        // Adding a closer reference never decreases the score.
        let base = alignment_score(&token, &refs).unwrap();
        let mut closer = refs.clone();
        closer.push(unit(&[1.0, 0.0]));
        assert!(alignment_score(&token, &closer).unwrap() >= base);
    }

    fn hand_table(entries: Vec<(usize, Vec<f64>)>) -> GroundingTable {
        GroundingTable::from_entries(
            entries[0].1.len(),
            entries
                .into_iter()
                .map(|(id, v)| (id, EmbeddingVector(v), 1))
                .collect(),
            crate::grounding::Provenance::Static,
        )
        .unwrap()
    }

    /// Single-character language where model and embedder vocabularies
    /// coincide, so vocab grounding is the identity assignment.
    fn char_vocab() -> Vocabulary {
        let corpus = vec!["a b f".to_string()];
        train_tokenizer(&corpus, 16, 0).unwrap()
    }

    #[test]
    fn dense_targets_reward_reference_tokens() {
        let vocab = char_vocab();
        let id_a = vocab.encode("a")[0];
        let id_b = vocab.encode("b")[0];
        let id_f = vocab.encode("f")[0];
        let table = hand_table(vec![
            (id_a, vec![1.0, 0.0]),
            (id_b, vec![0.0, 1.0]),
            (id_f, vec![-1.0, 0.0]),
        ]);
        let grounding = VocabGrounding::build(&vocab, &vocab, &table);
        let targets = build_vocab_targets("a", &vocab, &grounding, &table, &vocab).unwrap();
        let scores = targets.base_scores();
        assert_eq!(scores[id_a], 1.0, "reference token matched verbatim");
        assert_eq!(scores[id_f], 0.0, "antipodal filler");
        assert!((scores[id_b] - (1.0 - 2f64.sqrt() / 2.0)).abs() < 1e-12);
        for special in 0..SPECIALS.len() {
            assert_eq!(scores[special], 0.0);
        }
        let terminal = targets.step_scores(true);
        assert_eq!(terminal[EOS], 1.0);
    }

    #[test]
    fn tokens_sharing_an_embedding_score_equally() {
        let vocab = char_vocab();
        let id_a = vocab.encode("a")[0];
        let id_b = vocab.encode("b")[0];
        let id_f = vocab.encode("f")[0];
        let shared = vec![0.6, 0.8];
        let table = hand_table(vec![
            (id_a, shared.clone()),
            (id_b, shared),
            (id_f, vec![0.0, 1.0]),
        ]);
        let grounding = VocabGrounding::build(&vocab, &vocab, &table);
        let targets = build_vocab_targets("f", &vocab, &grounding, &table, &vocab).unwrap();
        assert_eq!(targets.base_scores()[id_a], targets.base_scores()[id_b]);
    }

    #[test]
    fn dense_score_is_min_over_reference_tokens() {
        // Exhaustive pairwise-distance oracle over a random table.
        let vocab = char_vocab();
        let ids: Vec<usize> = ["a", "b", "f"].iter().map(|t| vocab.encode(t)[0]).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let rand_unit = |rng: &mut ChaCha12Rng| {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            vec![theta.cos(), theta.sin()]
        };
        let table = hand_table(ids.iter().map(|&id| (id, rand_unit(&mut rng))).collect());
        let grounding = VocabGrounding::build(&vocab, &vocab, &table);
        let targets = build_vocab_targets("a b", &vocab, &grounding, &table, &vocab).unwrap();
        for &id in &ids {
            let token_vec = table.lookup(id).unwrap();
            let expected = [ids[0], ids[1]]
                .iter()
                .map(|r| token_vec.euclidean_distance(table.lookup(*r).unwrap()))
                .fold(f64::INFINITY, f64::min);
            let expected = (1.0 - expected / 2.0).clamp(0.0, 1.0);
            assert!((targets.base_scores()[id] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_reference_is_an_error() {
        let vocab = char_vocab();
        let table = hand_table(vec![(4, vec![1.0, 0.0])]);
        let grounding = VocabGrounding::build(&vocab, &vocab, &table);
        assert!(build_vocab_targets("", &vocab, &grounding, &table, &vocab).is_err());
    }

    #[test]
    fn top_n_selection_matches_full_sort() {
        let dist = vec![0.1, 0.05, 0.3, 0.05, 0.2, 0.3];
        // Full-sort oracle with the same lower-id tie rule.
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(top_n_ids(&dist, 3), order[..3].to_vec());
        assert_eq!(top_n_ids(&dist, 3), vec![2, 5, 4]);
    }

    #[test]
    fn topn_targets_recompute_independent_scores() {
        // 10+-token vocabulary, n=3 against a real decontextualized table:
        // selected ids equal the full-sort oracle and each score equals an
        // independently recomputed alignment score.
        let corpus: Vec<String> = ["pa pb pc", "pd pe pa", "pb pa pd"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let model_vocab = train_tokenizer(&corpus, 30, 1).unwrap();
        let emb_vocab = train_tokenizer(&corpus, 24, 2).unwrap();
        let encoder = ContextualEncoder::new(8, 2, 0, 0.5, 7).unwrap();
        let table = decontextualize(&encoder, &emb_vocab, &corpus, "d").unwrap();

        let hyp = model_vocab.encode("pa pb pc");
        let mut dist = vec![0.0; model_vocab.size()];
        // Peaked on three real tokens plus noise elsewhere.
        let id_pa = model_vocab.encode("pa")[0];
        let id_pd = model_vocab.encode("pd")[0];
        let id_pe = model_vocab.encode("pe")[0];
        dist[id_pa] = 0.4;
        dist[id_pd] = 0.3;
        dist[id_pe] = 0.2;
        let rest: f64 = 0.1 / (model_vocab.size() - 3) as f64;
        for (i, value) in dist.iter_mut().enumerate() {
            if i != id_pa && i != id_pd && i != id_pe {
                *value = rest;
            }
        }
        let source = VectorSource::Table(&table);
        let reference = ground_reference("pa pe", &source, &emb_vocab).unwrap();
        let targets = build_topn_targets(
            &dist, &hyp, 1, &reference, &source, &emb_vocab, &model_vocab, 3,
        )
        .unwrap();
        assert_eq!(targets.support, top_n_ids(&dist, 3));
        assert!(targets.nonzero_count() <= 3);

        for &candidate in &targets.support {
            // Independent recomputation: substitute, re-tokenize, look up.
            let mut substituted = hyp.clone();
            substituted[1] = candidate;
            let (text, spans) = model_vocab.decode_with_spans(&substituted);
            let span = spans[1].unwrap();
            let pieces = emb_vocab.tokenize_with_spans(&text);
            let mut best = (0usize, None);
            for piece in &pieces {
                let cov = overlap(span, piece.span);
                if cov > best.0 {
                    best = (cov, Some(piece.id));
                }
            }
            let expected = match best.1.and_then(|id| table.lookup(id)) {
                Some(vec) => alignment_score(vec, &reference.vectors).unwrap(),
                None => 0.0,
            };
            assert_eq!(targets.values[candidate], expected);
        }
    }

    #[test]
    fn topn_n1_verbatim_embedding_scores_one() {
        let vocab = char_vocab();
        let id_a = vocab.encode("a")[0];
        let table = hand_table(vec![(id_a, vec![1.0, 0.0])]);
        let mut dist = vec![0.0; vocab.size()];
        dist[id_a] = 1.0;
        let source = VectorSource::Table(&table);
        let reference = ground_reference("a", &source, &vocab).unwrap();
        let hyp = vec![id_a];
        let targets =
            build_topn_targets(&dist, &hyp, 0, &reference, &source, &vocab, &vocab, 1).unwrap();
        assert_eq!(targets.support, vec![id_a]);
        assert_eq!(targets.values[id_a], 1.0);
        assert_eq!(targets.nonzero_count(), 1);
    }

    #[test]
    fn topn_clamps_oversized_n() {
        let vocab = char_vocab();
        let id_a = vocab.encode("a")[0];
        let table = hand_table(vec![(id_a, vec![1.0, 0.0])]);
        let mut dist = vec![0.0; vocab.size()];
        dist[id_a] = 1.0;
        let source = VectorSource::Table(&table);
        let reference = ground_reference("a", &source, &vocab).unwrap();
        let targets = build_topn_targets(
            &dist,
            &[id_a],
            0,
            &reference,
            &source,
            &vocab,
            &vocab,
            vocab.size() + 50,
        )
        .unwrap();
        assert_eq!(targets.support.len(), vocab.size());
    }

    #[test]
    fn terminal_eos_slot_scores_one() {
        let vocab = char_vocab();
        let id_a = vocab.encode("a")[0];
        let table = hand_table(vec![(id_a, vec![1.0, 0.0])]);
        let mut dist = vec![0.0; vocab.size()];
        dist[EOS] = 0.6;
        dist[id_a] = 0.4;
        let source = VectorSource::Table(&table);
        let reference = ground_reference("a", &source, &vocab).unwrap();
        // Hypothesis [a, eos]: step 1 is the terminal slot.
        let hyp = vec![id_a, EOS];
        let terminal =
            build_topn_targets(&dist, &hyp, 1, &reference, &source, &vocab, &vocab, 2).unwrap();
        assert_eq!(terminal.values[EOS], 1.0);
        let non_terminal =
            build_topn_targets(&dist, &hyp, 0, &reference, &source, &vocab, &vocab, 2).unwrap();
        assert_eq!(non_terminal.values[EOS], 0.0);
    }

    proptest! {
        #[test]
        fn matching_equivalence_property(seed in 0u64..5000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let (model, emb) = random_tilings(&mut rng);
            let fast = align_to_grounding(&model, &emb).unwrap();
            prop_assert_eq!(fast, brute_force_matching(&model, &emb));
        }

        #[test]
        fn score_bounds_hold(theta in 0.0..std::f64::consts::TAU, phis in proptest::collection::vec(0.0..std::f64::consts::TAU, 1..6)) {
            let token = unit(&[theta.cos(), theta.sin()]);
            let refs: Vec<EmbeddingVector> = phis.iter().map(|p| unit(&[p.cos(), p.sin()])).collect();
            let score = alignment_score(&token, &refs).unwrap();
            prop_assert!((0.0..=1.0).contains(&score));
        }
    }
}
