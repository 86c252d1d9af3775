//! The training objective family and the weighted combiner.
//!
//! Every objective other than plain cross-entropy acts as a weighted
//! complement of it: `total = mle + alpha * extra`, with `alpha` either
//! fixed or balanced from the first ten loss evaluations. Losses average
//! over steps (and hypotheses) rather than summing, which keeps their
//! magnitudes comparable across sequence lengths and makes the balancing
//! meaningful.
//!
//! Grounding components (encoder, tables, targets) enter the tape as
//! constants only, so no gradient ever reaches them.

use crate::align::{
    build_topn_targets, ground_reference, DenseTargets, SparseTargets, VectorSource,
    VocabGrounding,
};
use crate::error::{Error, Result};
use crate::grounding::{ContextualEncoder, GroundingTable};
use crate::model::{HypothesisSet, ParamNodes, Seq2SeqModel};
use crate::tape::{GradientTape, NodeId, Tape, Tensor};
use crate::tokenizer::{Vocabulary, BOS, EOS};

/// Which objective drives the adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Mle,
    Smoothing,
    Talign,
    Salign,
    Srand,
    SalignDec,
    Sce,
}

impl ObjectiveKind {
    pub fn parse(name: &str) -> Result<ObjectiveKind> {
        Ok(match name {
            "mle" => ObjectiveKind::Mle,
            "smoothing" => ObjectiveKind::Smoothing,
            "talign" => ObjectiveKind::Talign,
            "salign" => ObjectiveKind::Salign,
            "srand" => ObjectiveKind::Srand,
            "salign_dec" => ObjectiveKind::SalignDec,
            "sce" => ObjectiveKind::Sce,
            other => return Err(Error::Config(format!("unknown objective `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Mle => "mle",
            ObjectiveKind::Smoothing => "smoothing",
            ObjectiveKind::Talign => "talign",
            ObjectiveKind::Salign => "salign",
            ObjectiveKind::Srand => "srand",
            ObjectiveKind::SalignDec => "salign_dec",
            ObjectiveKind::Sce => "sce",
        }
    }

    /// Objectives conditioning on sampled prefixes instead of the
    /// reference.
    pub fn is_sequential(&self) -> bool {
        matches!(
            self,
            ObjectiveKind::Salign | ObjectiveKind::Srand | ObjectiveKind::SalignDec | ObjectiveKind::Sce
        )
    }
}

/// Objective selection plus every knob the family exposes.
#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Eq.-style mixing weight; `None` balances it from the first ten
    /// evaluations and then freezes it.
    pub alpha: Option<f64>,
    /// Number of sampled hypotheses per source.
    pub k_hypotheses: usize,
    /// Top-n restriction for sequential targets.
    pub top_n: usize,
    /// Softmax temperature applied to dense alignment targets.
    pub temperature_targets: f64,
    pub smoothing_eps: f64,
    /// Temperature of the hypothesis sampling strategy.
    pub sample_temperature: f64,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> ObjectiveConfig {
        ObjectiveConfig {
            kind,
            alpha: None,
            k_hypotheses: 10,
            top_n: 3,
            temperature_targets: 1.0,
            smoothing_eps: 0.1,
            sample_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(alpha) = self.alpha {
            if alpha < 0.0 || !alpha.is_finite() {
                return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
            }
        }
        if self.k_hypotheses == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top-n must be at least 1".into()));
        }
        if self.temperature_targets <= 0.0 {
            return Err(Error::Config("target temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::Config("smoothing epsilon must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One loss evaluation split into its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mle_part: f64,
    pub extra_part: f64,
}

impl LossValue {
    fn part(value: f64) -> LossValue {
        LossValue {
            total: value,
            mle_part: 0.0,
            extra_part: value,
        }
    }

    fn mle(value: f64) -> LossValue {
        LossValue {
            total: value,
            mle_part: value,
            extra_part: 0.0,
        }
    }
}

/// `total = mle + alpha * extra`; the gradient of the combined tape is
/// the same linear combination.
pub fn combine(mle: &LossValue, extra: &LossValue, alpha: f64) -> LossValue {
    LossValue {
        total: mle.total + alpha * extra.total,
        mle_part: mle.total,
        extra_part: extra.total,
    }
}

/// Result of balancing alpha from early loss magnitudes.
#[derive(Debug, Clone, Copy)]
pub struct AlphaBalance {
    pub alpha: f64,
    /// True when the extra component averaged zero and alpha fell back
    /// to 1; callers should warn.
    pub degenerate: bool,
}

/// `alpha = mean(mle) / mean(extra)` over the first ten recorded
/// evaluations of each component, then frozen.
pub fn auto_balance_alpha(mle_history: &[f64], extra_history: &[f64]) -> Result<AlphaBalance> {
    if mle_history.len() < 10 || extra_history.len() < 10 {
        return Err(Error::Input(format!(
            "alpha balancing needs 10 evaluations of each component, got {} and {}",
            mle_history.len(),
            extra_history.len()
        )));
    }
    let mean = |xs: &[f64]| xs[..10].iter().sum::<f64>() / 10.0;
    let mle_mean = mean(mle_history);
    let extra_mean = mean(extra_history);
    if extra_mean == 0.0 {
        return Ok(AlphaBalance {
            alpha: 1.0,
            degenerate: true,
        });
    }
    Ok(AlphaBalance {
        alpha: mle_mean / extra_mean,
        degenerate: false,
    })
}

/// One training pair, tokenized for the model.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub source_ids: Vec<usize>,
    pub reference_ids: Vec<usize>,
    pub reference_text: String,
}

impl TrainSample {
    pub fn from_pair(pair: &crate::corpus::SentencePair, model_vocab: &Vocabulary) -> TrainSample {
        TrainSample {
            source_ids: model_vocab.encode(&pair.source),
            reference_ids: model_vocab.encode(&pair.target),
            reference_text: pair.target.clone(),
        }
    }
}

/// Frozen grounding resources shared across loss evaluations.
pub struct ObjectiveContext<'a> {
    pub encoder: &'a ContextualEncoder,
    pub table: &'a GroundingTable,
    pub emb_vocab: &'a Vocabulary,
    pub model_vocab: &'a Vocabulary,
    pub vocab_grounding: &'a VocabGrounding,
}

// ---------------------------------------------------------------------------
// Node builders: append one loss component to an existing tape.

fn softmax_with_temperature(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Teacher-forced soft cross entropy: decode on the reference prefix and
/// average `-sum_v q[t][v] * log p[t][v]` over steps. The target row for
/// step `t` comes from `q_row(t, terminal)`.
fn teacher_forced_ce_node(
    tape: &mut Tape,
    binding: &ParamNodes,
    model: &Seq2SeqModel,
    enc: NodeId,
    reference_ids: &[usize],
    q_row: impl Fn(usize, bool) -> Vec<f64>,
) -> Result<NodeId> {
    if reference_ids.is_empty() {
        return Err(Error::Input("reference is empty".into()));
    }
    let steps = reference_ids.len() + 1;
    let mut prefix = Vec::with_capacity(steps);
    prefix.push(BOS);
    prefix.extend_from_slice(reference_ids);
    let logits = model.decode_on_tape(tape, binding, enc, &prefix)?;
    let logp = tape.log_softmax_rows(logits);
    let v = model.vocab_size();
    let mut q = Tensor::zeros(steps, v);
    for t in 0..steps {
        let row = q_row(t, t == steps - 1);
        debug_assert_eq!(row.len(), v);
        q.data[t * v..(t + 1) * v].copy_from_slice(&row);
    }
    let ce = tape.dot_const(logp, q);
    Ok(tape.scale(ce, -1.0 / steps as f64))
}

fn one_hot_rows(reference_ids: &[usize], vocab_size: usize) -> impl Fn(usize, bool) -> Vec<f64> + '_ {
    move |t, terminal| {
        let mut row = vec![0.0; vocab_size];
        let target = if terminal { EOS } else { reference_ids[t] };
        row[target] = 1.0;
        row
    }
}

fn smoothed_rows(
    reference_ids: &[usize],
    vocab_size: usize,
    eps: f64,
) -> impl Fn(usize, bool) -> Vec<f64> + '_ {
    move |t, terminal| {
        let mut row = vec![eps / (vocab_size as f64 - 1.0); vocab_size];
        let target = if terminal { EOS } else { reference_ids[t] };
        row[target] = 1.0 - eps;
        row
    }
}

/// Sequential L1 component shared by the salign family: decode each
/// hypothesis under its own prefix and accumulate
/// `sum_{i in support} |p[t][i] - a[t][i]|`, averaged over the
/// hypothesis's steps and then over hypotheses. Targets are produced by
/// `target_fn(step_distribution, hypothesis_tokens, hypothesis_index,
/// step)` and recorded for inspection.
fn salign_family_node(
    tape: &mut Tape,
    binding: &ParamNodes,
    model: &Seq2SeqModel,
    enc: NodeId,
    hypotheses: &HypothesisSet,
    mut target_fn: impl FnMut(&[f64], &[usize], usize, usize) -> Result<SparseTargets>,
) -> Result<(NodeId, Vec<Vec<SparseTargets>>)> {
    if hypotheses.hypotheses.is_empty() {
        return Err(Error::Input("sequential objective needs at least one hypothesis".into()));
    }
    let mut per_hyp_nodes = Vec::new();
    let mut all_targets = Vec::new();
    for (hyp_index, hyp) in hypotheses.hypotheses.iter().enumerate() {
        if hyp.tokens.is_empty() {
            return Err(Error::Input("hypothesis has no tokens".into()));
        }
        let mut prefix = Vec::with_capacity(hyp.tokens.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&hyp.tokens[..hyp.tokens.len() - 1]);
        let logits = model.decode_on_tape(tape, binding, enc, &prefix)?;
        let probs = tape.softmax_rows(logits);
        let mut hyp_targets = Vec::with_capacity(hyp.tokens.len());
        let mut step_nodes = Vec::with_capacity(hyp.tokens.len());
        for step in 0..hyp.tokens.len() {
            let distribution = tape.value(probs).row(step).to_vec();
            let targets = target_fn(&distribution, &hyp.tokens, hyp_index, step)?;
            let mut coord_nodes = Vec::with_capacity(targets.support.len());
            for &coord in &targets.support {
                let p = tape.pick(probs, step, coord);
                let a = tape.constant(Tensor::scalar(targets.values[coord]));
                let d = tape.sub(p, a);
                coord_nodes.push(tape.abs(d));
            }
            let mut acc = coord_nodes[0];
            for node in &coord_nodes[1..] {
                acc = tape.add(acc, *node);
            }
            step_nodes.push(acc);
            hyp_targets.push(targets);
        }
        let mut acc = step_nodes[0];
        for node in &step_nodes[1..] {
            acc = tape.add(acc, *node);
        }
        per_hyp_nodes.push(tape.scale(acc, 1.0 / hyp.tokens.len() as f64));
        all_targets.push(hyp_targets);
    }
    let mut acc = per_hyp_nodes[0];
    for node in &per_hyp_nodes[1..] {
        acc = tape.add(acc, *node);
    }
    let node = tape.scale(acc, 1.0 / hypotheses.hypotheses.len() as f64);
    Ok((node, all_targets))
}

/// Soft cross entropy against dense targets under sampled prefixes.
fn sce_node(
    tape: &mut Tape,
    binding: &ParamNodes,
    model: &Seq2SeqModel,
    enc: NodeId,
    hypotheses: &HypothesisSet,
    dense: &DenseTargets,
    temperature: f64,
) -> Result<NodeId> {
    if hypotheses.hypotheses.is_empty() {
        return Err(Error::Input("sequential objective needs at least one hypothesis".into()));
    }
    let v = model.vocab_size();
    let mut per_hyp_nodes = Vec::new();
    for hyp in &hypotheses.hypotheses {
        if hyp.tokens.is_empty() {
            return Err(Error::Input("hypothesis has no tokens".into()));
        }
        let steps = hyp.tokens.len();
        let mut prefix = Vec::with_capacity(steps);
        prefix.push(BOS);
        prefix.extend_from_slice(&hyp.tokens[..steps - 1]);
        let logits = model.decode_on_tape(tape, binding, enc, &prefix)?;
        let logp = tape.log_softmax_rows(logits);
        let mut q = Tensor::zeros(steps, v);
        for (t, &token) in hyp.tokens.iter().enumerate() {
            let row = softmax_with_temperature(&dense.step_scores(token == EOS), temperature);
            q.data[t * v..(t + 1) * v].copy_from_slice(&row);
        }
        let ce = tape.dot_const(logp, q);
        per_hyp_nodes.push(tape.scale(ce, -1.0 / steps as f64));
    }
    let mut acc = per_hyp_nodes[0];
    for node in &per_hyp_nodes[1..] {
        acc = tape.add(acc, *node);
    }
    Ok(tape.scale(acc, 1.0 / hypotheses.hypotheses.len() as f64))
}

fn finish_part(
    tape: Tape,
    root: NodeId,
    binding: ParamNodes,
    kind: ObjectiveKind,
    as_mle: bool,
) -> Result<(LossValue, GradientTape)> {
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("{} loss is non-finite", kind.name())));
    }
    let loss = if as_mle {
        LossValue::mle(value)
    } else {
        LossValue::part(value)
    };
    Ok((loss, GradientTape::new(tape, root, binding.bindings())))
}

// ---------------------------------------------------------------------------
// Public per-objective entry points.

/// Teacher-forced cross entropy to the one-hot reference.
pub fn mle_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    reference_ids: &[usize],
) -> Result<(LossValue, GradientTape)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let root = teacher_forced_ce_node(
        &mut tape,
        &binding,
        model,
        enc,
        reference_ids,
        one_hot_rows(reference_ids, model.vocab_size()),
    )?;
    finish_part(tape, root, binding, ObjectiveKind::Mle, true)
}

/// Cross entropy against the label-smoothed reference distribution.
pub fn smoothing_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    reference_ids: &[usize],
    eps: f64,
) -> Result<(LossValue, GradientTape)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let root = teacher_forced_ce_node(
        &mut tape,
        &binding,
        model,
        enc,
        reference_ids,
        smoothed_rows(reference_ids, model.vocab_size(), eps),
    )?;
    finish_part(tape, root, binding, ObjectiveKind::Smoothing, true)
}

/// Teacher-forced soft cross entropy against softmaxed dense alignment
/// targets. The grounding receives no gradient.
pub fn talign_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    reference_ids: &[usize],
    dense: &DenseTargets,
    temperature_targets: f64,
) -> Result<(LossValue, GradientTape)> {
    if dense.vocab_size() != model.vocab_size() {
        return Err(Error::Input("dense targets sized for a different vocabulary".into()));
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let root = teacher_forced_ce_node(&mut tape, &binding, model, enc, reference_ids, |_, terminal| {
        softmax_with_temperature(&dense.step_scores(terminal), temperature_targets)
    })?;
    finish_part(tape, root, binding, ObjectiveKind::Talign, false)
}

/// L1 distance between the model's probabilities and contextual top-n
/// alignment targets, under the model's own sampled prefixes.
#[allow(clippy::too_many_arguments)]
pub fn salign_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    reference_text: &str,
    hypotheses: &HypothesisSet,
    encoder: &ContextualEncoder,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
    n: usize,
) -> Result<(LossValue, GradientTape)> {
    let source_vectors = VectorSource::Contextual(encoder);
    let reference = ground_reference(reference_text, &source_vectors, emb_vocab)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let (root, _) = salign_family_node(&mut tape, &binding, model, enc, hypotheses, |dist, hyp, _, step| {
        build_topn_targets(dist, hyp, step, &reference, &source_vectors, emb_vocab, model_vocab, n)
    })?;
    finish_part(tape, root, binding, ObjectiveKind::Salign, false)
}

/// Same structure as [`salign_loss`] with uniformly random targets on the
/// top-n support: the non-informative training signal.
pub fn srand_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    hypotheses: &HypothesisSet,
    seed: u64,
    n: usize,
) -> Result<(LossValue, GradientTape)> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let vocab_size = model.vocab_size();
    let (root, _) = salign_family_node(&mut tape, &binding, model, enc, hypotheses, |dist, _, hyp_index, step| {
        Ok(random_targets(dist, vocab_size, n, seed, hyp_index, step))
    })?;
    finish_part(tape, root, binding, ObjectiveKind::Srand, false)
}

/// Uniform [0,1) targets on the top-n support, seeded per
/// (hypothesis, step).
pub fn random_targets(
    distribution: &[f64],
    vocab_size: usize,
    n: usize,
    seed: u64,
    hyp_index: usize,
    step: usize,
) -> SparseTargets {
    use rand::prelude::*;
    let stream = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((hyp_index as u64) << 32)
        .wrapping_add(step as u64);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(stream);
    let support = crate::align::top_n_ids(distribution, n.min(vocab_size));
    let mut values = vec![0.0; vocab_size];
    for &coord in &support {
        values[coord] = rng.random::<f64>();
    }
    SparseTargets { support, values }
}

/// The decontextualized variant of [`salign_loss`]: token vectors come
/// from the table, with no contextual inference.
#[allow(clippy::too_many_arguments)]
pub fn salign_dec_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    reference_text: &str,
    hypotheses: &HypothesisSet,
    table: &GroundingTable,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
    n: usize,
) -> Result<(LossValue, GradientTape)> {
    let source_vectors = VectorSource::Table(table);
    let reference = ground_reference(reference_text, &source_vectors, emb_vocab)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let (root, _) = salign_family_node(&mut tape, &binding, model, enc, hypotheses, |dist, hyp, _, step| {
        build_topn_targets(dist, hyp, step, &reference, &source_vectors, emb_vocab, model_vocab, n)
    })?;
    finish_part(tape, root, binding, ObjectiveKind::SalignDec, false)
}

/// Cross-entropy variant of the decontextualized sequential objective.
pub fn sce_loss(
    model: &Seq2SeqModel,
    source: &[usize],
    hypotheses: &HypothesisSet,
    dense: &DenseTargets,
    temperature_targets: f64,
) -> Result<(LossValue, GradientTape)> {
    if dense.vocab_size() != model.vocab_size() {
        return Err(Error::Input("dense targets sized for a different vocabulary".into()));
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let root = sce_node(&mut tape, &binding, model, enc, hypotheses, dense, temperature_targets)?;
    finish_part(tape, root, binding, ObjectiveKind::Sce, false)
}

/// Sequential loss over explicitly provided per-step targets; the
/// support set is read from each target, every other coordinate is
/// ignored by construction.
pub fn salign_family_loss_with_targets(
    model: &Seq2SeqModel,
    source: &[usize],
    hypotheses: &HypothesisSet,
    targets: &[Vec<SparseTargets>],
) -> Result<(LossValue, GradientTape)> {
    if targets.len() != hypotheses.hypotheses.len() {
        return Err(Error::Input("targets do not cover every hypothesis".into()));
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let enc = model.encode_on_tape(&mut tape, &binding, source)?;
    let (root, _) = salign_family_node(&mut tape, &binding, model, enc, hypotheses, |_, _, hyp_index, step| {
        targets
            .get(hyp_index)
            .and_then(|steps| steps.get(step))
            .cloned()
            .ok_or_else(|| Error::Input(format!("missing targets for hypothesis {hyp_index} step {step}")))
    })?;
    finish_part(tape, root, binding, ObjectiveKind::Salign, false)
}

/// Builds the per-step sequential targets the salign family would use,
/// without evaluating a loss.
#[allow(clippy::too_many_arguments)]
pub fn build_salign_targets(
    model: &Seq2SeqModel,
    source: &[usize],
    reference_text: &str,
    hypotheses: &HypothesisSet,
    source_vectors: &VectorSource,
    emb_vocab: &Vocabulary,
    model_vocab: &Vocabulary,
    n: usize,
) -> Result<Vec<Vec<SparseTargets>>> {
    let reference = ground_reference(reference_text, source_vectors, emb_vocab)?;
    let enc = model.encode_values(source)?;
    let mut out = Vec::with_capacity(hypotheses.hypotheses.len());
    for hyp in &hypotheses.hypotheses {
        let mut prefix = Vec::with_capacity(hyp.tokens.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&hyp.tokens[..hyp.tokens.len() - 1]);
        let logits = model.decode_logits(&enc, &prefix)?;
        let probs = crate::tape::softmax_rows(&logits);
        let mut steps = Vec::with_capacity(hyp.tokens.len());
        for step in 0..hyp.tokens.len() {
            steps.push(build_topn_targets(
                probs.row(step),
                &hyp.tokens,
                step,
                &reference,
                source_vectors,
                emb_vocab,
                model_vocab,
                n,
            )?);
        }
        out.push(steps);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Combined evaluation.

/// Default generated-length cap: twice the reference length.
pub fn sample_max_len(model: &Seq2SeqModel, reference_len: usize) -> usize {
    (2 * reference_len.max(2)).min(model.config().max_len)
}

/// Builds the full weighted objective on a single tape:
/// `total = mle + alpha * extra`. Sequential objectives sample their
/// hypotheses here, from the model's current parameters.
pub fn evaluate(
    model: &Seq2SeqModel,
    cfg: &ObjectiveConfig,
    alpha: f64,
    sample: &TrainSample,
    ctx: &ObjectiveContext,
    seed: u64,
) -> Result<(LossValue, GradientTape)> {
    cfg.validate()?;
    if sample.reference_ids.is_empty() {
        return Err(Error::Input("reference is empty".into()));
    }
    match cfg.kind {
        ObjectiveKind::Mle => mle_loss(model, &sample.source_ids, &sample.reference_ids),
        ObjectiveKind::Smoothing => {
            smoothing_loss(model, &sample.source_ids, &sample.reference_ids, cfg.smoothing_eps)
        }
        _ => {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let enc = model.encode_on_tape(&mut tape, &binding, &sample.source_ids)?;
            let mle_node = teacher_forced_ce_node(
                &mut tape,
                &binding,
                model,
                enc,
                &sample.reference_ids,
                one_hot_rows(&sample.reference_ids, model.vocab_size()),
            )?;
            let extra_node = match cfg.kind {
                ObjectiveKind::Talign => {
                    let dense = crate::align::build_vocab_targets(
                        &sample.reference_text,
                        ctx.model_vocab,
                        ctx.vocab_grounding,
                        ctx.table,
                        ctx.emb_vocab,
                    )?;
                    teacher_forced_ce_node(
                        &mut tape,
                        &binding,
                        model,
                        enc,
                        &sample.reference_ids,
                        |_, terminal| {
                            softmax_with_temperature(
                                &dense.step_scores(terminal),
                                cfg.temperature_targets,
                            )
                        },
                    )?
                }
                ObjectiveKind::Salign | ObjectiveKind::Srand | ObjectiveKind::SalignDec => {
                    let hypotheses = model.sample_hypotheses(
                        &sample.source_ids,
                        cfg.k_hypotheses,
                        cfg.sample_temperature,
                        sample_max_len(model, sample.reference_ids.len()),
                        seed,
                    )?;
                    match cfg.kind {
                        ObjectiveKind::Salign => {
                            let source_vectors = VectorSource::Contextual(ctx.encoder);
                            let reference = ground_reference(
                                &sample.reference_text,
                                &source_vectors,
                                ctx.emb_vocab,
                            )?;
                            let (node, _) = salign_family_node(
                                &mut tape,
                                &binding,
                                model,
                                enc,
                                &hypotheses,
                                |dist, hyp, _, step| {
                                    build_topn_targets(
                                        dist,
                                        hyp,
                                        step,
                                        &reference,
                                        &source_vectors,
                                        ctx.emb_vocab,
                                        ctx.model_vocab,
                                        cfg.top_n,
                                    )
                                },
                            )?;
                            node
                        }
                        ObjectiveKind::Srand => {
                            let vocab_size = model.vocab_size();
                            let (node, _) = salign_family_node(
                                &mut tape,
                                &binding,
                                model,
                                enc,
                                &hypotheses,
                                |dist, _, hyp_index, step| {
                                    Ok(random_targets(dist, vocab_size, cfg.top_n, seed, hyp_index, step))
                                },
                            )?;
                            node
                        }
                        _ => {
                            let source_vectors = VectorSource::Table(ctx.table);
                            let reference = ground_reference(
                                &sample.reference_text,
                                &source_vectors,
                                ctx.emb_vocab,
                            )?;
                            let (node, _) = salign_family_node(
                                &mut tape,
                                &binding,
                                model,
                                enc,
                                &hypotheses,
                                |dist, hyp, _, step| {
                                    build_topn_targets(
                                        dist,
                                        hyp,
                                        step,
                                        &reference,
                                        &source_vectors,
                                        ctx.emb_vocab,
                                        ctx.model_vocab,
                                        cfg.top_n,
                                    )
                                },
                            )?;
                            node
                        }
                    }
                }
                ObjectiveKind::Sce => {
                    let hypotheses = model.sample_hypotheses(
                        &sample.source_ids,
                        cfg.k_hypotheses,
                        cfg.sample_temperature,
                        sample_max_len(model, sample.reference_ids.len()),
                        seed,
                    )?;
                    let dense = crate::align::build_vocab_targets(
                        &sample.reference_text,
                        ctx.model_vocab,
                        ctx.vocab_grounding,
                        ctx.table,
                        ctx.emb_vocab,
                    )?;
                    sce_node(
                        &mut tape,
                        &binding,
                        model,
                        enc,
                        &hypotheses,
                        &dense,
                        cfg.temperature_targets,
                    )?
                }
                ObjectiveKind::Mle | ObjectiveKind::Smoothing => unreachable!(),
            };
            let scaled = tape.scale(extra_node, alpha);
            let root = tape.add(mle_node, scaled);
            let total = tape.value(root).item();
            if !total.is_finite() {
                return Err(Error::Numeric(format!("{} loss is non-finite", cfg.kind.name())));
            }
            let loss = LossValue {
                total,
                mle_part: tape.value(mle_node).item(),
                extra_part: tape.value(extra_node).item(),
            };
            Ok((loss, GradientTape::new(tape, root, binding.bindings())))
        }
    }
}
