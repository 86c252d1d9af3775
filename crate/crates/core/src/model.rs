//! Desk-scale differentiable encoder-decoder with ancestral sampling.
//!
//! Pre-norm transformer blocks over the shared tape ops: the same graph
//! construction serves training (with gradients) and inference (values
//! only), so both paths are bitwise consistent. Double precision
//! throughout; parameters update only through the trainer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Tensor};
use crate::tokenizer::{BOS, EOS};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    /// Hard cap on generated sequence length.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 128,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::tokenizer::SPECIALS.len() {
            return Err(Error::Config("vocab_size below special-token count".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

// Per-layer parameter group sizes.
const ENC_LAYER_PARAMS: usize = 12;
const DEC_LAYER_PARAMS: usize = 18;

/// Deterministic parameter layout: `(rows, cols)` per parameter index.
fn layout(config: &ModelConfig) -> Vec<(usize, usize)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let mut out = vec![(v, d), (v, d)]; // src_emb, tgt_emb
    for _ in 0..config.enc_layers {
        // wq wk wv wo ln1_g ln1_b w1 b1 w2 b2 ln2_g ln2_b
        out.extend([
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (1, d),
            (d, ff),
            (1, ff),
            (ff, d),
            (1, d),
            (1, d),
            (1, d),
        ]);
    }
    out.extend([(1, d), (1, d)]); // encoder final norm
    for _ in 0..config.dec_layers {
        // self: wq wk wv wo ln1_g ln1_b
        // cross: wq wk wv wo ln2_g ln2_b
        // ff: w1 b1 w2 b2 ln3_g ln3_b
        out.extend([
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (1, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (1, d),
            (d, ff),
            (1, ff),
            (ff, d),
            (1, d),
            (1, d),
            (1, d),
        ]);
    }
    out.extend([(1, d), (1, d)]); // decoder final norm
    out.extend([(d, v), (1, v)]); // output projection
    out
}

const SRC_EMB: usize = 0;
const TGT_EMB: usize = 1;

fn enc_layer_base(l: usize) -> usize {
    2 + l * ENC_LAYER_PARAMS
}

fn enc_final_base(config: &ModelConfig) -> usize {
    2 + config.enc_layers * ENC_LAYER_PARAMS
}

fn dec_layer_base(config: &ModelConfig, l: usize) -> usize {
    enc_final_base(config) + 2 + l * DEC_LAYER_PARAMS
}

fn dec_final_base(config: &ModelConfig) -> usize {
    dec_layer_base(config, config.dec_layers)
}

fn out_proj_base(config: &ModelConfig) -> usize {
    dec_final_base(config) + 2
}

/// Parameter leaves bound onto one tape, indexed like the model's
/// parameter list.
pub struct ParamNodes {
    nodes: Vec<NodeId>,
}

impl ParamNodes {
    pub fn node(&self, idx: usize) -> NodeId {
        self.nodes[idx]
    }

    pub fn bindings(&self) -> Vec<(usize, NodeId)> {
        self.nodes.iter().copied().enumerate().collect()
    }
}

/// One sampled output sequence with its per-step sampling distributions.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Generated ids, ending in `<eos>` or truncated at `max_len`.
    pub tokens: Vec<usize>,
    /// Distribution each token was drawn from (temperature applied).
    pub step_distributions: Vec<Vec<f64>>,
    /// Sum of the chosen tokens' log probabilities.
    pub log_prob: f64,
}

/// K sampled hypotheses for one source.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Hypothesis>,
}

/// The trained translation model.
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: Vec<Tensor>,
    step: u64,
    seed: u64,
}

impl Seq2SeqModel {
    /// Fresh model with seeded gaussian weights, unit norm gains and zero
    /// biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Seq2SeqModel> {
        config.validate()?;
        let shapes = layout(&config);
        let params = shapes
            .iter()
            .enumerate()
            .map(|(idx, &(rows, cols))| init_param(&config, idx, rows, cols, seed))
            .collect();
        Ok(Seq2SeqModel {
            config,
            params,
            step: 0,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Binds every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamNodes {
        let nodes = self
            .params
            .iter()
            .enumerate()
            .map(|(idx, p)| tape.param(p.clone(), idx))
            .collect();
        ParamNodes { nodes }
    }

    fn positional(&self, len: usize) -> Tensor {
        let d = self.config.d_model;
        let mut out = Tensor::zeros(len, d);
        for t in 0..len {
            for i in 0..d / 2 {
                let rate = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
                out.set(t, 2 * i, (t as f64 * rate).sin());
                out.set(t, 2 * i + 1, (t as f64 * rate).cos());
            }
        }
        out
    }

    fn attention(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        keys_values: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        causal: bool,
    ) -> NodeId {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys_values, wk);
        let v = tape.matmul(keys_values, wv);
        let t_len = tape.value(q).rows;
        let s_len = tape.value(k).rows;
        let mask = if causal {
            let mut m = Tensor::zeros(t_len, s_len);
            for i in 0..t_len {
                for j in 0..s_len {
                    if j > i {
                        m.set(i, j, -1e30);
                    }
                }
            }
            Some(m)
        } else {
            None
        };
        let mut contexts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = match &mask {
                Some(m) => tape.add_const(scores, m.clone()),
                None => scores,
            };
            let attn = tape.softmax_rows(scores);
            contexts.push(tape.matmul(attn, vh));
        }
        let ctx = tape.concat_cols(&contexts);
        tape.matmul(ctx, wo)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> NodeId {
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let h = tape.matmul(h, w2);
        tape.add_row(h, b2)
    }

    /// Encoder stack over `source` ids; returns the normalized encoder
    /// output `[S, d]`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamNodes,
        source: &[usize],
    ) -> Result<NodeId> {
        self.check_ids(source)?;
        if source.is_empty() {
            return Err(Error::Input("source sequence is empty".into()));
        }
        let emb = tape.gather(binding.node(SRC_EMB), source);
        let mut x = tape.add_const(emb, self.positional(source.len()));
        for l in 0..self.config.enc_layers {
            let base = enc_layer_base(l);
            let normed = tape.layer_norm(x, binding.node(base + 4), binding.node(base + 5));
            let attn = self.attention(
                tape,
                normed,
                normed,
                binding.node(base),
                binding.node(base + 1),
                binding.node(base + 2),
                binding.node(base + 3),
                false,
            );
            x = tape.add(x, attn);
            let normed = tape.layer_norm(x, binding.node(base + 10), binding.node(base + 11));
            let ff = self.feed_forward(
                tape,
                normed,
                binding.node(base + 6),
                binding.node(base + 7),
                binding.node(base + 8),
                binding.node(base + 9),
            );
            x = tape.add(x, ff);
        }
        let base = enc_final_base(&self.config);
        Ok(tape.layer_norm(x, binding.node(base), binding.node(base + 1)))
    }

    /// Decoder stack over `prefix` ids (starting with `<bos>`) attending
    /// to `enc_out`; returns logits `[|prefix|, V]`.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamNodes,
        enc_out: NodeId,
        prefix: &[usize],
    ) -> Result<NodeId> {
        self.check_ids(prefix)?;
        if prefix.is_empty() {
            return Err(Error::Input("decoder prefix is empty".into()));
        }
        let emb = tape.gather(binding.node(TGT_EMB), prefix);
        let mut y = tape.add_const(emb, self.positional(prefix.len()));
        for l in 0..self.config.dec_layers {
            let base = dec_layer_base(&self.config, l);
            let normed = tape.layer_norm(y, binding.node(base + 4), binding.node(base + 5));
            let self_attn = self.attention(
                tape,
                normed,
                normed,
                binding.node(base),
                binding.node(base + 1),
                binding.node(base + 2),
                binding.node(base + 3),
                true,
            );
            y = tape.add(y, self_attn);
            let normed = tape.layer_norm(y, binding.node(base + 10), binding.node(base + 11));
            let cross = self.attention(
                tape,
                normed,
                enc_out,
                binding.node(base + 6),
                binding.node(base + 7),
                binding.node(base + 8),
                binding.node(base + 9),
                false,
            );
            y = tape.add(y, cross);
            let normed = tape.layer_norm(y, binding.node(base + 16), binding.node(base + 17));
            let ff = self.feed_forward(
                tape,
                normed,
                binding.node(base + 12),
                binding.node(base + 13),
                binding.node(base + 14),
                binding.node(base + 15),
            );
            y = tape.add(y, ff);
        }
        let base = dec_final_base(&self.config);
        let h = tape.layer_norm(y, binding.node(base), binding.node(base + 1));
        let out_base = out_proj_base(&self.config);
        let logits = tape.matmul(h, binding.node(out_base));
        Ok(tape.add_row(logits, binding.node(out_base + 1)))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.config.vocab_size {
                return Err(Error::Input(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Encoder output as a plain tensor (no gradients kept).
    pub fn encode_values(&self, source: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let enc = self.encode_on_tape(&mut tape, &binding, source)?;
        Ok(tape.value(enc).clone())
    }

    /// Logits for every prefix position, values only.
    pub fn decode_logits(&self, enc_out: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let enc = tape.constant(enc_out.clone());
        let logits = self.decode_on_tape(&mut tape, &binding, enc, prefix)?;
        Ok(tape.value(logits).clone())
    }

    /// Next-token distribution given a source and a generated prefix
    /// (without `<bos>`; it is prepended internally).
    pub fn forward(&self, source: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
        let enc = self.encode_values(source)?;
        let mut dec_input = Vec::with_capacity(prefix.len() + 1);
        dec_input.push(BOS);
        dec_input.extend_from_slice(prefix);
        let logits = self.decode_logits(&enc, &dec_input)?;
        let probs = crate::tape::softmax_rows(&logits);
        Ok(probs.row(probs.rows - 1).to_vec())
    }

    /// Draws K hypotheses by ancestral sampling from the
    /// temperature-scaled next-token distributions. `temperature == 0`
    /// switches to argmax (greedy) decoding. Deterministic given `seed`.
    pub fn sample_hypotheses(
        &self,
        source: &[usize],
        k: usize,
        temperature: f64,
        max_len: usize,
        seed: u64,
    ) -> Result<HypothesisSet> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if temperature < 0.0 {
            return Err(Error::Config("temperature must be nonnegative".into()));
        }
        let enc = self.encode_values(source)?;
        let max_len = max_len.min(self.config.max_len).max(1);
        let mut hypotheses = Vec::with_capacity(k);
        for ki in 0..k {
            let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(ki as u64 + 1)));
            let mut prefix = vec![BOS];
            let mut tokens = Vec::new();
            let mut dists = Vec::new();
            let mut log_prob = 0.0;
            for _ in 0..max_len {
                let logits = self.decode_logits(&enc, &prefix)?;
                let last = logits.row(logits.rows - 1);
                let dist = sampling_distribution(last, temperature);
                let token = if temperature == 0.0 {
                    argmax(&dist)
                } else {
                    draw(&dist, &mut rng)
                };
                log_prob += dist[token].ln();
                tokens.push(token);
                dists.push(dist);
                prefix.push(token);
                if token == EOS {
                    break;
                }
            }
            hypotheses.push(Hypothesis {
                tokens,
                step_distributions: dists,
                log_prob,
            });
        }
        Ok(HypothesisSet { hypotheses })
    }

    /// Argmax decode; the evaluation-time generation strategy.
    pub fn greedy_decode(&self, source: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let set = self.sample_hypotheses(source, 1, 0.0, max_len, 0)?;
        Ok(set.hypotheses.into_iter().next().unwrap().tokens)
    }

    /// Exact binary checkpoint: header plus all parameters as
    /// little-endian f64.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = Vec::new();
        out.extend(b"SACP");
        out.extend(1u32.to_le_bytes());
        for field in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.n_heads,
            self.config.enc_layers,
            self.config.dec_layers,
            self.config.d_ff,
            self.config.max_len,
        ] {
            out.extend((field as u32).to_le_bytes());
        }
        out.extend(self.step.to_le_bytes());
        out.extend(self.seed.to_le_bytes());
        out.extend((self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend((p.rows as u32).to_le_bytes());
            out.extend((p.cols as u32).to_le_bytes());
            for x in &p.data {
                out.extend(x.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Seq2SeqModel> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::Input(format!("truncated checkpoint {}", path.display())));
            }
            let s = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(s)
        };
        if take(&mut cursor, 4)? != b"SACP" {
            return Err(Error::Input(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Input(format!("unsupported checkpoint version {version}")));
        }
        let mut fields = [0usize; 7];
        for f in fields.iter_mut() {
            *f = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        }
        let config = ModelConfig {
            vocab_size: fields[0],
            d_model: fields[1],
            n_heads: fields[2],
            enc_layers: fields[3],
            dec_layers: fields[4],
            d_ff: fields[5],
            max_len: fields[6],
        };
        config.validate()?;
        let step = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        let n_params = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
        let shapes = layout(&config);
        if n_params != shapes.len() {
            return Err(Error::Input(format!(
                "checkpoint has {n_params} parameters, architecture expects {}",
                shapes.len()
            )));
        }
        let mut params = Vec::with_capacity(n_params);
        for (idx, &(rows, cols)) in shapes.iter().enumerate() {
            let r = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            let c = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
            if (r, c) != (rows, cols) {
                return Err(Error::Input(format!(
                    "parameter {idx} has shape ({r}, {c}), expected ({rows}, {cols})"
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
            }
            params.push(Tensor::from_vec(rows, cols, data));
        }
        Ok(Seq2SeqModel {
            config,
            params,
            step,
            seed,
        })
    }

    /// Reverse-mode parameter gradients for one recorded loss
    /// evaluation.
    pub fn gradient(&self, tape: &crate::tape::GradientTape) -> Result<Vec<Tensor>> {
        let grads = tape.gradients()?;
        if grads.len() != self.params.len() {
            return Err(Error::Input(format!(
                "gradient tape binds {} parameters, model has {}",
                grads.len(),
                self.params.len()
            )));
        }
        Ok(grads)
    }

    /// Checksum over configuration and parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend(self.step.to_le_bytes());
        for p in &self.params {
            for x in &p.data {
                bytes.extend(x.to_le_bytes());
            }
        }
        crate::grounding::fnv_checksum(&bytes)
    }
}

fn init_param(config: &ModelConfig, idx: usize, rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (0xA5A5_0000 + idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let is_gain_or_bias = rows == 1 && cols != config.d_ff || rows == 1 && cols == config.d_ff;
    let _ = is_gain_or_bias;
    // Row vectors are norms' gains/biases or projection biases: gains start
    // at one, everything else at zero, weight matrices at seeded gaussians.
    if rows == 1 {
        if is_gain_index(config, idx) {
            return Tensor::from_vec(1, cols, vec![1.0; cols]);
        }
        return Tensor::zeros(1, cols);
    }
    let std = if idx == SRC_EMB || idx == TGT_EMB {
        0.5
    } else {
        1.0 / (rows as f64).sqrt()
    };
    let data = (0..rows * cols)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * std
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Whether parameter `idx` is a layer-norm gain (initialized to ones).
fn is_gain_index(config: &ModelConfig, idx: usize) -> bool {
    for l in 0..config.enc_layers {
        let base = enc_layer_base(l);
        if idx == base + 4 || idx == base + 10 {
            return true;
        }
    }
    if idx == enc_final_base(config) {
        return true;
    }
    for l in 0..config.dec_layers {
        let base = dec_layer_base(config, l);
        if idx == base + 4 || idx == base + 10 || idx == base + 16 {
            return true;
        }
    }
    idx == dec_final_base(config)
}

fn sampling_distribution(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        // Degenerate argmax distribution.
        let best = argmax_slice(logits);
        let mut dist = vec![0.0; logits.len()];
        dist[best] = 1.0;
        return dist;
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut dist: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|p| *p /= total);
    dist
}

fn argmax_slice(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn argmax(dist: &[f64]) -> usize {
    argmax_slice(dist)
}

fn draw(dist: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}
