//! Synthetic multi-domain parallel corpora with controllable lexical
//! divergence, plus the dedup/split protocol.
//!
//! A domain is described by a [`DomainSpec`]: a deterministic token-mapping
//! grammar from source to target plus synonym groups whose member choice is
//! biased per domain. Two domains sharing synonym groups with opposed biases
//! produce measurably different target distributions while remaining
//! meaning-equivalent — the controlled stand-in for domain shift.
//!
//! Corpora persist as `<domain>.<split>.tsv` files, UTF-8, one
//! `source\ttarget\n` pair per line.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::kv;

/// One parallel sentence pair with its originating domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub domain_id: String,
}

/// A set of target tokens sharing meaning, with per-domain selection bias.
#[derive(Debug, Clone)]
pub struct SynonymGroup {
    pub members: Vec<String>,
    /// Probability of choosing each member; sums to 1.
    pub bias: Vec<f64>,
}

/// Right-hand side of a grammar rule.
#[derive(Debug, Clone)]
pub enum RuleTarget {
    /// Fixed target token.
    Literal(String),
    /// Index into the spec's synonym groups; the realized token is drawn
    /// per the group's bias.
    Group(usize),
}

/// Full description of one synthetic domain.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub name: String,
    /// Ordered grammar: source token -> target mapping. The source
    /// vocabulary is exactly the set of left-hand sides.
    pub rules: Vec<(String, RuleTarget)>,
    pub synonym_groups: Vec<SynonymGroup>,
    /// Inclusive (min, max) sentence length in tokens.
    pub sentence_len_range: (usize, usize),
}

impl DomainSpec {
    /// Size of the source vocabulary (number of grammar rules).
    pub fn vocab_size(&self) -> usize {
        self.rules.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("domain name is empty".into()));
        }
        if self.rules.is_empty() {
            return Err(Error::Config(format!("domain {}: no grammar rules", self.name)));
        }
        let (lo, hi) = self.sentence_len_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "domain {}: invalid sentence length range ({lo}, {hi})",
                self.name
            )));
        }
        let mut seen = HashSet::new();
        for (lhs, rhs) in &self.rules {
            if !seen.insert(lhs.as_str()) {
                return Err(Error::Config(format!(
                    "domain {}: duplicate rule for `{lhs}`",
                    self.name
                )));
            }
            if let RuleTarget::Group(g) = rhs {
                if *g >= self.synonym_groups.len() {
                    return Err(Error::Config(format!(
                        "domain {}: rule `{lhs}` references unknown synonym group {g}",
                        self.name
                    )));
                }
            }
        }
        for (i, group) in self.synonym_groups.iter().enumerate() {
            if group.members.len() < 2 {
                return Err(Error::Config(format!(
                    "domain {}: synonym group {i} has fewer than 2 members",
                    self.name
                )));
            }
            if group.members.len() != group.bias.len() {
                return Err(Error::Config(format!(
                    "domain {}: synonym group {i} has {} members but {} weights",
                    self.name,
                    group.members.len(),
                    group.bias.len()
                )));
            }
            if group.bias.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::Config(format!(
                    "domain {}: synonym group {i} has negative or non-finite weights",
                    self.name
                )));
            }
            let sum: f64 = group.bias.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "domain {}: synonym group {i} weights sum to {sum}, expected 1",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Parses a domain spec file: `key=value` pairs plus directive lines.
    ///
    /// ```text
    /// name=alpha
    /// sentence_len_min=6
    /// sentence_len_max=12
    /// synonyms lumina luminb = 0.9 0.1
    /// rule kor => tal
    /// rule mab => @0
    /// ```
    ///
    /// `@k` on a rule's right-hand side maps the source token to synonym
    /// group `k` (groups are numbered by their order in the file).
    pub fn parse(text: &str) -> Result<DomainSpec> {
        let file = kv::parse(text);
        let name = file.require("name")?.to_string();
        let lo: usize = file.parse_or("sentence_len_min", 6)?;
        let hi: usize = file.parse_or("sentence_len_max", 12)?;

        let mut synonym_groups = Vec::new();
        let mut rules = Vec::new();
        for line in &file.directives {
            if let Some(rest) = line.strip_prefix("synonyms ") {
                let (members_part, bias_part) = rest.split_once('=').ok_or_else(|| {
                    Error::Config(format!("synonyms line missing `=`: {line}"))
                })?;
                let members: Vec<String> =
                    members_part.split_whitespace().map(String::from).collect();
                let bias = bias_part
                    .split_whitespace()
                    .map(|w| {
                        w.parse::<f64>()
                            .map_err(|_| Error::Config(format!("bad weight `{w}` in: {line}")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                synonym_groups.push(SynonymGroup { members, bias });
            } else if let Some(rest) = line.strip_prefix("rule ") {
                let (lhs, rhs) = rest.split_once("=>").ok_or_else(|| {
                    Error::Config(format!("rule line missing `=>`: {line}"))
                })?;
                let lhs = lhs.trim().to_string();
                let rhs = rhs.trim();
                let target = match rhs.strip_prefix('@') {
                    Some(idx) => RuleTarget::Group(idx.parse().map_err(|_| {
                        Error::Config(format!("bad group index `{rhs}` in: {line}"))
                    })?),
                    None => RuleTarget::Literal(rhs.to_string()),
                };
                rules.push((lhs, target));
            } else {
                return Err(Error::Config(format!("unrecognized directive: {line}")));
            }
        }

        let spec = DomainSpec {
            name,
            rules,
            synonym_groups,
            sentence_len_range: (lo, hi),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<DomainSpec> {
        DomainSpec::parse(&fs::read_to_string(path)?)
    }

    /// Serializes the spec in the format accepted by [`DomainSpec::parse`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name={}\n", self.name));
        out.push_str(&format!("sentence_len_min={}\n", self.sentence_len_range.0));
        out.push_str(&format!("sentence_len_max={}\n", self.sentence_len_range.1));
        for group in &self.synonym_groups {
            let weights: Vec<String> = group.bias.iter().map(|w| format!("{w}")).collect();
            out.push_str(&format!(
                "synonyms {} = {}\n",
                group.members.join(" "),
                weights.join(" ")
            ));
        }
        for (lhs, rhs) in &self.rules {
            match rhs {
                RuleTarget::Literal(t) => out.push_str(&format!("rule {lhs} => {t}\n")),
                RuleTarget::Group(g) => out.push_str(&format!("rule {lhs} => @{g}\n")),
            }
        }
        out
    }
}

/// Draws an index from `weights` (assumed to sum to 1).
fn weighted_choice(weights: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Generates `n_pairs` sentence pairs for one domain.
///
/// Pure function of `(spec, n_pairs, seed)`: source tokens are drawn
/// uniformly from the grammar's left-hand sides, targets are the
/// grammar-mapped source with domain-biased synonym choices.
pub fn generate_domain(spec: &DomainSpec, n_pairs: usize, seed: u64) -> Result<Vec<SentencePair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (lo, hi) = spec.sentence_len_range;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.random_range(lo..=hi);
        let mut source = Vec::with_capacity(len);
        let mut target = Vec::with_capacity(len);
        for _ in 0..len {
            let rule = &spec.rules[rng.random_range(0..spec.rules.len())];
            source.push(rule.0.as_str());
            match &rule.1 {
                RuleTarget::Literal(t) => target.push(t.as_str()),
                RuleTarget::Group(g) => {
                    let group = &spec.synonym_groups[*g];
                    let pick = weighted_choice(&group.bias, &mut rng);
                    target.push(group.members[pick].as_str());
                }
            }
        }
        pairs.push(SentencePair {
            source: source.join(" "),
            target: target.join(" "),
            domain_id: spec.name.clone(),
        });
    }
    Ok(pairs)
}

/// Removes exact `(source, target)` duplicates, keeping first occurrences.
pub fn deduplicate(pairs: &[SentencePair]) -> Vec<SentencePair> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if seen.insert((pair.source.as_str(), pair.target.as_str())) {
            out.push(pair.clone());
        }
    }
    out
}

/// Train/validation/test partition of one domain's corpus.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<SentencePair>,
    pub validation: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

pub const DEFAULT_N_VAL: usize = 500;
pub const DEFAULT_N_TEST: usize = 1000;

/// Draws validation and test samples, leaving the remainder as train.
///
/// Deterministic given `seed`; the three splits are pairwise disjoint and
/// their union equals the input as a multiset.
pub fn split(
    pairs: &[SentencePair],
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<CorpusSplits> {
    let needed = n_val + n_test;
    if pairs.len() <= needed {
        return Err(Error::Config(format!(
            "need more than {needed} pairs to draw {n_val} validation and {n_test} test samples, got {}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let validation = order[..n_val].iter().map(|&i| pairs[i].clone()).collect();
    let test = order[n_val..needed].iter().map(|&i| pairs[i].clone()).collect();
    let mut train_idx: Vec<usize> = order[needed..].to_vec();
    // Train keeps the corpus order so downstream batching sees the
    // generator's sequence, not the shuffle's.
    train_idx.sort_unstable();
    let train = train_idx.into_iter().map(|i| pairs[i].clone()).collect();
    Ok(CorpusSplits {
        train,
        validation,
        test,
    })
}

/// Writes pairs as `source\ttarget\n` lines.
pub fn write_pairs(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&pair.source);
        out.push('\t');
        out.push_str(&pair.target);
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a `<domain>.<split>.tsv` file; the domain id is taken from the
/// file name's first dot-separated component.
pub fn read_pairs(path: &Path) -> Result<Vec<SentencePair>> {
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('.').next())
        .unwrap_or("")
        .to_string();
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let (source, target) = line.split_once('\t').ok_or_else(|| {
            Error::Input(format!("{}:{}: missing tab separator", path.display(), lineno + 1))
        })?;
        pairs.push(SentencePair {
            source: source.to_string(),
            target: target.to_string(),
            domain_id: stem.clone(),
        });
    }
    Ok(pairs)
}
