//! Corpus BLEU, checkpoint-window averaging, and the ID/OOD robustness
//! report.
//!
//! BLEU-4 over whitespace tokens with modified n-gram precision, a
//! geometric mean, and the standard brevity penalty; no smoothing, so a
//! corpus without any matching 4-gram legitimately scores zero. The
//! synthetic corpora are whitespace-tokenized by construction, which is
//! why no further tokenization is applied before counting.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

const MAX_NGRAM: usize = 4;

/// Corpus-level BLEU with its components.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    /// `BP * exp(mean log precision) * 100`, in [0, 100].
    pub value: f64,
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
}

/// Corpus BLEU of hypotheses against single references.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Input("cannot score an empty corpus".into()));
    }
    let mut clipped = [0u64; MAX_NGRAM];
    let mut totals = [0u64; MAX_NGRAM];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        let hyp_tokens: Vec<&str> = hyp.split_whitespace().collect();
        let ref_tokens: Vec<&str> = reference.split_whitespace().collect();
        hyp_len += hyp_tokens.len() as u64;
        ref_len += ref_tokens.len() as u64;
        for n in 1..=MAX_NGRAM {
            if hyp_tokens.len() < n {
                continue;
            }
            totals[n - 1] += (hyp_tokens.len() - n + 1) as u64;
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            if ref_tokens.len() >= n {
                for gram in ref_tokens.windows(n) {
                    *ref_counts.entry(gram).or_default() += 1;
                }
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for gram in hyp_tokens.windows(n) {
                *hyp_counts.entry(gram).or_default() += 1;
            }
            for (gram, count) in hyp_counts {
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += count.min(allowed);
            }
        }
    }
    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        if totals[n] > 0 {
            precisions[n] = clipped[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let value = if precisions.iter().any(|p| *p == 0.0) {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        brevity_penalty * mean_log.exp() * 100.0
    };
    Ok(BleuScore {
        value,
        precisions,
        brevity_penalty,
    })
}

/// Mean of up to `2 * window + 1` step-indexed scores centered at
/// `center_step`, truncated at the log boundaries.
pub fn windowed_average(scores: &[(u64, f64)], center_step: u64, window: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Input("windowed average over an empty score log".into()));
    }
    let center = scores
        .iter()
        .position(|(step, _)| *step == center_step)
        .ok_or_else(|| Error::Input(format!("no checkpoint recorded at step {center_step}")))?;
    let lo = center.saturating_sub(window);
    let hi = (center + window).min(scores.len() - 1);
    let slice = &scores[lo..=hi];
    Ok(slice.iter().map(|(_, s)| s).sum::<f64>() / slice.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    InDomain,
    OutOfDomain,
}

impl Role {
    pub fn label(&self) -> &'static str {
        match self {
            Role::InDomain => "ID",
            Role::OutOfDomain => "OOD",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomainResult {
    pub domain: String,
    pub role: Role,
    pub original_bleu: f64,
    pub adapted_bleu: f64,
    pub delta_percent: f64,
}

/// Normalized ID/OOD deltas plus the mean±range aggregates.
#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub rows: Vec<DomainResult>,
    pub mean_id_delta: f64,
    pub mean_ood_delta: f64,
    /// Half-width covering every OOD delta around the mean.
    pub ood_range: f64,
}

/// Builds the report from per-checkpoint test scores: the adapted score
/// of each domain is the windowed average around the best-ID checkpoint,
/// normalized by the original checkpoint's score on the same test set.
pub fn robustness_report(
    original: &BTreeMap<String, f64>,
    per_checkpoint: &BTreeMap<u64, BTreeMap<String, f64>>,
    best_step: u64,
    window: usize,
    id_domain: &str,
) -> Result<RobustnessReport> {
    if !original.contains_key(id_domain) {
        return Err(Error::Input(format!("missing test scores for in-domain `{id_domain}`")));
    }
    if original.len() < 2 {
        return Err(Error::Input("robustness report needs at least one out-of-domain test set".into()));
    }
    if per_checkpoint.is_empty() {
        return Err(Error::Input("no checkpoint scores provided".into()));
    }
    let mut rows = Vec::new();
    for (domain, &orig) in original {
        let series: Vec<(u64, f64)> = per_checkpoint
            .iter()
            .map(|(step, scores)| {
                scores
                    .get(domain)
                    .copied()
                    .map(|s| (*step, s))
                    .ok_or_else(|| {
                        Error::Input(format!("missing test scores for `{domain}` at step {step}"))
                    })
            })
            .collect::<Result<_>>()?;
        let adapted = windowed_average(&series, best_step, window)?;
        if orig == 0.0 {
            return Err(Error::Numeric(format!(
                "original BLEU for `{domain}` is zero; relative change is undefined"
            )));
        }
        rows.push(DomainResult {
            domain: domain.clone(),
            role: if domain == id_domain {
                Role::InDomain
            } else {
                Role::OutOfDomain
            },
            original_bleu: orig,
            adapted_bleu: adapted,
            delta_percent: (adapted - orig) / orig * 100.0,
        });
    }
    let id_deltas: Vec<f64> = rows
        .iter()
        .filter(|r| r.role == Role::InDomain)
        .map(|r| r.delta_percent)
        .collect();
    let ood_deltas: Vec<f64> = rows
        .iter()
        .filter(|r| r.role == Role::OutOfDomain)
        .map(|r| r.delta_percent)
        .collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_id_delta = mean(&id_deltas);
    let mean_ood_delta = mean(&ood_deltas);
    let ood_range = ood_deltas
        .iter()
        .map(|d| (d - mean_ood_delta).abs())
        .fold(0.0, f64::max);
    Ok(RobustnessReport {
        rows,
        mean_id_delta,
        mean_ood_delta,
        ood_range,
    })
}

/// `robustness.csv` body; identical inputs produce identical bytes.
pub fn robustness_csv(report: &RobustnessReport) -> String {
    let mut out = String::from("domain,role,original,adapted,delta_pct\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.domain,
            row.role.label(),
            row.original_bleu,
            row.adapted_bleu,
            row.delta_percent
        ));
    }
    out
}

/// `training_curves.csv` body from per-step validation scores.
pub fn training_curves_csv(records: &[(u64, BTreeMap<String, f64>)]) -> String {
    let mut out = String::from("step,domain,bleu\n");
    for (step, scores) in records {
        for (domain, score) in scores {
            out.push_str(&format!("{step},{domain},{score}\n"));
        }
    }
    out
}
