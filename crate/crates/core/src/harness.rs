//! Experiment harness: plan files, the staged pipeline
//! (prepare -> decontextualize -> train -> evaluate -> report), and the
//! built-in opposed-bias domain pair.
//!
//! Stages are idempotent: each writes a `.done` marker on completion and
//! is skipped when the marker exists, so a rerun after failure resumes at
//! the first unfinished stage and a rerun after success is a no-op.
//! Every number in the final report is re-derivable from the per-stage
//! CSVs the pipeline leaves behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::align::VocabGrounding;
use crate::corpus::{self, CorpusSplits, DomainSpec, RuleTarget, SentencePair, SynonymGroup};
use crate::error::{Error, Result};
use crate::eval::{self, bleu};
use crate::grounding::{decontextualize, ContextualEncoder, GroundingTable};
use crate::kv;
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::objectives::{ObjectiveConfig, ObjectiveContext, ObjectiveKind};
use crate::tokenizer::{train_tokenizer, Vocabulary};
use crate::trainer::{self, CheckpointLog, Schedule, TrainConfig, ValidationEvaluator};

/// Corpus sizing for one plan.
#[derive(Debug, Clone)]
pub struct CorpusPlan {
    pub pairs_per_domain: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct TokenizerPlan {
    pub model_vocab: usize,
    pub emb_vocab: usize,
    pub model_seed: u64,
    pub emb_seed: u64,
}

#[derive(Debug, Clone)]
pub struct EncoderPlan {
    pub dim: usize,
    pub layers: usize,
    pub layer_index: usize,
    pub context_mix: f64,
    pub seed: u64,
}

/// Training-run sizing shared by pretraining and adaptation.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub patience_evals: usize,
}

/// Optional hyperparameter grids, optimized one variable at a time.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

/// Everything one experiment needs.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub name: String,
    pub output_dir: PathBuf,
    pub domains: Vec<String>,
    pub id_domain: String,
    pub objectives: Vec<ObjectiveKind>,
    pub seed: u64,
    pub corpus: CorpusPlan,
    pub tokenizer: TokenizerPlan,
    pub encoder: EncoderPlan,
    pub model: ModelConfig,
    pub pretrain: RunPlan,
    pub adapt: RunPlan,
    /// `None` balances alpha from the first ten evaluations.
    pub alpha: Option<f64>,
    pub k_hypotheses: usize,
    pub top_n: usize,
    pub temperature_targets: f64,
    pub smoothing_eps: f64,
    pub sample_temperature: f64,
    /// Checkpoint-window half-width for reported test scores.
    pub report_window: usize,
    pub sweep: Option<SweepPlan>,
    /// Explicit domain spec files; missing domains use the built-in
    /// opposed-bias construction.
    pub domain_spec_paths: BTreeMap<String, PathBuf>,
}

impl ExperimentPlan {
    /// Plan with desk-scale defaults for the given output directory.
    pub fn default_plan(output_dir: &Path, seed: u64) -> ExperimentPlan {
        ExperimentPlan {
            name: "desk".into(),
            output_dir: output_dir.to_path_buf(),
            domains: vec!["alpha".into(), "beta".into()],
            id_domain: "alpha".into(),
            objectives: vec![
                ObjectiveKind::Mle,
                ObjectiveKind::Talign,
                ObjectiveKind::Salign,
                ObjectiveKind::Srand,
            ],
            seed,
            corpus: CorpusPlan {
                pairs_per_domain: 4000,
                n_val: corpus::DEFAULT_N_VAL,
                n_test: corpus::DEFAULT_N_TEST,
            },
            tokenizer: TokenizerPlan {
                model_vocab: 220,
                emb_vocab: 56,
                model_seed: 11,
                emb_seed: 22,
            },
            encoder: EncoderPlan {
                dim: 16,
                layers: 2,
                layer_index: 2,
                context_mix: 0.25,
                seed: 7,
            },
            model: ModelConfig {
                vocab_size: 0, // filled once the tokenizer exists
                d_model: 32,
                n_heads: 2,
                enc_layers: 1,
                dec_layers: 1,
                d_ff: 64,
                max_len: 40,
            },
            pretrain: RunPlan {
                learning_rate: 0.01,
                warmup_steps: 100,
                batch_size: 20,
                max_steps: 1200,
                eval_every: 400,
                patience_evals: 1000,
            },
            adapt: RunPlan {
                learning_rate: 0.005,
                warmup_steps: 50,
                batch_size: 8,
                max_steps: 400,
                eval_every: 50,
                patience_evals: 8,
            },
            alpha: None,
            k_hypotheses: 4,
            top_n: 3,
            temperature_targets: 1.0,
            smoothing_eps: 0.1,
            sample_temperature: 1.0,
            report_window: 5,
            sweep: None,
            domain_spec_paths: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config("a plan needs at least one out-of-domain domain".into()));
        }
        if !self.domains.contains(&self.id_domain) {
            return Err(Error::Config(format!(
                "id_domain `{}` is not among the plan's domains",
                self.id_domain
            )));
        }
        if self.objectives.is_empty() {
            return Err(Error::Config("a plan needs at least one objective".into()));
        }
        if self.corpus.pairs_per_domain <= self.corpus.n_val + self.corpus.n_test {
            return Err(Error::Config(format!(
                "pairs_per_domain {} cannot cover validation {} + test {}",
                self.corpus.pairs_per_domain, self.corpus.n_val, self.corpus.n_test
            )));
        }
        Ok(())
    }

    /// Parses the plan file format: flat `key=value` lines with
    /// dotted section prefixes.
    pub fn parse(text: &str, base_dir: &Path) -> Result<ExperimentPlan> {
        let file = kv::parse(text);
        if !file.directives.is_empty() {
            return Err(Error::Config(format!(
                "unrecognized plan line: {}",
                file.directives[0]
            )));
        }
        let output_dir = base_dir.join(file.require("output_dir")?);
        let seed: u64 = file.parse_or("seed", 1)?;
        let mut plan = ExperimentPlan::default_plan(&output_dir, seed);
        if let Some(name) = file.get("name") {
            plan.name = name.to_string();
        }
        if let Some(domains) = file.get("domains") {
            plan.domains = domains.split(',').map(|d| d.trim().to_string()).collect();
        }
        if let Some(id) = file.get("id_domain") {
            plan.id_domain = id.to_string();
        }
        if let Some(objectives) = file.get("objectives") {
            plan.objectives = objectives
                .split(',')
                .map(|o| ObjectiveKind::parse(o.trim()))
                .collect::<Result<_>>()?;
        }
        for domain in plan.domains.clone() {
            if let Some(path) = file.get(&format!("domain_spec.{domain}")) {
                plan.domain_spec_paths.insert(domain, base_dir.join(path));
            }
        }
        plan.corpus.pairs_per_domain =
            file.parse_or("corpus.pairs_per_domain", plan.corpus.pairs_per_domain)?;
        plan.corpus.n_val = file.parse_or("corpus.n_val", plan.corpus.n_val)?;
        plan.corpus.n_test = file.parse_or("corpus.n_test", plan.corpus.n_test)?;
        plan.tokenizer.model_vocab =
            file.parse_or("tokenizer.model_vocab", plan.tokenizer.model_vocab)?;
        plan.tokenizer.emb_vocab = file.parse_or("tokenizer.emb_vocab", plan.tokenizer.emb_vocab)?;
        plan.tokenizer.model_seed = file.parse_or("tokenizer.model_seed", plan.tokenizer.model_seed)?;
        plan.tokenizer.emb_seed = file.parse_or("tokenizer.emb_seed", plan.tokenizer.emb_seed)?;
        plan.encoder.dim = file.parse_or("encoder.dim", plan.encoder.dim)?;
        plan.encoder.layers = file.parse_or("encoder.layers", plan.encoder.layers)?;
        plan.encoder.layer_index = file.parse_or("encoder.layer_index", plan.encoder.layer_index)?;
        plan.encoder.context_mix = file.parse_or("encoder.context_mix", plan.encoder.context_mix)?;
        plan.encoder.seed = file.parse_or("encoder.seed", plan.encoder.seed)?;
        plan.model.d_model = file.parse_or("model.d_model", plan.model.d_model)?;
        plan.model.n_heads = file.parse_or("model.heads", plan.model.n_heads)?;
        plan.model.enc_layers = file.parse_or("model.enc_layers", plan.model.enc_layers)?;
        plan.model.dec_layers = file.parse_or("model.dec_layers", plan.model.dec_layers)?;
        plan.model.d_ff = file.parse_or("model.d_ff", plan.model.d_ff)?;
        plan.model.max_len = file.parse_or("model.max_len", plan.model.max_len)?;
        for (section, run) in [("pretrain", &mut plan.pretrain), ("train", &mut plan.adapt)] {
            run.learning_rate =
                file.parse_or(&format!("{section}.learning_rate"), run.learning_rate)?;
            run.warmup_steps = file.parse_or(&format!("{section}.warmup_steps"), run.warmup_steps)?;
            run.batch_size = file.parse_or(&format!("{section}.batch_size"), run.batch_size)?;
            run.max_steps = file.parse_or(&format!("{section}.max_steps"), run.max_steps)?;
            run.eval_every = file.parse_or(&format!("{section}.eval_every"), run.eval_every)?;
            run.patience_evals =
                file.parse_or(&format!("{section}.patience_evals"), run.patience_evals)?;
        }
        plan.alpha = match file.get("train.alpha") {
            None | Some("auto") => None,
            Some(raw) => Some(raw.parse::<f64>().map_err(|_| {
                Error::Config(format!("train.alpha: cannot parse `{raw}` (number or `auto`)"))
            })?),
        };
        plan.k_hypotheses = file.parse_or("train.k", plan.k_hypotheses)?;
        plan.top_n = file.parse_or("train.n", plan.top_n)?;
        plan.temperature_targets =
            file.parse_or("train.temperature_targets", plan.temperature_targets)?;
        plan.smoothing_eps = file.parse_or("train.smoothing_eps", plan.smoothing_eps)?;
        plan.sample_temperature =
            file.parse_or("train.sample_temperature", plan.sample_temperature)?;
        plan.report_window = file.parse_or("report.window", plan.report_window)?;
        let lrs = file.get("sweep.learning_rates");
        let bss = file.get("sweep.batch_sizes");
        if lrs.is_some() || bss.is_some() {
            let parse_list = |raw: Option<&str>| -> Result<Vec<String>> {
                Ok(raw
                    .map(|r| r.split(',').map(|x| x.trim().to_string()).collect())
                    .unwrap_or_default())
            };
            let learning_rates = parse_list(lrs)?
                .iter()
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad sweep learning rate `{x}`")))
                })
                .collect::<Result<_>>()?;
            let batch_sizes = parse_list(bss)?
                .iter()
                .map(|x| {
                    x.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad sweep batch size `{x}`")))
                })
                .collect::<Result<_>>()?;
            plan.sweep = Some(SweepPlan {
                learning_rates,
                batch_sizes,
            });
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<ExperimentPlan> {
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentPlan::parse(&fs::read_to_string(path)?, base)
    }

    fn objective_config(&self, kind: ObjectiveKind) -> ObjectiveConfig {
        let mut cfg = ObjectiveConfig::new(kind);
        cfg.alpha = self.alpha;
        cfg.k_hypotheses = self.k_hypotheses;
        cfg.top_n = self.top_n;
        cfg.temperature_targets = self.temperature_targets;
        cfg.smoothing_eps = self.smoothing_eps;
        cfg.sample_temperature = self.sample_temperature;
        cfg
    }
}

const SYNONYM_STEMS: [&str; 6] = ["lum", "vet", "kar", "sol", "tig", "bre"];
const SHARED_PLAIN: [(&str, &str); 4] = [("sc0", "dom"), ("sc1", "rek"), ("sc2", "fas"), ("sc3", "gul")];

/// Built-in synthetic domains: all domains share the six synonym groups
/// with opposed member biases (even-indexed domains favor the `a`
/// variant, odd-indexed the `b` variant) plus four shared plain words;
/// each domain adds four domain-specific context words that let a
/// contextual model infer which synonym variant a domain expects.
pub fn default_domain_specs(names: &[String]) -> Result<Vec<DomainSpec>> {
    if names.len() < 2 {
        return Err(Error::Config("built-in specs need at least two domains".into()));
    }
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let bias = if i % 2 == 0 { vec![0.9, 0.1] } else { vec![0.1, 0.9] };
            let synonym_groups = SYNONYM_STEMS
                .iter()
                .map(|stem| SynonymGroup {
                    members: vec![format!("{stem}a"), format!("{stem}b")],
                    bias: bias.clone(),
                })
                .collect();
            let mut rules: Vec<(String, RuleTarget)> = Vec::new();
            for (g, _) in SYNONYM_STEMS.iter().enumerate() {
                rules.push((format!("sg{g}"), RuleTarget::Group(g)));
            }
            for (src, tgt) in SHARED_PLAIN {
                rules.push((src.to_string(), RuleTarget::Literal(tgt.to_string())));
            }
            for j in 0..4 {
                rules.push((format!("x{i}c{j}"), RuleTarget::Literal(format!("q{i}on{j}"))));
            }
            let spec = DomainSpec {
                name: name.clone(),
                rules,
                synonym_groups,
                sentence_len_range: (5, 9),
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline.

/// Outcome of one stage invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

pub struct Pipeline {
    plan: ExperimentPlan,
}

impl Pipeline {
    pub fn new(plan: ExperimentPlan) -> Result<Pipeline> {
        plan.validate()?;
        Ok(Pipeline { plan })
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    fn out(&self) -> &Path {
        &self.plan.output_dir
    }

    fn marker(&self, name: &str) -> PathBuf {
        self.out().join(format!("{name}.done"))
    }

    fn done(&self, name: &str) -> bool {
        self.marker(name).exists()
    }

    fn finish(&self, name: &str) -> Result<()> {
        fs::create_dir_all(self.out())?;
        fs::write(self.marker(name), "done\n")?;
        Ok(())
    }

    fn corpus_path(&self, domain: &str, split: &str) -> PathBuf {
        self.out().join("corpora").join(format!("{domain}.{split}.tsv"))
    }

    fn model_vocab_path(&self) -> PathBuf {
        self.out().join("tokenizers").join("model.vocab")
    }

    fn emb_vocab_path(&self) -> PathBuf {
        self.out().join("tokenizers").join("emb.vocab")
    }

    fn base_model_path(&self) -> PathBuf {
        self.out().join("base").join("base.bin")
    }

    fn table_path(&self) -> PathBuf {
        self.out().join("grounding").join("table.bin")
    }

    fn objective_dir(&self, kind: ObjectiveKind) -> PathBuf {
        self.out().join(kind.name())
    }

    /// Generates corpora, trains both tokenizers, and pretrains the base
    /// model on the domain mixture.
    pub fn prepare(&self) -> Result<StageStatus> {
        if self.done("prepare") {
            return Ok(StageStatus::Skipped);
        }
        let plan = &self.plan;
        fs::create_dir_all(self.out())?;

        // Domain specs: explicit files override the built-ins.
        let builtin = default_domain_specs(&plan.domains)?;
        let mut splits: BTreeMap<String, CorpusSplits> = BTreeMap::new();
        for (i, domain) in plan.domains.iter().enumerate() {
            let spec = match plan.domain_spec_paths.get(domain) {
                Some(path) => DomainSpec::load(path)?,
                None => builtin[i].clone(),
            };
            if &spec.name != domain {
                return Err(Error::Config(format!(
                    "spec file names domain `{}`, plan expects `{domain}`",
                    spec.name
                )));
            }
            let generated =
                corpus::generate_domain(&spec, plan.corpus.pairs_per_domain, split_seed(plan.seed, i as u64))?;
            // Dedup runs per domain; the generators never produce
            // cross-domain collisions worth chasing.
            let deduped = corpus::deduplicate(&generated);
            let split = corpus::split(
                &deduped,
                plan.corpus.n_val,
                plan.corpus.n_test,
                split_seed(plan.seed, 1000 + i as u64),
            )?;
            corpus::write_pairs(&self.corpus_path(domain, "train"), &split.train)?;
            corpus::write_pairs(&self.corpus_path(domain, "validation"), &split.validation)?;
            corpus::write_pairs(&self.corpus_path(domain, "test"), &split.test)?;
            splits.insert(domain.clone(), split);
        }

        // Tokenizers train on the mixed train split, source and target.
        let mut texts = Vec::new();
        for split in splits.values() {
            for pair in &split.train {
                texts.push(pair.source.clone());
                texts.push(pair.target.clone());
            }
        }
        let model_vocab = train_tokenizer(&texts, plan.tokenizer.model_vocab, plan.tokenizer.model_seed)?;
        let emb_vocab = train_tokenizer(&texts, plan.tokenizer.emb_vocab, plan.tokenizer.emb_seed)?;
        model_vocab.save(&self.model_vocab_path())?;
        emb_vocab.save(&self.emb_vocab_path())?;

        // Pretrain on the mixture of every domain's train split.
        let mut mixture: Vec<SentencePair> = Vec::new();
        let mut cursor = 0usize;
        // Interleave domains so batches mix them even before shuffling.
        loop {
            let mut pushed = false;
            for split in splits.values() {
                if cursor < split.train.len() {
                    mixture.push(split.train[cursor].clone());
                    pushed = true;
                }
            }
            if !pushed {
                break;
            }
            cursor += 1;
        }
        let mut model_config = plan.model.clone();
        model_config.vocab_size = model_vocab.size();
        let mut model = Seq2SeqModel::new(model_config, split_seed(plan.seed, 77))?;

        let encoder = self.encoder();
        // Pretraining needs no grounding; give the context an empty
        // static table.
        let empty_table = GroundingTable::from_entries(
            plan.encoder.dim,
            Vec::new(),
            crate::grounding::Provenance::Static,
        )?;
        let grounding = VocabGrounding::build(&model_vocab, &emb_vocab, &empty_table);
        let ctx = ObjectiveContext {
            encoder: &encoder,
            table: &empty_table,
            emb_vocab: &emb_vocab,
            model_vocab: &model_vocab,
            vocab_grounding: &grounding,
        };
        let mut cfg = TrainConfig::new(plan.objective_config(ObjectiveKind::Mle));
        cfg.learning_rate = plan.pretrain.learning_rate;
        cfg.warmup_steps = plan.pretrain.warmup_steps;
        cfg.schedule = Schedule::ConstantDecay;
        cfg.batch_size = plan.pretrain.batch_size;
        cfg.max_steps = plan.pretrain.max_steps;
        cfg.eval_every = plan.pretrain.eval_every;
        cfg.patience_evals = plan.pretrain.patience_evals;
        cfg.seed = split_seed(plan.seed, 78);
        let val_sets: BTreeMap<String, Vec<SentencePair>> = splits
            .iter()
            .map(|(d, s)| (d.clone(), s.validation.clone()))
            .collect();
        let mut evaluator = ValidationEvaluator::new(&model_vocab, &val_sets);
        let log = trainer::train(
            &mut model,
            &mixture,
            &cfg,
            &ctx,
            &mut evaluator,
            &plan.id_domain,
            Some(&self.out().join("base")),
        )?;
        log.write_csv(&self.out().join("base").join("pretrain_log.csv"))?;
        // The pretrained base is the final-step model, not the best
        // checkpoint: it plays the role of the downloaded starting point.
        model.save_checkpoint(&self.base_model_path())?;
        self.finish("prepare")
            .map(|_| StageStatus::Ran)
    }

    fn encoder(&self) -> ContextualEncoder {
        let e = &self.plan.encoder;
        ContextualEncoder::new(e.dim, e.layers, e.layer_index, e.context_mix, e.seed)
            .expect("encoder plan validated")
    }

    fn load_vocab(&self, path: &Path) -> Result<Vocabulary> {
        if !path.exists() {
            return Err(Error::Input(format!(
                "{} missing; run the prepare stage first",
                path.display()
            )));
        }
        Vocabulary::load(path)
    }

    fn load_splits(&self, split: &str) -> Result<BTreeMap<String, Vec<SentencePair>>> {
        let mut out = BTreeMap::new();
        for domain in &self.plan.domains {
            let path = self.corpus_path(domain, split);
            if !path.exists() {
                return Err(Error::Input(format!(
                    "{} missing; run the prepare stage first",
                    path.display()
                )));
            }
            out.insert(domain.clone(), corpus::read_pairs(&path)?);
        }
        Ok(out)
    }

    /// Builds and persists the decontextualized grounding table over the
    /// in-domain training targets; returns the entry count.
    pub fn decontextualize(&self) -> Result<(StageStatus, usize)> {
        if self.done("decontextualize") {
            let table = GroundingTable::load(&self.table_path())?;
            return Ok((StageStatus::Skipped, table.entry_count()));
        }
        self.prepare()?;
        let emb_vocab = self.load_vocab(&self.emb_vocab_path())?;
        let train = self.load_splits("train")?;
        let targets: Vec<String> = train[&self.plan.id_domain]
            .iter()
            .map(|p| p.target.clone())
            .collect();
        let encoder = self.encoder();
        let table = decontextualize(&encoder, &emb_vocab, &targets, &self.plan.id_domain)?;
        table.save(&self.table_path())?;
        self.finish("decontextualize")?;
        Ok((StageStatus::Ran, table.entry_count()))
    }

    /// Adapts the base model on the in-domain split with one objective.
    pub fn train_objective(&self, kind: ObjectiveKind) -> Result<StageStatus> {
        let marker = format!("{}.train", kind.name());
        if self.done(&marker) {
            return Ok(StageStatus::Skipped);
        }
        self.decontextualize()?;
        let world = self.load_world()?;
        let dir = self.objective_dir(kind);
        fs::create_dir_all(&dir)?;

        let (lr, batch) = match &self.plan.sweep {
            None => (self.plan.adapt.learning_rate, self.plan.adapt.batch_size),
            Some(sweep) => self.run_sweep(kind, &world, sweep)?,
        };
        let mut model = Seq2SeqModel::load_checkpoint(&self.base_model_path())?;
        let cfg = self.adapt_config(kind, lr, batch, false);
        let mut evaluator = ValidationEvaluator::new(&world.model_vocab, &world.validation);
        let ctx = world.context();
        trainer::train(
            &mut model,
            &world.train[&self.plan.id_domain],
            &cfg,
            &ctx,
            &mut evaluator,
            &self.plan.id_domain,
            Some(&dir),
        )?;
        self.finish(&marker)?;
        Ok(StageStatus::Ran)
    }

    fn adapt_config(&self, kind: ObjectiveKind, lr: f64, batch: usize, sweep_mode: bool) -> TrainConfig {
        let mut cfg = TrainConfig::new(self.plan.objective_config(kind));
        cfg.learning_rate = lr;
        cfg.warmup_steps = self.plan.adapt.warmup_steps;
        cfg.schedule = Schedule::ConstantDecay;
        cfg.batch_size = batch;
        cfg.max_steps = self.plan.adapt.max_steps;
        cfg.eval_every = self.plan.adapt.eval_every;
        cfg.patience_evals = self.plan.adapt.patience_evals;
        cfg.seed = split_seed(self.plan.seed, 0x5EED ^ kind.name().len() as u64);
        cfg.sweep_mode = sweep_mode;
        cfg
    }

    /// One-variable-at-a-time grid search: learning rate first at the
    /// plan's batch size, then batch size at the winning rate. Each run
    /// lands in `<objective>/sweep/...` and the best in-domain
    /// validation BLEU wins.
    fn run_sweep(&self, kind: ObjectiveKind, world: &World, sweep: &SweepPlan) -> Result<(f64, usize)> {
        let mut best_lr = self.plan.adapt.learning_rate;
        if !sweep.learning_rates.is_empty() {
            let mut best_score = f64::NEG_INFINITY;
            for (i, &lr) in sweep.learning_rates.iter().enumerate() {
                let score = self.sweep_run(kind, world, lr, self.plan.adapt.batch_size, &format!("lr_{i}"))?;
                if score > best_score {
                    best_score = score;
                    best_lr = lr;
                }
            }
        }
        let mut best_batch = self.plan.adapt.batch_size;
        if !sweep.batch_sizes.is_empty() {
            let mut best_score = f64::NEG_INFINITY;
            for (i, &batch) in sweep.batch_sizes.iter().enumerate() {
                let score = self.sweep_run(kind, world, best_lr, batch, &format!("bs_{i}"))?;
                if score > best_score {
                    best_score = score;
                    best_batch = batch;
                }
            }
        }
        Ok((best_lr, best_batch))
    }

    fn sweep_run(
        &self,
        kind: ObjectiveKind,
        world: &World,
        lr: f64,
        batch: usize,
        label: &str,
    ) -> Result<f64> {
        let dir = self.objective_dir(kind).join("sweep").join(label);
        fs::create_dir_all(&dir)?;
        let mut model = Seq2SeqModel::load_checkpoint(&self.base_model_path())?;
        let cfg = self.adapt_config(kind, lr, batch, true);
        let mut evaluator = ValidationEvaluator::new(&world.model_vocab, &world.validation);
        let ctx = world.context();
        let log = trainer::train(
            &mut model,
            &world.train[&self.plan.id_domain],
            &cfg,
            &ctx,
            &mut evaluator,
            &self.plan.id_domain,
            Some(&dir),
        )?;
        let best = log
            .records
            .iter()
            .find(|r| r.step == log.best_step)
            .and_then(|r| r.val_bleu.get(&self.plan.id_domain))
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        Ok(best)
    }

    /// Scores the window of checkpoints around the best one on every
    /// domain's test set, plus the base model (once, shared).
    pub fn evaluate_objective(&self, kind: ObjectiveKind) -> Result<StageStatus> {
        let marker = format!("{}.evaluate", kind.name());
        if self.done(&marker) {
            return Ok(StageStatus::Skipped);
        }
        self.train_objective(kind)?;
        let world = self.load_world()?;
        let dir = self.objective_dir(kind);
        let log_text = fs::read_to_string(dir.join("log.csv"))?;
        let horizon = self.plan.adapt.eval_every * self.plan.adapt.patience_evals as u64;
        let log = CheckpointLog::from_csv(&log_text, &self.plan.id_domain, horizon)?;

        // Base-model test scores, computed once for every objective.
        if !self.done("base_eval") {
            let base = Seq2SeqModel::load_checkpoint(&self.base_model_path())?;
            let scores = test_scores(&base, &world)?;
            let mut csv = String::from("domain,bleu\n");
            for (domain, score) in &scores {
                csv.push_str(&format!("{domain},{score}\n"));
            }
            fs::write(self.out().join("base").join("eval.csv"), csv)?;
            self.finish("base_eval")?;
        }

        // Window of recorded checkpoints around the best step.
        let steps: Vec<u64> = log.records.iter().map(|r| r.step).collect();
        let center = steps
            .iter()
            .position(|s| *s == log.best_step)
            .ok_or_else(|| Error::Input(format!("best step {} not in log", log.best_step)))?;
        let lo = center.saturating_sub(self.plan.report_window);
        let hi = (center + self.plan.report_window).min(steps.len() - 1);
        let mut csv = String::from("step,domain,bleu\n");
        for &step in &steps[lo..=hi] {
            let model = Seq2SeqModel::load_checkpoint(&dir.join(format!("ckpt_{step}.bin")))?;
            for (domain, score) in test_scores(&model, &world)? {
                csv.push_str(&format!("{step},{domain},{score}\n"));
            }
        }
        fs::write(dir.join("eval.csv"), csv)?;
        fs::write(dir.join("best_step.txt"), format!("{}\n", log.best_step))?;
        self.finish(&marker)?;
        Ok(StageStatus::Ran)
    }

    /// Writes per-objective robustness and curve CSVs plus the top-level
    /// ablation summary; everything derives from persisted CSVs.
    pub fn report(&self) -> Result<StageStatus> {
        if self.done("report") {
            return Ok(StageStatus::Skipped);
        }
        for kind in self.plan.objectives.clone() {
            self.evaluate_objective(kind)?;
        }
        let base_scores = read_base_eval(&self.out().join("base").join("eval.csv"))?;
        let mut ablation = String::from("objective,id_delta_pct,ood_mean_delta_pct,ood_range\n");
        for kind in &self.plan.objectives {
            let dir = self.objective_dir(*kind);
            let report = self.objective_report(*kind, &base_scores)?;
            fs::write(dir.join("robustness.csv"), eval::robustness_csv(&report))?;
            let horizon = self.plan.adapt.eval_every * self.plan.adapt.patience_evals as u64;
            let log = CheckpointLog::from_csv(
                &fs::read_to_string(dir.join("log.csv"))?,
                &self.plan.id_domain,
                horizon,
            )?;
            let curve_records: Vec<(u64, BTreeMap<String, f64>)> = log
                .records
                .iter()
                .map(|r| (r.step, r.val_bleu.clone()))
                .collect();
            fs::write(
                dir.join("training_curves.csv"),
                eval::training_curves_csv(&curve_records),
            )?;
            ablation.push_str(&format!(
                "{},{},{},{}\n",
                kind.name(),
                report.mean_id_delta,
                report.mean_ood_delta,
                report.ood_range
            ));
        }
        fs::write(self.out().join("ablation.csv"), ablation)?;
        self.finish("report")?;
        Ok(StageStatus::Ran)
    }

    /// Robustness report of one objective from its persisted CSVs.
    pub fn objective_report(
        &self,
        kind: ObjectiveKind,
        base_scores: &BTreeMap<String, f64>,
    ) -> Result<eval::RobustnessReport> {
        let dir = self.objective_dir(kind);
        let per_ckpt = read_eval_csv(&dir.join("eval.csv"))?;
        let best_step: u64 = fs::read_to_string(dir.join("best_step.txt"))?
            .trim()
            .parse()
            .map_err(|_| Error::Input("bad best_step.txt".into()))?;
        eval::robustness_report(
            base_scores,
            &per_ckpt,
            best_step,
            self.plan.report_window,
            &self.plan.id_domain,
        )
    }

    /// The full pipeline: prepare, decontextualize, every objective,
    /// report.
    pub fn run(&self) -> Result<()> {
        self.prepare()?;
        self.decontextualize()?;
        for kind in self.plan.objectives.clone() {
            self.train_objective(kind)?;
            self.evaluate_objective(kind)?;
        }
        self.report()?;
        Ok(())
    }

    fn load_world(&self) -> Result<World> {
        let model_vocab = self.load_vocab(&self.model_vocab_path())?;
        let emb_vocab = self.load_vocab(&self.emb_vocab_path())?;
        let table = GroundingTable::load(&self.table_path())?;
        let encoder = self.encoder();
        let grounding = VocabGrounding::build(&model_vocab, &emb_vocab, &table);
        Ok(World {
            model_vocab,
            emb_vocab,
            table,
            encoder,
            grounding,
            train: self.load_splits("train")?,
            validation: self.load_splits("validation")?,
            test: self.load_splits("test")?,
        })
    }
}

/// Loaded artifacts shared by the adaptation stages.
struct World {
    model_vocab: Vocabulary,
    emb_vocab: Vocabulary,
    table: GroundingTable,
    encoder: ContextualEncoder,
    grounding: VocabGrounding,
    train: BTreeMap<String, Vec<SentencePair>>,
    validation: BTreeMap<String, Vec<SentencePair>>,
    test: BTreeMap<String, Vec<SentencePair>>,
}

impl World {
    fn context(&self) -> ObjectiveContext<'_> {
        ObjectiveContext {
            encoder: &self.encoder,
            table: &self.table,
            emb_vocab: &self.emb_vocab,
            model_vocab: &self.model_vocab,
            vocab_grounding: &self.grounding,
        }
    }
}

/// Greedy-decoded corpus BLEU on every domain's test set.
fn test_scores(model: &Seq2SeqModel, world: &World) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (domain, pairs) in &world.test {
        let mut hyps = Vec::with_capacity(pairs.len());
        let mut refs = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let source = world.model_vocab.encode(&pair.source);
            let tokens = model.greedy_decode(&source, 2 * source.len().max(2) + 2)?;
            hyps.push(world.model_vocab.decode(&tokens));
            refs.push(pair.target.clone());
        }
        out.insert(domain.clone(), bleu(&hyps, &refs)?.value);
    }
    Ok(out)
}

/// Parses `step,domain,bleu` rows into per-checkpoint score maps.
pub fn read_eval_csv(path: &Path) -> Result<BTreeMap<u64, BTreeMap<String, f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out: BTreeMap<u64, BTreeMap<String, f64>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Input(format!("{}:{}: expected 3 fields", path.display(), lineno + 1)));
        }
        let step: u64 = fields[0]
            .parse()
            .map_err(|_| Error::Input(format!("bad step `{}`", fields[0])))?;
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Input(format!("bad score `{}`", fields[2])))?;
        out.entry(step).or_default().insert(fields[1].to_string(), score);
    }
    Ok(out)
}

/// Parses `domain,bleu` rows.
pub fn read_base_eval(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let (domain, score) = line
            .split_once(',')
            .ok_or_else(|| Error::Input(format!("{}:{}: expected 2 fields", path.display(), lineno + 1)))?;
        out.insert(
            domain.to_string(),
            score
                .parse::<f64>()
                .map_err(|_| Error::Input(format!("bad score `{score}`")))?,
        );
    }
    Ok(out)
}

fn split_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_parsing_fills_defaults_and_validates() {
        let text = "output_dir=out/mini\nid_domain=alpha\ndomains=alpha,beta\nobjectives=mle,talign\nseed=5\ncorpus.pairs_per_domain=200\ncorpus.n_val=20\ncorpus.n_test=30\n";
        let plan = ExperimentPlan::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(plan.output_dir, Path::new("/tmp/out/mini"));
        assert_eq!(plan.objectives, vec![ObjectiveKind::Mle, ObjectiveKind::Talign]);
        assert_eq!(plan.corpus.n_val, 20);
        assert_eq!(plan.adapt.eval_every, 50);

        let bad = "output_dir=o\nid_domain=gamma\ndomains=alpha,beta\n";
        assert!(ExperimentPlan::parse(bad, Path::new("/tmp")).is_err());
        let one_domain = "output_dir=o\nid_domain=alpha\ndomains=alpha\n";
        assert!(ExperimentPlan::parse(one_domain, Path::new("/tmp")).is_err());
    }

    #[test]
    fn plan_parses_alpha_and_sweep() {
        let text = "output_dir=o\ndomains=alpha,beta\nid_domain=alpha\ntrain.alpha=0.25\nsweep.learning_rates=2e-5,2e-4\nsweep.batch_sizes=1,5\ncorpus.pairs_per_domain=2000\n";
        let plan = ExperimentPlan::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(plan.alpha, Some(0.25));
        let sweep = plan.sweep.unwrap();
        assert_eq!(sweep.learning_rates, vec![2e-5, 2e-4]);
        assert_eq!(sweep.batch_sizes, vec![1, 5]);

        let auto = "output_dir=o\ndomains=alpha,beta\nid_domain=alpha\ntrain.alpha=auto\n";
        assert_eq!(ExperimentPlan::parse(auto, Path::new("/tmp")).unwrap().alpha, None);
    }

    #[test]
    fn builtin_specs_share_groups_with_opposed_biases() {
        let names: Vec<String> = vec!["alpha".into(), "beta".into()];
        let specs = default_domain_specs(&names).unwrap();
        assert_eq!(specs.len(), 2);
        for spec in &specs {
            spec.validate().unwrap();
            assert_eq!(spec.synonym_groups.len(), 6);
        }
        for (a, b) in specs[0].synonym_groups.iter().zip(&specs[1].synonym_groups) {
            assert_eq!(a.members, b.members, "groups are shared across domains");
            assert_eq!(a.bias, vec![0.9, 0.1]);
            assert_eq!(b.bias, vec![0.1, 0.9]);
        }
        // Domain-specific context words differ.
        let lhs = |s: &DomainSpec| -> Vec<String> { s.rules.iter().map(|(l, _)| l.clone()).collect() };
        assert_ne!(lhs(&specs[0]), lhs(&specs[1]));
    }

    /// The mechanism the desk experiment rests on: the embedder tokenizer
    /// must split synonym variants into a shared stem piece, while the
    /// model tokenizer keeps whole words, so that span matching assigns
    /// both variants the same grounding vector.
    #[test]
    fn default_sizes_ground_synonyms_on_a_shared_stem() {
        let names: Vec<String> = vec!["alpha".into(), "beta".into()];
        let specs = default_domain_specs(&names).unwrap();
        let mut texts = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            for pair in corpus::generate_domain(spec, 400, i as u64).unwrap() {
                texts.push(pair.source);
                texts.push(pair.target);
            }
        }
        let plan = ExperimentPlan::default_plan(Path::new("/tmp/x"), 1);
        let model_vocab = train_tokenizer(&texts, plan.tokenizer.model_vocab, plan.tokenizer.model_seed).unwrap();
        let emb_vocab = train_tokenizer(&texts, plan.tokenizer.emb_vocab, plan.tokenizer.emb_seed).unwrap();
        for stem in SYNONYM_STEMS {
            let a = format!("{stem}a");
            let b = format!("{stem}b");
            // Model tokenizer: whole words.
            assert_eq!(model_vocab.encode(&a).len(), 1, "{a} must stay whole");
            assert_eq!(model_vocab.encode(&b).len(), 1, "{b} must stay whole");
            // Embedder tokenizer: both variants share their first piece,
            // which must carry most of the word.
            let ta = emb_vocab.tokenize_with_spans(&a);
            let tb = emb_vocab.tokenize_with_spans(&b);
            assert!(ta.len() >= 2, "{a} must split");
            assert_eq!(ta[0].id, tb[0].id, "{a}/{b} must share the stem piece");
            assert!(
                ta[0].span.1 - ta[0].span.0 > a.chars().count() / 2,
                "stem piece must dominate the span"
            );
        }
    }

    #[test]
    fn micro_pipeline_runs_end_to_end_and_reruns_are_noops() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = ExperimentPlan::default_plan(dir.path(), 3);
        plan.objectives = vec![ObjectiveKind::Mle];
        plan.corpus.pairs_per_domain = 160;
        plan.corpus.n_val = 6;
        plan.corpus.n_test = 8;
        plan.pretrain.max_steps = 8;
        plan.pretrain.eval_every = 8;
        plan.pretrain.batch_size = 8;
        plan.adapt.max_steps = 6;
        plan.adapt.eval_every = 3;
        plan.adapt.patience_evals = 4;
        plan.adapt.batch_size = 4;
        plan.k_hypotheses = 2;
        plan.model.d_model = 8;
        plan.model.d_ff = 12;
        plan.report_window = 2;
        let pipeline = Pipeline::new(plan).unwrap();
        pipeline.run().unwrap();

        for artifact in [
            "corpora/alpha.train.tsv",
            "corpora/beta.test.tsv",
            "tokenizers/model.vocab",
            "grounding/table.bin",
            "base/base.bin",
            "base/eval.csv",
            "mle/log.csv",
            "mle/eval.csv",
            "mle/robustness.csv",
            "mle/training_curves.csv",
            "ablation.csv",
        ] {
            assert!(dir.path().join(artifact).exists(), "{artifact} missing");
        }

        // Rerun: every stage reports Skipped and artifacts stay put.
        let robustness_before = fs::read(dir.path().join("mle/robustness.csv")).unwrap();
        assert_eq!(pipeline.prepare().unwrap(), StageStatus::Skipped);
        assert_eq!(pipeline.decontextualize().unwrap().0, StageStatus::Skipped);
        assert_eq!(pipeline.train_objective(ObjectiveKind::Mle).unwrap(), StageStatus::Skipped);
        assert_eq!(pipeline.evaluate_objective(ObjectiveKind::Mle).unwrap(), StageStatus::Skipped);
        assert_eq!(pipeline.report().unwrap(), StageStatus::Skipped);
        let robustness_after = fs::read(dir.path().join("mle/robustness.csv")).unwrap();
        assert_eq!(robustness_before, robustness_after);

        // The ablation row is re-derivable from the per-run CSVs.
        let base_scores = read_base_eval(&dir.path().join("base/eval.csv")).unwrap();
        let report = pipeline.objective_report(ObjectiveKind::Mle, &base_scores).unwrap();
        let ablation = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        let row = ablation.lines().nth(1).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0], "mle");
        assert_eq!(fields[1].parse::<f64>().unwrap(), report.mean_id_delta);
        assert_eq!(fields[2].parse::<f64>().unwrap(), report.mean_ood_delta);
        assert_eq!(fields[3].parse::<f64>().unwrap(), report.ood_range);
    }
}
