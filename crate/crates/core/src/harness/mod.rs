//! Configuration, corpus handling, experiment orchestration and reports.
//!
//! Artifacts (vocabulary, checkpoints, overlap set) live in
//! `<out_dir>/artifacts`; each experiment writes `rows.jsonl`, `summary.md`
//! and `config.lock.json` into `<out_dir>/<experiment>`.

mod config;
mod corpus;
mod report;

pub use config::{CorpusConfig, DefenseConfig, ExperimentConfig, ParrotSettings};
pub use corpus::{load_corpus, shuffle_split, synthetic_corpus};
pub use report::{read_rows, render_summary, validate_rows, Report, ReportHeader, ReportRow};

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::attacks::{invert, train_parrot, AttackError, AttackResult, EPParams, HeiIndex, Method, ParrotOutcome};
use crate::defense::{apply_defense, build_overlap_set, DefenseError, OverlapMatrixSet};
use crate::metrics::score_all;
use crate::numerics::Matrix;
use crate::tinylm::{finetune, train_clm, LMConfig, LMParams, ModelError, TrainOutcome};
use crate::tokenizer::{TokenSequence, TokenizerError, Vocab};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("config: {0}")]
    Config(String),
    #[error("report: {0}")]
    Report(String),
    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { path: String, stage: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// File locations for one output directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn of(config: &ExperimentConfig) -> Self {
        Self { dir: config.artifacts_dir() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.json")
    }

    pub fn lm(&self) -> PathBuf {
        self.dir.join("lm.ckpt")
    }

    pub fn lm_finetuned(&self) -> PathBuf {
        self.dir.join("lm-finetuned.ckpt")
    }

    pub fn parrot(&self, layer: usize) -> PathBuf {
        self.dir.join(format!("parrot-L{layer}.ckpt"))
    }

    pub fn overlap(&self) -> PathBuf {
        self.dir.join("overlap.json")
    }

    fn ensure(&self) -> Result<(), HarnessError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| HarnessError::Io(self.dir.display().to_string(), e))
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<(), HarnessError> {
        self.ensure()?;
        let p = self.dir.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Report(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| HarnessError::Io(p.display().to_string(), e))
    }
}

fn require(path: &Path, stage: &'static str) -> Result<(), HarnessError> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact { path: path.display().to_string(), stage })
    }
}

/// Train, test and extra held-out corpora as raw lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub extra: Vec<(String, Vec<String>)>,
}

pub fn load_data(config: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let c = &config.corpus;
    let (train, test) = match (&c.train, &c.test) {
        (Some(train), Some(test)) => (load_corpus(train)?, load_corpus(test)?),
        (Some(train), None) => shuffle_split(load_corpus(train)?, config.split_fraction, config.seed),
        (None, _) => shuffle_split(synthetic_corpus(c.synthetic_lines, c.synthetic_seed), config.split_fraction, config.seed),
    };
    let extra = c
        .extra_test
        .iter()
        .map(|p| {
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, load_corpus(p)?))
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(Dataset { train, test, extra })
}

/// Encodes and truncates to `max_len`; returns the number truncated.
/// Lines that encode to nothing are dropped.
pub fn encode_all(vocab: &Vocab, lines: &[String], max_len: usize) -> (Vec<TokenSequence>, usize) {
    let mut truncated = 0;
    let seqs = lines
        .iter()
        .map(|l| {
            let mut s = vocab.encode(l);
            if s.len() > max_len {
                s.ids.truncate(max_len);
                truncated += 1;
            }
            s
        })
        .filter(|s| !s.is_empty())
        .collect();
    (seqs, truncated)
}

pub fn build_vocab(config: &ExperimentConfig) -> Result<Vocab, HarnessError> {
    config.validate()?;
    let data = load_data(config)?;
    let vocab = Vocab::build(&data.train, config.lm.vocab_size)?;
    let art = Artifacts::of(config);
    art.ensure()?;
    vocab.save(&art.vocab())?;
    log::info!("vocabulary of {} tokens written to {}", vocab.len(), art.vocab().display());
    Ok(vocab)
}

fn load_or_build_vocab(config: &ExperimentConfig) -> Result<Vocab, HarnessError> {
    let path = Artifacts::of(config).vocab();
    if path.exists() {
        Ok(Vocab::load(&path)?)
    } else {
        build_vocab(config)
    }
}

/// The LM config actually trained: the vocabulary may be smaller than the
/// configured cap.
pub fn effective_lm_config(config: &ExperimentConfig, vocab: &Vocab) -> LMConfig {
    LMConfig { vocab_size: vocab.len(), ..config.lm.clone() }
}

pub fn train_lm(config: &ExperimentConfig) -> Result<(LMParams, TrainOutcome), HarnessError> {
    config.validate()?;
    let vocab = load_or_build_vocab(config)?;
    let data = load_data(config)?;
    let (train, _) = encode_all(&vocab, &data.train, config.lm.max_seq_len);
    let mut lm = LMParams::init(&effective_lm_config(config, &vocab))?;
    let outcome = train_clm(&mut lm, &train, &config.lm_train)?;
    let art = Artifacts::of(config);
    art.ensure()?;
    lm.save(&art.lm())?;
    art.write_json("lm_train.json", &outcome)?;
    Ok((lm, outcome))
}

pub fn load_lm(config: &ExperimentConfig) -> Result<(Vocab, LMParams), HarnessError> {
    let art = Artifacts::of(config);
    require(&art.vocab(), "build-vocab")?;
    require(&art.lm(), "train-lm")?;
    let vocab = Vocab::load(&art.vocab())?;
    let lm = LMParams::load(&art.lm())?;
    if lm.vocab_size() != vocab.len() {
        return Err(HarnessError::Config(format!(
            "checkpoint vocabulary {} differs from vocab file {}",
            lm.vocab_size(),
            vocab.len()
        )));
    }
    Ok((vocab, lm))
}

pub fn train_parrot_stage(config: &ExperimentConfig) -> Result<(EPParams, ParrotOutcome), HarnessError> {
    config.validate()?;
    let (vocab, lm) = load_lm(config)?;
    let data = load_data(config)?;
    let (train, _) = encode_all(&vocab, &data.train, lm.config.max_seq_len);
    let (ep, outcome) = train_parrot(&lm, &config.ep_config(&lm), &train, &config.ep_train)?;
    let art = Artifacts::of(config);
    ep.save(&art.parrot(ep.config.target_layer))?;
    art.write_json(&format!("parrot-L{}_train.json", ep.config.target_layer), &outcome)?;
    Ok((ep, outcome))
}

fn load_or_train_parrot(config: &ExperimentConfig, lm: &LMParams) -> Result<EPParams, HarnessError> {
    let path = Artifacts::of(config).parrot(config.target_layer());
    let ep = if path.exists() { EPParams::load(&path)? } else { train_parrot_stage(config)?.0 };
    if ep.config != config.ep_config(lm) {
        return Err(HarnessError::Config(format!("{} was trained with a different parrot config", path.display())));
    }
    Ok(ep)
}

fn load_parrot(config: &ExperimentConfig, lm: &LMParams) -> Result<EPParams, HarnessError> {
    require(&Artifacts::of(config).parrot(config.target_layer()), "train-parrot")?;
    load_or_train_parrot(config, lm)
}

/// Defense placement for an evaluation pass.
#[derive(Clone, Copy)]
struct Placement<'a> {
    set: &'a OverlapMatrixSet,
    layer: usize,
    choice_seed: u64,
}

struct Evaluator<'a> {
    lm: &'a LMParams,
    vocab: &'a Vocab,
    index: HeiIndex,
    ep: Option<&'a EPParams>,
}

struct Pass<'a> {
    experiment: &'a str,
    corpus: &'a str,
    condition: &'a str,
    plan: &'a [(Method, usize)],
    defense: Option<Placement<'a>>,
    with_ppl: bool,
}

impl<'a> Evaluator<'a> {
    fn new(lm: &'a LMParams, vocab: &'a Vocab, ep: Option<&'a EPParams>) -> Self {
        Self { lm, vocab, index: HeiIndex::new(lm), ep }
    }

    /// States seen at each layer, plus the LM perplexity under them.
    fn states(
        &self,
        seq: &TokenSequence,
        example: usize,
        defense: Option<Placement<'_>>,
        with_ppl: bool,
    ) -> Result<(Vec<Matrix>, Option<f64>), HarnessError> {
        let mut layers = self.lm.forward_hidden(seq)?.layers;
        let scorable = with_ppl && seq.len() >= 2;
        let ppl = match defense {
            None => scorable.then(|| self.lm.perplexity(seq)).transpose()?,
            Some(p) => {
                let seed = p.choice_seed.wrapping_add(example as u64);
                let defended = apply_defense(&layers[p.layer], p.set, seed)?;
                let rest = self.lm.continue_from(p.layer, &defended)?;
                let ppl = scorable.then(|| self.lm.mean_nll_from(p.layer, &defended, &seq.ids).map(f64::exp)).transpose()?;
                layers.truncate(p.layer);
                layers.push(defended);
                layers.extend(rest);
                ppl
            }
        };
        Ok((layers, ppl))
    }

    fn run(&self, pass: &Pass<'_>, seqs: &[TokenSequence]) -> Result<Vec<ReportRow>, HarnessError> {
        let per_example: Vec<Vec<ReportRow>> = seqs
            .par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let (layers, ppl) = self.states(seq, i, pass.defense, pass.with_ppl)?;
                let original = self.vocab.decode(&seq.ids)?;
                pass.plan
                    .iter()
                    .map(|&(method, layer)| {
                        let inv = invert(self.lm, &self.index, method, &layers[layer], layer, self.ep)?;
                        let reconstruction = inv.text(self.vocab)?;
                        let scores = score_all(self.lm, self.vocab, &original, &reconstruction);
                        Ok(ReportRow {
                            experiment: pass.experiment.to_string(),
                            corpus: pass.corpus.to_string(),
                            condition: pass.condition.to_string(),
                            defense_layer: pass.defense.map(|p| p.layer),
                            example: i,
                            result: AttackResult {
                                original: original.clone(),
                                reconstruction,
                                method,
                                layer,
                                token_len: seq.len(),
                                scores,
                            },
                            ppl,
                        })
                    })
                    .collect::<Result<Vec<_>, HarnessError>>()
            })
            .collect::<Result<_, _>>()?;
        // plan-major order: all examples of the first (method, layer), then the next
        let mut rows = Vec::with_capacity(per_example.len() * pass.plan.len());
        for j in 0..pass.plan.len() {
            rows.extend(per_example.iter().map(|r| r[j].clone()));
        }
        Ok(rows)
    }
}

fn report_dir(config: &ExperimentConfig, experiment: &str) -> PathBuf {
    config.out_dir.join(experiment)
}

fn finish(config: &ExperimentConfig, report: Report) -> Result<Report, HarnessError> {
    report.write(&report_dir(config, &report.header.experiment), config)?;
    Ok(report)
}

fn test_split(config: &ExperimentConfig, vocab: &Vocab, lm: &LMParams) -> Result<(Vec<TokenSequence>, usize, Dataset), HarnessError> {
    let data = load_data(config)?;
    let (test, truncated) = encode_all(vocab, &data.test, lm.config.max_seq_len);
    if test.is_empty() {
        return Err(HarnessError::Corpus("test split is empty".into()));
    }
    Ok((test, truncated, data))
}

/// BEI/HEI (and EP, when configured) at every requested layer of the test
/// split.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let (vocab, lm) = load_lm(config)?;
    let (test, truncated, _) = test_split(config, &vocab, &lm)?;
    let ep = if config.methods.iter().any(|m| m.uses_parrot()) { Some(load_parrot(config, &lm)?) } else { None };
    let mut plan = Vec::new();
    for &m in &config.methods {
        if m.uses_parrot() {
            plan.push((m, config.target_layer()));
        } else {
            plan.extend(config.sweep_layers().into_iter().map(|l| (m, l)));
        }
    }
    let eval = Evaluator::new(&lm, &vocab, ep.as_ref());
    let mut report = Report::new("sweep", config, test.len(), truncated);
    report.rows = eval.run(
        &Pass { experiment: "sweep", corpus: "test", condition: "plain", plan: &plan, defense: None, with_ppl: false },
        &test,
    )?;
    finish(config, report)
}

fn ep_plan(layer: usize) -> Vec<(Method, usize)> {
    Method::ALL.iter().map(|&m| (m, layer)).collect()
}

/// Trains (or loads) the parrot and compares BEI, HEI, EP+BEI and EP+HEI
/// at its target layer on the test split and any extra corpora.
pub fn run_ep_experiment(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let (vocab, lm) = load_lm(config)?;
    let ep = load_or_train_parrot(config, &lm)?;
    let (test, truncated, data) = test_split(config, &vocab, &lm)?;
    let plan = ep_plan(config.target_layer());
    let eval = Evaluator::new(&lm, &vocab, Some(&ep));
    let mut report = Report::new("ep", config, test.len(), truncated);
    report.rows = eval.run(
        &Pass { experiment: "ep", corpus: "test", condition: "plain", plan: &plan, defense: None, with_ppl: false },
        &test,
    )?;
    for (name, lines) in &data.extra {
        let (seqs, t) = encode_all(&vocab, lines, lm.config.max_seq_len);
        report.header.truncated += t;
        report.header.examples += seqs.len();
        report.rows.extend(eval.run(
            &Pass { experiment: "ep", corpus: name, condition: "plain", plan: &plan, defense: None, with_ppl: false },
            &seqs,
        )?);
    }
    finish(config, report)
}

pub fn load_or_build_overlap(config: &ExperimentConfig, d: usize) -> Result<OverlapMatrixSet, HarnessError> {
    let art = Artifacts::of(config);
    let path = art.overlap();
    if path.exists() {
        let set = OverlapMatrixSet::load(&path)?;
        if set.d == d && set.k == config.defense.k && set.seed == Some(config.defense.seed) {
            return Ok(set);
        }
        log::warn!("{} does not match the defense config; rebuilding", path.display());
    }
    let set = build_overlap_set(d, config.defense.k, config.defense.seed)?;
    art.ensure()?;
    set.save(&path)?;
    Ok(set)
}

/// EP (and the baselines) against states transformed by the overlap-matrix
/// defense at each configured layer, next to the undefended numbers, with
/// perplexities for both.
pub fn run_defense_experiment(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let (vocab, lm) = load_lm(config)?;
    let ep = load_parrot(config, &lm)?;
    let set = load_or_build_overlap(config, lm.hidden_dim())?;
    let (test, truncated, _) = test_split(config, &vocab, &lm)?;
    let target = config.target_layer();
    let eval = Evaluator::new(&lm, &vocab, Some(&ep));
    let mut report = Report::new("defense", config, test.len(), truncated);
    let plan = ep_plan(target);
    report.rows = eval.run(
        &Pass { experiment: "defense", corpus: "test", condition: "plain", plan: &plan, defense: None, with_ppl: true },
        &test,
    )?;
    if config.defense.enabled {
        for layer in config.defense_layers() {
            let mut plan = ep_plan(target);
            if layer != target {
                plan.extend([(Method::Bei, layer), (Method::Hei, layer)]);
            }
            let placement = Placement { set: &set, layer, choice_seed: config.defense.choice_seed };
            report.rows.extend(eval.run(
                &Pass {
                    experiment: "defense",
                    corpus: "test",
                    condition: "defense",
                    plan: &plan,
                    defense: Some(placement),
                    with_ppl: true,
                },
                &test,
            )?);
        }
    }
    finish(config, report)
}

/// BEI/HEI sweep before and after plain fine-tuning on the test split.
pub fn run_finetune_experiment(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    config.validate()?;
    let (vocab, lm) = load_lm(config)?;
    let (test, truncated, _) = test_split(config, &vocab, &lm)?;
    let plan: Vec<(Method, usize)> = [Method::Bei, Method::Hei]
        .iter()
        .flat_map(|&m| config.sweep_layers().into_iter().map(move |l| (m, l)))
        .collect();
    let mut report = Report::new("finetune", config, test.len(), truncated);
    let pass = |condition| Pass { experiment: "finetune", corpus: "test", condition, plan: &plan, defense: None, with_ppl: false };
    report.rows = Evaluator::new(&lm, &vocab, None).run(&pass("before-finetune"), &test)?;
    let (tuned, outcome) = finetune(&lm, &test, &config.finetune)?;
    let art = Artifacts::of(config);
    tuned.save(&art.lm_finetuned())?;
    art.write_json("finetune_train.json", &outcome)?;
    report.rows.extend(Evaluator::new(&tuned, &vocab, None).run(&pass("after-finetune"), &test)?);
    finish(config, report)
}

/// Re-renders `summary.md` in `dir` from its `rows.jsonl`.
pub fn rerender(dir: &Path, config: Option<&ExperimentConfig>) -> Result<String, HarnessError> {
    let rows = read_rows(&dir.join("rows.jsonl"))?;
    validate_rows(&rows)?;
    let header = config.map(|c| ReportHeader {
        experiment: rows.first().map_or_else(String::new, |r| r.experiment.clone()),
        config_hash: c.hash(),
        seeds: report::seeds_of(c),
        created_unix: report::now_unix(),
        examples: rows.iter().map(|r| (r.corpus.as_str(), r.example)).collect::<std::collections::BTreeSet<_>>().len(),
        truncated: 0,
    });
    let metrics = config.map_or_else(|| crate::metrics::Metric::ALL.to_vec(), |c| c.metrics.clone());
    let md = render_summary(&rows, header.as_ref(), &metrics);
    let p = dir.join("summary.md");
    std::fs::write(&p, &md).map_err(|e| HarnessError::Io(p.display().to_string(), e))?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::TrainConfig;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.corpus.synthetic_lines = 120;
        c.lm = LMConfig { vocab_size: 2000, hidden_dim: 16, layers: 2, heads: 2, ffn_dim: 32, max_seq_len: 48, ..LMConfig::default() };
        c.lm_train = TrainConfig { epochs: 1, batch_size: 16, ..c.lm_train };
        c.ep = ParrotSettings { parrot_dim: 16, parrot_layers: 1, parrot_heads: 2, ..Default::default() };
        c.ep_train = TrainConfig { epochs: 1, max_steps: Some(5), ..c.ep_train };
        c.finetune = TrainConfig { epochs: 1, ..c.finetune };
        c.out_dir = dir.to_path_buf();
        c.defense.k = 2;
        c
    }

    #[test]
    fn stages_require_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        assert!(matches!(run_sweep(&c), Err(HarnessError::MissingArtifact { .. })));
        train_lm(&c).unwrap();
        assert!(matches!(run_defense_experiment(&c), Err(HarnessError::MissingArtifact { .. })));
    }

    #[test]
    fn tiny_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        train_lm(&c).unwrap();

        let sweep = run_sweep(&c).unwrap();
        assert_eq!(sweep.rows.len(), 2 * 3 * 24);
        let hei0 = sweep.mean(|r| r.result.method == Method::Hei && r.result.layer == 0).unwrap();
        assert_eq!((hei0.rouge1, hei0.f1), (100.0, 100.0));
        let first = std::fs::read(dir.path().join("sweep/rows.jsonl")).unwrap();
        run_sweep(&c).unwrap();
        assert_eq!(std::fs::read(dir.path().join("sweep/rows.jsonl")).unwrap(), first);

        let ep = run_ep_experiment(&c).unwrap();
        for m in Method::ALL {
            assert!(ep.rows.iter().any(|r| r.result.method == m && r.result.layer == 2));
        }
        let def = run_defense_experiment(&c).unwrap();
        let plain: Vec<_> = def.rows.iter().filter(|r| r.condition == "plain").map(|r| &r.result).collect();
        let ep_rows: Vec<_> = ep.rows.iter().map(|r| &r.result).collect();
        assert_eq!(plain, ep_rows);
        assert!(def.rows.iter().any(|r| r.defense_layer == Some(0)));
        assert!(def.rows.iter().all(|r| r.ppl.is_some()));

        let ft = run_finetune_experiment(&c).unwrap();
        assert!(ft.rows.iter().any(|r| r.condition == "after-finetune"));
        let after0 = ft.mean(|r| r.condition == "after-finetune" && r.result.method == Method::Hei && r.result.layer == 0).unwrap();
        assert_eq!(after0.rouge1, 100.0);

        let md = rerender(&dir.path().join("finetune"), Some(&c)).unwrap();
        assert!(md.contains("Fine-tuning deltas"));
    }
}
