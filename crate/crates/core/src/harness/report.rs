//! Report rows, their validation and the markdown summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError};
use crate::attacks::{AttackResult, Method};
use crate::metrics::{bucket_by_length, rouge1, rouge_l, token_f1, Metric, ScoreSet, DEFAULT_BUCKET_EDGES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    /// `test` or the file stem of an extra held-out corpus.
    pub corpus: String,
    /// `plain`, `defense`, `before-finetune` or `after-finetune`.
    pub condition: String,
    pub defense_layer: Option<usize>,
    /// Index of the example within its corpus.
    pub example: usize,
    #[serde(flatten)]
    pub result: AttackResult,
    /// Perplexity of the LM on the example under this row's condition.
    #[serde(default)]
    pub ppl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub created_unix: u64,
    pub examples: usize,
    /// Examples cut to `max_seq_len` tokens.
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub header: ReportHeader,
    pub rows: Vec<ReportRow>,
}

pub(crate) fn seeds_of(config: &ExperimentConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("split".to_string(), config.seed),
        ("lm_init".to_string(), config.lm.seed),
        ("lm_train".to_string(), config.lm_train.seed),
        ("parrot_init".to_string(), config.ep.seed),
        ("parrot_train".to_string(), config.ep_train.seed),
        ("defense".to_string(), config.defense.seed),
        ("defense_choice".to_string(), config.defense.choice_seed),
        ("finetune".to_string(), config.finetune.seed),
    ])
}

pub(crate) fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Report {
    pub fn new(experiment: &str, config: &ExperimentConfig, examples: usize, truncated: usize) -> Self {
        Self {
            header: ReportHeader {
                experiment: experiment.to_string(),
                config_hash: config.hash(),
                seeds: seeds_of(config),
                created_unix: now_unix(),
                examples,
                truncated,
            },
            rows: Vec::new(),
        }
    }

    /// Mean scores of rows matching all given filters.
    pub fn mean(&self, filter: impl Fn(&ReportRow) -> bool) -> Option<ScoreSet> {
        ScoreSet::mean(self.rows.iter().filter(|r| filter(r)).map(|r| &r.result.scores))
    }

    pub fn mean_ppl(&self, filter: impl Fn(&ReportRow) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| filter(r)).filter_map(|r| r.ppl).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Checks every row against its own text pair and the config hash.
    pub fn validate(&self, config: &ExperimentConfig) -> Result<(), HarnessError> {
        if self.header.config_hash != config.hash() {
            return Err(HarnessError::Report("config hash does not match the emitting config".into()));
        }
        validate_rows(&self.rows)
    }

    pub fn rows_jsonl(&self) -> Result<String, HarnessError> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).map_err(|e| HarnessError::Report(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Validates, then writes `rows.jsonl`, `summary.md` and
    /// `config.lock.json` into `dir`.
    pub fn write(&self, dir: &Path, config: &ExperimentConfig) -> Result<(), HarnessError> {
        self.validate(config)?;
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(dir.display().to_string(), e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| HarnessError::Io(p.display().to_string(), e))
        };
        write("rows.jsonl", self.rows_jsonl()?)?;
        write("summary.md", render_summary(&self.rows, Some(&self.header), &config.metrics))?;
        let lock = serde_json::json!({
            "experiment": self.header.experiment,
            "config_hash": self.header.config_hash,
            "seeds": self.header.seeds,
            "config": config,
        });
        write("config.lock.json", serde_json::to_string_pretty(&lock).expect("json") + "\n")?;
        Ok(())
    }
}

pub fn validate_rows(rows: &[ReportRow]) -> Result<(), HarnessError> {
    for (i, r) in rows.iter().enumerate() {
        let s = &r.result.scores;
        let bad = |m: &str| Err(HarnessError::Report(format!("row {i}: {m}")));
        if [s.rouge1, s.rouge_l, s.f1, s.semsim].iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 100.0) {
            return bad("score outside [0, 100]");
        }
        let (o, c) = (&r.result.original, &r.result.reconstruction);
        if s.rouge1 != rouge1(o, c) || s.rouge_l != rouge_l(o, c) || s.f1 != token_f1(o, c) {
            return bad("scores do not match the text pair");
        }
        if r.ppl.is_some_and(|p| !(p.is_finite() && p >= 1.0)) {
            return bad("perplexity must be finite and >= 1");
        }
    }
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ReportRow>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Report(format!("line {}: {e}", i + 1))))
        .collect()
}

type GroupKey = (String, String, String, Option<usize>, Method);

fn group_key(r: &ReportRow) -> GroupKey {
    (r.experiment.clone(), r.corpus.clone(), r.condition.clone(), r.defense_layer, r.result.method)
}

fn group_label(k: &GroupKey) -> String {
    let mut s = format!("{} / {} / {}", k.0, k.1, k.2);
    if let Some(l) = k.3 {
        let _ = write!(s, " @ layer {l}");
    }
    let _ = write!(s, " / {}", k.4);
    s
}

/// Markdown tables computed from `rows` alone: per-layer means for each
/// group, ROUGE-1 by token-length bucket, perplexities and fine-tuning
/// deltas when present.
pub fn render_summary(rows: &[ReportRow], header: Option<&ReportHeader>, metrics: &[Metric]) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Reconstruction report\n");
    if let Some(h) = header {
        let _ = writeln!(md, "- experiment: {}", h.experiment);
        let _ = writeln!(md, "- config hash: {}", h.config_hash);
        let seeds: Vec<String> = h.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(md, "- seeds: {}", seeds.join(", "));
        let _ = writeln!(md, "- created (unix seconds): {}", h.created_unix);
        let _ = writeln!(md, "- examples: {} ({} truncated to max_seq_len)", h.examples, h.truncated);
        let _ = writeln!(md);
    }
    let _ = writeln!(md, "{} rows.\n", rows.len());

    let mut groups: BTreeMap<GroupKey, BTreeMap<usize, Vec<&ReportRow>>> = BTreeMap::new();
    for r in rows {
        groups.entry(group_key(r)).or_default().entry(r.result.layer).or_default().push(r);
    }

    let _ = writeln!(md, "## Scores by layer\n");
    for (key, by_layer) in &groups {
        let _ = writeln!(md, "### {}\n", group_label(key));
        let layers: Vec<usize> = by_layer.keys().copied().collect();
        let head: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(md, "| Metric | {} |", head.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(layers.len()));
        for &m in metrics {
            let cells: Vec<String> = layers
                .iter()
                .map(|l| {
                    let mean = ScoreSet::mean(by_layer[l].iter().map(|r| &r.result.scores)).unwrap_or_default();
                    format!("{:.2}", mean.get(m))
                })
                .collect();
            let _ = writeln!(md, "| {} | {} |", m.name(), cells.join(" | "));
        }
        let _ = writeln!(md);
    }

    let _ = writeln!(md, "## ROUGE-1 by token length\n");
    let edges = DEFAULT_BUCKET_EDGES;
    let labels: Vec<String> = bucket_by_length(&[], &edges).iter().map(|b| b.label()).collect();
    let _ = writeln!(md, "| Group | Layer | {} |", labels.join(" | "));
    let _ = writeln!(md, "|---|---|{}", "---|".repeat(labels.len()));
    for (key, by_layer) in &groups {
        for (layer, members) in by_layer {
            let pairs: Vec<(usize, ScoreSet)> = members.iter().map(|r| (r.result.token_len, r.result.scores)).collect();
            let cells: Vec<String> = bucket_by_length(&pairs, &edges)
                .iter()
                .map(|b| b.mean.map_or("-".to_string(), |m| format!("{:.2} (n={})", m.rouge1, b.count)))
                .collect();
            let _ = writeln!(md, "| {} | {} | {} |", group_label(key), layer, cells.join(" | "));
        }
    }
    let _ = writeln!(md);

    let mut ppl: BTreeMap<(String, String, Option<usize>), Vec<f64>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in rows {
        if let Some(p) = r.ppl {
            // one value per example and condition, whatever the method
            if seen.insert((r.corpus.clone(), r.condition.clone(), r.defense_layer, r.example)) {
                ppl.entry((r.corpus.clone(), r.condition.clone(), r.defense_layer)).or_default().push(p);
            }
        }
    }
    if !ppl.is_empty() {
        let _ = writeln!(md, "## Perplexity\n");
        let _ = writeln!(md, "| Corpus | Condition | Defense layer | Mean PPL | n |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for ((corpus, cond, layer), v) in &ppl {
            let layer = layer.map_or("-".to_string(), |l| l.to_string());
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let _ = writeln!(md, "| {corpus} | {cond} | {layer} | {mean:.3} | {} |", v.len());
        }
        let _ = writeln!(md);
    }

    let before: Vec<_> = groups.iter().filter(|(k, _)| k.2 == "before-finetune").collect();
    if !before.is_empty() {
        let _ = writeln!(md, "## Fine-tuning deltas (after - before, ROUGE-1)\n");
        let _ = writeln!(md, "| Method | Layer | Before | After | Delta |");
        let _ = writeln!(md, "|---|---|---|---|---|");
        for (k, by_layer) in before {
            let after_key = (k.0.clone(), k.1.clone(), "after-finetune".to_string(), k.3, k.4);
            let Some(after) = groups.get(&after_key) else { continue };
            for (layer, rows_b) in by_layer {
                let Some(rows_a) = after.get(layer) else { continue };
                let b = ScoreSet::mean(rows_b.iter().map(|r| &r.result.scores)).unwrap_or_default().rouge1;
                let a = ScoreSet::mean(rows_a.iter().map(|r| &r.result.scores)).unwrap_or_default().rouge1;
                let _ = writeln!(md, "| {} | {layer} | {b:.2} | {a:.2} | {:+.2} |", k.4, a - b);
            }
        }
        let _ = writeln!(md);
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, layer: usize, orig: &str, rec: &str, len: usize) -> ReportRow {
        let scores = ScoreSet { rouge1: rouge1(orig, rec), rouge_l: rouge_l(orig, rec), f1: token_f1(orig, rec), semsim: 50.0 };
        ReportRow {
            experiment: "sweep".into(),
            corpus: "test".into(),
            condition: "plain".into(),
            defense_layer: None,
            example: 0,
            result: AttackResult { original: orig.into(), reconstruction: rec.into(), method, layer, token_len: len, scores },
            ppl: None,
        }
    }

    #[test]
    fn validation_catches_drift() {
        let mut rows = vec![row(Method::Hei, 0, "a b c", "a b c", 3), row(Method::Hei, 1, "a b c", "a x c", 3)];
        validate_rows(&rows).unwrap();
        rows[1].result.scores.rouge1 = 100.0;
        assert!(validate_rows(&rows).is_err());
    }

    #[test]
    fn summary_numbers_come_from_rows() {
        let rows = vec![
            row(Method::Hei, 0, "the cat sat", "the cat sat", 3),
            row(Method::Hei, 0, "the cat sat", "the cat ran", 3),
            row(Method::Bei, 2, "x y", "z w", 10),
        ];
        let md = render_summary(&rows, None, &Metric::ALL);
        assert!(md.contains("| ROUGE-1 | 83.33 |"), "{md}");
        assert!(md.contains("sweep / test / plain / BEI"));
        assert!(md.contains("[8,16)"));
        assert_eq!(md, render_summary(&rows, None, &Metric::ALL));
    }

    #[test]
    fn rows_round_trip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::default();
        let mut report = Report::new("sweep", &config, 1, 0);
        report.rows.push(row(Method::Hei, 0, "a b", "a b", 2));
        report.write(dir.path(), &config).unwrap();
        let back = read_rows(&dir.path().join("rows.jsonl")).unwrap();
        assert_eq!(back, report.rows);
        let other = ExperimentConfig { seed: 5, ..Default::default() };
        assert!(report.write(dir.path(), &other).is_err());
    }
}
