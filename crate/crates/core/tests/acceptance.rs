//! End-to-end acceptance run. Trains the default toy LM and parrot on the
//! synthetic corpus through the CLI, then checks each criterion and prints
//! one PASS/FAIL line per criterion. Exits nonzero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use eplab::attacks::Method;
use eplab::defense::{apply_with_matrix, OverlapMatrixSet};
use eplab::harness::{self, read_rows, synthetic_corpus, ExperimentConfig, ReportRow};
use eplab::metrics::{lcs_len, rouge1, rouge_l, token_f1};
use eplab::numerics::{dct_rows, idct_rows, Matrix};
use eplab::splitsvc::wire::FloatWidth;
use eplab::splitsvc::{client_session, local_result, ClientOptions, ServerConfig, SplitServer};
use eplab::tinylm::{LMConfig, LMParams};
use eplab::tokenizer::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Cli {
    out: PathBuf,
    config: Option<PathBuf>,
}

impl Cli {
    fn run(&self, cmd: &str) -> Result<Duration, String> {
        let t = Instant::now();
        let mut c = Command::new(env!("CARGO_BIN_EXE_eplab"));
        c.arg(cmd).arg("--out").arg(&self.out);
        if let Some(p) = &self.config {
            c.arg("--config").arg(p);
        }
        let o = c.env("RUST_LOG", "warn").output().map_err(|e| format!("spawning eplab: {e}"))?;
        if !o.status.success() {
            return Err(format!("eplab {cmd} failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
        }
        Ok(t.elapsed())
    }

    fn rows(&self, experiment: &str) -> Result<Vec<ReportRow>, String> {
        read_rows(&self.out.join(experiment).join("rows.jsonl")).map_err(|e| e.to_string())
    }
}

fn mean_rouge1<'a>(rows: impl Iterator<Item = &'a ReportRow>) -> Option<(f64, usize)> {
    let v: Vec<f64> = rows.map(|r| r.result.scores.rouge1).collect();
    (!v.is_empty()).then(|| (v.iter().sum::<f64>() / v.len() as f64, v.len()))
}

fn plain<'a>(rows: &'a [ReportRow], method: Method, layer: usize) -> impl Iterator<Item = &'a ReportRow> {
    rows.iter().filter(move |r| r.condition == "plain" && r.result.method == method && r.result.layer == layer)
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn criterion1(cli: &Cli, sweep_time: Duration) -> Check {
    let rows = cli.rows("sweep")?;
    let hei0: Vec<&ReportRow> = plain(&rows, Method::Hei, 0).collect();
    let n = hei0.len();
    let r = hei0.iter().map(|r| r.result.scores.rouge1).sum::<f64>() / n.max(1) as f64;
    let f = hei0.iter().map(|r| r.result.scores.f1).sum::<f64>() / n.max(1) as f64;
    let exact = hei0.iter().all(|r| r.result.scores.rouge1 == 100.0 && r.result.scores.f1 == 100.0);
    let msg = format!("HEI layer 0 ROUGE-1 {r:.2} F1 {f:.2} over {n} test examples, sweep {}", secs(sweep_time));
    if exact && n >= 500 && sweep_time < Duration::from_secs(120) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion2(cli: &Cli, layers: usize, sweep_time: Duration) -> Check {
    let rows = cli.rows("sweep")?;
    let (first, _) = mean_rouge1(plain(&rows, Method::Hei, 0)).ok_or("no HEI layer-0 rows")?;
    let (last, _) = mean_rouge1(plain(&rows, Method::Hei, layers)).ok_or("no HEI last-layer rows")?;
    let msg = format!("HEI ROUGE-1 layer 0 {first:.2} vs layer {layers} {last:.2} (gap {:.2}), sweep {}", first - last, secs(sweep_time));
    if first - last >= 20.0 && sweep_time < Duration::from_secs(300) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion3(cli: &Cli, target: usize, parrot_time: Duration) -> Check {
    let rows = cli.rows("ep")?;
    let test = |r: &&ReportRow| r.corpus == "test";
    let (hei, n) = mean_rouge1(plain(&rows, Method::Hei, target).filter(test)).ok_or("no HEI rows")?;
    let (ep, _) = mean_rouge1(plain(&rows, Method::EpHei, target).filter(test)).ok_or("no EP+HEI rows")?;
    let msg = format!(
        "layer {target}: EP+HEI ROUGE-1 {ep:.2} vs HEI {hei:.2} (gap {:.2}) over {n} held-out examples, parrot training {}",
        ep - hei,
        secs(parrot_time)
    );
    if ep - hei >= 20.0 && parrot_time <= Duration::from_secs(1800) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion4(cli: &Cli, target: usize, defend_time: Duration) -> Check {
    let rows = cli.rows("defense")?;
    let ep_at = |cond: &'static str| {
        move |r: &&ReportRow| {
            r.condition == cond
                && r.result.method == Method::EpHei
                && r.result.layer == target
                && (cond == "plain" || r.defense_layer == Some(target))
        }
    };
    let off: Vec<&ReportRow> = rows.iter().filter(ep_at("plain")).collect();
    let on: Vec<&ReportRow> = rows.iter().filter(ep_at("defense")).collect();
    let (r_off, _) = mean_rouge1(off.iter().copied()).ok_or("no defense-off EP rows")?;
    let (r_on, n) = mean_rouge1(on.iter().copied()).ok_or("no defense-on EP rows")?;
    let ppl = |rows: &[&ReportRow]| {
        let v: Vec<f64> = rows.iter().filter_map(|r| r.ppl).collect();
        (v.len() == rows.len() && !v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (p_off, p_on) = (ppl(&off).ok_or("missing perplexity")?, ppl(&on).ok_or("missing perplexity")?);
    let msg = format!(
        "defense at layer {target}: EP+HEI ROUGE-1 {r_off:.2} -> {r_on:.2} (drop {:.2}), PPL {p_off:.2} -> {p_on:.2}, {n} examples, defend {}",
        r_off - r_on,
        secs(defend_time)
    );
    if r_off - r_on >= 30.0 && p_on > p_off && defend_time < Duration::from_secs(600) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|x| it.any(|y| y == *x)) {
            best = sub.len();
        }
    }
    best
}

fn criterion5() -> Check {
    const WORDS: [&str; 5] = ["the", "cat", "sat", "on", "mat"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let mut words = || -> Vec<String> {
            let n = rng.gen_range(0..=12);
            (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
        };
        let (a, b) = (words(), words());
        let lcs = brute_lcs(&a, &b);
        if lcs_len(&a, &b) != lcs {
            return Err(format!("pair {i}: LCS {} vs oracle {lcs} for {a:?} / {b:?}", lcs_len(&a, &b)));
        }
        let want = match (a.len(), b.len()) {
            (0, 0) => 100.0,
            (0, _) | (_, 0) => 0.0,
            _ if lcs == 0 => 0.0,
            (la, lb) => {
                let (p, r) = (lcs as f64 / lb as f64, lcs as f64 / la as f64);
                200.0 * p * r / (p + r)
            }
        };
        let got = rouge_l(&a.join(" "), &b.join(" "));
        if got != want {
            return Err(format!("pair {i}: rougeL {got} vs oracle {want}"));
        }
    }
    let fixtures = [
        ("the cat sat", "the cat ran", 66.67),
        ("the cat sat", "the cat sat", 100.0),
        ("the cat sat", "dog", 0.0),
        ("a a b", "a b b", 66.67),
        ("profits rose in march", "profits rose", 66.67),
    ];
    for (r, c, want) in fixtures {
        for (name, got) in [("rouge1", rouge1(r, c)), ("f1", token_f1(r, c))] {
            if (got - want).abs() > 0.01 {
                return Err(format!("{name}({r:?}, {c:?}) = {got:.4}, expected {want}"));
            }
        }
    }
    Ok(format!("rougeL equals the brute-force LCS oracle on 1000 pairs; \"the cat sat\"/\"the cat ran\" -> {:.2}", rouge1("the cat sat", "the cat ran")))
}

fn criterion6() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        worst = worst.max(common::fd::max_relative_error(seed));
    }
    if worst >= 1e-5 {
        return Err(format!("autodiff max relative error {worst:.2e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut dct_err: f64 = 0.0;
    for (n, d) in [(1, 1), (3, 7), (16, 128), (64, 1024)] {
        let m = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap();
        dct_err = dct_err.max(idct_rows(&dct_rows(&m)).max_abs_diff(&m));
    }
    if dct_err >= 1e-9 {
        return Err(format!("DCT round-trip error {dct_err:.2e}"));
    }
    let cfg = LMConfig { vocab_size: 300, hidden_dim: 16, layers: 2, heads: 2, ffn_dim: 32, max_seq_len: 16, tie_head: false, ..Default::default() };
    let mut lm = LMParams::init(&cfg).unwrap();
    let head = lm.head.as_mut().unwrap();
    head.weight = Matrix::zeros(16, 300);
    head.bias = Matrix::zeros(1, 300);
    let seq = TokenSequence { ids: vec![10, 20, 30, 40, 50, 60], source: String::new() };
    let ppl = lm.perplexity(&seq).map_err(|e| e.to_string())?;
    // exp(ln 300) is not representable as exactly 300 after rounding; equality
    // is judged in units in the last place of |V|.
    let ulps = (ppl.to_bits() as i64 - 300f64.to_bits() as i64).unsigned_abs();
    if ulps > 1 {
        return Err(format!("uniform-model perplexity {ppl:?}, expected 300 ({ulps} ulp away)"));
    }
    Ok(format!(
        "autodiff max rel. error {worst:.2e} over 20 graphs; DCT round trip {dct_err:.2e} up to 64x1024; uniform PPL {ppl:?} = |V| to {ulps} ulp"
    ))
}

fn criterion7() -> Check {
    let set = OverlapMatrixSet::from_permutation(1, vec![2, 0, 3, 1]).map_err(|e| e.to_string())?;
    let o = &set.matrices[0];
    let mut ones = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            match o.get(c, r) {
                v if v == 1.0 => ones.push((r, c)),
                v if v == 0.0 => {}
                v => return Err(format!("M[{r}][{c}] = {v}")),
            }
        }
    }
    let mut want = vec![(2, 2), (2, 0), (0, 0), (0, 3), (3, 3), (3, 1)];
    want.sort();
    if ones != want {
        return Err(format!("M unit entries {ones:?}, expected {want:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for d in [4, 16, 128] {
        let e = Matrix::from_vec(5, d, (0..5 * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let out = apply_with_matrix(&e, &Matrix::identity(d)).map_err(|e| e.to_string())?;
        worst = worst.max(out.max_abs_diff(&e));
    }
    if worst > 1e-9 {
        return Err(format!("identity O_s changes E by {worst:.2e}"));
    }
    Ok(format!("M = {ones:?} with O = M^T; identity injection max change {worst:.2e}"))
}

fn criterion8(config: &ExperimentConfig) -> Check {
    let (vocab, lm) = harness::load_lm(config).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut inputs = synthetic_corpus(25, 424_242);
    let words: Vec<String> = inputs.iter().flat_map(|l| l.split_whitespace().map(str::to_string)).collect();
    while inputs.len() < 50 {
        let n = rng.gen_range(1..40);
        inputs.push((0..n).map(|_| words[rng.gen_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" "));
    }
    let opts = ClientOptions { wire: FloatWidth::F64, timeout: Some(Duration::from_secs(60)), ..Default::default() };
    let want: Vec<_> = inputs
        .iter()
        .map(|t| {
            let mut s = vocab.encode(t);
            s.ids.truncate(lm.config.max_seq_len);
            local_result(&lm, &vocab, &s).map(|r| (s, r))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let n = lm.num_layers();
    for k in 0..n {
        let cfg = ServerConfig { split_layer: k, ..Default::default() };
        let server = SplitServer::bind("127.0.0.1:0", lm.clone(), vocab.clone(), None, cfg).map_err(|e| e.to_string())?.spawn();
        let prefix = lm.prefix(k).map_err(|e| e.to_string())?;
        for (i, (seq, local)) in want.iter().enumerate() {
            let text = vocab.decode(&seq.ids).map_err(|e| e.to_string())?;
            let got = client_session(&prefix, &vocab, &text, server.addr(), &opts).map_err(|e| format!("k={k} input {i}: {e}"))?;
            if &got != local {
                return Err(format!("k={k} input {i}: split output differs from monolithic inference"));
            }
        }
        server.shutdown();
    }
    Ok(format!("f64-wire results (text, ids, final-state hash) identical to monolithic inference for k = 0..{} on 50 inputs", n - 1))
}

fn snapshot(out: &Path, experiments: &[&str]) -> Result<Vec<Vec<u8>>, String> {
    experiments
        .iter()
        .map(|e| {
            let p = out.join(e).join("rows.jsonl");
            std::fs::read(&p).map_err(|err| format!("{}: {err}", p.display()))
        })
        .collect()
}

const EXPERIMENTS: [&str; 4] = ["sweep", "ep", "defense", "finetune"];
const PIPELINE: [&str; 7] = ["build-vocab", "train-lm", "sweep", "train-parrot", "ep-eval", "defend", "finetune-eval"];

fn criterion9(main: &Cli, tmp: &Path) -> Check {
    // Evaluation re-runs on the default artifacts.
    let before = snapshot(&main.out, &["sweep", "ep", "defense"])?;
    for cmd in ["sweep", "ep-eval", "defend"] {
        main.run(cmd)?;
    }
    if snapshot(&main.out, &["sweep", "ep", "defense"])? != before {
        return Err("re-running sweep/ep-eval/defend changed rows.jsonl".into());
    }
    // Whole pipeline, training included, twice from scratch on a reduced config.
    let mut small = ExperimentConfig {
        lm: LMConfig { hidden_dim: 32, layers: 2, heads: 2, ffn_dim: 64, max_seq_len: 48, ..Default::default() },
        ..Default::default()
    };
    small.corpus.synthetic_lines = 240;
    small.lm_train.epochs = 2;
    small.ep.parrot_dim = 32;
    small.ep.parrot_layers = 1;
    small.ep_train.epochs = 2;
    small.finetune.epochs = 1;
    small.set_seed(5);
    let cfg_path = tmp.join("small.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&small).unwrap()).map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for run in ["det-a", "det-b"] {
        let cli = Cli { out: tmp.join(run), config: Some(cfg_path.clone()) };
        for cmd in PIPELINE {
            cli.run(cmd)?;
        }
        bytes.push(snapshot(&cli.out, &EXPERIMENTS)?);
    }
    if bytes[0] != bytes[1] {
        return Err("two from-scratch pipeline runs produced different rows.jsonl".into());
    }
    let total: usize = bytes[0].iter().map(Vec::len).sum();
    Ok(format!(
        "sweep/ep-eval/defend re-runs byte-identical; two from-scratch pipelines agree on all four rows.jsonl ({total} bytes)"
    ))
}

fn report(results: &mut Vec<(usize, bool, String)>, n: usize, name: &str, t: Instant, check: Check) {
    let el = secs(t.elapsed());
    let (ok, line) = match check {
        Ok(m) => (true, format!("PASS criterion {n} ({name}, {el}): {m}")),
        Err(m) => (false, format!("FAIL criterion {n} ({name}, {el}): {m}")),
    };
    eprintln!("{line}");
    results.push((n, ok, line));
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let cli = Cli { out: tmp.path().join("default"), config: None };
    let config = ExperimentConfig { out_dir: cli.out.clone(), ..Default::default() };
    let n_layers = config.lm.layers;
    let target = config.target_layer();
    let mut results = Vec::new();

    // Library-only criteria first: they need no training.
    for (n, name, f) in [
        (5, "metric oracles", criterion5 as fn() -> Check),
        (6, "numerics", criterion6),
        (7, "defense fixture", criterion7),
    ] {
        let t = Instant::now();
        report(&mut results, n, name, t, f());
    }

    let t0 = Instant::now();
    let stage = |cmd: &str| {
        let r = cli.run(cmd);
        match &r {
            Ok(d) => eprintln!("  {cmd}: {}", secs(*d)),
            Err(e) => eprintln!("  {cmd}: {e}"),
        }
        r
    };
    let trained = stage("build-vocab").and_then(|_| stage("train-lm"));
    let sweep = trained.clone().and_then(|_| stage("sweep"));
    let t = Instant::now();
    let c1 = sweep.clone().and_then(|d| criterion1(&cli, d));
    report(&mut results, 1, "HEI layer-0 exactness", t, c1);
    let t = Instant::now();
    let c2 = sweep.clone().and_then(|d| criterion2(&cli, n_layers, d));
    report(&mut results, 2, "depth degradation", t, c2);

    let parrot = trained.clone().and_then(|_| stage("train-parrot"));
    let t = Instant::now();
    let c3 = parrot.clone().and_then(|d| stage("ep-eval").and_then(|_| criterion3(&cli, target, d)));
    report(&mut results, 3, "Embed Parrot gap", t, c3);
    let t = Instant::now();
    let c4 = parrot.clone().and_then(|_| stage("defend")).and_then(|d| criterion4(&cli, target, d));
    report(&mut results, 4, "defense effectiveness", t, c4);

    let t = Instant::now();
    let c8 = trained.clone().and_then(|_| criterion8(&config));
    report(&mut results, 8, "split consistency", t, c8);

    let t = Instant::now();
    let c9 = parrot.and_then(|_| stage("finetune-eval")).and_then(|_| criterion9(&cli, tmp.path()));
    report(&mut results, 9, "determinism", t, c9);

    results.sort_by_key(|r| r.0);
    for (_, _, line) in &results {
        println!("{line}");
    }
    let failed = results.iter().filter(|r| !r.1).count();
    println!("acceptance: {} of {} criteria passed in {}", results.len() - failed, results.len(), secs(t0.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
