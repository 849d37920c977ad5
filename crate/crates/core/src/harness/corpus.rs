//! Corpus ingestion, a synthetic corpus generator and the seeded split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::HarnessError;

/// Reads one example per non-empty line. Files ending in `.jsonl` (or whose
/// first non-empty line is a JSON object) are read as JSON lines and take
/// the `"text"` field.
pub fn load_corpus(path: &Path) -> Result<Vec<String>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl")
        || text.lines().find(|l| !l.trim().is_empty()).is_some_and(|l| l.trim_start().starts_with('{'));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if jsonl {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| HarnessError::Corpus(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let t = v.get("text").and_then(|t| t.as_str()).ok_or_else(|| {
                HarnessError::Corpus(format!("{}:{}: missing string field \"text\"", path.display(), i + 1))
            })?;
            if !t.trim().is_empty() {
                out.push(t.trim().to_string());
            }
        } else {
            out.push(line.to_string());
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Corpus(format!("{} holds no examples", path.display())));
    }
    Ok(out)
}

/// Shuffles with `seed` and moves the last `fraction` of examples (at least
/// one) into the second half of the returned pair.
pub fn shuffle_split(mut lines: Vec<String>, fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    lines.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((lines.len() as f64 * fraction).round() as usize).clamp(1, lines.len().saturating_sub(1).max(1));
    let test = lines.split_off(lines.len() - n_test);
    (lines, test)
}

const COMPANIES: &[&str] = &[
    "acme", "globex", "initech", "umbrella", "stark", "wayne", "tyrell", "cyberdyne", "soylent", "wonka",
    "hooli", "vandelay", "oscorp", "gringotts", "monarch", "nakatomi", "aperture", "massive", "dynamic", "zenith",
    "northwind", "contoso", "fabrikam", "litware", "proseware", "adatum", "tailspin", "wingtip", "fourth", "coho",
];
const SECTORS: &[&str] = &[
    "banking", "insurance", "energy", "mining", "retail", "software", "biotech", "shipping", "telecom", "utilities",
    "chemicals", "aerospace", "semiconductor", "real estate", "media", "automotive", "agriculture", "pharmaceutical",
];
const MOVES_UP: &[&str] = &["rose", "climbed", "jumped", "gained", "advanced", "rallied", "surged", "edged up"];
const MOVES_DOWN: &[&str] = &["fell", "dropped", "slipped", "declined", "slumped", "tumbled", "retreated", "edged down"];
const METRICS: &[&str] = &[
    "revenue", "profit", "earnings", "sales", "margins", "cash flow", "guidance", "dividend", "net income",
    "operating income", "bookings", "orders", "free cash flow", "gross margin",
];
const PERIODS: &[&str] = &[
    "the first quarter", "the second quarter", "the third quarter", "the fourth quarter", "the fiscal year",
    "the past month", "the last six months", "the holiday season", "the previous year",
];
const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "the week", "the session", "early trading"];
const ACTORS: &[&str] = &[
    "analysts", "investors", "traders", "regulators", "economists", "shareholders", "bondholders", "strategists",
    "fund managers", "the central bank", "the board", "executives", "auditors", "brokers",
];
const VERBS: &[&str] = &[
    "expect", "warned about", "raised concerns over", "welcomed", "questioned", "cited", "pointed to", "cheered",
    "downplayed", "focused on", "priced in", "worried about",
];
const EVENTS: &[&str] = &[
    "rising interest rates", "weaker consumer demand", "a surprise rate cut", "higher commodity prices",
    "supply chain delays", "a stronger dollar", "slowing inflation", "new trade tariffs", "a merger announcement",
    "a credit downgrade", "record oil prices", "strong hiring data", "a share buyback", "an earnings miss",
    "an earnings beat", "layoffs at the firm", "a debt offering", "a lawsuit settlement", "lower bond yields",
];
const ADJ: &[&str] = &["strong", "weak", "solid", "mixed", "disappointing", "robust", "modest", "record", "steady", "volatile"];
const UNITS: &[&str] = &["percent", "points", "basis points", "cents", "dollars"];
const FIGURES: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "twelve", "fifteen", "twenty",
    "thirty", "forty", "fifty", "hundred", "1.2", "2.5", "3.1", "4.8", "0.7", "12", "18", "25", "40", "75", "120",
];
const MARKETS: &[&str] = &["stocks", "bonds", "futures", "the index", "the benchmark", "treasuries", "the currency", "gold", "crude oil", "copper"];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn clause(rng: &mut ChaCha8Rng) -> String {
    let moves = if rng.gen_bool(0.5) { MOVES_UP } else { MOVES_DOWN };
    match rng.gen_range(0..8) {
        0 => format!("shares of {} {} {} {} on {}", pick(rng, COMPANIES), pick(rng, moves), pick(rng, FIGURES), pick(rng, UNITS), pick(rng, DAYS)),
        1 => format!("{} reported {} {} for {}", pick(rng, COMPANIES), pick(rng, ADJ), pick(rng, METRICS), pick(rng, PERIODS)),
        2 => format!("{} {} {}", pick(rng, ACTORS), pick(rng, VERBS), pick(rng, EVENTS)),
        3 => format!("{} {} {} {} in {}", pick(rng, MARKETS), pick(rng, moves), pick(rng, FIGURES), pick(rng, UNITS), pick(rng, DAYS)),
        4 => format!("the {} sector {} after {}", pick(rng, SECTORS), pick(rng, moves), pick(rng, EVENTS)),
        5 => format!("{} said {} would {} {} {}", pick(rng, COMPANIES), pick(rng, METRICS), if rng.gen_bool(0.5) { "rise" } else { "fall" }, pick(rng, FIGURES), pick(rng, UNITS)),
        6 => format!("{} of {} {} {} {}", pick(rng, METRICS), pick(rng, COMPANIES), pick(rng, moves), pick(rng, FIGURES), pick(rng, UNITS)),
        _ => format!("{} {} {} {} stocks", pick(rng, ACTORS), pick(rng, VERBS), pick(rng, ADJ), pick(rng, SECTORS)),
    }
}

const JOINERS: &[&str] = &["while", "as", "and", "but", "after", "because", "even as", "since"];

/// Deterministic financial-news style sentences of 5 to 30 words.
pub fn synthetic_corpus(lines: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..lines)
        .map(|_| loop {
            let mut s = clause(&mut rng);
            let extra = rng.gen_range(0..3);
            for _ in 0..extra {
                s.push(' ');
                s.push_str(pick(&mut rng, JOINERS));
                s.push(' ');
                s.push_str(&clause(&mut rng));
            }
            let n = s.split_whitespace().count();
            if (5..=30).contains(&n) {
                break s;
            }
        })
        .collect()
}
