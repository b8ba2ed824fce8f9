//! Shared fixtures: deterministic synthetic corpora and small configs.
#![allow(dead_code)]

use mohd::config::{MohdConfig, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "st", "th", "sh", "pr", "gr", "cl"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "nd", "ll", "ng", "ck"];

fn lexicon(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let syllables = 1 + rng.random_range(0..3usize.min(1 + words.len() / 40));
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Index drawn with probability ∝ 1/(i+1).
fn zipf(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

fn zipf_cdf(n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
    let z: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v / z;
            acc
        })
        .collect()
}

/// English-like prose: a Zipfian lexicon with a sparse word-bigram chain,
/// capitalised sentences and paragraph breaks. Deterministic in `seed`.
pub fn prose(bytes: usize, seed: u64) -> Vec<u8> {
    prose_with(bytes, seed, 400)
}

/// [`prose`] over a lexicon of `vocab` words.
pub fn prose_with(bytes: usize, seed: u64, vocab: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lexicon(&mut rng, vocab);
    let cdf = zipf_cdf(words.len());
    let succ: Vec<Vec<usize>> = (0..words.len())
        .map(|_| (0..6).map(|_| zipf(&mut rng, &cdf)).collect())
        .collect();
    let mut out = String::with_capacity(bytes + 64);
    let mut prev = zipf(&mut rng, &cdf);
    while out.len() < bytes {
        let len = 4 + rng.random_range(0..10);
        for k in 0..len {
            let w = if rng.random_bool(0.7) {
                succ[prev][rng.random_range(0..6)]
            } else {
                zipf(&mut rng, &cdf)
            };
            let word = &words[w];
            if k == 0 {
                let mut c = word.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push_str(word);
            }
            if k + 1 < len {
                out.push(if rng.random_bool(0.08) { ',' } else { ' ' });
                if out.ends_with(',') {
                    out.push(' ');
                }
            }
            prev = w;
        }
        out.push(if rng.random_bool(0.1) { '?' } else { '.' });
        out.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
    }
    out.truncate(bytes);
    out.into_bytes()
}

/// Code-like text: short functions with braces, operators and numbers.
pub fn code(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["count", "total", "index", "value", "buf", "node", "len", "acc", "item", "key"];
    let types = ["u32", "usize", "f64", "i64", "bool"];
    let ops = ["+", "-", "*", "<<", "&", "|"];
    let mut out = String::with_capacity(bytes + 128);
    while out.len() < bytes {
        let f = names[rng.random_range(0..names.len())];
        let t = types[rng.random_range(0..types.len())];
        out.push_str(&format!("fn {f}_{}(x: {t}) -> {t} {{\n", rng.random_range(0..100)));
        for _ in 0..1 + rng.random_range(0..4) {
            let a = names[rng.random_range(0..names.len())];
            let op = ops[rng.random_range(0..ops.len())];
            out.push_str(&format!("    let {a} = x {op} {};\n", rng.random_range(0..1000)));
        }
        out.push_str("    x\n}\n\n");
    }
    out.truncate(bytes);
    out.into_bytes()
}

pub fn small_model(mohd: bool) -> MohdConfig {
    let mut cfg = MohdConfig::default();
    cfg.model.mohd = mohd;
    cfg.model.d_base = 16;
    cfg.model.heads = 2;
    cfg.model.head_dim = 8;
    cfg.model.ffn_dim = 32;
    cfg.model.depth = 1;
    cfg.router.attn_subdims = 4;
    cfg.router.attn_delta = 0.5;
    cfg.router.attn_shared = 0.25;
    cfg.router.ffn_subdims = 4;
    cfg.router.ffn_delta = 0.5;
    cfg.router.ffn_shared = 0.25;
    cfg
}

pub fn small_run(mohd: bool) -> RunConfig {
    let m = small_model(mohd);
    let mut cfg = RunConfig {
        model: m.model,
        router: m.router,
        ..RunConfig::default()
    };
    cfg.train.seq_len = 16;
    cfg.train.batch = 4;
    cfg.train.steps = 20;
    cfg.train.eval_interval = 10;
    cfg.train.eval_windows = 8;
    cfg.train.lr = 3e-3;
    cfg
}
pub mod oracle;
