use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tokenize_bytes, Batch, Token};
use crate::error::{Error, Result};

const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";

/// Second-order Markov chain over lowercase letters and space. Each
/// two-symbol context has a few strongly preferred successors plus a small
/// uniform floor, so the stream has learnable structure at two lags.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    /// Cumulative successor distribution per context `(prev2, prev1)`.
    cdf: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(seed: u64) -> Self {
        let a = ALPHABET.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preferred = [0.55, 0.25, 0.1];
        let floor = (1.0 - preferred.iter().sum::<f64>()) / a as f64;
        let cdf = (0..a * a)
            .map(|_| {
                let mut w = vec![floor; a];
                for &p in &preferred {
                    w[rng.gen_range(0..a)] += p;
                }
                let mut acc = 0.0;
                w.iter()
                    .map(|x| {
                        acc += x;
                        acc
                    })
                    .collect()
            })
            .collect();
        MarkovChain { cdf }
    }

    pub fn generate(&self, len: usize, seed: u64) -> Vec<u8> {
        let a = ALPHABET.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut p2, mut p1) = (rng.gen_range(0..a), rng.gen_range(0..a));
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let cdf = &self.cdf[p2 * a + p1];
            let u: f64 = rng.gen::<f64>() * cdf[a - 1];
            let next = cdf.partition_point(|&c| c <= u).min(a - 1);
            out.push(ALPHABET[next]);
            p2 = p1;
            p1 = next;
        }
        out
    }

    /// Average negative log-likelihood per symbol of the chain itself along
    /// a sampled path: the loss a perfect model would reach.
    pub fn entropy_rate(&self, len: usize, seed: u64) -> f64 {
        let a = ALPHABET.len();
        let text = self.generate(len, seed);
        let idx: Vec<usize> = text
            .iter()
            .map(|c| ALPHABET.iter().position(|x| x == c).unwrap_or(0))
            .collect();
        let mut nll = 0.0;
        for w in idx.windows(3) {
            let cdf = &self.cdf[w[0] * a + w[1]];
            let lo = if w[2] == 0 { 0.0 } else { cdf[w[2] - 1] };
            nll -= ((cdf[w[2]] - lo) / cdf[a - 1]).ln();
        }
        nll / idx.len().saturating_sub(2).max(1) as f64
    }
}

/// Training and held-out token streams.
#[derive(Debug, Clone)]
pub struct Corpus {
    train: Vec<Token>,
    val: Vec<Token>,
}

impl Corpus {
    pub fn new(train: Vec<Token>, val: Vec<Token>) -> Self {
        Corpus { train, val }
    }

    /// Train and validation streams are drawn from the same chain with
    /// disjoint generator seeds.
    pub fn synthetic(chain_seed: u64, train_len: usize, val_len: usize) -> Self {
        let chain = MarkovChain::new(chain_seed);
        let train = tokenize_bytes(&chain.generate(train_len, chain_seed.wrapping_mul(2).wrapping_add(1)));
        let val = tokenize_bytes(&chain.generate(val_len, chain_seed.wrapping_mul(2).wrapping_add(2)));
        Corpus { train, val }
    }

    /// Raw bytes; the trailing `val_fraction` is held out.
    pub fn from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Self> {
        if !(0.0 < val_fraction && val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie in (0, 1)"));
        }
        let tokens = tokenize_bytes(bytes);
        let split = ((tokens.len() as f64) * (1.0 - val_fraction)).floor() as usize;
        let (train, val) = tokens.split_at(split);
        Ok(Corpus {
            train: train.to_vec(),
            val: val.to_vec(),
        })
    }

    pub fn train(&self) -> &[Token] {
        &self.train
    }

    pub fn val(&self) -> &[Token] {
        &self.val
    }

    /// Global training batch for iteration `iter`: a pure function of
    /// `(seed, iter)`, independent of any earlier draws.
    pub fn train_batch(&self, seed: u64, iter: usize, rows: usize, width: usize) -> Result<Batch> {
        let stream = seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        sample_windows(&self.train, stream, rows, width, "train corpus")
    }

    /// Fixed validation batches drawn once from the held-out stream.
    pub fn val_batches(&self, seed: u64, count: usize, rows: usize, width: usize) -> Result<Vec<Batch>> {
        (0..count)
            .map(|i| {
                let stream = seed.wrapping_add(0xA5A5_0000_0000 + i as u64);
                sample_windows(&self.val, stream, rows, width, "validation corpus")
            })
            .collect()
    }
}

fn sample_windows(tokens: &[Token], seed: u64, rows: usize, width: usize, what: &str) -> Result<Batch> {
    if tokens.len() < width {
        return Err(Error::config(
            what,
            format!("{} tokens is shorter than one window of {width}", tokens.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rows * width);
    for _ in 0..rows {
        let start = rng.gen_range(0..=tokens.len() - width);
        out.extend_from_slice(&tokens[start..start + width]);
    }
    Batch::new(out, width)
}
