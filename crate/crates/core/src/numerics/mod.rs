//! Toy byte-level causal language model over flat parameter vectors.

mod corpus;
mod model;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::real::{Precision, Real};

pub use corpus::{Corpus, MarkovChain};
pub use model::{backward, forward_loss, loss_and_grad};
use model::token_losses;

/// Token id; bytes map to their unsigned value.
pub type Token = u32;

pub fn tokenize_bytes(text: &[u8]) -> Vec<Token> {
    text.iter().map(|&b| Token::from(b)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            seq_len: 16,
            precision: Precision::Double,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("seq_len", self.seq_len),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!(
                    "embed_dim {} is not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn param_count(&self) -> usize {
        let (v, d, l, n) = (
            self.vocab_size,
            self.embed_dim,
            self.seq_len,
            self.num_layers,
        );
        v * d + l * d + n * (12 * d * d + 13 * d) + 2 * d
    }

    /// GPT-2 style initialization: N(0, 0.02) weights, zero biases, unit
    /// layer-norm gains.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamVector<T> {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut p = ParamVector::zeros(layout.total);
        let mut fill = |r: std::ops::Range<usize>, p: &mut ParamVector<T>| {
            for x in &mut p[r] {
                *x = T::of(normal.sample(&mut rng));
            }
        };
        fill(layout.wte.clone(), &mut p);
        fill(layout.wpe.clone(), &mut p);
        for blk in &layout.blocks {
            p[blk.ln1_g.clone()].fill(T::one());
            fill(blk.w_qkv.clone(), &mut p);
            fill(blk.w_o.clone(), &mut p);
            p[blk.ln2_g.clone()].fill(T::one());
            fill(blk.w_fc.clone(), &mut p);
            fill(blk.w_proj.clone(), &mut p);
        }
        p[layout.lnf_g.clone()].fill(T::one());
        p
    }
}

type Span = std::ops::Range<usize>;

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub ln1_g: Span,
    pub ln1_b: Span,
    pub w_qkv: Span,
    pub b_qkv: Span,
    pub w_o: Span,
    pub b_o: Span,
    pub ln2_g: Span,
    pub ln2_b: Span,
    pub w_fc: Span,
    pub b_fc: Span,
    pub w_proj: Span,
    pub b_proj: Span,
}

/// Offsets of every tensor inside the flat parameter vector. Weight matrices
/// are stored row-major as `in x out`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub wte: Span,
    pub wpe: Span,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Span,
    pub lnf_b: Span,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let wte = take(cfg.vocab_size * d);
        let wpe = take(cfg.seq_len * d);
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        Layout {
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            total: at,
        }
    }
}

/// Rows of `width` tokens; row `i` predicts `tokens[i][1..]` from `tokens[i][..width-1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    tokens: Vec<Token>,
    width: usize,
}

impl Batch {
    pub fn new(tokens: Vec<Token>, width: usize) -> Result<Self> {
        if width < 2 {
            return Err(Error::config("batch", "rows need at least two tokens"));
        }
        if !tokens.len().is_multiple_of(width) {
            return Err(Error::config(
                "batch",
                format!("{} tokens do not form rows of {width}", tokens.len()),
            ));
        }
        Ok(Batch { tokens, width })
    }

    pub fn from_rows(rows: &[Vec<Token>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::config("batch", "ragged rows"));
        }
        Batch::new(rows.concat(), width)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.width - 1
    }

    pub fn row(&self, i: usize) -> &[Token] {
        &self.tokens[i * self.width..(i + 1) * self.width]
    }

    /// Contiguous block of rows `[start, start + count)`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Batch {
        Batch {
            tokens: self.tokens[start * self.width..(start + count) * self.width].to_vec(),
            width: self.width,
        }
    }

    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let width = parts.first().map_or(0, |b| b.width);
        if parts.iter().any(|b| b.width != width) {
            return Err(Error::config("batch", "cannot concatenate different widths"));
        }
        Batch::new(parts.iter().flat_map(|b| b.tokens.iter().copied()).collect(), width)
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.positions() > cfg.seq_len {
            return Err(Error::config(
                "seq_len",
                format!("batch rows hold {} positions, model supports {}", self.positions(), cfg.seq_len),
            ));
        }
        if let Some(&t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::config(
                "vocab_size",
                format!("token {t} out of range for vocabulary {}", cfg.vocab_size),
            ));
        }
        Ok(())
    }
}

/// Largest relative error between the analytic gradient and central finite
/// differences on `num_coords` randomly chosen coordinates.
pub fn grad_check<T: Real>(
    params: &ParamVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    epsilon: f64,
    num_coords: usize,
    seed: u64,
) -> Result<f64> {
    let grad = backward(params, cfg, batch)?;
    grad_check_against(params, cfg, batch, &grad, epsilon, num_coords, seed)
}

/// As [`grad_check`], but against a caller-supplied gradient.
pub fn grad_check_against<T: Real>(
    params: &ParamVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    analytic: &ParamVector<T>,
    epsilon: f64,
    num_coords: usize,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    if num_coords > params.len() {
        return Err(Error::config(
            "num_coords",
            format!("{num_coords} exceeds parameter count {}", params.len()),
        ));
    }
    analytic.check_len("gradient", params.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = sample(&mut rng, params.len(), num_coords).into_vec();
    let errs = coordinate_errors(params, cfg, batch, analytic, epsilon, &coords)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

/// Relative error of the analytic gradient against central finite
/// differences at each listed coordinate.
pub fn coordinate_errors<T: Real>(
    params: &ParamVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    analytic: &ParamVector<T>,
    epsilon: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    analytic.check_len("gradient", params.len())?;
    let mut probe = params.clone();
    let eps = T::of(epsilon);
    let mut errs = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= params.len() {
            return Err(Error::config("coords", format!("coordinate {i} out of range")));
        }
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = token_losses(&probe, cfg, batch)?;
        probe[i] = orig - eps;
        let down = token_losses(&probe, cfg, batch)?;
        probe[i] = orig;
        // Central difference of the mean loss, differencing position by
        // position before averaging so that the rounding of the two means
        // does not swamp small gradients. The step is the representable one.
        let h = (orig + eps).as_f64() - (orig - eps).as_f64();
        let diff: f64 = up.iter().zip(&down).map(|(&a, &b)| a.as_f64() - b.as_f64()).sum();
        let numeric = diff / (up.len() as f64 * h);
        let a = analytic[i].as_f64();
        errs.push((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12));
    }
    Ok(errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            seq_len: 6,
            precision: Precision::Double,
        }
    }

    #[test]
    fn tokenize_is_identity_on_bytes() {
        assert!(tokenize_bytes(b"").is_empty());
        assert_eq!(tokenize_bytes(&[0x41, 0x42]), vec![65, 66]);
        let kib: Vec<u8> = (0..1024).map(|i| (i % 256) as u8).collect();
        assert_eq!(tokenize_bytes(&kib).len(), 1024);
        assert_eq!(tokenize_bytes(&[0xff]), vec![255]);
    }

    #[test]
    fn layout_matches_param_count() {
        for cfg in [tiny(), ModelConfig::default()] {
            let layout = cfg.layout();
            assert_eq!(layout.total, cfg.param_count());
            let p: ParamVector<f64> = cfg.init_params(0);
            assert_eq!(p.len(), cfg.param_count());
            assert_eq!(layout.lnf_b.end, layout.total);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = tiny();
        cfg.num_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "num_heads"));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        let a: ParamVector<f64> = cfg.init_params(3);
        let b: ParamVector<f64> = cfg.init_params(3);
        let c: ParamVector<f64> = cfg.init_params(4);
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
        let l = cfg.layout();
        assert!(a[l.blocks[0].b_qkv.clone()].iter().all(|&x| x == 0.0));
        assert!(a[l.lnf_g.clone()].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn grad_check_rejects_bad_arguments() {
        let cfg = tiny();
        let p: ParamVector<f64> = cfg.init_params(0);
        let batch = Batch::from_rows(&[vec![1, 2, 3]]).unwrap();
        assert!(grad_check(&p, &cfg, &batch, 0.0, 4, 0).is_err());
        assert!(grad_check(&p, &cfg, &batch, 1e-5, p.len() + 1, 0).is_err());
    }

    #[test]
    fn grad_check_zero_gradient_construction() {
        let cfg = ModelConfig {
            vocab_size: 1,
            ..tiny()
        };
        let p: ParamVector<f64> = cfg.init_params(1);
        let batch = Batch::from_rows(&[vec![0; 7], vec![0; 7]]).unwrap();
        let err = grad_check(&p, &cfg, &batch, 1e-5, 64, 0).unwrap();
        assert!(err.abs() < 1e-10, "err {err}");
    }

    #[test]
    fn grad_check_tiny_model_double() {
        let cfg = tiny();
        let p: ParamVector<f64> = cfg.init_params(5);
        let batch = Batch::from_rows(&[vec![1, 4, 2, 9, 10, 0, 3], vec![7, 7, 1, 2, 5, 6, 8]]).unwrap();
        let err = grad_check(&p, &cfg, &batch, 1e-5, 64, 9).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let cfg = tiny();
        let p: ParamVector<f64> = cfg.init_params(5);
        let batch = Batch::from_rows(&[vec![1, 4, 2, 9, 10, 0, 3]]).unwrap();
        let mut g = backward(&p, &cfg, &batch).unwrap();
        for x in g.iter_mut() {
            *x *= 1.5;
        }
        let err = grad_check_against(&p, &cfg, &batch, &g, 1e-5, 32, 9).unwrap();
        assert!(err > 0.1);
    }
}
