//! Discrete action tokens: per-dimension DCT over the horizon, uniform
//! quantization of the coefficients, then byte-pair encoding of the resulting
//! symbol stream.
//!
//! Coefficients are flattened dimension-major (all `H` coefficients of dim 0,
//! then dim 1, ...). A quantized coefficient `q` becomes base symbol
//! `q + symbol_offset`; merged symbols take ids from `2·offset + 1` upward.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::episode::write_atomic;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("cannot train merges on an empty corpus")]
    EmptyCorpus,
    #[error("token {token} is outside the vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("coefficient {index} quantizes to {q}, beyond ±{limit}")]
    CoefficientOverflow { index: usize, q: i64, limit: i64 },
    #[error("token sequence was produced by a different tokenizer")]
    FingerprintMismatch,
    #[error("merge table I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub horizon: usize,
    pub unified_dim: usize,
    pub quant_step: f64,
    pub bpe_vocab_size: usize,
    pub symbol_offset: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            unified_dim: crate::action::UNIFIED_DIM,
            quant_step: 0.01,
            bpe_vocab_size: 256,
            symbol_offset: 63,
        }
    }
}

impl TokenizerConfig {
    pub fn alphabet_size(&self) -> usize {
        2 * self.symbol_offset as usize + 1
    }

    pub fn stream_len(&self) -> usize {
        self.horizon * self.unified_dim
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        let bad = |m: &str| Err(TokenizerError::InvalidConfig(m.to_string()));
        if self.horizon == 0 || self.unified_dim == 0 {
            return bad("horizon and unified_dim must be ≥ 1");
        }
        if !(self.quant_step > 0.0 && self.quant_step.is_finite()) {
            return bad("quant_step must be a positive finite number");
        }
        if self.bpe_vocab_size < 256 {
            return bad("bpe_vocab_size must be ≥ 256");
        }
        if self.bpe_vocab_size < self.alphabet_size() {
            return bad("bpe_vocab_size is smaller than the base alphabet");
        }
        if self.bpe_vocab_size > u32::MAX as usize {
            return bad("bpe_vocab_size does not fit in u32");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub fingerprint: Fingerprint,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `c_k = s_k Σ_n x_n cos(π (2n+1) k / 2H)`, with `s_0 = √(1/H)`, `s_k = √(2/H)`.
fn dct_basis(h: usize) -> Vec<f64> {
    let n = h as f64;
    let mut b = vec![0.0; h * h];
    for k in 0..h {
        let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..h {
            b[k * h + i] = s * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    b
}

/// Orthonormal DCT-II.
pub fn dct_forward(signal: &[f64]) -> Vec<f64> {
    let h = signal.len();
    let b = dct_basis(h);
    (0..h)
        .map(|k| (0..h).map(|i| b[k * h + i] * signal[i]).sum())
        .collect()
}

/// Orthonormal DCT-III, the inverse of [`dct_forward`].
pub fn dct_inverse(coeffs: &[f64]) -> Vec<f64> {
    let h = coeffs.len();
    let b = dct_basis(h);
    (0..h)
        .map(|i| (0..h).map(|k| b[k * h + i] * coeffs[k]).sum())
        .collect()
}

/// Nearest multiple of `step`, ties away from zero.
pub fn quantize(coeffs: &[f64], step: f64) -> Vec<i64> {
    coeffs.iter().map(|c| (c / step).round() as i64).collect()
}

pub fn dequantize(q: &[i64], step: f64) -> Vec<f64> {
    q.iter().map(|&v| v as f64 * step).collect()
}

/// Most frequent adjacent pair over the corpus; ties go to the smallest pair.
fn best_pair(corpus: &[Vec<u32>]) -> Option<((u32, u32), usize)> {
    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    for seq in corpus {
        for w in seq.windows(2) {
            *counts.entry((w[0], w[1])).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
}

fn merge_in_place(seq: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    if seq.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Learns up to `vocab_size − alphabet_size` merges. New ids are assigned
/// consecutively from `alphabet_size`. Training stops early once no sequence
/// has two symbols left.
pub fn bpe_train(
    corpus: &[Vec<u32>],
    alphabet_size: usize,
    vocab_size: usize,
) -> Result<Vec<(u32, u32)>, TokenizerError> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut work: Vec<Vec<u32>> = corpus.to_vec();
    let mut merges = Vec::new();
    for id in alphabet_size..vocab_size {
        let Some((pair, _)) = best_pair(&work) else {
            break;
        };
        for seq in &mut work {
            merge_in_place(seq, pair, id as u32);
        }
        merges.push(pair);
    }
    Ok(merges)
}

/// Applies merges in rank order.
pub fn bpe_apply(symbols: &[u32], merges: &[(u32, u32)], alphabet_size: usize) -> Vec<u32> {
    let mut seq = symbols.to_vec();
    for (rank, &pair) in merges.iter().enumerate() {
        if seq.len() < 2 {
            break;
        }
        merge_in_place(&mut seq, pair, (alphabet_size + rank) as u32);
    }
    seq
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MergeFile {
    config: TokenizerConfig,
    scale: Vec<f64>,
    merges: Vec<(u32, u32, u32)>,
    fingerprint: String,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    config: TokenizerConfig,
    scale: Vec<f64>,
    merges: Vec<(u32, u32)>,
    basis: Vec<f64>,
    expansions: Vec<Vec<u32>>,
    fingerprint: Fingerprint,
}

impl Tokenizer {
    /// Builds a tokenizer from explicit parts.
    pub fn from_parts(
        config: TokenizerConfig,
        scale: Vec<f64>,
        merges: Vec<(u32, u32)>,
    ) -> Result<Self, TokenizerError> {
        config.validate()?;
        if scale.len() != config.unified_dim || scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(TokenizerError::InvalidConfig(
                "scale must have one positive entry per unified dim".into(),
            ));
        }
        let alpha = config.alphabet_size();
        if alpha + merges.len() > config.bpe_vocab_size {
            return Err(TokenizerError::InvalidConfig("more merges than vocabulary slots".into()));
        }
        let mut expansions: Vec<Vec<u32>> = (0..alpha as u32).map(|s| vec![s]).collect();
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let id = alpha + rank;
            if l as usize >= id || r as usize >= id {
                return Err(TokenizerError::InvalidConfig(format!(
                    "merge {rank} refers to a symbol not yet defined"
                )));
            }
            let mut e = expansions[l as usize].clone();
            e.extend_from_slice(&expansions[r as usize]);
            expansions.push(e);
        }
        let fingerprint = fingerprint_of(&config, &scale, &merges);
        Ok(Self {
            basis: dct_basis(config.horizon),
            config,
            scale,
            merges,
            expansions,
            fingerprint,
        })
    }

    /// Fits the scale vector to the corpus and trains the merge table.
    ///
    /// A dim keeps unit scale unless its largest coefficient would not fit the
    /// symbol range at resolution `γ`, in which case it is stretched just enough.
    pub fn train(
        chunks: &[(Array2<f64>, Vec<bool>)],
        config: TokenizerConfig,
    ) -> Result<Self, TokenizerError> {
        config.validate()?;
        if chunks.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let (h, d) = (config.horizon, config.unified_dim);
        let basis = dct_basis(h);
        let mut peak = vec![0.0f64; d];
        for (x, mask) in chunks {
            check_shape(x, mask, &config)?;
            for j in 0..d {
                if !mask[j] {
                    continue;
                }
                for k in 0..h {
                    let c: f64 = (0..h).map(|i| basis[k * h + i] * x[[i, j]]).sum();
                    peak[j] = peak[j].max(c.abs());
                }
            }
        }
        // Half a step of headroom below the last representable symbol.
        let reach = (config.symbol_offset as f64 - 0.5) * config.quant_step;
        let scale: Vec<f64> = peak.iter().map(|&p| (p / reach).max(1.0)).collect();
        let unit = Self::from_parts(config, scale.clone(), Vec::new())?;
        let corpus = chunks
            .iter()
            .map(|(x, m)| unit.symbols(x, m))
            .collect::<Result<Vec<_>, _>>()?;
        let merges = bpe_train(&corpus, config.alphabet_size(), config.bpe_vocab_size)?;
        Self::from_parts(config, scale, merges)
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn vocab_size(&self) -> usize {
        self.config.bpe_vocab_size
    }

    /// Largest elementwise reconstruction error that [`Tokenizer::encode`]
    /// followed by [`Tokenizer::decode`] can introduce on dim `j`.
    pub fn error_bound(&self, j: usize) -> f64 {
        self.config.quant_step * self.scale[j] * (self.config.horizon as f64).sqrt()
    }

    /// Base-symbol stream before merging. Masked dims are treated as zero.
    pub fn symbols(&self, x: &Array2<f64>, mask: &[bool]) -> Result<Vec<u32>, TokenizerError> {
        check_shape(x, mask, &self.config)?;
        let (h, d) = (self.config.horizon, self.config.unified_dim);
        let off = self.config.symbol_offset as i64;
        let mut out = Vec::with_capacity(h * d);
        for j in 0..d {
            for k in 0..h {
                let q = if mask[j] {
                    let c: f64 = (0..h).map(|i| self.basis[k * h + i] * x[[i, j]]).sum();
                    (c / (self.scale[j] * self.config.quant_step)).round() as i64
                } else {
                    0
                };
                if q.abs() > off {
                    return Err(TokenizerError::CoefficientOverflow {
                        index: j * h + k,
                        q,
                        limit: off,
                    });
                }
                out.push((q + off) as u32);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, x: &Array2<f64>, mask: &[bool]) -> Result<TokenSequence, TokenizerError> {
        let symbols = self.symbols(x, mask)?;
        Ok(TokenSequence {
            tokens: bpe_apply(&symbols, &self.merges, self.config.alphabet_size()),
            fingerprint: self.fingerprint,
        })
    }

    /// Expands merged tokens back to the base-symbol stream.
    pub fn expand(&self, tokens: &[u32]) -> Result<Vec<u32>, TokenizerError> {
        let mut out = Vec::with_capacity(self.config.stream_len());
        for &t in tokens {
            let e = self.expansions.get(t as usize).ok_or(TokenizerError::UnknownToken {
                token: t,
                vocab: self.expansions.len(),
            })?;
            out.extend_from_slice(e);
        }
        Ok(out)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<Array2<f64>, TokenizerError> {
        if seq.fingerprint != self.fingerprint {
            return Err(TokenizerError::FingerprintMismatch);
        }
        self.decode_tokens(&seq.tokens)
    }

    /// Like [`Tokenizer::decode`] for raw ids, e.g. ones predicted by a model.
    pub fn decode_tokens(&self, tokens: &[u32]) -> Result<Array2<f64>, TokenizerError> {
        let symbols = self.expand(tokens)?;
        let (h, d) = (self.config.horizon, self.config.unified_dim);
        if symbols.len() != h * d {
            return Err(TokenizerError::ShapeMismatch {
                expected: (h, d),
                got: (symbols.len() / d.max(1), symbols.len() % d.max(1)),
            });
        }
        let off = self.config.symbol_offset as i64;
        let mut x = Array2::zeros((h, d));
        for j in 0..d {
            let step = self.scale[j] * self.config.quant_step;
            for i in 0..h {
                x[[i, j]] = (0..h)
                    .map(|k| self.basis[k * h + i] * (symbols[j * h + k] as i64 - off) as f64 * step)
                    .sum();
            }
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let alpha = self.config.alphabet_size() as u32;
        let file = MergeFile {
            config: self.config,
            scale: self.scale.clone(),
            merges: self
                .merges
                .iter()
                .enumerate()
                .map(|(r, &(a, b))| (a, b, alpha + r as u32))
                .collect(),
            fingerprint: self.fingerprint.to_hex(),
        };
        let json = serde_json::to_vec_pretty(&file).map_err(|e| TokenizerError::Io(e.to_string()))?;
        write_atomic(path, &json).map_err(|e| TokenizerError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let data = std::fs::read(path).map_err(|e| TokenizerError::Io(format!("{}: {e}", path.display())))?;
        let file: MergeFile = serde_json::from_slice(&data).map_err(|e| TokenizerError::Io(e.to_string()))?;
        let alpha = file.config.alphabet_size() as u32;
        for (r, &(_, _, id)) in file.merges.iter().enumerate() {
            if id != alpha + r as u32 {
                return Err(TokenizerError::Io(format!("merge {r} has id {id}, expected {}", alpha + r as u32)));
            }
        }
        let merges = file.merges.iter().map(|&(a, b, _)| (a, b)).collect();
        let tok = Self::from_parts(file.config, file.scale, merges)?;
        if tok.fingerprint.to_hex() != file.fingerprint {
            return Err(TokenizerError::FingerprintMismatch);
        }
        Ok(tok)
    }
}

fn check_shape(x: &Array2<f64>, mask: &[bool], cfg: &TokenizerConfig) -> Result<(), TokenizerError> {
    let expected = (cfg.horizon, cfg.unified_dim);
    if x.dim() != expected || mask.len() != cfg.unified_dim {
        return Err(TokenizerError::ShapeMismatch {
            expected,
            got: x.dim(),
        });
    }
    Ok(())
}

fn fingerprint_of(cfg: &TokenizerConfig, scale: &[f64], merges: &[(u32, u32)]) -> Fingerprint {
    let mut h = Sha256::new();
    h.update(b"eg2a-tokenizer-v1");
    for v in [cfg.horizon, cfg.unified_dim, cfg.bpe_vocab_size, cfg.symbol_offset as usize] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(cfg.quant_step.to_bits().to_le_bytes());
    for s in scale {
        h.update(s.to_bits().to_le_bytes());
    }
    for &(a, b) in merges {
        h.update(a.to_le_bytes());
        h.update(b.to_le_bytes());
    }
    Fingerprint(h.finalize().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Unnormalized DCT-II straight from the cosine sum, rescaled afterwards.
    fn naive_dct(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|k| {
                let raw: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * (std::f64::consts::PI / n * (i as f64 + 0.5) * k as f64).cos())
                    .sum();
                raw * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
            })
            .collect()
    }

    fn small_cfg() -> TokenizerConfig {
        TokenizerConfig {
            horizon: 4,
            unified_dim: 3,
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let c = dct_forward(&[0.7; 4]);
        assert!((c[0] - 0.7 * 2.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_matches_naive_transform() {
        let x = [1.0, 0.0, 0.0, 0.0];
        for (a, b) in dct_forward(&x).iter().zip(naive_dct(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_rounding() {
        let g = 0.01;
        assert_eq!(quantize(&[0.0], g), vec![0]);
        assert_eq!(quantize(&[0.49 * g, 0.51 * g, -0.51 * g], g), vec![0, 1, -1]);
        assert_eq!(quantize(&[2.5, -2.5], 1.0), vec![3, -3]);
    }

    #[test]
    fn quantize_error_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Vec<f64> = (0..10_000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let back = dequantize(&quantize(&c, 0.01), 0.01);
        for (a, b) in c.iter().zip(back) {
            assert!((a - b).abs() <= 0.005 + 1e-12);
        }
    }

    #[test]
    fn bpe_single_merge() {
        let m = bpe_train(&[vec![0, 0, 0, 0]], 1, 2).unwrap();
        assert_eq!(m, vec![(0, 0)]);
    }

    #[test]
    fn bpe_tie_prefers_smallest_pair() {
        // (0,1) and (1,0) both occur twice.
        let m = bpe_train(&[vec![0, 1, 0, 1, 0]], 2, 3).unwrap();
        assert_eq!(m, vec![(0, 1)]);
        let m = bpe_train(&[vec![1, 0, 1, 0, 1]], 2, 3).unwrap();
        assert_eq!(m, vec![(0, 1)]);
    }

    #[test]
    fn bpe_empty_corpus() {
        assert!(matches!(bpe_train(&[], 4, 8), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(bpe_train(&[vec![]], 4, 8), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn first_merge_matches_brute_force_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corpus: Vec<Vec<u32>> = (0..40)
            .map(|_| (0..30).map(|_| rng.random_range(0..5)).collect())
            .collect();
        let mut best = ((0, 0), 0usize);
        for a in 0..5u32 {
            for b in 0..5u32 {
                let mut n = 0;
                for s in &corpus {
                    for i in 0..s.len() - 1 {
                        if s[i] == a && s[i + 1] == b {
                            n += 1;
                        }
                    }
                }
                if n > best.1 {
                    best = ((a, b), n);
                }
            }
        }
        let m = bpe_train(&corpus, 5, 6).unwrap();
        assert_eq!(m[0], best.0);
    }

    #[test]
    fn zero_chunk_is_shortest_and_decodes_to_zero() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = vec![true; 3];
        let mut corpus = vec![(Array2::zeros((4, 3)), mask.clone())];
        for _ in 0..50 {
            corpus.push((Array2::from_shape_fn((4, 3), |_| rng.random_range(-0.2..0.2)), mask.clone()));
        }
        let tok = Tokenizer::train(&corpus, cfg).unwrap();
        let zero = tok.encode(&Array2::zeros((4, 3)), &mask).unwrap();
        for (x, m) in &corpus {
            assert!(zero.len() <= tok.encode(x, m).unwrap().len());
        }
        assert!(tok.decode(&zero).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_dims_decode_to_zero() {
        let tok = Tokenizer::from_parts(small_cfg(), vec![1.0; 3], vec![]).unwrap();
        let x = Array2::from_elem((4, 3), 0.3);
        let mask = vec![true, false, true];
        let y = tok.decode(&tok.encode(&x, &mask).unwrap()).unwrap();
        assert!(y.column(1).iter().all(|v| *v == 0.0));
        assert!((y[[0, 0]] - 0.3).abs() <= tok.error_bound(0));
    }

    #[test]
    fn constant_velocity_round_trip() {
        let cfg = small_cfg();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 + 1.0) * 0.03 * (j as f64 - 1.0));
        let mask = vec![true; 3];
        let tok = Tokenizer::train(&[(x.clone(), mask.clone())], cfg).unwrap();
        let y = tok.decode(&tok.encode(&x, &mask).unwrap()).unwrap();
        for ((i, j), v) in x.indexed_iter() {
            assert!((v - y[[i, j]]).abs() <= tok.error_bound(j));
        }
    }

    #[test]
    fn overflow_and_unknown_tokens_are_errors() {
        let tok = Tokenizer::from_parts(small_cfg(), vec![1.0; 3], vec![]).unwrap();
        let big = Array2::from_elem((4, 3), 10.0);
        assert!(matches!(
            tok.encode(&big, &[true; 3]),
            Err(TokenizerError::CoefficientOverflow { .. })
        ));
        assert!(matches!(tok.decode_tokens(&[9999]), Err(TokenizerError::UnknownToken { .. })));
        assert!(matches!(tok.decode_tokens(&[63, 63]), Err(TokenizerError::ShapeMismatch { .. })));
        assert!(matches!(
            tok.encode(&Array2::zeros((3, 3)), &[true; 3]),
            Err(TokenizerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fitted_scale_absorbs_large_values() {
        let x = Array2::from_elem((4, 3), 3.0);
        let tok = Tokenizer::train(&[(x.clone(), vec![true; 3])], small_cfg()).unwrap();
        assert!(tok.scale()[0] > 1.0);
        let y = tok.decode(&tok.encode(&x, &[true; 3]).unwrap()).unwrap();
        assert!((y[[0, 0]] - 3.0).abs() <= tok.error_bound(0));
    }

    #[test]
    fn merge_table_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus: Vec<_> = (0..20)
            .map(|_| (Array2::from_shape_fn((4, 3), |_| rng.random_range(-0.1..0.1)), vec![true; 3]))
            .collect();
        let tok = Tokenizer::train(&corpus, small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("merges.json");
        tok.save(&p).unwrap();
        let back = Tokenizer::load(&p).unwrap();
        assert_eq!(back.merges(), tok.merges());
        assert_eq!(back.fingerprint(), tok.fingerprint());
    }

    #[test]
    fn foreign_sequence_is_rejected() {
        let a = Tokenizer::from_parts(small_cfg(), vec![1.0; 3], vec![]).unwrap();
        let b = Tokenizer::from_parts(small_cfg(), vec![2.0; 3], vec![]).unwrap();
        let s = a.encode(&Array2::zeros((4, 3)), &[true; 3]).unwrap();
        assert!(matches!(b.decode(&s), Err(TokenizerError::FingerprintMismatch)));
    }

    proptest! {
        #[test]
        fn dct_round_trip_and_parseval(x in prop::collection::vec(-10.0f64..10.0, 1..32)) {
            let c = dct_forward(&x);
            let back = dct_inverse(&c);
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let ec: f64 = c.iter().map(|v| v * v).sum();
            prop_assert!((ex - ec).abs() < 1e-9 * ex.max(1.0));
            for (a, b) in c.iter().zip(naive_dct(&x)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn bpe_is_lossless(seq in prop::collection::vec(0u32..6, 1..60)) {
            let merges = bpe_train(&[seq.clone()], 6, 20).unwrap();
            let tok = bpe_apply(&seq, &merges, 6);
            let mut table: Vec<Vec<u32>> = (0..6).map(|s| vec![s]).collect();
            for &(a, b) in &merges {
                let mut e = table[a as usize].clone();
                e.extend_from_slice(&table[b as usize]);
                table.push(e);
            }
            let flat: Vec<u32> = tok.iter().flat_map(|&t| table[t as usize].clone()).collect();
            prop_assert_eq!(flat, seq);
        }
    }
}
