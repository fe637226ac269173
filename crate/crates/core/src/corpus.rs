//! Text ingestion, hashing tokenizer, batching and the synthetic STS generator.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub lowercase: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 30_000,
            max_seq_len: 32,
            lowercase: true,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "corpus.vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("corpus.max_seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token ids of one sentence, truncated to `max_seq_len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Token count before truncation.
    pub original_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Empty sequences mark blank lines; loaders skip them.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub left: TokenSequence,
    pub right: TokenSequence,
    pub left_text: String,
    pub right_text: String,
    /// Similarity in `[0, 5]`.
    pub gold: f64,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(line: &str, cfg: &CorpusConfig) -> TokenSequence {
    let mut ids = Vec::new();
    let mut original_len = 0;
    for word in line.split_whitespace() {
        original_len += 1;
        if ids.len() == cfg.max_seq_len {
            continue;
        }
        let h = if cfg.lowercase {
            fnv1a64(word.to_lowercase().as_bytes())
        } else {
            fnv1a64(word.as_bytes())
        };
        ids.push((h % cfg.vocab_size as u64) as u32);
    }
    TokenSequence { ids, original_len }
}

/// One sentence per line; blank lines skipped.
pub fn load_corpus(path: &Path, cfg: &CorpusConfig) -> Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| tokenize(l, cfg))
        .filter(|s| !s.is_empty())
        .collect())
}

/// Tab-separated `left \t right \t gold` lines.
pub fn load_sts_pairs(path: &Path, cfg: &CorpusConfig) -> Result<Vec<StsPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected 3 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let gold: f64 = fields[2].trim().parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad gold score {:?}", path.display(), lineno + 1, fields[2]))
        })?;
        if !(0.0..=5.0).contains(&gold) {
            return Err(Error::Format(format!(
                "{}:{}: gold score {gold} outside [0, 5]",
                path.display(),
                lineno + 1
            )));
        }
        let (left, right) = (tokenize(fields[0], cfg), tokenize(fields[1], cfg));
        if left.is_empty() || right.is_empty() {
            continue;
        }
        pairs.push(StsPair {
            left,
            right,
            left_text: fields[0].to_string(),
            right_text: fields[1].to_string(),
            gold,
        });
    }
    Ok(pairs)
}

pub fn write_sts_pairs(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for p in pairs {
        writeln!(f, "{}\t{}\t{}", p.left_text, p.right_text, p.gold).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Generator knobs for [`synth_sts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train_sentences: usize,
    pub n_eval_pairs: usize,
    pub latent_dim: usize,
    /// Content-word vocabulary size.
    pub n_words: usize,
    /// Topic-free filler words drawn uniformly.
    pub n_filler_words: usize,
    /// Probability that a token is a filler word.
    pub filler_prob: f64,
    /// Inverse temperature of the topic-conditioned word distribution.
    pub sharpness: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train_sentences: 8192,
            n_eval_pairs: 2000,
            latent_dim: 16,
            n_words: 2000,
            n_filler_words: 5,
            filler_prob: 0.6,
            sharpness: 4.0,
            min_len: 16,
            max_len: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_train_sentences == 0 || self.n_eval_pairs == 0 || self.latent_dim == 0 {
            return bad("synth counts (n_train, n_eval_pairs, latent_dim) must be >= 1".into());
        }
        if self.n_words == 0 {
            return bad("synth.n_words must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.filler_prob) || (self.filler_prob > 0.0 && self.n_filler_words == 0) {
            return bad(format!("synth.filler_prob {} invalid", self.filler_prob));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "synth sentence length range {}..={} invalid",
                self.min_len, self.max_len
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub corpus: Vec<TokenSequence>,
    pub corpus_text: Vec<String>,
    pub dev: Vec<StsPair>,
    pub test: Vec<StsPair>,
}

/// Gold similarity of two latent vectors: `2.5 * (1 + cos)`.
pub fn gold_score(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok((2.5 * (1.0 + crate::stats::cosine_similarity(u, v)?)).clamp(0.0, 5.0))
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    topics: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn unit_latent(&self, rng: &mut Rng) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.cfg.latent_dim).map(|_| rng.standard_normal()).collect();
            let n = crate::matrix::norm(&v);
            if n > 1e-8 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    fn sentence(&self, latent: &[f64], rng: &mut Rng) -> String {
        let logits: Vec<f64> = self
            .topics
            .iter()
            .map(|t| self.cfg.sharpness * crate::matrix::dot(t, latent))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut cdf = Vec::with_capacity(logits.len());
        let mut acc = 0.0;
        for l in &logits {
            acc += (l - max).exp();
            cdf.push(acc);
        }
        let len = self.cfg.min_len + rng.below(self.cfg.max_len - self.cfg.min_len + 1);
        let words: Vec<String> = (0..len)
            .map(|_| {
                if rng.uniform() < self.cfg.filler_prob {
                    format!("f{}", rng.below(self.cfg.n_filler_words))
                } else {
                    let target = rng.uniform() * acc;
                    let k = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
                    format!("w{k}")
                }
            })
            .collect();
        words.join(" ")
    }

    fn pair(&self, rng: &mut Rng, tok: &CorpusConfig) -> Result<StsPair> {
        let u = self.unit_latent(rng);
        let rho = 2.0 * rng.uniform() - 1.0;
        // unit vector orthogonal to u
        let w = loop {
            let r = self.unit_latent(rng);
            let proj = crate::matrix::dot(&r, &u);
            let o: Vec<f64> = r.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
            let n = crate::matrix::norm(&o);
            if n > 1e-6 || self.cfg.latent_dim == 1 {
                break o.into_iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect::<Vec<_>>();
            }
        };
        let s = (1.0 - rho * rho).max(0.0).sqrt();
        let v: Vec<f64> = if self.cfg.latent_dim == 1 {
            vec![if rho >= 0.0 { u[0] } else { -u[0] }]
        } else {
            u.iter().zip(&w).map(|(a, b)| rho * a + s * b).collect()
        };
        let left_text = self.sentence(&u, rng);
        let right_text = self.sentence(&v, rng);
        Ok(StsPair {
            left: tokenize(&left_text, tok),
            right: tokenize(&right_text, tok),
            left_text,
            right_text,
            gold: gold_score(&u, &v)?,
        })
    }
}

/// Planted-latent corpus with dev/test STS pairs.
///
/// Each content word carries a random topic vector; a sentence with latent
/// `u` draws content words with probability proportional to
/// `exp(sharpness * <u, topic>)` and filler words uniformly. Dev and test
/// pairs come from disjoint sub-streams.
pub fn synth_sts(rng: &Rng, synth: &SynthConfig, tok: &CorpusConfig) -> Result<SynthDataset> {
    synth.validate()?;
    tok.validate()?;
    let mut topic_rng = rng.split(0);
    let topics = (0..synth.n_words)
        .map(|_| (0..synth.latent_dim).map(|_| topic_rng.standard_normal()).collect())
        .collect();
    let generator = Generator { cfg: synth, topics };

    let mut train_rng = rng.split(1);
    let mut corpus_text = Vec::with_capacity(synth.n_train_sentences);
    for _ in 0..synth.n_train_sentences {
        let u = generator.unit_latent(&mut train_rng);
        corpus_text.push(generator.sentence(&u, &mut train_rng));
    }
    let corpus = corpus_text.iter().map(|t| tokenize(t, tok)).collect();

    let mut dev_rng = rng.split(2);
    let mut test_rng = rng.split(3);
    let dev = (0..synth.n_eval_pairs)
        .map(|_| generator.pair(&mut dev_rng, tok))
        .collect::<Result<_>>()?;
    let test = (0..synth.n_eval_pairs)
        .map(|_| generator.pair(&mut test_rng, tok))
        .collect::<Result<_>>()?;
    Ok(SynthDataset {
        corpus,
        corpus_text,
        dev,
        test,
    })
}

/// Index batches for one epoch: a permutation seeded by
/// `(shuffle_seed, epoch)`, cut into full batches; the short tail is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot batch an empty corpus".into()));
    }
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} invalid for corpus of {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(shuffle_seed).split(epoch).shuffle(&mut order);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Iterator over batches of sequences for one epoch.
pub fn batch_iter<'a>(
    corpus: &'a [TokenSequence],
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Vec<&'a TokenSequence>> + 'a> {
    let batches = epoch_batches(corpus.len(), batch_size, shuffle_seed, epoch)?;
    Ok(batches
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| &corpus[i]).collect()))
}
