//! Reproducible synthetic corpora.
//!
//! Each ordinary token owns a fixed pair of Gaussian prototype vectors; an
//! occurrence lasting `d` frames glides linearly from the first to the second
//! and gets per-frame noise. Token sequences follow a per-domain Markov chain
//! whose stationary law is the Zipf unigram, so every position is marginally
//! Zipf-distributed while neighbouring tokens stay correlated through their
//! sememes. Shifted domains add a constant channel offset to every frame.

use super::{derive_seed, write_features, Manifest, ManifestRecord, Utterance};
use crate::error::{Error, Result};
use crate::lexicon::{parse_lexicon, SememeLexicon, SememeSource, SememeVocab, TokenVocab};
use crate::numerics::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub transition_seed: u64,
    /// Per-dimension scale of the constant channel offset (0 for the source domain).
    pub channel_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Total vocabulary size including the three reserved symbols.
    pub vocab_size: usize,
    pub sememe_count: usize,
    pub zipf_exponent: f64,
    pub feature_dim: usize,
    pub frames_per_token: [usize; 2],
    pub noise_scale: f64,
    pub tokens_per_utterance: [usize; 2],
    pub splits: SplitSizes,
    /// The first domain supplies train/dev/test; every other domain gets a test split.
    pub domains: Vec<DomainSpec>,
    /// Weight of the sememe-driven transition kernel against the unigram.
    pub bigram_weight: f64,
    pub sememes_per_token: [usize; 2],
    pub lexicon_coverage: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            sememe_count: 24,
            zipf_exponent: 1.1,
            feature_dim: 80,
            frames_per_token: [8, 12],
            noise_scale: 1.0,
            tokens_per_utterance: [3, 9],
            splits: SplitSizes {
                train: 2000,
                dev: 200,
                test: 200,
            },
            domains: vec![
                DomainSpec {
                    name: "source".into(),
                    transition_seed: 1,
                    channel_offset: 0.0,
                },
                DomainSpec {
                    name: "shifted".into(),
                    transition_seed: 2,
                    channel_offset: 0.3,
                },
            ],
            bigram_weight: 0.6,
            sememes_per_token: [1, 3],
            lexicon_coverage: 0.9,
            seed: 1234,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(m.to_string()));
        if self.vocab_size < 8 {
            return bad("vocab_size must be at least 8");
        }
        if self.sememe_count == 0 {
            return bad("sememe_count must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        let [dmin, dmax] = self.frames_per_token;
        if dmin == 0 || dmin > dmax {
            return bad("frames_per_token needs 1 <= min <= max");
        }
        let [lmin, lmax] = self.tokens_per_utterance;
        if lmin == 0 || lmin > lmax {
            return bad("tokens_per_utterance needs 1 <= min <= max");
        }
        if dmin * lmin < 7 {
            return bad("shortest utterance must have at least 7 frames");
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return bad("noise_scale must be >= 0");
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent < 0.0 {
            return bad("zipf_exponent must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.bigram_weight) {
            return bad("bigram_weight must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lexicon_coverage) {
            return bad("lexicon_coverage must lie in [0, 1]");
        }
        let [smin, smax] = self.sememes_per_token;
        if smin == 0 || smin > smax || smax > self.sememe_count {
            return bad("sememes_per_token needs 1 <= min <= max <= sememe_count");
        }
        if self.domains.is_empty() {
            return bad("at least one domain is required");
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.name.is_empty() || self.domains[..i].iter().any(|e| e.name == d.name) {
                return bad("domain names must be non-empty and unique");
            }
        }
        Ok(())
    }

    fn ordinary(&self) -> usize {
        self.vocab_size - 3
    }
}

/// Zipf law over `V − 3` ordinary tokens, rank 1 = lowest ordinary id.
pub fn zipf_unigram(vocab_size: usize, exponent: f64) -> Vec<f64> {
    zipf_over(vocab_size.saturating_sub(3), exponent)
}

pub(crate) fn zipf_over(n: usize, exponent: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Normalised occurrence counts of the ordinary tokens in `utts`.
pub fn token_frequencies(utts: &[Utterance], vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size - 3];
    for u in utts {
        for &t in &u.tokens {
            if (2..vocab_size - 1).contains(&t) {
                counts[t - 2] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        for c in &mut counts {
            *c /= total;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub domain: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocab: TokenVocab,
    pub sememes: SememeVocab,
    pub lexicon: SememeLexicon,
    pub lexicon_text: String,
    /// `V × 2D`: onset prototype followed by offset prototype; reserved rows are zero.
    pub prototypes: Tensor,
    pub splits: Vec<Split>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&Split> {
        self.splits.iter().find(|s| s.name == name)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sample_cdf(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |s, x| {
            *s += x;
            Some(*s)
        })
        .collect()
}

/// Row-stochastic kernel over ordinary tokens with stationary law `pi`.
fn transition_kernel(
    spec: &CorpusSpec,
    domain: &DomainSpec,
    lexicon: &SememeLexicon,
    pi: &[f64],
) -> Vec<Vec<f64>> {
    let n = pi.len();
    let s = spec.sememe_count;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[2, domain.transition_seed]));
    let affinity: Vec<f64> = (0..s * s).map(|_| normal(&mut rng)).collect();
    let sem = |t: usize| lexicon.sememes(t + 2);
    let mut proposal = vec![vec![0.0; n]; n];
    for (i, row) in proposal.iter_mut().enumerate() {
        for (j, q) in row.iter_mut().enumerate() {
            let noise = 0.5 * normal(&mut rng);
            if i == j {
                continue;
            }
            let (a, b) = (sem(i), sem(j));
            let mut aff = 0.0;
            if !a.is_empty() && !b.is_empty() {
                for &x in a {
                    for &y in b {
                        aff += affinity[x * s + y];
                    }
                }
                aff /= (a.len() * b.len()) as f64;
            }
            *q = (1.5 * (aff + noise)).exp();
        }
        let z: f64 = row.iter().sum();
        for q in row.iter_mut() {
            *q /= z;
        }
    }
    // Metropolis–Hastings correction keeps `pi` stationary.
    let mut kernel = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut stay = 1.0;
        for j in 0..n {
            if i == j || proposal[i][j] == 0.0 {
                continue;
            }
            let accept = (pi[j] * proposal[j][i] / (pi[i] * proposal[i][j])).min(1.0);
            kernel[i][j] = proposal[i][j] * accept;
            stay -= kernel[i][j];
        }
        kernel[i][i] = stay.max(0.0);
    }
    let w = spec.bigram_weight;
    kernel
        .into_iter()
        .map(|row| {
            let blended: Vec<f64> = row
                .iter()
                .zip(pi)
                .map(|(k, p)| w * k + (1.0 - w) * p)
                .collect();
            cumulative(&blended)
        })
        .collect()
}

fn synth_lexicon(spec: &CorpusSpec, vocab: &TokenVocab) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1]));
    let [smin, smax] = spec.sememes_per_token;
    let mut out = String::from("# synthetic sememe lexicon\n");
    for t in vocab.ordinary_ids() {
        let covered = rng.random::<f64>() < spec.lexicon_coverage;
        let k = rng.random_range(smin..=smax);
        let mut picks = sample(&mut rng, spec.sememe_count, k).into_vec();
        picks.sort_unstable();
        if !covered {
            continue;
        }
        let names: Vec<String> = picks.iter().map(|s| format!("sem{s:02}")).collect();
        out.push_str(&format!("{}\t{}\n", vocab.token(t), names.join(",")));
    }
    out
}

/// Single-character token names starting at U+4E00.
fn token_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| char::from_u32(0x4E00 + i as u32).expect("valid CJK code point").to_string())
        .collect()
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    pi_cdf: Vec<f64>,
    kernels: Vec<Vec<Vec<f64>>>,
    offsets: Vec<Vec<f64>>,
    prototypes: &'a Tensor,
}

impl Generator<'_> {
    fn utterance(&self, id: String, domain: usize, seed: u64) -> Utterance {
        let spec = self.spec;
        let dim = spec.feature_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lmin, lmax] = spec.tokens_per_utterance;
        let len = rng.random_range(lmin..=lmax);
        let mut tokens = Vec::with_capacity(len);
        let mut cur = sample_cdf(&self.pi_cdf, &mut rng);
        tokens.push(cur + 2);
        for _ in 1..len {
            cur = sample_cdf(&self.kernels[domain][cur], &mut rng);
            tokens.push(cur + 2);
        }
        let [dmin, dmax] = spec.frames_per_token;
        let mut frames = Vec::new();
        for &t in &tokens {
            let d = rng.random_range(dmin..=dmax);
            let proto = self.prototypes.row(t);
            let (onset, offset) = proto.split_at(dim);
            for k in 0..d {
                let frac = if d == 1 { 0.0 } else { k as f64 / (d - 1) as f64 };
                for c in 0..dim {
                    let clean = onset[c] + (offset[c] - onset[c]) * frac;
                    let noise = if spec.noise_scale > 0.0 {
                        spec.noise_scale * normal(&mut rng)
                    } else {
                        0.0
                    };
                    let v = clean + noise + self.offsets[domain][c];
                    frames.push(v as f32 as f64);
                }
            }
        }
        let n = frames.len() / dim;
        Utterance {
            id,
            features: Tensor::matrix(n, dim, frames).unwrap(),
            tokens,
            domain: spec.domains[domain].name.clone(),
        }
    }
}

/// Generates every split in memory; fully determined by `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let vocab = TokenVocab::new(&token_names(spec.ordinary()))?;
    let lexicon_text = synth_lexicon(spec, &vocab);
    let (lexicon, sememes) = parse_lexicon(&lexicon_text, &vocab, SememeSource::Build)?;

    let dim = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let mut protos = vec![0.0; vocab.len() * 2 * dim];
    for t in vocab.ordinary_ids() {
        for v in &mut protos[t * 2 * dim..(t + 1) * 2 * dim] {
            *v = normal(&mut rng);
        }
    }
    let prototypes = Tensor::matrix(vocab.len(), 2 * dim, protos)?;

    let pi = zipf_over(spec.ordinary(), spec.zipf_exponent);
    let kernels = spec
        .domains
        .iter()
        .map(|d| transition_kernel(spec, d, &lexicon, &pi))
        .collect();
    let offsets = spec
        .domains
        .iter()
        .map(|d| {
            let mut r = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[3, d.transition_seed]));
            (0..dim).map(|_| d.channel_offset * normal(&mut r)).collect()
        })
        .collect();
    let gen = Generator {
        spec,
        pi_cdf: cumulative(&pi),
        kernels,
        offsets,
        prototypes: &prototypes,
    };

    let mut plan: Vec<(String, usize, usize)> = vec![
        ("train".into(), 0, spec.splits.train),
        ("dev".into(), 0, spec.splits.dev),
        ("test".into(), 0, spec.splits.test),
    ];
    for (i, d) in spec.domains.iter().enumerate().skip(1) {
        plan.push((format!("test_{}", d.name), i, spec.splits.test));
    }
    let splits = plan
        .into_iter()
        .enumerate()
        .map(|(tag, (name, domain, count))| Split {
            utterances: (0..count)
                .map(|k| {
                    let seed = derive_seed(spec.seed, &[10 + tag as u64, k as u64]);
                    gen.utterance(format!("{name}-{k:06}"), domain, seed)
                })
                .collect(),
            domain: spec.domains[domain].name.clone(),
            name,
        })
        .collect();

    Ok(Corpus {
        spec: spec.clone(),
        vocab,
        sememes,
        lexicon,
        lexicon_text,
        prototypes,
        splits,
    })
}

/// Writes units, lexicon, prototype table, feature files and one manifest per
/// split under `dir`. Returns `(split name, manifest path)` pairs.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats)?;
    std::fs::write(dir.join("units.txt"), corpus.vocab.to_units())?;
    std::fs::write(dir.join("lexicon.txt"), &corpus.lexicon_text)?;
    write_features(&dir.join("prototypes.fbk"), &corpus.prototypes)?;
    let mut out = Vec::new();
    for split in &corpus.splits {
        let mut records = Vec::with_capacity(split.utterances.len());
        for u in &split.utterances {
            let rel = format!("feats/{}.fbk", u.id);
            write_features(&dir.join(&rel), &u.features)?;
            records.push(ManifestRecord {
                id: u.id.clone(),
                feats: rel,
                text: corpus.vocab.decode(&u.tokens),
                domain: u.domain.clone(),
            });
        }
        let path = dir.join(format!("{}.jsonl", split.name));
        Manifest::new(records)?.write(&path)?;
        out.push((split.name.clone(), path));
    }
    Ok(out)
}
