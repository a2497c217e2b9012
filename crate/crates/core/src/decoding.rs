//! Search over model outputs: CTC greedy, CTC prefix beam, attention beam and
//! attention rescoring of the CTC n-best.

use crate::error::{Error, Result};
use crate::losses::BLANK;
use crate::model::{subsampled_length, Model};
use crate::numerics::kernels::lse2;
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub ctc_score: Option<f64>,
    pub att_score: Option<f64>,
    /// Score the producing method ranked by.
    pub combined: f64,
}

impl Hypothesis {
    fn ctc(tokens: Vec<usize>, score: f64) -> Self {
        Self {
            tokens,
            ctc_score: Some(score),
            att_score: None,
            combined: score,
        }
    }

    fn att(tokens: Vec<usize>, score: f64) -> Self {
        Self {
            tokens,
            ctc_score: None,
            att_score: Some(score),
            combined: score,
        }
    }
}

/// Hypotheses sorted by score, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub hyps: Vec<Hypothesis>,
    pub beam: usize,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hyps.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Attention,
    CtcGreedy,
    CtcPrefixBeam,
    AttentionRescoring,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Attention,
        Method::CtcGreedy,
        Method::CtcPrefixBeam,
        Method::AttentionRescoring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Attention => "attention",
            Method::CtcGreedy => "ctc_greedy",
            Method::CtcPrefixBeam => "ctc_prefix_beam",
            Method::AttentionRescoring => "attention_rescoring",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
            Error::config(format!("unknown decoding method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Collapses a frame-level path: merge adjacent repeats, then drop blanks.
pub fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Per-frame argmax (ties to the lowest id), collapsed.
pub fn ctc_greedy(logprobs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..logprobs.rows()).map(|t| argmax_lowest(logprobs.row(t))).collect();
    ctc_collapse(&path)
}

fn greedy_path_score(logprobs: &Tensor) -> f64 {
    (0..logprobs.rows())
        .map(|t| {
            let row = logprobs.row(t);
            row[argmax_lowest(row)]
        })
        .sum()
}

/// Best first; equal scores fall back to shorter, then lexicographically smaller sequences.
fn rank(a: (&[usize], f64), b: (&[usize], f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.len().cmp(&b.0.len()))
        .then(a.0.cmp(b.0))
}

/// Prefix beam search over every non-blank id.
pub fn ctc_prefix_beam(logprobs: &Tensor, beam: usize) -> Result<NBestList> {
    ctc_prefix_beam_filtered(logprobs, beam, |_| true)
}

/// Prefix beam search that only extends prefixes with ids accepted by `allow`.
pub fn ctc_prefix_beam_filtered(
    logprobs: &Tensor,
    beam: usize,
    allow: impl Fn(usize) -> bool,
) -> Result<NBestList> {
    if beam == 0 {
        return Err(Error::arg("beam width must be at least 1"));
    }
    let ninf = f64::NEG_INFINITY;
    let v = logprobs.cols();
    let symbols: Vec<usize> = (0..v).filter(|&c| c != BLANK && allow(c)).collect();
    // prefix -> (ends in blank, ends in non-blank), both log-probabilities
    let mut beams: Vec<(Vec<usize>, (f64, f64))> = vec![(Vec::new(), (0.0, ninf))];
    for t in 0..logprobs.rows() {
        let row = logprobs.row(t);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, (pb, pnb)) in &beams {
            let total = lse2(*pb, *pnb);
            let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
            e.0 = lse2(e.0, total + row[BLANK]);
            let last = prefix.last().copied();
            for &c in &symbols {
                let lp = row[c];
                if Some(c) == last {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = lse2(e.1, pnb + lp);
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = lse2(e.1, pb + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(c);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = lse2(e.1, total + lp);
                }
            }
        }
        let mut all: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        all.sort_by(|a, b| rank((&a.0, lse2(a.1 .0, a.1 .1)), (&b.0, lse2(b.1 .0, b.1 .1))));
        all.truncate(beam);
        beams = all;
    }
    let hyps = beams
        .into_iter()
        .filter(|(_, (pb, pnb))| lse2(*pb, *pnb) > ninf)
        .map(|(p, (pb, pnb))| Hypothesis::ctc(p, lse2(pb, pnb)))
        .collect();
    Ok(NBestList { hyps, beam })
}

/// Autoregressive beam search. `next_log_probs(prefix)` returns the decoder
/// distribution after `prefix` (which starts with `sos`). Only ids accepted by
/// `allow` and `eos` are expanded; there is no length normalisation.
pub fn attention_beam_with(
    mut next_log_probs: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    sos: usize,
    eos: usize,
    allow: impl Fn(usize) -> bool,
    beam: usize,
    max_len: usize,
) -> Result<NBestList> {
    if beam == 0 || max_len == 0 {
        return Err(Error::arg("beam and max length must be at least 1"));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![sos], 0.0)];
    let mut done: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut cand: Vec<(Vec<usize>, f64)> = Vec::new();
        for (seq, score) in &live {
            let lp = next_log_probs(seq)?;
            let mut ids: Vec<usize> = (0..lp.len()).filter(|&c| c == eos || (c != sos && allow(c))).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            ids.truncate(beam);
            for c in ids.into_iter().filter(|&c| lp[c] > f64::NEG_INFINITY) {
                let mut s = seq.clone();
                s.push(c);
                cand.push((s, score + lp[c]));
            }
        }
        cand.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
        cand.truncate(beam);
        live.clear();
        for (seq, score) in cand {
            if seq.last() == Some(&eos) {
                done.push((seq[1..seq.len() - 1].to_vec(), score));
            } else {
                live.push((seq, score));
            }
        }
        if live.is_empty() || done.len() >= beam {
            break;
        }
    }
    done.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
    let mut hyps: Vec<Hypothesis> = done.into_iter().map(|(s, sc)| Hypothesis::att(s, sc)).collect();
    if hyps.len() < beam {
        live.sort_by(|a, b| rank((&a.0, a.1), (&b.0, b.1)));
        for (seq, score) in live.into_iter().take(beam - hyps.len()) {
            hyps.push(Hypothesis::att(seq[1..].to_vec(), score));
        }
    }
    hyps.truncate(beam);
    Ok(NBestList { hyps, beam })
}

/// Picks the n-best entry maximising `att + λ_dec · ctc`, where `att_score`
/// gives the teacher-forced decoder log-probability (eos included).
/// Ties go to the higher CTC score, then the shorter sequence.
pub fn attention_rescore_with(
    nbest: &NBestList,
    mut att_score: impl FnMut(&[usize]) -> Result<f64>,
    ctc_weight: f64,
) -> Result<Hypothesis> {
    if nbest.hyps.is_empty() {
        return Err(Error::arg("attention rescoring needs a non-empty n-best list"));
    }
    let mut best: Option<Hypothesis> = None;
    for h in &nbest.hyps {
        let ctc = h
            .ctc_score
            .ok_or_else(|| Error::arg("rescoring needs hypotheses with CTC scores"))?;
        let att = att_score(&h.tokens)?;
        let cand = Hypothesis {
            tokens: h.tokens.clone(),
            ctc_score: Some(ctc),
            att_score: Some(att),
            combined: att + ctc_weight * ctc,
        };
        let better = match &best {
            None => true,
            Some(b) => cand
                .combined
                .total_cmp(&b.combined)
                .then(ctc.total_cmp(&b.ctc_score.unwrap()))
                .then(b.tokens.len().cmp(&cand.tokens.len()))
                .is_gt(),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("non-empty n-best"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Weight of the CTC score in attention rescoring.
    pub ctc_weight: f64,
    /// Upper bound on attention-decoded length; the effective bound is `min(T', max_len)`.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            ctc_weight: 0.5,
            max_len: 100,
        }
    }
}

/// Model-level decoding of one utterance.
pub struct Recognizer<'m> {
    pub model: &'m Model,
    pub config: DecodeConfig,
}

impl<'m> Recognizer<'m> {
    pub fn new(model: &'m Model, config: DecodeConfig) -> Self {
        Self { model, config }
    }

    fn ordinary(&self, id: usize) -> bool {
        let v = self.model.config.vocab_size;
        (2..v - 1).contains(&id)
    }

    /// Teacher-forced `log P(tokens, eos | H)`.
    pub fn attention_score(&self, h: &Tensor, tokens: &[usize]) -> Result<f64> {
        let c = &self.model.config;
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(c.sos());
        input.extend_from_slice(tokens);
        let lp = self.model.decoder_log_probs(h, &input)?;
        Ok(tokens
            .iter()
            .chain(std::iter::once(&c.eos()))
            .enumerate()
            .map(|(i, &t)| lp.at(i, t))
            .sum())
    }

    pub fn ctc_nbest(&self, logprobs: &Tensor) -> Result<NBestList> {
        ctc_prefix_beam_filtered(logprobs, self.config.beam, |c| self.ordinary(c))
    }

    pub fn attention_nbest(&self, h: &Tensor) -> Result<NBestList> {
        let c = &self.model.config;
        let max_len = h.rows().min(self.config.max_len).max(1);
        attention_beam_with(
            |prefix| {
                let lp = self.model.decoder_log_probs(h, prefix)?;
                Ok(lp.row(lp.rows() - 1).to_vec())
            },
            c.sos(),
            c.eos(),
            |id| self.ordinary(id),
            self.config.beam,
            max_len,
        )
    }

    pub fn recognize(&self, features: &Tensor, method: Method) -> Result<Hypothesis> {
        subsampled_length(features.rows())?;
        let h = self.model.encode_features(features)?;
        self.recognize_encoded(&h, method)
    }

    pub fn recognize_encoded(&self, h: &Tensor, method: Method) -> Result<Hypothesis> {
        match method {
            Method::CtcGreedy => {
                let lp = self.model.ctc_log_probs(h);
                let tokens = ctc_greedy(&lp).into_iter().filter(|&t| self.ordinary(t)).collect();
                Ok(Hypothesis::ctc(tokens, greedy_path_score(&lp)))
            }
            Method::CtcPrefixBeam => {
                let lp = self.model.ctc_log_probs(h);
                Ok(self.ctc_nbest(&lp)?.hyps.into_iter().next().unwrap_or(Hypothesis::ctc(Vec::new(), f64::NEG_INFINITY)))
            }
            Method::Attention => Ok(self.attention_nbest(h)?.hyps.swap_remove(0)),
            Method::AttentionRescoring => {
                let lp = self.model.ctc_log_probs(h);
                let nbest = self.ctc_nbest(&lp)?;
                attention_rescore_with(&nbest, |t| self.attention_score(h, t), self.config.ctc_weight)
            }
        }
    }
}

/// One line of a hypothesis file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub id: String,
    pub method: Method,
    pub text: String,
    pub att_score: Option<f64>,
    pub ctc_score: Option<f64>,
    pub combined: f64,
}

pub fn write_hypotheses(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<DecodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
