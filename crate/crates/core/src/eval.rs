//! Error rates and report tables.

use crate::error::{Error, Result};
use crate::lexicon::TokenVocab;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

pub const NUM_BINS: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl std::ops::AddAssign for EditOps {
    fn add_assign(&mut self, o: Self) {
        self.distance += o.distance;
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Counts come
/// from one optimal path, preferring substitution, then insertion, then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut ops = EditOps {
        distance: d[n * w + m],
        ..EditOps::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(differ) == here {
                ops.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.insertions += 1;
            j -= 1;
        } else {
            ops.deletions += 1;
            i -= 1;
        }
    }
    ops
}

/// Total edit distance over total reference length.
pub fn cer<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::arg(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::arg("total reference length is zero"));
    }
    let errors: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h).distance).sum();
    Ok(errors as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSplit {
    pub head: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
    pub counts: BTreeMap<usize, usize>,
    pub threshold: f64,
}

impl LongTailSplit {
    /// Tokens outside the head (including ones never seen in training) are tail.
    pub fn is_tail(&self, token: usize) -> bool {
        !self.head.contains(&token)
    }
}

/// Head = most frequent tokens (ties by ascending id) until their share of
/// training occurrences reaches `1 − threshold`; every other token is tail.
pub fn longtail_split(train: &[Vec<usize>], vocab: &TokenVocab, threshold: f64) -> Result<LongTailSplit> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::arg(format!("tail threshold {threshold} outside [0, 1]")));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in train.iter().flatten() {
        if t < vocab.len() && !vocab.is_reserved(t) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::arg("training text has no ordinary tokens"));
    }
    let mut ranked: Vec<(usize, usize)> = counts.iter().map(|(&t, &c)| (t, c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let need = (1.0 - threshold) - 1e-12;
    let mut head = BTreeSet::new();
    let mut tail = BTreeSet::new();
    let mut cum = 0usize;
    for (t, c) in ranked {
        if (cum as f64) / (total as f64) < need {
            head.insert(t);
            cum += c;
        } else {
            tail.insert(t);
        }
    }
    Ok(LongTailSplit {
        head,
        tail,
        counts,
        threshold,
    })
}

/// `min(floor(10·r), 9)` for a tail ratio `r ∈ [0, 1]`.
pub fn bin_index(ratio: f64) -> usize {
    ((ratio * NUM_BINS as f64).floor() as usize).min(NUM_BINS - 1)
}

fn bin_of_counts(tail: usize, len: usize) -> usize {
    (NUM_BINS * tail / len).min(NUM_BINS - 1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl BinStats {
    /// `None` for an empty bin.
    pub fn cer(&self) -> Option<f64> {
        (self.ref_tokens > 0)
            .then(|| (self.substitutions + self.insertions + self.deletions) as f64 / self.ref_tokens as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: Vec<BinStats>,
    /// Utterances left out because their reference is empty.
    pub excluded: usize,
}

impl BinReport {
    pub fn evaluated(&self) -> usize {
        self.bins.iter().map(|b| b.utterances).sum()
    }

    /// Mean CER over the non-empty bins with index ≥ `from`.
    pub fn mean_cer_from(&self, from: usize) -> Option<f64> {
        let v: Vec<f64> = self.bins[from..].iter().filter_map(BinStats::cer).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower,upper,utterances,ref_tokens,substitutions,insertions,deletions,cer\n");
        for (k, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "{k},{:.1},{:.1},{},{},{},{},{},{}",
                k as f64 / 10.0,
                (k + 1) as f64 / 10.0,
                b.utterances,
                b.ref_tokens,
                b.substitutions,
                b.insertions,
                b.deletions,
                fmt_opt(b.cer())
            );
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Bins utterances by the share of tail tokens in their reference and
/// aggregates errors per bin.
pub fn longtail_bins(refs: &[Vec<usize>], hyps: &[Vec<usize>], split: &LongTailSplit) -> Result<BinReport> {
    if refs.len() != hyps.len() {
        return Err(Error::arg(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
    }
    let mut bins = vec![BinStats::default(); NUM_BINS];
    let mut excluded = 0;
    for (r, h) in refs.iter().zip(hyps) {
        if r.is_empty() {
            log::warn!("skipping utterance with empty reference in long-tail bins");
            excluded += 1;
            continue;
        }
        let tail = r.iter().filter(|&&t| split.is_tail(t)).count();
        let b = &mut bins[bin_of_counts(tail, r.len())];
        let ops = edit_distance(r, h);
        b.utterances += 1;
        b.ref_tokens += r.len();
        b.substitutions += ops.substitutions;
        b.insertions += ops.insertions;
        b.deletions += ops.deletions;
    }
    Ok(BinReport { bins, excluded })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub errors: usize,
}

impl DomainRow {
    pub fn cer(&self) -> Option<f64> {
        (self.ref_tokens > 0).then(|| self.errors as f64 / self.ref_tokens as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    /// In the order the domains were declared.
    pub rows: Vec<(String, DomainRow)>,
    pub overall: DomainRow,
}

impl DomainReport {
    pub fn cer(&self, domain: &str) -> Option<f64> {
        self.rows.iter().find(|(d, _)| d == domain).and_then(|(_, r)| r.cer())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,utterances,ref_tokens,errors,cer\n");
        for (name, r) in self.rows.iter().map(|(n, r)| (n.as_str(), r)).chain([("overall", &self.overall)]) {
            let _ = writeln!(out, "{name},{},{},{},{}", r.utterances, r.ref_tokens, r.errors, fmt_opt(r.cer()));
        }
        out
    }
}

/// One scored utterance for [`domain_report`].
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub domain: &'a str,
    pub reference: &'a [usize],
    pub hypothesis: &'a [usize],
}

/// Per-domain and overall CER. Every item's domain must be listed in `domains`.
pub fn domain_report(domains: &[String], items: &[Scored<'_>]) -> Result<DomainReport> {
    if domains.is_empty() {
        return Err(Error::arg("domain report needs at least one domain"));
    }
    let mut rows: Vec<(String, DomainRow)> = domains.iter().map(|d| (d.clone(), DomainRow::default())).collect();
    let mut overall = DomainRow::default();
    for it in items {
        let row = rows
            .iter_mut()
            .find(|(d, _)| d == it.domain)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::arg(format!("unknown domain tag {:?}", it.domain)))?;
        let e = edit_distance(it.reference, it.hypothesis).distance;
        for r in [&mut *row, &mut overall] {
            r.utterances += 1;
            r.ref_tokens += it.reference.len();
            r.errors += e;
        }
    }
    Ok(DomainReport { rows, overall })
}

/// Models as rows, methods or datasets as columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ComparisonTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, model: impl Into<String>, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::arg(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        self.rows.push((model.into(), values));
        Ok(())
    }

    pub fn get(&self, model: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(m, _)| m == model).and_then(|(_, v)| v[c])
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{}\n", self.columns.join(","));
        for (m, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(out, "{m},{}", cells.join(","));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: serde_json::Map<String, serde_json::Value> = self
            .rows
            .iter()
            .map(|(m, vals)| {
                let cells: serde_json::Map<String, serde_json::Value> = self
                    .columns
                    .iter()
                    .zip(vals)
                    .map(|(c, v)| (c.clone(), serde_json::json!(v)))
                    .collect();
                (m.clone(), serde_json::Value::Object(cells))
            })
            .collect();
        serde_json::json!({ "columns": self.columns, "rows": rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn ops(d: usize, s: usize, i: usize, del: usize) -> EditOps {
        EditOps {
            distance: d,
            substitutions: s,
            insertions: i,
            deletions: del,
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), ops(0, 0, 0, 0));
        assert_eq!(edit_distance(&chars("abc"), &chars("abd")), ops(1, 1, 0, 0));
        assert_eq!(edit_distance(&chars("ab"), &chars("")), ops(2, 0, 0, 2));
        assert_eq!(edit_distance(&chars(""), &chars("xy")), ops(2, 0, 2, 0));
        assert_eq!(edit_distance(&chars("ab"), &chars("ba")), ops(2, 2, 0, 0));
    }

    fn naive(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn distance_matches_recursion(a in prop::collection::vec(0u8..4, 0..=6), b in prop::collection::vec(0u8..4, 0..=6)) {
            let e = edit_distance(&a, &b);
            prop_assert_eq!(e.distance, naive(&a, &b));
            prop_assert_eq!(e.distance, e.substitutions + e.insertions + e.deletions);
            prop_assert_eq!(e.distance, edit_distance(&b, &a).distance);
            prop_assert!(e.distance <= a.len().max(b.len()));
            prop_assert_eq!(edit_distance(&a, &a).distance, 0);
            prop_assert_eq!(a.len() + e.insertions - e.deletions, b.len());
        }

        #[test]
        fn split_ignores_order(mut seqs in prop::collection::vec(prop::collection::vec(2usize..10, 1..6), 1..8), seed in any::<u64>()) {
            let vocab = TokenVocab::new(&["a", "b", "c", "d", "e", "f", "g", "h"]).unwrap();
            let a = longtail_split(&seqs, &vocab, 0.95).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            seqs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = longtail_split(&seqs, &vocab, 0.95).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.head.is_disjoint(&a.tail));
            let observed: BTreeSet<usize> = a.counts.keys().copied().collect();
            prop_assert_eq!(a.head.union(&a.tail).copied().collect::<BTreeSet<_>>(), observed);
        }
    }

    #[test]
    fn cer_examples() {
        let r = vec![chars("abcdefghij"), chars("klmnopqrst")];
        assert_eq!(cer(&r, &r).unwrap(), 0.0);
        let mut h = r.clone();
        h[1][3] = 'z';
        assert_eq!(cer(&r, &h).unwrap(), 0.05);
        assert!(cer(&[chars("a")], &[chars("xyz")]).unwrap() > 1.0);
        assert!(cer::<char>(&[vec![]], &[chars("a")]).is_err());
        assert!(cer(&r, &h[..1]).is_err());
    }

    fn abcd() -> TokenVocab {
        TokenVocab::new(&["A", "B", "C", "D"]).unwrap()
    }

    fn text(counts: &[(usize, usize)]) -> Vec<Vec<usize>> {
        vec![counts.iter().flat_map(|&(t, c)| std::iter::repeat_n(t, c)).collect()]
    }

    #[test]
    fn split_examples() {
        let v = abcd();
        let s = longtail_split(&text(&[(2, 90), (3, 6), (4, 3), (5, 1)]), &v, 0.95).unwrap();
        assert_eq!(s.head, BTreeSet::from([2]));
        assert_eq!(s.tail, BTreeSet::from([3, 4, 5]));
        let s = longtail_split(&text(&[(2, 90), (3, 6), (4, 3), (5, 1)]), &v, 0.0).unwrap();
        assert!(s.tail.is_empty());

        let names: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        let v20 = TokenVocab::new(&names).unwrap();
        let uniform: Vec<(usize, usize)> = (2..22).map(|t| (t, 5)).collect();
        let s = longtail_split(&text(&uniform), &v20, 0.95).unwrap();
        assert_eq!(s.head, BTreeSet::from([2]));
        assert!(s.is_tail(21) && s.is_tail(3));
        assert!(longtail_split(&[vec![]], &v, 0.95).is_err());
    }

    #[test]
    fn bin_rules() {
        assert_eq!(bin_index(0.25), 2);
        assert_eq!(bin_index(1.0), 9);
        assert_eq!(bin_index(0.0), 0);
        for len in 1..=30 {
            for tail in 0..=len {
                assert_eq!(bin_of_counts(tail, len), ((10 * tail) / len).min(9));
            }
        }
        assert_eq!(bin_of_counts(3, 10), 3);
        assert_eq!(bin_of_counts(7, 10), 7);
    }

    #[test]
    fn bins_partition_the_test_set() {
        let v = abcd();
        let split = longtail_split(&text(&[(2, 90), (3, 6), (4, 3), (5, 1)]), &v, 0.95).unwrap();
        let refs = vec![vec![2, 2, 2, 2], vec![2, 3, 2, 2], vec![3, 4, 5], vec![], vec![2, 3]];
        let hyps = vec![vec![2, 2, 2, 2], vec![2, 2, 2], vec![3, 3, 5, 5], vec![2], vec![2, 3]];
        let rep = longtail_bins(&refs, &hyps, &split).unwrap();
        assert_eq!(rep.excluded, 1);
        assert_eq!(rep.evaluated(), 4);
        assert_eq!(rep.bins[0].utterances, 1);
        assert_eq!(rep.bins[2].utterances, 1);
        assert_eq!(rep.bins[5].utterances, 1);
        assert_eq!(rep.bins[9].utterances, 1);
        assert_eq!(rep.bins[9].cer(), Some(2.0 / 3.0));
        assert_eq!(rep.bins[1].cer(), None);
        assert_eq!(rep.to_csv().lines().count(), 11);
    }

    #[test]
    fn domain_examples() {
        let one = vec!["src".to_string()];
        let items = [Scored {
            domain: "src",
            reference: &[2, 3, 4, 5],
            hypothesis: &[2, 3, 4],
        }];
        let rep = domain_report(&one, &items).unwrap();
        assert_eq!(rep.cer("src"), rep.overall.cer());

        let two = vec!["a".to_string(), "b".to_string()];
        let items = [
            Scored {
                domain: "a",
                reference: &[2, 3],
                hypothesis: &[2, 3],
            },
            Scored {
                domain: "b",
                reference: &[2, 3],
                hypothesis: &[2, 4],
            },
        ];
        let rep = domain_report(&two, &items).unwrap();
        assert_eq!((rep.cer("a"), rep.cer("b"), rep.overall.cer()), (Some(0.0), Some(0.5), Some(0.25)));
        assert_eq!(rep.to_csv().lines().count(), 4);
        let bad = [Scored {
            domain: "c",
            reference: &[2],
            hypothesis: &[2],
        }];
        let err = domain_report(&two, &bad).unwrap_err().to_string();
        assert!(err.contains("\"c\""));
    }

    #[test]
    fn comparison_table() {
        let mut t = ComparisonTable::new(vec!["attention".into(), "ctc_greedy".into()]);
        t.push("baseline", vec![Some(0.1), None]).unwrap();
        assert!(t.push("sp", vec![Some(0.1)]).is_err());
        assert_eq!(t.to_csv(), "model,attention,ctc_greedy\nbaseline,0.100000,\n");
        assert_eq!(t.get("baseline", "attention"), Some(0.1));
        assert_eq!(t.to_json()["rows"]["baseline"]["ctc_greedy"], serde_json::Value::Null);
    }
}
