//! Corpus BLEU, GLEU and exact-match METEOR, plus diagnostic scores.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token unit over which n-grams are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalUnit {
    /// Whitespace-separated words, with `,` and `.` split off as tokens.
    #[default]
    Word,
    /// Every non-whitespace character.
    Char,
}

impl EvalUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalUnit::Word => "word",
            EvalUnit::Char => "char",
        }
    }

    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            EvalUnit::Word => {
                let mut out = Vec::new();
                for w in text.split_whitespace() {
                    let mut cur = String::new();
                    for c in w.chars() {
                        if c == ',' || c == '.' {
                            if !cur.is_empty() {
                                out.push(std::mem::take(&mut cur));
                            }
                            out.push(c.to_string());
                        } else {
                            cur.push(c);
                        }
                    }
                    if !cur.is_empty() {
                        out.push(cur);
                    }
                }
                out
            }
            EvalUnit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }
}

impl fmt::Display for EvalUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub bleu: f64,
    pub meteor: f64,
    pub gleu: f64,
}

fn ngram_counts<T: Eq + Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn check_lengths(lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Size(format!("parallel lists have different lengths {lens:?}")));
    }
    if lens[0] == 0 {
        return Err(Error::Empty("empty corpus".into()));
    }
    Ok(())
}

fn combine(num: &[usize], den: &[usize], ref_len: usize, hyp_len: usize) -> f64 {
    if num.iter().any(|&x| x == 0) || hyp_len == 0 {
        return 0.0;
    }
    let log_p: f64 = num
        .iter()
        .zip(den)
        .map(|(&a, &b)| (a as f64 / b as f64).ln())
        .sum::<f64>()
        / num.len() as f64;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    (bp * log_p.exp()).clamp(0.0, 1.0)
}

/// Corpus BLEU with clipped n-gram precisions for `n = 1..=max_n`.
pub fn bleu<T: AsRef<[S]>, S: Eq + Hash>(references: &[T], hypotheses: &[T], max_n: usize) -> Result<f64> {
    check_lengths(&[references.len(), hypotheses.len()])?;
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let mut num = vec![0; max_n];
    let mut den = vec![0; max_n];
    let (mut r_len, mut h_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        let (r, h) = (r.as_ref(), h.as_ref());
        r_len += r.len();
        h_len += h.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                num[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                den[n - 1] += c;
            }
        }
    }
    Ok(combine(&num, &den, r_len, h_len))
}

/// Corpus GLEU: BLEU whose n-gram numerators subtract hypothesis n-grams
/// that the reference lacks but the source contains.
pub fn gleu<T: AsRef<[S]>, S: Eq + Hash>(sources: &[T], references: &[T], hypotheses: &[T], max_n: usize) -> Result<f64> {
    check_lengths(&[sources.len(), references.len(), hypotheses.len()])?;
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let mut num = vec![0; max_n];
    let mut den = vec![0; max_n];
    let (mut r_len, mut h_len) = (0, 0);
    for ((s, r), h) in sources.iter().zip(references).zip(hypotheses) {
        let (s, r, h) = (s.as_ref(), r.as_ref(), h.as_ref());
        r_len += r.len();
        h_len += h.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            let sc = ngram_counts(s, n);
            let (mut good, mut bad) = (0usize, 0usize);
            for (g, c) in ngram_counts(h, n) {
                let in_ref = rc.get(g).copied().unwrap_or(0);
                let src_only = sc.get(g).copied().unwrap_or(0).saturating_sub(in_ref);
                let matched = c.min(in_ref);
                good += matched;
                bad += (c - matched).min(src_only);
                den[n - 1] += c;
            }
            num[n - 1] += good.saturating_sub(bad);
        }
    }
    Ok(combine(&num, &den, r_len, h_len))
}

/// Largest reference length handled by the exact chunk search; longer
/// pairs fall back to a left-to-right alignment.
const METEOR_EXACT_LIMIT: usize = 128;

/// Fewest chunks over all maximum one-to-one exact alignments, with the
/// number of matches.
fn min_chunks<S: Eq + Hash>(reference: &[S], hypothesis: &[S]) -> (usize, usize) {
    let mut ref_count: HashMap<&S, usize> = HashMap::new();
    for w in reference {
        *ref_count.entry(w).or_insert(0) += 1;
    }
    let mut hyp_count: HashMap<&S, usize> = HashMap::new();
    for w in hypothesis {
        *hyp_count.entry(w).or_insert(0) += 1;
    }
    let m: usize = hyp_count
        .iter()
        .map(|(w, &c)| c.min(ref_count.get(w).copied().unwrap_or(0)))
        .sum();
    if m == 0 {
        return (0, 0);
    }
    if reference.len() > METEOR_EXACT_LIMIT {
        return (m, greedy_chunks(reference, hypothesis));
    }
    let mut search = ChunkSearch {
        reference,
        hypothesis,
        quota: hyp_count
            .iter()
            .map(|(w, &c)| (*w, c.min(ref_count.get(w).copied().unwrap_or(0))))
            .collect(),
        left: hyp_count.iter().map(|(w, &c)| (*w, c)).collect(),
        memo: HashMap::new(),
    };
    let chunks = search.best(0, None, 0);
    (m, chunks)
}

fn greedy_chunks<S: Eq>(reference: &[S], hypothesis: &[S]) -> usize {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let mut chunks = 0;
    for h in hypothesis {
        let pick = prev
            .map(|p| p + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *h)
            .or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *h));
        match pick {
            Some(j) => {
                if prev.is_none_or(|p| p + 1 != j) {
                    chunks += 1;
                }
                used[j] = true;
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    chunks
}

struct ChunkSearch<'a, S> {
    reference: &'a [S],
    hypothesis: &'a [S],
    /// Matches still required per word.
    quota: HashMap<&'a S, usize>,
    /// Unvisited hypothesis occurrences per word.
    left: HashMap<&'a S, usize>,
    memo: HashMap<(usize, Option<usize>, u128), usize>,
}

impl<'a, S: Eq + Hash> ChunkSearch<'a, S> {
    /// Minimum chunks for hypothesis positions `i..` given the reference
    /// position matched by `i - 1` (if any) and the used reference set.
    fn best(&mut self, i: usize, prev: Option<usize>, used: u128) -> usize {
        if i == self.hypothesis.len() {
            return 0;
        }
        let key = (i, prev, used);
        if let Some(&v) = self.memo.get(&key) {
            return v;
        }
        let w = &self.hypothesis[i];
        let quota = self.quota.get(w).copied().unwrap_or(0);
        let left = self.left[w];
        *self.left.get_mut(w).unwrap() -= 1;
        let mut best = usize::MAX;
        if left > quota {
            best = self.best(i + 1, None, used);
        }
        if quota > 0 {
            *self.quota.get_mut(w).unwrap() -= 1;
            for j in 0..self.reference.len() {
                if used >> j & 1 == 1 || self.reference[j] != *w {
                    continue;
                }
                let new_chunk = usize::from(prev.is_none_or(|p| p + 1 != j));
                let rest = self.best(i + 1, Some(j), used | 1 << j);
                best = best.min(new_chunk + rest);
            }
            *self.quota.get_mut(w).unwrap() += 1;
        }
        *self.left.get_mut(w).unwrap() += 1;
        self.memo.insert(key, best);
        best
    }
}

/// Sentence METEOR restricted to exact unigram matches.
pub fn meteor_exact<S: Eq + Hash>(reference: &[S], hypothesis: &[S]) -> f64 {
    let (m, chunks) = min_chunks(reference, hypothesis);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// Mean sentence-level exact METEOR.
pub fn meteor<T: AsRef<[S]>, S: Eq + Hash>(references: &[T], hypotheses: &[T]) -> Result<f64> {
    check_lengths(&[references.len(), hypotheses.len()])?;
    let mut scores: Vec<f64> = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| meteor_exact(r.as_ref(), h.as_ref()))
        .collect();
    scores.sort_by(f64::total_cmp);
    Ok(scores.iter().sum::<f64>() / references.len() as f64)
}

pub fn exact_match_rate<S: AsRef<str>>(references: &[S], hypotheses: &[S]) -> Result<f64> {
    check_lengths(&[references.len(), hypotheses.len()])?;
    let hits = references
        .iter()
        .zip(hypotheses)
        .filter(|(r, h)| r.as_ref() == h.as_ref())
        .count();
    Ok(hits as f64 / references.len() as f64)
}

/// BLEU-4, METEOR and GLEU-4 of string corpora at the given granularity.
pub fn score_corpus<S: AsRef<str>>(unit: EvalUnit, sources: &[S], references: &[S], hypotheses: &[S]) -> Result<ScoreTriple> {
    let tok = |xs: &[S]| xs.iter().map(|x| unit.tokenize(x.as_ref())).collect::<Vec<_>>();
    let (s, r, h) = (tok(sources), tok(references), tok(hypotheses));
    Ok(ScoreTriple {
        bleu: bleu(&r, &h, 4)?,
        meteor: meteor(&r, &h)?,
        gleu: gleu(&s, &r, &h, 4)?,
    })
}

/// Deletion counts of filler tokens, aggregated over sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillerCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl FillerCounts {
    pub fn add(&mut self, o: FillerCounts) {
        self.true_pos += o.true_pos;
        self.false_pos += o.false_pos;
        self.false_neg += o.false_neg;
    }

    /// `(precision, recall, f1)`; an empty denominator counts as perfect.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let p = ratio(self.true_pos, self.true_pos + self.false_pos);
        let r = ratio(self.true_pos, self.true_pos + self.false_neg);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

/// Positions of `a` left unaligned by a longest common subsequence with `b`.
fn unaligned<S: Eq>(a: &[S], b: &[S]) -> Vec<bool> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i] == b[j] {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let mut out = vec![true; n];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && dp[i][j] == dp[i + 1][j + 1] + 1 {
            out[i] = false;
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Filler deletions realised by `hypothesis`. Gold deletions are the filler
/// tokens of `source`; predicted deletions are source tokens missing from
/// the hypothesis, except non-filler tokens the reference deletes too.
pub fn filler_deletion_counts<S: AsRef<str>>(source: &str, reference: &str, hypothesis: &str, fillers: &[S]) -> FillerCounts {
    let tok = |s: &str| EvalUnit::Word.tokenize(s);
    let (src, r, h) = (tok(source), tok(reference), tok(hypothesis));
    let is_filler = |w: &str| fillers.iter().any(|f| f.as_ref() == w);
    let hyp_del = unaligned(&src, &h);
    let ref_del = unaligned(&src, &r);
    let mut c = FillerCounts::default();
    for (i, w) in src.iter().enumerate() {
        let gold = is_filler(w);
        let pred = hyp_del[i] && (gold || !ref_del[i]);
        match (gold, pred) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_neg += 1,
            (false, true) => c.false_pos += 1,
            (false, false) => {}
        }
    }
    c
}

/// Sentence-level `(precision, recall, f1)` of filler deletion.
pub fn filler_deletion_f1<S: AsRef<str>>(source: &str, reference: &str, hypothesis: &str, fillers: &[S]) -> (f64, f64, f64) {
    filler_deletion_counts(source, reference, hypothesis, fillers).prf()
}

/// Corpus-level filler deletion scores from pooled counts.
pub fn corpus_filler_f1<S: AsRef<str>, F: AsRef<str>>(
    sources: &[S],
    references: &[S],
    hypotheses: &[S],
    fillers: &[F],
) -> Result<(f64, f64, f64)> {
    check_lengths(&[sources.len(), references.len(), hypotheses.len()])?;
    let mut c = FillerCounts::default();
    for ((s, r), h) in sources.iter().zip(references).zip(hypotheses) {
        c.add(filler_deletion_counts(s.as_ref(), r.as_ref(), h.as_ref(), fillers));
    }
    Ok(c.prf())
}
