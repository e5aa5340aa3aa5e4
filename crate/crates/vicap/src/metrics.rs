//! Caption evaluation metrics: corpus BLEU@4, ROUGE-L, CIDEr-D and an
//! exact-match METEOR variant.
//!
//! All functions are generic over the token type and see only token
//! sequences, so scores are invariant under consistent relabeling. The
//! METEOR variant uses exact unigram matches only (no synonym or paraphrase
//! resources) and is reported as `meteor_exact` to avoid claiming
//! comparability with resource-backed METEOR.

use crate::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

pub const MAX_N: usize = 4;
/// CIDEr-D Gaussian length-penalty width.
pub const CIDER_SIGMA: f64 = 6.0;
/// Additive smoothing for sentence-level BLEU.
pub const SENT_BLEU_EPS: f64 = 1e-9;

/// n-gram → count for n = 1..=4, keyed by (n, window).
pub type NGramCounts<T> = HashMap<(usize, Vec<T>), usize>;

pub fn ngram_counts<T: Clone + Eq + Hash>(tokens: &[T]) -> NGramCounts<T> {
    let mut counts = HashMap::new();
    for n in 1..=MAX_N {
        if tokens.len() < n {
            break;
        }
        for w in tokens.windows(n) {
            *counts.entry((n, w.to_vec())).or_insert(0) += 1;
        }
    }
    counts
}

/// Document frequencies of reference n-grams over a corpus of videos.
#[derive(Debug, Clone)]
pub struct CorpusDocFreq<T> {
    pub df: NGramCounts<T>,
    pub n_docs: usize,
}

/// df(g) = number of videos whose reference set contains g at least once.
pub fn compute_doc_freq<T: Clone + Eq + Hash>(refs: &[Vec<Vec<T>>]) -> CorpusDocFreq<T> {
    let mut df = HashMap::new();
    for ref_set in refs {
        let mut seen: HashMap<(usize, Vec<T>), ()> = HashMap::new();
        for r in ref_set {
            for key in ngram_counts(r).into_keys() {
                seen.entry(key).or_insert(());
            }
        }
        for key in seen.into_keys() {
            *df.entry(key).or_insert(0) += 1;
        }
    }
    CorpusDocFreq {
        df,
        n_docs: refs.len(),
    }
}

/// Corpus BLEU@4: clipped modified precisions with uniform weights and the
/// brevity penalty against the closest reference length (ties to shorter).
pub fn bleu4<T: Clone + Eq + Hash>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    if cands.is_empty() || cands.len() != refs.len() {
        return Err(Error::Value(format!(
            "bleu4 wants aligned nonempty corpora, got {} candidates / {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    let mut numer = [0usize; MAX_N];
    let mut denom = [0usize; MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, ref_set) in cands.iter().zip(refs) {
        cand_len += cand.len();
        ref_len += closest_ref_len(cand.len(), ref_set);
        let c_counts = ngram_counts(cand);
        let max_ref = max_ref_counts(ref_set);
        for ((n, gram), count) in c_counts {
            denom[n - 1] += count;
            let clip = max_ref.get(&(n, gram)).copied().unwrap_or(0);
            numer[n - 1] += count.min(clip);
        }
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_N {
        if numer[n] == 0 || denom[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (numer[n] as f64 / denom[n] as f64).ln() / MAX_N as f64;
    }
    Ok(brevity_penalty(cand_len, ref_len) * log_sum.exp())
}

fn max_ref_counts<T: Clone + Eq + Hash>(ref_set: &[Vec<T>]) -> NGramCounts<T> {
    let mut max: NGramCounts<T> = HashMap::new();
    for r in ref_set {
        for (key, count) in ngram_counts(r) {
            let e = max.entry(key).or_insert(0);
            *e = (*e).max(count);
        }
    }
    max
}

fn closest_ref_len<T>(cand_len: usize, ref_set: &[Vec<T>]) -> usize {
    let mut best = ref_set[0].len();
    for r in ref_set.iter().skip(1) {
        let (d_new, d_best) = (
            (r.len() as i64 - cand_len as i64).abs(),
            (best as i64 - cand_len as i64).abs(),
        );
        if d_new < d_best || (d_new == d_best && r.len() < best) {
            best = r.len();
        }
    }
    best
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Sentence-level BLEU@4 with add-ε smoothing: zero clipped counts (and
/// empty n-gram denominators) contribute ε instead of zeroing the score.
pub fn sentence_bleu<T: Clone + Eq + Hash>(cand: &[T], ref_set: &[Vec<T>]) -> Result<f64> {
    if ref_set.is_empty() {
        return Err(Error::Value("sentence_bleu wants a nonempty reference set".into()));
    }
    let c_counts = ngram_counts(cand);
    let max_ref = max_ref_counts(ref_set);
    let mut log_sum = 0.0;
    for n in 1..=MAX_N {
        let mut numer = 0usize;
        let mut denom = 0usize;
        for ((gn, gram), count) in &c_counts {
            if *gn != n {
                continue;
            }
            denom += count;
            numer += (*count).min(max_ref.get(&(n, gram.clone())).copied().unwrap_or(0));
        }
        let p = if denom == 0 {
            SENT_BLEU_EPS
        } else if numer == 0 {
            SENT_BLEU_EPS / denom as f64
        } else {
            numer as f64 / denom as f64
        };
        log_sum += p.ln() / MAX_N as f64;
    }
    let ref_len = closest_ref_len(cand.len(), ref_set);
    Ok(brevity_penalty(cand.len(), ref_len) * log_sum.exp())
}

/// ROUGE-L F-measure with β = 1.2, max over references.
pub fn rouge_l<T: Clone + Eq>(cand: &[T], ref_set: &[Vec<T>]) -> Result<f64> {
    if ref_set.is_empty() {
        return Err(Error::Value("rouge_l wants a nonempty reference set".into()));
    }
    const BETA: f64 = 1.2;
    let mut best = 0.0f64;
    for r in ref_set {
        let lcs = lcs_len(cand, r);
        if lcs == 0 || cand.is_empty() || r.is_empty() {
            continue;
        }
        let p = lcs as f64 / cand.len() as f64;
        let rr = lcs as f64 / r.len() as f64;
        let f = (1.0 + BETA * BETA) * p * rr / (rr + BETA * BETA * p);
        best = best.max(f);
    }
    Ok(best)
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence CIDEr-D: per-n TF-IDF vectors, count-clipped cosine, Gaussian
/// length penalty (σ = 6), ×10 scaling, mean over n and references.
pub fn cider_d_sentence<T: Clone + Eq + Hash>(
    cand: &[T],
    ref_set: &[Vec<T>],
    df: &CorpusDocFreq<T>,
) -> Result<f64> {
    if ref_set.is_empty() {
        return Err(Error::Value("cider_d wants a nonempty reference set".into()));
    }
    if df.n_docs == 0 {
        return Err(Error::Value("cider_d wants document frequencies".into()));
    }
    let log_n = (df.n_docs as f64).ln();
    // tf-idf vector per n for a sentence
    let vecs = |tokens: &[T]| -> (Vec<HashMap<Vec<T>, f64>>, [f64; MAX_N]) {
        let mut v: Vec<HashMap<Vec<T>, f64>> = vec![HashMap::new(); MAX_N];
        let mut norms = [0.0f64; MAX_N];
        for ((n, gram), count) in ngram_counts(tokens) {
            let dfg = df.df.get(&(n, gram.clone())).copied().unwrap_or(0) as f64;
            let idf = log_n - dfg.max(1.0).ln();
            let w = count as f64 * idf;
            v[n - 1].insert(gram, w);
            norms[n - 1] += w * w;
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        (v, norms)
    };
    let (cv, cn) = vecs(cand);
    let mut total = 0.0;
    for r in ref_set {
        let (rv, rn) = vecs(r);
        let delta = cand.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut per_n = 0.0;
        for n in 0..MAX_N {
            let mut sim = 0.0;
            for (gram, &cw) in &cv[n] {
                if let Some(&rw) = rv[n].get(gram) {
                    sim += cw.min(rw) * rw;
                }
            }
            if cn[n] > 0.0 && rn[n] > 0.0 {
                sim /= cn[n] * rn[n];
            }
            per_n += sim * penalty;
        }
        total += per_n / MAX_N as f64;
    }
    Ok(10.0 * total / ref_set.len() as f64)
}

/// Corpus CIDEr-D: mean of the sentence scores.
pub fn cider_d<T: Clone + Eq + Hash>(
    cands: &[Vec<T>],
    refs: &[Vec<Vec<T>>],
    df: &CorpusDocFreq<T>,
) -> Result<f64> {
    if cands.is_empty() || cands.len() != refs.len() {
        return Err(Error::Value("cider_d wants aligned nonempty corpora".into()));
    }
    let mut total = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        total += cider_d_sentence(c, r, df)?;
    }
    Ok(total / cands.len() as f64)
}

/// Exact-match METEOR variant. Unigrams are aligned greedily left to right
/// (each candidate token to its earliest unaligned reference occurrence);
/// m = matched count, chunks = maximal runs whose reference positions are
/// consecutive. F = PR/(αP+(1−α)R) with α = 0.9, penalty = 0.5·(ch/m)³,
/// score = F·(1−penalty), max over references.
pub fn meteor_exact<T: Clone + Eq + Hash>(cand: &[T], ref_set: &[Vec<T>]) -> Result<f64> {
    if ref_set.is_empty() {
        return Err(Error::Value("meteor wants a nonempty reference set".into()));
    }
    const ALPHA: f64 = 0.9;
    let mut best = 0.0f64;
    for r in ref_set {
        let alignment = greedy_align(cand, r);
        let m = alignment.iter().flatten().count();
        if m == 0 || cand.is_empty() || r.is_empty() {
            continue;
        }
        let chunks = count_chunks(&alignment);
        let p = m as f64 / cand.len() as f64;
        let rr = m as f64 / r.len() as f64;
        let f = p * rr / (ALPHA * p + (1.0 - ALPHA) * rr);
        let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
        best = best.max(f * (1.0 - penalty));
    }
    Ok(best)
}

/// For each candidate position, the aligned reference position if any.
fn greedy_align<T: Clone + Eq + Hash>(cand: &[T], reference: &[T]) -> Vec<Option<usize>> {
    let mut used = vec![false; reference.len()];
    cand.iter()
        .map(|tok| {
            reference
                .iter()
                .enumerate()
                .position(|(j, r)| !used[j] && r == tok)
                .inspect(|&j| used[j] = true)
        })
        .collect()
}

fn count_chunks(alignment: &[Option<usize>]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in alignment {
        match (a, prev) {
            (Some(j), Some(p)) if *j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    chunks
}

/// Corpus metric report plus per-video sentence scores.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor_exact: f64,
    /// Per video: (sentence_bleu, rouge_l, cider_d, meteor_exact).
    pub per_video: Vec<(f64, f64, f64, f64)>,
}

impl EvalReport {
    /// Line-oriented human-readable form.
    pub fn to_text(&self) -> String {
        format!(
            "bleu4         {:.6}\nrouge_l       {:.6}\ncider_d       {:.6}\nmeteor_exact  {:.6}\n",
            self.bleu4, self.rouge_l, self.cider_d, self.meteor_exact
        )
    }

    /// Machine-readable key=value form.
    pub fn to_kv(&self) -> String {
        format!(
            "bleu4={:.12}\nrouge_l={:.12}\ncider_d={:.12}\nmeteor_exact={:.12}\n",
            self.bleu4, self.rouge_l, self.cider_d, self.meteor_exact
        )
    }

    /// Per-video TSV with a header row.
    pub fn per_video_tsv(&self, ids: &[String]) -> String {
        let mut out = String::from("video_id\tsentence_bleu\trouge_l\tcider_d\tmeteor_exact\n");
        for (id, (b, r, c, m)) in ids.iter().zip(&self.per_video) {
            let _ = writeln!(out, "{id}\t{b:.12}\t{r:.12}\t{c:.12}\t{m:.12}");
        }
        out
    }
}

/// All four corpus metrics plus the per-video table. Reduction is
/// sequential by video index so results do not depend on scheduling.
pub fn evaluate_corpus<T: Clone + Eq + Hash>(
    cands: &[Vec<T>],
    refs: &[Vec<Vec<T>>],
    df: &CorpusDocFreq<T>,
) -> Result<EvalReport> {
    if cands.is_empty() || cands.len() != refs.len() {
        return Err(Error::Value("evaluate_corpus wants aligned nonempty corpora".into()));
    }
    let mut per_video = Vec::with_capacity(cands.len());
    let (mut rouge_sum, mut meteor_sum) = (0.0, 0.0);
    for (c, r) in cands.iter().zip(refs) {
        let sb = sentence_bleu(c, r)?;
        let rl = rouge_l(c, r)?;
        let cd = cider_d_sentence(c, r, df)?;
        let me = meteor_exact(c, r)?;
        rouge_sum += rl;
        meteor_sum += me;
        per_video.push((sb, rl, cd, me));
    }
    let n = cands.len() as f64;
    Ok(EvalReport {
        bleu4: bleu4(cands, refs)?,
        rouge_l: rouge_sum / n,
        cider_d: per_video.iter().map(|v| v.2).sum::<f64>() / n,
        meteor_exact: meteor_sum / n,
        per_video,
    })
}
