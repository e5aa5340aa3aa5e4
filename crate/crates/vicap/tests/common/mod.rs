//! Brute-force metric oracles: direct formula evaluation with naive
//! n-gram scanning and recursive LCS, no shared code with the library.

/// Occurrences of `gram` in `s` by sliding-window scan.
fn occurrences(s: &[u32], gram: &[u32]) -> usize {
    if gram.is_empty() || s.len() < gram.len() {
        return 0;
    }
    s.windows(gram.len()).filter(|w| *w == gram).count()
}

/// Distinct n-grams of `s`, each listed once, in first-occurrence order.
fn distinct_ngrams(s: &[u32], n: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    if s.len() < n {
        return out;
    }
    for w in s.windows(n) {
        if !out.iter().any(|g| g == w) {
            out.push(w.to_vec());
        }
    }
    out
}

fn closest_ref_len(cand_len: usize, refs: &[Vec<u32>]) -> usize {
    let mut best = refs[0].len();
    for r in &refs[1..] {
        let d = (r.len() as i64 - cand_len as i64).abs();
        let db = (best as i64 - cand_len as i64).abs();
        if d < db || (d == db && r.len() < best) {
            best = r.len();
        }
    }
    best
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

pub fn oracle_bleu4(cands: &[Vec<u32>], refs: &[Vec<Vec<u32>>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let (mut numer, mut denom) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            for gram in distinct_ngrams(c, n) {
                let cnt = occurrences(c, &gram);
                let max_r = rs.iter().map(|r| occurrences(r, &gram)).max().unwrap_or(0);
                numer += cnt.min(max_r);
                denom += cnt;
            }
        }
        if numer == 0 || denom == 0 {
            return 0.0;
        }
        log_sum += (numer as f64 / denom as f64).ln() / 4.0;
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| closest_ref_len(c.len(), rs))
        .sum();
    brevity_penalty(c_len, r_len) * log_sum.exp()
}

pub fn oracle_sentence_bleu(cand: &[u32], refs: &[Vec<u32>]) -> f64 {
    const EPS: f64 = 1e-9;
    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let (mut numer, mut denom) = (0usize, 0usize);
        for gram in distinct_ngrams(cand, n) {
            let cnt = occurrences(cand, &gram);
            let max_r = refs.iter().map(|r| occurrences(r, &gram)).max().unwrap_or(0);
            numer += cnt.min(max_r);
            denom += cnt;
        }
        let p = if denom == 0 {
            EPS
        } else if numer == 0 {
            EPS / denom as f64
        } else {
            numer as f64 / denom as f64
        };
        log_sum += p.ln() / 4.0;
    }
    brevity_penalty(cand.len(), closest_ref_len(cand.len(), refs)) * log_sum.exp()
}

/// Plain recursive LCS with memoization.
fn lcs(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(v) = memo[i][j] {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs(a, b, i + 1, j + 1, memo)
    } else {
        lcs(a, b, i + 1, j, memo).max(lcs(a, b, i, j + 1, memo))
    };
    memo[i][j] = Some(v);
    v
}

pub fn oracle_rouge_l(cand: &[u32], refs: &[Vec<u32>]) -> f64 {
    const BETA: f64 = 1.2;
    let mut best = 0.0f64;
    for r in refs {
        let mut memo = vec![vec![None; r.len()]; cand.len()];
        let l = if cand.is_empty() || r.is_empty() {
            0
        } else {
            lcs(cand, r, 0, 0, &mut memo)
        };
        if l == 0 {
            continue;
        }
        let p = l as f64 / cand.len() as f64;
        let rec = l as f64 / r.len() as f64;
        best = best.max((1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p));
    }
    best
}

pub fn oracle_cider_d(cand: &[u32], refs: &[Vec<u32>], all_refs: &[Vec<Vec<u32>>]) -> f64 {
    const SIGMA: f64 = 6.0;
    let n_docs = all_refs.len() as f64;
    let doc_freq = |gram: &[u32]| -> f64 {
        all_refs
            .iter()
            .filter(|rs| rs.iter().any(|r| occurrences(r, gram) > 0))
            .count() as f64
    };
    // tf-idf weight vector of sentence s for order n, as (gram, weight)
    let tfidf = |s: &[u32], n: usize| -> Vec<(Vec<u32>, f64)> {
        distinct_ngrams(s, n)
            .into_iter()
            .map(|g| {
                let idf = n_docs.ln() - doc_freq(&g).max(1.0).ln();
                let w = occurrences(s, &g) as f64 * idf;
                (g, w)
            })
            .collect()
    };
    let norm = |v: &[(Vec<u32>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut total = 0.0;
    for r in refs {
        let delta = cand.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / (2.0 * SIGMA * SIGMA)).exp();
        let mut per_n = 0.0;
        for n in 1..=4usize {
            let cv = tfidf(cand, n);
            let rv = tfidf(r, n);
            let mut sim = 0.0;
            for (g, cw) in &cv {
                if let Some((_, rw)) = rv.iter().find(|(rg, _)| rg == g) {
                    sim += cw.min(*rw) * rw;
                }
            }
            let (nc, nr) = (norm(&cv), norm(&rv));
            if nc > 0.0 && nr > 0.0 {
                sim /= nc * nr;
            }
            per_n += sim * penalty;
        }
        total += per_n / 4.0;
    }
    10.0 * total / refs.len() as f64
}

pub fn oracle_meteor(cand: &[u32], refs: &[Vec<u32>]) -> f64 {
    const ALPHA: f64 = 0.9;
    let mut best = 0.0f64;
    for r in refs {
        // greedy left-to-right alignment to the earliest unused occurrence
        let mut used = vec![false; r.len()];
        let mut aligned: Vec<Option<usize>> = Vec::new();
        for tok in cand {
            let mut hit = None;
            for (j, rt) in r.iter().enumerate() {
                if !used[j] && rt == tok {
                    used[j] = true;
                    hit = Some(j);
                    break;
                }
            }
            aligned.push(hit);
        }
        let m = aligned.iter().filter(|a| a.is_some()).count();
        if m == 0 || cand.is_empty() || r.is_empty() {
            continue;
        }
        // a chunk ends at any gap or non-consecutive reference position
        let mut chunks = 0;
        let mut prev: Option<usize> = None;
        for a in &aligned {
            if let Some(j) = a {
                if prev != Some(j.wrapping_sub(1)) {
                    chunks += 1;
                }
            }
            prev = *a;
        }
        let p = m as f64 / cand.len() as f64;
        let rec = m as f64 / r.len() as f64;
        let f = p * rec / (ALPHA * p + (1.0 - ALPHA) * rec);
        let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
        best = best.max(f * (1.0 - penalty));
    }
    best
}
