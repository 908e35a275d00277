//! Evaluation stack: token-usage diversity metrics, exact-match
//! retrieval, Bag-of-Words video features, a leave-one-out logistic
//! classifier with coefficient-based template importance, and the
//! regression/classification metrics used downstream.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};

// ── binary presence codes ────────────────────────────────────────────

/// K-bit presence vector: bit k set iff token k appears anywhere in the
/// frame's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    words: Vec<u64>,
    k: usize,
}

impl BinaryCode {
    pub fn from_tokens(tokens: &[usize], k: usize) -> Result<Self> {
        let mut words = vec![0u64; k.div_ceil(64)];
        for &t in tokens {
            if t >= k {
                return Err(Error::IndexOutOfRange { index: t, k });
            }
            words[t / 64] |= 1 << (t % 64);
        }
        Ok(BinaryCode { words, k })
    }

    pub fn bit(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn popcount(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }
}

// ── diversity metrics ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropyNorm {
    /// Divide by log2(K): 1.0 for the uniform distribution.
    Log2K,
    /// Literal division by K (kept for comparability experiments; the
    /// achievable maximum is log2(K)/K).
    K,
}

/// Shannon entropy of `p` normalized into a vocabulary-size-free score.
/// Zero probabilities contribute nothing (0 log 0 := 0).
pub fn normalized_entropy(p: &[f64], norm: EntropyNorm) -> Result<f64> {
    let k = p.len();
    if k < 2 {
        return Err(Error::Config(format!("entropy needs K >= 2, got {k}")));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("not a distribution (sum {sum})")));
    }
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.log2();
        }
    }
    Ok(match norm {
        EntropyNorm::Log2K => h / (k as f64).log2(),
        EntropyNorm::K => h / k as f64,
    })
}

/// Empirical token distribution over a vocabulary of size `k` from raw
/// token observations.
pub fn token_distribution(tokens: impl Iterator<Item = usize>, k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for t in tokens {
        if t >= k {
            return Err(Error::IndexOutOfRange { index: t, k });
        }
        counts[t] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Empty("token stream"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmiReport {
    pub avg_nmi: f64,
    /// Pairs with a constant column, which contribute 0 by definition.
    pub degenerate_pairs: usize,
}

/// Average pairwise normalized mutual information between binary feature
/// columns, from empirical 2x2 joints in base 2. Pairs involving a
/// constant column (zero entropy) contribute 0 and are counted.
pub fn avg_nmi(rows: &[BinaryCode]) -> Result<NmiReport> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Config(format!("avg_nmi needs N >= 2 rows, got {n}")));
    }
    let k = rows[0].k;
    if k < 2 {
        return Err(Error::Config(format!("avg_nmi needs K >= 2 columns, got {k}")));
    }
    if rows.iter().any(|r| r.k != k) {
        return Err(Error::Config("inconsistent code widths".into()));
    }
    // pack columns into word-parallel bitsets
    let wn = n.div_ceil(64);
    let mut cols = vec![vec![0u64; wn]; k];
    for (r, code) in rows.iter().enumerate() {
        for (c, col) in cols.iter_mut().enumerate() {
            if code.bit(c) {
                col[r / 64] |= 1 << (r % 64);
            }
        }
    }
    let ones: Vec<u64> = cols.iter().map(|c| c.iter().map(|w| w.count_ones() as u64).sum()).collect();
    let nf = n as f64;
    let entropy = |c1: u64| -> f64 {
        let p1 = c1 as f64 / nf;
        let p0 = 1.0 - p1;
        let mut h = 0.0;
        if p1 > 0.0 {
            h -= p1 * p1.log2();
        }
        if p0 > 0.0 {
            h -= p0 * p0.log2();
        }
        h
    };
    let mut total = 0.0;
    let mut degenerate = 0usize;
    for i in 0..k {
        let hi = entropy(ones[i]);
        for j in (i + 1)..k {
            let hj = entropy(ones[j]);
            if hi == 0.0 || hj == 0.0 {
                degenerate += 1;
                continue;
            }
            let c11: u64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| (a & b).count_ones() as u64).sum();
            let c10 = ones[i] - c11;
            let c01 = ones[j] - c11;
            let c00 = n as u64 - ones[i] - c01;
            let pi = [1.0 - ones[i] as f64 / nf, ones[i] as f64 / nf];
            let pj = [1.0 - ones[j] as f64 / nf, ones[j] as f64 / nf];
            let joint = [[c00, c01], [c10, c11]];
            let mut mi = 0.0;
            for (a, row) in joint.iter().enumerate() {
                for (b, &c) in row.iter().enumerate() {
                    if c > 0 {
                        let pab = c as f64 / nf;
                        mi += pab * (pab / (pi[a] * pj[b])).log2();
                    }
                }
            }
            total += mi / (hi * hj).sqrt();
        }
    }
    let pairs = k * (k - 1) / 2;
    Ok(NmiReport { avg_nmi: total / pairs as f64, degenerate_pairs: degenerate })
}

// ── Bag-of-Words ─────────────────────────────────────────────────────

/// Per-group token histograms: entry k counts occurrences of token k
/// across all frames and stages, normalized by frames * L.
pub fn bow(
    frames: &[(String, Vec<usize>)],
    group_of: &HashMap<String, String>,
    k: usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut counts: BTreeMap<String, (Vec<u64>, u64)> = BTreeMap::new();
    for (id, tokens) in frames {
        let group = group_of
            .get(id)
            .ok_or_else(|| Error::UnknownGroup(id.clone()))?;
        let entry = counts
            .entry(group.clone())
            .or_insert_with(|| (vec![0u64; k], 0));
        for &t in tokens {
            if t >= k {
                return Err(Error::IndexOutOfRange { index: t, k });
            }
            entry.0[t] += 1;
        }
        entry.1 += tokens.len() as u64;
    }
    let mut out = BTreeMap::new();
    for (group, (c, total)) in counts {
        if total == 0 {
            return Err(Error::EmptyGroup(group));
        }
        out.insert(group, c.iter().map(|&v| v as f64 / total as f64).collect());
    }
    Ok(out)
}

// ── exact-match retrieval ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalGroup {
    /// Database row indices whose code equals the query's.
    pub matches: Vec<usize>,
    /// False when fewer than `min_matches` rows matched.
    pub included: bool,
}

/// For each query code, all database frames with the exact same binary
/// code. `self_map[q]`, when given, names a database row that is the
/// query itself; it is dropped from the group before the threshold test.
pub fn retrieve_exact(
    queries: &[BinaryCode],
    database: &[BinaryCode],
    min_matches: usize,
    self_map: Option<&[usize]>,
) -> Result<Vec<RetrievalGroup>> {
    if let Some(sm) = self_map {
        if sm.len() != queries.len() {
            return Err(Error::Config("self_map length must match query count".into()));
        }
    }
    let mut index: HashMap<&BinaryCode, Vec<usize>> = HashMap::new();
    for (i, code) in database.iter().enumerate() {
        index.entry(code).or_default().push(i);
    }
    let mut out = Vec::with_capacity(queries.len());
    for (qi, code) in queries.iter().enumerate() {
        let mut matches: Vec<usize> = index.get(code).cloned().unwrap_or_default();
        if let Some(sm) = self_map {
            matches.retain(|&m| m != sm[qi]);
        }
        let included = matches.len() >= min_matches;
        out.push(RetrievalGroup { matches, included });
    }
    Ok(out)
}

/// Reference implementation: linear scan over the database. Exists to
/// pin the hash-indexed path.
pub fn retrieve_exact_brute(
    queries: &[BinaryCode],
    database: &[BinaryCode],
    min_matches: usize,
    self_map: Option<&[usize]>,
) -> Result<Vec<RetrievalGroup>> {
    let mut out = Vec::with_capacity(queries.len());
    for (qi, code) in queries.iter().enumerate() {
        let mut matches: Vec<usize> = database
            .iter()
            .enumerate()
            .filter(|(_, d)| *d == code)
            .map(|(i, _)| i)
            .collect();
        if let Some(sm) = self_map {
            matches.retain(|&m| m != sm[qi]);
        }
        let included = matches.len() >= min_matches;
        out.push(RetrievalGroup { matches, included });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalSummary {
    pub mean_cosine: f64,
    pub mean_euclidean: f64,
    /// Per-dimension standard deviation across each group, averaged over
    /// dimensions and then over included queries.
    pub mean_std: f64,
    pub included: usize,
    pub excluded: usize,
}

/// Scores retrieval groups against reference feature vectors. Cosine and
/// Euclidean compare the query's reference vector with every retrieved
/// one; std is population, per dimension across the group.
pub fn retrieval_metrics(
    groups: &[RetrievalGroup],
    query_refs: &[Vec<f64>],
    db_refs: &[Vec<f64>],
) -> Result<RetrievalSummary> {
    if query_refs.len() != groups.len() {
        return Err(Error::Config("one reference row per query required".into()));
    }
    let mut cos_sum = 0.0;
    let mut euc_sum = 0.0;
    let mut std_sum = 0.0;
    let mut included = 0usize;
    for (gi, group) in groups.iter().enumerate() {
        if !group.included {
            continue;
        }
        let q = &query_refs[gi];
        let dim = q.len();
        let mut cos_acc = 0.0;
        let mut euc_acc = 0.0;
        let mut mean = vec![0.0; dim];
        for &m in &group.matches {
            let r = db_refs
                .get(m)
                .ok_or_else(|| Error::MissingReference(m.to_string()))?;
            if r.len() != dim {
                return Err(Error::DimMismatch { expected: dim, got: r.len() });
            }
            cos_acc += cosine(q, r);
            euc_acc += euclidean(q, r);
            for (acc, &v) in mean.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let gn = group.matches.len() as f64;
        mean.iter_mut().for_each(|m| *m /= gn);
        let mut var = vec![0.0; dim];
        for &m in &group.matches {
            let r = &db_refs[m];
            for (vacc, (&v, &mu)) in var.iter_mut().zip(r.iter().zip(&mean)) {
                *vacc += (v - mu) * (v - mu);
            }
        }
        let std_avg: f64 = var.iter().map(|&v| (v / gn).sqrt()).sum::<f64>() / dim as f64;
        cos_sum += cos_acc / gn;
        euc_sum += euc_acc / gn;
        std_sum += std_avg;
        included += 1;
    }
    if included == 0 {
        return Err(Error::Empty("included query set"));
    }
    Ok(RetrievalSummary {
        mean_cosine: cos_sum / included as f64,
        mean_euclidean: euc_sum / included as f64,
        mean_std: std_sum / included as f64,
        included,
        excluded: groups.len() - included,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ── logistic regression with LOOCV ───────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// [classes, features] weights.
    pub weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Multinomial logistic objective: mean NLL + 0.5 * l2 * ||W||^2 (bias
/// unregularized), minimized by full-batch gradient descent with Armijo
/// backtracking until the gradient norm drops below 1e-6 or 10k steps.
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    l2: f64,
    init: Option<(&[Vec<f64>], &[f64])>,
) -> Result<LogisticModel> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Empty("training set"));
    }
    let f = x[0].len();
    let mut w = match init {
        Some((wi, _)) => wi.to_vec(),
        None => vec![vec![0.0; f]; classes],
    };
    let mut b = match init {
        Some((_, bi)) => bi.to_vec(),
        None => vec![0.0; classes],
    };

    let objective = |w: &[Vec<f64>], b: &[f64]| -> f64 {
        let mut nll = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + xi.iter().zip(&w[c]).map(|(v, wv)| v * wv).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            nll += lse - logits[yi];
        }
        let reg: f64 = w.iter().flatten().map(|v| v * v).sum();
        nll / n as f64 + 0.5 * l2 * reg
    };

    let mut loss = objective(&w, &b);
    let mut iters = 0usize;
    let max_iters = 10_000;
    let mut step = 1.0f64;
    while iters < max_iters {
        // gradient
        let mut gw = vec![vec![0.0; f]; classes];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let logits: Vec<f64> = (0..classes)
                .map(|c| b[c] + xi.iter().zip(&w[c]).map(|(v, wv)| v * wv).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= sum);
            for c in 0..classes {
                let delta = probs[c] - if c == yi { 1.0 } else { 0.0 };
                gb[c] += delta;
                for (g, &v) in gw[c].iter_mut().zip(xi) {
                    *g += delta * v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        let mut gnorm2 = 0.0;
        for c in 0..classes {
            gb[c] *= inv;
            gnorm2 += gb[c] * gb[c];
            for (g, wv) in gw[c].iter_mut().zip(&w[c]) {
                *g = *g * inv + l2 * wv;
                gnorm2 += *g * *g;
            }
        }
        if gnorm2.sqrt() < 1e-6 {
            break;
        }
        // Armijo backtracking line search
        step = (step * 2.0).min(64.0);
        loop {
            let wt: Vec<Vec<f64>> = w
                .iter()
                .zip(&gw)
                .map(|(wr, gr)| wr.iter().zip(gr).map(|(wv, gv)| wv - step * gv).collect())
                .collect();
            let bt: Vec<f64> = b.iter().zip(&gb).map(|(bv, gv)| bv - step * gv).collect();
            let lt = objective(&wt, &bt);
            if lt <= loss - 1e-4 * step * gnorm2 || step < 1e-12 {
                w = wt;
                b = bt;
                loss = lt;
                break;
            }
            step *= 0.5;
        }
        iters += 1;
    }
    Ok(LogisticModel { weights: w, intercepts: b, final_loss: loss, iterations: iters })
}

impl LogisticModel {
    pub fn probabilities(&self, xi: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.intercepts)
            .map(|(wc, bc)| bc + xi.iter().zip(wc).map(|(v, w)| v * w).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= sum);
        p
    }

    pub fn predict(&self, xi: &[f64]) -> usize {
        let p = self.probabilities(xi);
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("at least one class")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// One-vs-rest AUC, macro-averaged over classes.
    pub auc: f64,
    /// Coefficients of a final fit on all data, [classes, features].
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Held-out class probabilities, one row per sample.
    pub held_out_probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
}

/// Leave-one-out cross-validation of the logistic classifier, plus a
/// full-data fit for coefficient inspection. Requires at least two
/// classes with two samples each.
pub fn logistic_loocv(x: &[Vec<f64>], labels: &[usize], l2: f64) -> Result<LoocvReport> {
    let n = x.len();
    if n != labels.len() {
        return Err(Error::Config("feature/label count mismatch".into()));
    }
    let classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    if classes < 2 {
        return Err(Error::DegenerateLabels(format!("{classes} class(es) present")));
    }
    let mut per_class = vec![0usize; classes];
    for &l in labels {
        per_class[l] += 1;
    }
    if per_class.iter().any(|&c| c < 2) {
        return Err(Error::DegenerateLabels(
            "every class needs at least 2 samples for LOOCV".into(),
        ));
    }

    let full = fit_logistic(x, labels, classes, l2, None)?;
    let mut predictions = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for holdout in 0..n {
        let xt: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != holdout)
            .map(|(_, v)| v.clone())
            .collect();
        let yt: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != holdout)
            .map(|(_, &v)| v)
            .collect();
        // warm start from the full fit: convex objective, same minimizer
        let model = fit_logistic(
            &xt,
            &yt,
            classes,
            l2,
            Some((&full.weights, &full.intercepts)),
        )?;
        let p = model.probabilities(&x[holdout]);
        predictions.push(
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(i, _)| i)
                .expect("classes >= 2"),
        );
        probs.push(p);
    }

    let accuracy =
        predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
    let macro_f1 = macro_f1(&predictions, labels, classes);
    let mut auc_sum = 0.0;
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        auc_sum += auc_binary(&scores, &truth);
    }
    Ok(LoocvReport {
        accuracy,
        macro_f1,
        auc: auc_sum / classes as f64,
        coefficients: full.weights,
        intercepts: full.intercepts,
        held_out_probs: probs,
        predictions,
    })
}

/// Ranks tokens per class by log|coefficient|, descending; exact zeros
/// rank last with a -inf sentinel. Stable, so ties keep index order.
pub fn template_importance(coefficients: &[Vec<f64>]) -> Vec<Vec<(usize, f64)>> {
    coefficients
        .iter()
        .map(|row| {
            let mut ranked: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let score = if c == 0.0 { f64::NEG_INFINITY } else { c.abs().ln() };
                    (i, score)
                })
                .collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores ordered"));
            ranked
        })
        .collect()
}

// ── downstream metrics ───────────────────────────────────────────────

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "length mismatch");
    let mse: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    mse.sqrt()
}

/// Concordance correlation coefficient with population moments. Two
/// identical constant sequences score 1 (the 0/0 case); everything else
/// follows the definition.
pub fn ccc(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "length mismatch");
    let n = pred.len() as f64;
    let ma = pred.iter().sum::<f64>() / n;
    let mb = target.iter().sum::<f64>() / n;
    let va = pred.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
    let vb = target.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
    let cov = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - ma) * (b - mb))
        .sum::<f64>()
        / n;
    let denom = va + vb + (ma - mb) * (ma - mb);
    if denom == 0.0 {
        return if pred == target { 1.0 } else { 0.0 };
    }
    2.0 * cov / denom
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    /// One-vs-rest AUC averaged over classes; needs per-class scores.
    pub auc: Option<f64>,
}

pub fn classification_metrics(
    pred: &[usize],
    target: &[usize],
    classes: usize,
    scores: Option<&[Vec<f64>]>,
) -> ClassificationReport {
    assert_eq!(pred.len(), target.len(), "length mismatch");
    let n = pred.len() as f64;
    let accuracy = pred.iter().zip(target).filter(|(a, b)| a == b).count() as f64 / n;
    let mut recall_sum = 0.0;
    let mut recall_classes = 0usize;
    for c in 0..classes {
        let total = target.iter().filter(|&&y| y == c).count();
        if total == 0 {
            continue;
        }
        let hit = pred
            .iter()
            .zip(target)
            .filter(|(p, y)| **y == c && **p == c)
            .count();
        recall_sum += hit as f64 / total as f64;
        recall_classes += 1;
    }
    let balanced_accuracy = recall_sum / recall_classes.max(1) as f64;
    let macro_f1 = macro_f1(pred, target, classes);
    let auc = scores.map(|s| {
        let mut sum = 0.0;
        for c in 0..classes {
            let sc: Vec<f64> = s.iter().map(|p| p[c]).collect();
            let truth: Vec<bool> = target.iter().map(|&y| y == c).collect();
            sum += auc_binary(&sc, &truth);
        }
        sum / classes as f64
    });
    ClassificationReport { accuracy, balanced_accuracy, macro_f1, auc }
}

fn macro_f1(pred: &[usize], target: &[usize], classes: usize) -> f64 {
    let mut f1_sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let tp = pred
            .iter()
            .zip(target)
            .filter(|(p, y)| **p == c && **y == c)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(target)
            .filter(|(p, y)| **p == c && **y != c)
            .count() as f64;
        let fnn = pred
            .iter()
            .zip(target)
            .filter(|(p, y)| **p != c && **y == c)
            .count() as f64;
        if tp + fp + fnn == 0.0 {
            continue;
        }
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fnn) };
        f1_sum += f1;
        counted += 1;
    }
    f1_sum / counted.max(1) as f64
}

/// Mann-Whitney AUC with midrank tie handling.
pub fn auc_binary(scores: &[f64], truth: &[bool]) -> f64 {
    assert_eq!(scores.len(), truth.len(), "length mismatch");
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = truth
        .iter()
        .zip(&ranks)
        .filter(|(&t, _)| t)
        .map(|(_, &r)| r)
        .sum();
    (rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64)
}
