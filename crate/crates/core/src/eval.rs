//! Verification (1:1) and identification (1:N) scoring.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{config_err, dim_err, Error, Result};
use crate::numerics::ops::{cosine_similarity, matmul_nt, normalize_rows};
use crate::synthworld::SplitData;
use crate::{seeding, NumericArray, Scalar};

/// Cosine similarity between an image feature and a prompt feature.
pub fn score<F: Scalar>(f_x: &[F], f_p: &[F]) -> Result<F> {
    cosine_similarity(f_x, f_p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEntry {
    /// Sample index within the split.
    pub image: usize,
    /// Split-local identity whose prompt is used.
    pub prompt: usize,
    /// 1 when image and prompt share an identity.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub entries: Vec<PairEntry>,
    pub seed: u64,
    pub split: String,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }
}

/// `n/2` same-identity and `n/2` different-identity (image, prompt) pairs.
pub fn build_pairs<F: Scalar>(split: &SplitData<F>, n: usize, seed: u64) -> Result<PairList> {
    if n == 0 || n % 2 != 0 {
        return Err(config_err(format!("pair count must be positive and even, got {}", n)));
    }
    if split.n_ids() < 2 {
        return Err(config_err("pair building needs at least two identities"));
    }
    let groups = split.by_label();
    if groups.iter().any(|g| g.is_empty()) {
        return Err(config_err("every identity needs at least one sample"));
    }
    let mut rng = seeding::rng(seed);
    let ids = split.n_ids();
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n / 2 {
        let id = rng.gen_range(0..ids);
        let image = *groups[id].choose(&mut rng).expect("non-empty group");
        entries.push(PairEntry { image, prompt: id, label: 1 });
    }
    for _ in 0..n / 2 {
        let a = rng.gen_range(0..ids);
        let b = (a + rng.gen_range(1..ids)) % ids;
        let image = *groups[a].choose(&mut rng).expect("non-empty group");
        entries.push(PairEntry { image, prompt: b, label: 0 });
    }
    entries.shuffle(&mut rng);
    Ok(PairList { entries, seed, split: split.split.name().to_string() })
}

/// True/false positive rates over thresholds `s`, accepting when `score >= s`.
///
/// Thresholds are ascending: `-inf`, the midpoints between consecutive
/// distinct scores, then `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve<F> {
    pub thresholds: Vec<F>,
    pub tpr: Vec<F>,
    pub fpr: Vec<F>,
    tp: Vec<usize>,
    fp: Vec<usize>,
    positives: usize,
    negatives: usize,
}

impl<F: Scalar> RocCurve<F> {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        let mut area = 0.0;
        for i in 1..self.len() {
            let (x0, x1) = (self.fpr[i - 1].as_f64(), self.fpr[i].as_f64());
            let (y0, y1) = (self.tpr[i - 1].as_f64(), self.tpr[i].as_f64());
            area += (x0 - x1) * (y0 + y1) / 2.0;
        }
        area
    }

    /// `T(s) − F(s)` at threshold index `i`, scaled by `P·N` so ties compare exactly.
    fn youden_scaled(&self, i: usize) -> i128 {
        self.tp[i] as i128 * self.negatives as i128 - self.fp[i] as i128 * self.positives as i128
    }
}

pub fn roc<F: Scalar>(scores: &[F], labels: &[u8]) -> Result<RocCurve<F>> {
    if scores.len() != labels.len() {
        return Err(dim_err(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Degenerate("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(config_err("ROC needs both positive and negative pairs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    // Walk scores from high to low; every distinct score closes a group.
    let mut thr_desc = vec![F::infinity()];
    let mut tp_desc = vec![0usize];
    let mut fp_desc = vec![0usize];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let thr = match order.get(i) {
            Some(&next) => (s + scores[next]) / (F::one() + F::one()),
            None => F::neg_infinity(),
        };
        thr_desc.push(thr);
        tp_desc.push(tp);
        fp_desc.push(fp);
    }
    thr_desc.reverse();
    tp_desc.reverse();
    fp_desc.reverse();
    let pf = F::from_usize_lossy(positives);
    let nf = F::from_usize_lossy(negatives);
    Ok(RocCurve {
        tpr: tp_desc.iter().map(|&t| F::from_usize_lossy(t) / pf).collect(),
        fpr: fp_desc.iter().map(|&f| F::from_usize_lossy(f) / nf).collect(),
        thresholds: thr_desc,
        tp: tp_desc,
        fp: fp_desc,
        positives,
        negatives,
    })
}

/// Threshold maximizing `T(s) − F(s)`; the smallest one on ties.
pub fn select_threshold<F: Scalar>(curve: &RocCurve<F>) -> Result<F> {
    if curve.is_empty() {
        return Err(config_err("empty ROC curve"));
    }
    let mut best = 0;
    for i in 1..curve.len() {
        if curve.youden_scaled(i) > curve.youden_scaled(best) {
            best = i;
        }
    }
    Ok(curve.thresholds[best])
}

/// Fraction of pairs where `score >= s` agrees with the label.
pub fn verification_accuracy<F: Scalar>(pairs: &PairList, scores: &[F], s: F) -> Result<f64> {
    decision_accuracy(&pairs.labels(), scores, s)
}

pub fn decision_accuracy<F: Scalar>(labels: &[u8], scores: &[F], s: F) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(dim_err(format!("{} scores for {} pairs", scores.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(config_err("no pairs to score"));
    }
    let hits = labels.iter().zip(scores).filter(|(&l, &sc)| (sc >= s) == (l == 1)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per probe, the best `k` gallery entries by descending score, ties by
/// ascending gallery index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankTable<F> {
    pub rows: Vec<Vec<(usize, F)>>,
    pub gallery_size: usize,
}

impl<F: Scalar> RankTable<F> {
    pub fn k(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }
}

/// Cosine similarity of every probe row against every gallery row, `[P × N]`.
pub fn similarity_matrix<F: Scalar>(probes: &NumericArray<F>, gallery: &NumericArray<F>) -> Result<NumericArray<F>> {
    let (p, _) = normalize_rows(probes)?;
    let (g, _) = normalize_rows(gallery)?;
    matmul_nt(&p, &g)
}

pub fn rank_scores<F: Scalar>(scores: &NumericArray<F>, k: usize) -> Result<RankTable<F>> {
    let (probes, n) = scores.dims2()?;
    if k == 0 || k > n {
        return Err(config_err(format!("k must lie in 1..={}, got {}", n, k)));
    }
    let mut rows = Vec::with_capacity(probes);
    for i in 0..probes {
        let row = scores.row(i);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        rows.push(idx[..k].iter().map(|&j| (j, row[j])).collect());
    }
    Ok(RankTable { rows, gallery_size: n })
}

/// Top-`k` gallery indices for every probe feature.
pub fn top_k<F: Scalar>(probes: &NumericArray<F>, gallery: &NumericArray<F>, k: usize) -> Result<RankTable<F>> {
    rank_scores(&similarity_matrix(probes, gallery)?, k)
}

/// Fraction of probes `i` whose own gallery entry `i` is within their top `k`.
pub fn identification_accuracy<F: Scalar>(table: &RankTable<F>, k: usize) -> Result<f64> {
    if k == 0 || k > table.k() {
        return Err(config_err(format!("k must lie in 1..={}, got {}", table.k(), k)));
    }
    let hits = table.rows.iter().enumerate().filter(|(i, r)| r[..k].iter().any(|&(j, _)| j == *i)).count();
    Ok(hits as f64 / table.rows.len().max(1) as f64)
}

pub fn roc_csv<F: Scalar>(curve: &RocCurve<F>) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for i in 0..curve.len() {
        writeln!(s, "{},{},{}", curve.thresholds[i], curve.fpr[i], curve.tpr[i]).unwrap();
    }
    s
}

pub fn rank_csv<F: Scalar>(table: &RankTable<F>) -> String {
    let mut s = String::from("probe,rank,gallery,score\n");
    for (i, row) in table.rows.iter().enumerate() {
        for (r, (j, sc)) in row.iter().enumerate() {
            writeln!(s, "{},{},{},{}", i, r + 1, j, sc).unwrap();
        }
    }
    s
}

pub fn pair_scores_csv<F: Scalar>(pairs: &PairList, scores: &[F]) -> Result<String> {
    if pairs.len() != scores.len() {
        return Err(dim_err("one score per pair required"));
    }
    let mut s = String::from("image,prompt,label,score\n");
    for (e, sc) in pairs.entries.iter().zip(scores) {
        writeln!(s, "{},{},{},{}", e.image, e.prompt, e.label, sc).unwrap();
    }
    Ok(s)
}

pub fn export_results(path: impl AsRef<Path>, csv: &str) -> Result<()> {
    std::fs::write(path, csv)?;
    Ok(())
}

/// Parses a numeric CSV with a header row into its header and rows.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or(Error::Parse { line: 1, msg: "missing header".into() })?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse { line: i + 2, msg: format!("'{}': {}", v, e) }))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::Parse { line: i + 2, msg: format!("expected {} fields", header.len()) });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_cases() {
        assert!((score(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap() - 1.0f64).abs() < 1e-15);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0f64);
        assert!((score(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0f64 / 9.0).abs() < 1e-15);
        assert!(score(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn separated_scores_reach_corner() {
        let c = roc(&[0.9f64, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(c.fpr.iter().zip(&c.tpr).any(|(&f, &t)| f == 0.0 && t == 1.0));
        let s = select_threshold(&c).unwrap();
        assert!((s - 0.55).abs() < 1e-15);
        assert_eq!(c.tpr[0], 1.0);
        assert_eq!(c.fpr[0], 1.0);
        assert_eq!(*c.tpr.last().unwrap(), 0.0);
    }

    #[test]
    fn constant_scores_pick_smallest_threshold() {
        let c = roc(&[0.5f64; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(select_threshold(&c).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(roc(&[0.1f64, 0.2], &[1, 1]), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_extremes() {
        let pairs = PairList {
            entries: vec![
                PairEntry { image: 0, prompt: 0, label: 1 },
                PairEntry { image: 1, prompt: 0, label: 0 },
            ],
            seed: 0,
            split: "test".into(),
        };
        assert_eq!(verification_accuracy(&pairs, &[0.9, 0.1], 0.5).unwrap(), 1.0);
        assert_eq!(verification_accuracy(&pairs, &[0.1, 0.9], 0.5).unwrap(), 0.0);
        assert!(verification_accuracy(&pairs, &[0.1], 0.5).is_err());
    }

    #[test]
    fn top_k_hand_case() {
        let scores = NumericArray::from_vec(vec![1, 3], vec![0.9, 0.1, 0.5]).unwrap();
        let t = rank_scores(&scores, 2).unwrap();
        assert_eq!(t.rows[0].iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 2]);
        assert!(rank_scores(&scores, 0).is_err());
        assert!(rank_scores(&scores, 4).is_err());
    }

    #[test]
    fn ties_rank_by_index() {
        let scores = NumericArray::from_vec(vec![1, 4], vec![0.5, 0.7, 0.5, 0.7]).unwrap();
        let t = rank_scores(&scores, 4).unwrap();
        assert_eq!(t.rows[0].iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 3, 0, 2]);
    }

    #[test]
    fn empty_rank_table_exports_header_only() {
        let t: RankTable<f64> = RankTable { rows: vec![], gallery_size: 0 };
        assert_eq!(rank_csv(&t), "probe,rank,gallery,score\n");
    }
}
