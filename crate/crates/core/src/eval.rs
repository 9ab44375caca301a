//! Retrieval and clustering quality: Recall@K, NMI, and top-k retrieval.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::cluster::{kmeans, KmeansOpts};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Recall@K per requested K, each in `[0, 1]` and non-decreasing in K.
    pub recall: BTreeMap<usize, f64>,
    /// Normalized mutual information of k-means clusters against true labels.
    pub nmi: f64,
    pub n_queries: usize,
}

/// Ranks, for each query row, every other row by cosine similarity descending
/// (ties broken by ascending index) and reports the fraction of queries whose
/// top-K contains any same-label row.
pub fn recall_at_k<T: Scalar>(
    emb: &Tensor<T>,
    labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    let (n, _) = emb.dims2()?;
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "recall_at_k: {} labels for {n} rows",
            labels.len()
        )));
    }
    if ks.is_empty() {
        return Err(Error::Argument("recall_at_k: no K values requested".into()));
    }
    if let Some(&kmax) = ks.iter().max() {
        if kmax == 0 || kmax > n.saturating_sub(1) {
            return Err(Error::Argument(format!(
                "recall_at_k: K must lie in [1, {}], got {kmax}",
                n.saturating_sub(1)
            )));
        }
    }
    let mut class_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *class_sizes.entry(l).or_insert(0) += 1;
    }
    let singletons: Vec<usize> = class_sizes
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(&l, _)| l)
        .collect();
    if !singletons.is_empty() {
        return Err(Error::Argument(format!(
            "recall_at_k: classes with fewer than 2 members: {singletons:?}"
        )));
    }

    // rank of the first same-label hit per query, then every K in one pass
    let mut first_hit = Vec::with_capacity(n);
    for i in 0..n {
        let order = ranked_others(emb, i);
        let hit = order
            .iter()
            .position(|&(j, _)| labels[j] == labels[i])
            .expect("every class has another member");
        first_hit.push(hit + 1); // 1-based rank
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = first_hit.iter().filter(|&&r| r <= k).count();
        out.insert(k, hits as f64 / n as f64);
    }
    Ok(out)
}

fn ranked_others<T: Scalar>(emb: &Tensor<T>, query: usize) -> Vec<(usize, T)> {
    let (n, d) = emb.dims2().expect("matrix");
    let q = emb.row(query);
    let mut scored: Vec<(usize, T)> = (0..n)
        .filter(|&j| j != query)
        .map(|j| {
            let row = &emb.data()[j * d..(j + 1) * d];
            let mut s = T::zero();
            for p in 0..d {
                s = s + q[p] * row[p];
            }
            (j, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

/// Top-k gallery rows for one query embedding, similarity descending with
/// ties broken by ascending index.
pub fn retrieve<T: Scalar>(query: &[T], gallery: &Tensor<T>, k: usize) -> Result<Vec<(usize, T)>> {
    let (n, d) = gallery.dims2()?;
    if query.len() != d {
        return Err(Error::Dimension(format!(
            "retrieve: query width {} vs gallery width {d}",
            query.len()
        )));
    }
    if k > n {
        return Err(Error::Argument(format!(
            "retrieve: k={k} exceeds gallery of {n} rows"
        )));
    }
    let mut scored: Vec<(usize, T)> = (0..n)
        .map(|j| {
            let row = &gallery.data()[j * d..(j + 1) * d];
            let mut s = T::zero();
            for p in 0..d {
                s = s + query[p] * row[p];
            }
            (j, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Normalized mutual information with natural-log entropies:
/// `I(pred; truth) / ((H(pred) + H(truth)) / 2)`. Two single-cluster
/// partitions score 1; otherwise a zero entropy on either side scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "nmi: {} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("nmi: empty inputs".into()));
    }
    let n = pred.len() as f64;
    let mut pred_counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut truth_counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (&a, &b) in pred.iter().zip(truth) {
        *pred_counts.entry(a).or_insert(0.0) += 1.0;
        *truth_counts.entry(b).or_insert(0.0) += 1.0;
        *joint.entry((a, b)).or_insert(0.0) += 1.0;
    }
    let entropy = |counts: &BTreeMap<usize, f64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_pred = entropy(&pred_counts);
    let h_truth = entropy(&truth_counts);
    if h_pred == 0.0 && h_truth == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_truth == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let p_joint = c / n;
        let p_a = pred_counts[&a] / n;
        let p_b = truth_counts[&b] / n;
        mi += p_joint * (p_joint / (p_a * p_b)).ln();
    }
    // the ratio is mathematically in [0,1]; clamp away summation jitter
    Ok((mi / ((h_pred + h_truth) / 2.0)).clamp(0.0, 1.0))
}

/// Recall@K plus NMI of a seeded k-means run on the embeddings.
pub fn evaluate_embeddings<T: Scalar>(
    emb: &Tensor<T>,
    labels: &[usize],
    ks: &[usize],
    k_clusters: usize,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    let recall = recall_at_k(emb, labels, ks)?;
    let opts = KmeansOpts {
        workers,
        ..KmeansOpts::default()
    };
    let table = kmeans(emb, k_clusters, seed, &opts)?;
    let nmi = nmi(&table.labels, labels)?;
    Ok(EvalReport {
        recall,
        nmi,
        n_queries: labels.len(),
    })
}

/// CSV export: header `id,dim0..dimD`, one row per sample. Floats print in
/// shortest round-trip form, so identical embeddings export identical bytes.
pub fn write_embeddings_csv<T: Scalar>(path: &Path, ids: &[u64], emb: &Tensor<T>) -> Result<()> {
    let (n, d) = emb.dims2()?;
    if ids.len() != n {
        return Err(Error::Argument(format!(
            "csv export: {} ids for {n} rows",
            ids.len()
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "id")?;
    for j in 0..d {
        write!(out, ",dim{j}")?;
    }
    writeln!(out)?;
    for i in 0..n {
        write!(out, "{}", ids[i])?;
        for &v in emb.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor<f64> {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn paired_points_have_perfect_recall_at_one() {
        let emb = unit_rows(&[
            vec![1.0, 0.0],
            vec![0.99, 0.1],
            vec![-1.0, 0.0],
            vec![-0.99, 0.1],
        ]);
        let labels = [0, 0, 1, 1];
        let r = recall_at_k(&emb, &labels, &[1]).unwrap();
        assert_eq!(r[&1], 1.0);
    }

    #[test]
    fn recall_at_n_minus_one_is_total() {
        let emb = unit_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.2],
            vec![0.3, -1.0],
        ]);
        let labels = [0, 1, 0, 1];
        let r = recall_at_k(&emb, &labels, &[1, 3]).unwrap();
        assert_eq!(r[&3], 1.0);
        assert!(r[&1] <= r[&3]);
    }

    #[test]
    fn recall_rejects_singleton_classes_by_name() {
        let emb = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let err = recall_at_k(&emb, &[0, 0, 7], &[1]).unwrap_err().to_string();
        assert!(err.contains('7'), "{err}");
    }

    #[test]
    fn recall_rejects_oversized_k() {
        let emb = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(recall_at_k(&emb, &[0, 0], &[2]).is_err());
    }

    #[test]
    fn retrieve_self_match_ranks_first() {
        let gallery = unit_rows(&[vec![0.2, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]);
        let q = gallery.row(1).to_vec();
        let top = retrieve(&q, &gallery, 2).unwrap();
        assert_eq!(top[0].0, 1);
        assert!((top[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retrieve_full_k_is_a_permutation() {
        let gallery = unit_rows(&[vec![0.2, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]]);
        let top = retrieve(&[1.0, 0.0], &gallery, 3).unwrap();
        let mut ids: Vec<usize> = top.iter().map(|&(j, _)| j).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(retrieve(&[1.0, 0.0], &gallery, 4).is_err());
    }

    #[test]
    fn nmi_reference_cases() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 0, 0], &[0, 0, 1, 1]).unwrap(), 1.0); // relabel
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0], &[5, 5]).unwrap(), 1.0); // 0/0 case
        assert!(nmi(&[0, 1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn csv_export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let emb = Tensor::from_rows(&[vec![0.5f64, -1.0], vec![0.25, 2.0]]).unwrap();
        write_embeddings_csv(&path, &[10, 11], &emb).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "id,dim0,dim1\n10,0.5,-1\n11,0.25,2\n");
    }
}
