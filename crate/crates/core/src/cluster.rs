//! k-means pseudo-label generation.
//!
//! Lloyd iterations with k-means++ seeding. Before the first training epoch,
//! clustering runs on pooled backbone features; afterwards it runs on the
//! unit embedding vectors. Empty clusters are repaired by seizing the point
//! farthest from its assigned centroid, so all k clusters stay populated and
//! the class-balanced batch sampler never starves.
//!
//! Seeding protocol (fixed so an independent oracle can replay it): the RNG is
//! `ChaCha8Rng::seed_from_u64(seed)`; the first centroid index is
//! `random_range(0..n)`; each next centroid draws `r = random::<f64>() * total`
//! where `total` is the f64 sum of squared distances to the nearest chosen
//! centroid, and picks the first index whose cumulative weight exceeds `r`
//! (uniform re-draw if `total == 0`). Lloyd steps consume no randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct PseudoLabelTable<T> {
    /// Cluster id per sample, each in `[0, k)`.
    pub labels: Vec<usize>,
    /// `[k, d]` centroid matrix.
    pub centroids: Tensor<T>,
    /// Sum of squared distances from points to their assigned centroids.
    pub inertia: T,
    /// Epoch the table was built for.
    pub epoch_stamp: usize,
}

impl<T: Scalar> PseudoLabelTable<T> {
    pub fn k(&self) -> usize {
        self.centroids.shape()[0]
    }

    /// Member indices per cluster, ascending within each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.labels.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct KmeansOpts {
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    /// Worker threads for the assignment step; results are identical for any
    /// count.
    pub workers: usize,
}

impl Default for KmeansOpts {
    fn default() -> Self {
        KmeansOpts {
            max_iter: 100,
            tol: 1e-6,
            workers: 1,
        }
    }
}

pub fn kmeans<T: Scalar>(
    points: &Tensor<T>,
    k: usize,
    seed: u64,
    opts: &KmeansOpts,
) -> Result<PseudoLabelTable<T>> {
    kmeans_traced(points, k, seed, opts).map(|(table, _)| table)
}

/// Like [`kmeans`] but also returns the inertia after every Lloyd iteration.
pub fn kmeans_traced<T: Scalar>(
    points: &Tensor<T>,
    k: usize,
    seed: u64,
    opts: &KmeansOpts,
) -> Result<(PseudoLabelTable<T>, Vec<T>)> {
    let (n, d) = points.dims2()?;
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "kmeans: k must satisfy 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if !points.all_finite() {
        return Err(Error::Numeric("kmeans: non-finite input points".into()));
    }
    let xs = points.data();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(xs, n, d, k, &mut rng);

    let mut labels = vec![0usize; n];
    let mut trace = Vec::new();
    let mut prev_inertia: Option<T> = None;
    for _iter in 0..opts.max_iter {
        assign_all(xs, n, d, &centroids, k, opts.workers.max(1), &mut labels);
        repair_empty_clusters(xs, n, d, &centroids, k, &mut labels);

        let next = mean_centroids(xs, n, d, &labels, k);
        let shift = max_displacement(&centroids, &next, k, d);
        centroids = next;

        let inertia = inertia_of(xs, n, d, &centroids, &labels);
        if let Some(prev) = prev_inertia {
            // Lloyd never increases inertia; allow only summation jitter.
            let slack = T::from_f64(1e-5) * prev.max(T::one());
            assert!(
                inertia <= prev + slack,
                "inertia increased: {prev} -> {inertia}"
            );
        }
        prev_inertia = Some(inertia);
        trace.push(inertia);

        if shift < T::from_f64(opts.tol) {
            break;
        }
    }

    let inertia = *trace.last().expect("max_iter >= 1");
    Ok((
        PseudoLabelTable {
            labels,
            centroids: Tensor::new(vec![k, d], centroids)?,
            inertia,
            epoch_stamp: 0,
        },
        trace,
    ))
}

fn dist2<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        s = s + diff * diff;
    }
    s
}

fn plus_plus_seeds<T: Scalar>(xs: &[T], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut centroids: Vec<T> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&xs[first * d..(first + 1) * d]);
    let mut best = vec![T::infinity(); n];
    while centroids.len() < k * d {
        let newest = &centroids[centroids.len() - d..];
        let mut total = 0.0f64;
        for i in 0..n {
            let dd = dist2(&xs[i * d..(i + 1) * d], newest);
            if dd < best[i] {
                best[i] = dd;
            }
            total += best[i].to_f64();
        }
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0f64;
            let mut chosen = n - 1;
            for (i, b) in best.iter().enumerate() {
                acc += b.to_f64();
                if acc > r {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(&xs[pick * d..(pick + 1) * d]);
    }
    centroids
}

/// Nearest-centroid assignment, ties to the lowest cluster index. Each point
/// is independent, so chunked threads produce the same labels as one thread.
fn assign_all<T: Scalar>(
    xs: &[T],
    n: usize,
    d: usize,
    centroids: &[T],
    k: usize,
    workers: usize,
    labels: &mut [usize],
) {
    let assign_one = |i: usize| -> usize {
        let p = &xs[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_d = dist2(p, &centroids[..d]);
        for c in 1..k {
            let dd = dist2(p, &centroids[c * d..(c + 1) * d]);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        best
    };
    if workers <= 1 || n < 2 * workers {
        for (i, slot) in labels.iter_mut().enumerate() {
            *slot = assign_one(i);
        }
        return;
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest = &mut labels[..];
        let mut offset = 0usize;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            let start = offset;
            scope.spawn(move || {
                for (j, slot) in head.iter_mut().enumerate() {
                    *slot = assign_one(start + j);
                }
            });
            rest = tail;
            offset += take;
        }
    });
}

/// Gives every empty cluster the point farthest from its assigned centroid,
/// drawing only from clusters that keep at least one member. Ties break to
/// the smallest point index; processing order is ascending cluster id.
fn repair_empty_clusters<T: Scalar>(
    xs: &[T],
    n: usize,
    d: usize,
    centroids: &[T],
    k: usize,
    labels: &mut [usize],
) {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut far: Option<(usize, T)> = None;
        for i in 0..n {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let dd = dist2(
                &xs[i * d..(i + 1) * d],
                &centroids[labels[i] * d..(labels[i] + 1) * d],
            );
            if far.map_or(true, |(_, best)| dd > best) {
                far = Some((i, dd));
            }
        }
        let (chosen, _) = far.expect("k <= n guarantees a donor cluster");
        sizes[labels[chosen]] -= 1;
        labels[chosen] = c;
        sizes[c] = 1;
    }
}

fn mean_centroids<T: Scalar>(xs: &[T], n: usize, d: usize, labels: &[usize], k: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); k * d];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let c = labels[i];
        counts[c] += 1;
        for j in 0..d {
            sums[c * d + j] = sums[c * d + j] + xs[i * d + j];
        }
    }
    for c in 0..k {
        let inv = T::one() / T::from_usize(counts[c].max(1));
        for j in 0..d {
            sums[c * d + j] = sums[c * d + j] * inv;
        }
    }
    sums
}

fn max_displacement<T: Scalar>(old: &[T], new: &[T], k: usize, d: usize) -> T {
    let mut worst = T::zero();
    for c in 0..k {
        let dd = dist2(&old[c * d..(c + 1) * d], &new[c * d..(c + 1) * d]).sqrt();
        if dd > worst {
            worst = dd;
        }
    }
    worst
}

fn inertia_of<T: Scalar>(xs: &[T], n: usize, d: usize, centroids: &[T], labels: &[usize]) -> T {
    let mut total = T::zero();
    for i in 0..n {
        total = total
            + dist2(
                &xs[i * d..(i + 1) * d],
                &centroids[labels[i] * d..(labels[i] + 1) * d],
            );
    }
    total
}

/// Pooled backbone features with no augmentation; the clustering input used
/// once before the first epoch.
pub fn initial_features<T: Scalar>(model: &ModelParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    model.features(images)
}

/// Full inference-mode forward (no augmentation, no rotation) followed by
/// k-means on the unit embeddings; the per-epoch reassignment path.
pub fn recluster_embeddings<T: Scalar>(
    model: &ModelParams<T>,
    images: &Tensor<T>,
    k: usize,
    seed: u64,
    opts: &KmeansOpts,
) -> Result<PseudoLabelTable<T>> {
    let emb = model.embeddings(images)?;
    kmeans(&emb, k, seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, BackboneKind, BackboneSpec};

    #[test]
    fn singleton_instance() {
        let p = Tensor::new(vec![1, 2], vec![3.0f64, -1.0]).unwrap();
        let t = kmeans(&p, 1, 0, &KmeansOpts::default()).unwrap();
        assert_eq!(t.labels, vec![0]);
        assert_eq!(t.centroids.data(), &[3.0, -1.0]);
        assert_eq!(t.inertia, 0.0);
    }

    #[test]
    fn n_equals_k_distinct_points_fit_perfectly() {
        let p = Tensor::new(vec![4, 2], vec![0.0f64, 0.0, 10.0, 0.0, 0.0, 10.0, 10.0, 10.0]).unwrap();
        let t = kmeans(&p, 4, 7, &KmeansOpts::default()).unwrap();
        assert!(t.inertia.abs() < 1e-12);
        let mut seen = t.labels.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_k_larger_than_n() {
        let p = Tensor::new(vec![2, 1], vec![0.0f64, 1.0]).unwrap();
        assert!(matches!(
            kmeans(&p, 3, 0, &KmeansOpts::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rejects_non_finite_points() {
        let p = Tensor::new(vec![2, 1], vec![f64::NAN, 1.0]).unwrap();
        assert!(matches!(
            kmeans(&p, 1, 0, &KmeansOpts::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn identical_points_still_fill_all_clusters() {
        let p = Tensor::new(vec![6, 2], vec![0.0f64; 12]).unwrap();
        let t = kmeans(&p, 3, 5, &KmeansOpts::default()).unwrap();
        let members = t.members();
        assert!(members.iter().all(|m| !m.is_empty()));
        assert!(t.labels.iter().all(|&l| l < 3));
        assert_eq!(t.inertia, 0.0);
    }

    #[test]
    fn deterministic_given_seed_and_worker_count() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data: Vec<f64> = (0..80).map(|_| rng.random::<f64>() * 4.0).collect();
        let p = Tensor::new(vec![40, 2], data).unwrap();
        let a = kmeans(&p, 5, 9, &KmeansOpts::default()).unwrap();
        let b = kmeans(&p, 5, 9, &KmeansOpts::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.centroids.data(), b.centroids.data());
        let mut opts = KmeansOpts::default();
        opts.workers = 3;
        let c = kmeans(&p, 5, 9, &opts).unwrap();
        assert_eq!(a.labels, c.labels);
        assert_eq!(a.centroids.data(), c.centroids.data());
    }

    #[test]
    fn inertia_trace_is_non_increasing() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..60).map(|_| rng.random::<f64>() * 10.0).collect();
        let p = Tensor::new(vec![30, 2], data).unwrap();
        let (_, trace) = kmeans_traced(&p, 4, 1, &KmeansOpts::default()).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace {trace:?}");
        }
    }

    #[test]
    fn zero_network_degenerate_features_repair_to_k_clusters() {
        let spec = BackboneSpec::new(BackboneKind::SmallConv, vec![2, 3], (1, 8, 8)).unwrap();
        let model = init_params::<f64>(&spec, 4, 0).unwrap();
        let feats = initial_features(&model, &Tensor::zeros(vec![6, 1, 8, 8])).unwrap();
        assert_eq!(feats.shape(), &[6, spec.d_feat()]);
        assert!(feats.data().iter().all(|&v| v == 0.0));
        let t = kmeans(&feats, 3, 0, &KmeansOpts::default()).unwrap();
        assert!(t.members().iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn recluster_is_deterministic() {
        use rand::Rng;
        let spec = BackboneSpec::new(BackboneKind::SmallConv, vec![2, 3], (1, 8, 8)).unwrap();
        let model = init_params::<f64>(&spec, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..20 * 64).map(|_| rng.random()).collect();
        let imgs = Tensor::new(vec![20, 1, 8, 8], data).unwrap();
        let a = recluster_embeddings(&model, &imgs, 4, 2, &KmeansOpts::default()).unwrap();
        let b = recluster_embeddings(&model, &imgs, 4, 2, &KmeansOpts::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.inertia, b.inertia);
    }
}
