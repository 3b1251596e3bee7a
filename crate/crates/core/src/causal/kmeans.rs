use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat};

const TOL: f64 = 1e-6;

/// Result of [`kmeans`]: centers are the means of the final assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centers: Mat,
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_norms(m: &Mat) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().map(|v| v * v).sum()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus<R: Rng>(items: &Mat, k: usize, rng: &mut R) -> Mat {
    let n = items.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(items.row(i), items.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // Every point coincides with a chosen center; take an unused index.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(items.row(i), items.row(next)));
        }
    }
    let mut c = Mat::zeros(k, items.cols());
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).copy_from_slice(items.row(i));
    }
    c
}

/// Nearest center per item (lowest index on ties) and the squared distances.
fn assign(items: &Mat, item_norms: &[f64], centers: &Mat) -> (Vec<usize>, Vec<f64>) {
    let cn = sq_norms(centers);
    let mut cross = Mat::zeros(items.rows(), centers.rows());
    gemm(false, true, 1.0, items, centers, 0.0, &mut cross);
    let mut lab = vec![0; items.rows()];
    let mut dist = vec![0.0; items.rows()];
    for i in 0..items.rows() {
        let row = cross.row(i);
        let mut best = f64::INFINITY;
        for (c, &x) in row.iter().enumerate() {
            let d = (item_norms[i] + cn[c] - 2.0 * x).max(0.0);
            if d < best {
                best = d;
                lab[i] = c;
            }
        }
        dist[i] = best;
    }
    (lab, dist)
}

/// Moves the worst-fit item of a multi-member cluster into each empty one.
fn fill_empty(items: &Mat, centers: &Mat, lab: &mut [usize], dist: &mut [f64], counts: &mut [usize]) {
    for c in 0..counts.len() {
        if counts[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut worst = -1.0;
        for i in 0..lab.len() {
            let d = sq_dist(items.row(i), centers.row(lab[i]));
            if counts[lab[i]] > 1 && d > worst {
                worst = d;
                far = Some(i);
            }
        }
        if let Some(i) = far {
            counts[lab[i]] -= 1;
            lab[i] = c;
            counts[c] = 1;
            dist[i] = 0.0;
        }
    }
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(items: &Mat, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    let n = items.rows();
    if k == 0 {
        return Err(Error::Parameter("cluster count must be positive".into()));
    }
    if n < k {
        return Err(Error::Parameter(format!("{n} items cannot fill {k} clusters")));
    }
    if !items.is_finite() {
        return Err(Error::Numeric("non-finite items passed to clustering".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norms = sq_norms(items);
    let mut centers = plus_plus(items, k, &mut rng);
    let mut inertia = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (mut lab, mut counts);
    loop {
        iterations += 1;
        let (l, mut dist) = assign(items, &norms, &centers);
        lab = l;
        counts = vec![0usize; k];
        for &c in &lab {
            counts[c] += 1;
        }
        fill_empty(items, &centers, &mut lab, &mut dist, &mut counts);
        inertia.push(dist.iter().sum());

        let mut next = Mat::zeros(k, items.cols());
        for (i, &c) in lab.iter().enumerate() {
            for (o, x) in next.row_mut(c).iter_mut().zip(items.row(i)) {
                *o += x;
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            let inv = 1.0 / cnt as f64;
            next.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
        let shift = (0..k)
            .map(|c| sq_dist(next.row(c), centers.row(c)).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        log::debug!("kmeans iter {iterations}: inertia {:.6e} shift {shift:.3e}", inertia[inertia.len() - 1]);
        if shift < TOL {
            converged = true;
            break;
        }
        if iterations >= max_iters {
            break;
        }
    }
    Ok(KMeansFit {
        centers,
        assignment: lab,
        counts,
        inertia,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_points_still_get_distinct_centers() {
        let items = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]]);
        let fit = kmeans(&items, 3, 0, 10).unwrap();
        assert_eq!(fit.counts.iter().sum::<usize>(), 3);
        assert!(fit.counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn too_few_items_is_a_parameter_error() {
        let items = Mat::zeros(2, 3);
        assert!(matches!(kmeans(&items, 3, 0, 10), Err(Error::Parameter(_))));
    }
}
