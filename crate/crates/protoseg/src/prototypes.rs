//! Class prototypes: K-Means over training-set embeddings with K equal to
//! the number of classes. k-means++ initialization, Lloyd iterations with
//! deterministic tie-breaking (lowest centroid index) and empty-cluster
//! reseeding to the point farthest from its assigned centroid.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::backbone::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::fileio::{BinReader, BinWriter};

#[derive(Debug, Clone)]
pub struct PrototypeMatrix {
    pub k_cls: usize,
    pub dim: usize,
    pub centroids: Vec<f64>, // k_cls x dim
    pub inertia: f64,
    pub assignment: Vec<usize>,
}

impl PrototypeMatrix {
    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance, ties broken by lowest index.
fn assign_point(point: &[f64], centroids: &[f64], k: usize, dim: usize) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for c in 0..k {
        let d = sq_dist(point, &centroids[c * dim..(c + 1) * dim]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn validate(x: &EmbeddingMatrix, k_cls: usize) -> Result<()> {
    if k_cls == 0 || k_cls > x.count {
        return Err(Error::Argument(format!(
            "k={k_cls} invalid for {} points",
            x.count
        )));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in embedding matrix".into()));
    }
    Ok(())
}

/// k-means++ seeding: first center uniform, later centers sampled with
/// probability proportional to squared distance to the nearest chosen one.
pub fn kmeanspp_init(x: &EmbeddingMatrix, k_cls: usize, seed: u64) -> Result<Vec<f64>> {
    validate(x, k_cls)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = x.dim;
    let mut centroids = Vec::with_capacity(k_cls * dim);
    let first = rng.gen_range(0..x.count);
    centroids.extend_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..x.count)
        .map(|i| sq_dist(x.row(i), &centroids[..dim]))
        .collect();
    for c in 1..k_cls {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            // all points coincide with chosen centers; any point works
            rng.gen_range(0..x.count)
        } else {
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut idx = x.count - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centroids.extend_from_slice(x.row(chosen));
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(x.row(i), &centroids[c * dim..(c + 1) * dim]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(centroids)
}

pub fn kmeans(
    x: &EmbeddingMatrix,
    k_cls: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<PrototypeMatrix> {
    validate(x, k_cls)?;
    if max_iter < 1 || tol < 0.0 {
        return Err(Error::Argument(format!(
            "max_iter={max_iter}, tol={tol} invalid"
        )));
    }
    let dim = x.dim;
    let mut centroids = kmeanspp_init(x, k_cls, seed)?;
    let mut assignment = vec![0usize; x.count];
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        // assignment step
        let mut new_inertia = 0.0;
        let mut dists = vec![0.0f64; x.count];
        for i in 0..x.count {
            let (c, d) = assign_point(x.row(i), &centroids, k_cls, dim);
            assignment[i] = c;
            dists[i] = d;
            new_inertia += d;
        }
        debug_assert!(
            new_inertia <= inertia + 1e-9 * inertia.max(1.0),
            "Lloyd inertia increased: {inertia} -> {new_inertia}"
        );
        inertia = new_inertia;

        // update step, reduced in fixed index order
        let mut sums = vec![0.0f64; k_cls * dim];
        let mut counts = vec![0usize; k_cls];
        for i in 0..x.count {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for c in 0..k_cls {
            if counts[c] == 0 {
                // reseed to the point farthest from its assigned centroid
                let far = dists
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                next[c * dim..(c + 1) * dim].copy_from_slice(x.row(far));
                dists[far] = 0.0;
            } else {
                for (j, s) in sums[c * dim..(c + 1) * dim].iter().enumerate() {
                    next[c * dim + j] = s / counts[c] as f64;
                }
            }
        }
        let movement = (0..k_cls)
            .map(|c| sq_dist(&centroids[c * dim..(c + 1) * dim], &next[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0f64, f64::max);
        centroids = next;
        if movement < tol {
            break;
        }
    }
    // final assignment against the final centroids
    let mut final_inertia = 0.0;
    for i in 0..x.count {
        let (c, d) = assign_point(x.row(i), &centroids, k_cls, dim);
        assignment[i] = c;
        final_inertia += d;
    }
    Ok(PrototypeMatrix {
        k_cls,
        dim,
        centroids,
        inertia: final_inertia,
        assignment,
    })
}

/// Prototype file: magic "PROT", u32 version=1, u32 k_cls, u32 dim,
/// centroids little-endian f32 row-major, then u64 count + u32 assignments.
pub fn write_prototypes(p: &PrototypeMatrix, path: &Path) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.bytes(b"PROT")?;
    w.u32(1)?;
    w.u32(p.k_cls as u32)?;
    w.u32(p.dim as u32)?;
    w.f64_as_f32_slice(&p.centroids)?;
    w.u64(p.assignment.len() as u64)?;
    for &a in &p.assignment {
        w.u32(a as u32)?;
    }
    Ok(())
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeMatrix> {
    let mut r = BinReader::open(path)?;
    r.expect_magic("PROT")?;
    r.expect_version("PROT", 1)?;
    let k_cls = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let centroids = r.f32_as_f64_vec(k_cls * dim)?;
    let count = r.u64()? as usize;
    let mut assignment = Vec::with_capacity(count);
    for _ in 0..count {
        assignment.push(r.u32()? as usize);
    }
    Ok(PrototypeMatrix {
        k_cls,
        dim,
        centroids,
        inertia: 0.0,
        assignment,
    })
}

#[cfg(test)]
pub mod test_oracle {
    //! Exhaustive-partition oracle: optimal k-means objective by trying
    //! every assignment of n points to k clusters. Independent of the
    //! Lloyd implementation; usable only for tiny instances.

    use super::sq_dist;
    use crate::backbone::EmbeddingMatrix;

    pub fn optimal_inertia(x: &EmbeddingMatrix, k: usize) -> f64 {
        let n = x.count;
        let dim = x.dim;
        let mut best = f64::INFINITY;
        let total = (k as u64).pow(n as u32);
        'outer: for code in 0..total {
            let mut assign = vec![0usize; n];
            let mut c = code;
            for a in assign.iter_mut() {
                *a = (c % k as u64) as usize;
                c /= k as u64;
            }
            for cluster in 0..k {
                if !assign.contains(&cluster) {
                    continue 'outer;
                }
            }
            let mut means = vec![0.0f64; k * dim];
            let mut counts = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (m, v) in means[a * dim..(a + 1) * dim].iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            for a in 0..k {
                for m in &mut means[a * dim..(a + 1) * dim] {
                    *m /= counts[a] as f64;
                }
            }
            let inertia: f64 = assign
                .iter()
                .enumerate()
                .map(|(i, &a)| sq_dist(x.row(i), &means[a * dim..(a + 1) * dim]))
                .sum();
            if inertia < best {
                best = inertia;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn em(dim: usize, rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix {
            count: rows.len(),
            dim,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            grid: None,
        }
    }

    #[test]
    fn k_equals_count_gives_zero_inertia() {
        let x = em(2, &[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let p = kmeans(&x, 3, 1, 50, 1e-9).unwrap();
        assert!(p.inertia < 1e-9);
    }

    #[test]
    fn k_one_is_the_mean() {
        let x = em(1, &[&[1.0], &[2.0], &[3.0], &[6.0]]);
        let p = kmeans(&x, 1, 1, 50, 1e-12).unwrap();
        assert!((p.centroids[0] - 3.0).abs() < 1e-12);
        let expect: f64 = [1.0f64, 2.0, 3.0, 6.0]
            .iter()
            .map(|v| (v - 3.0) * (v - 3.0))
            .sum();
        assert!((p.inertia - expect).abs() < 1e-9);
    }

    #[test]
    fn two_tight_pairs_split_correctly() {
        let x = em(1, &[&[0.0], &[0.1], &[10.0], &[10.1]]);
        let p = kmeans(&x, 2, 3, 100, 1e-12).unwrap();
        let mut cs = vec![p.centroids[0], p.centroids[1]];
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cs[0] - 0.05).abs() < 1e-9);
        assert!((cs[1] - 10.05).abs() < 1e-9);
        assert!((p.inertia - 0.01).abs() < 1e-9);
        assert!((p.inertia - test_oracle::optimal_inertia(&x, 2)).abs() < 1e-9);
    }

    #[test]
    fn assignments_are_nearest_at_termination() {
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(7);
        let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = EmbeddingMatrix {
            count: 10,
            dim: 4,
            data,
            grid: None,
        };
        let p = kmeans(&x, 3, 5, 100, 1e-10).unwrap();
        for i in 0..x.count {
            let (c, d) = assign_point(x.row(i), &p.centroids, 3, 4);
            let dd = sq_dist(x.row(i), p.centroid(p.assignment[i]));
            assert!(dd <= d + 1e-9);
            assert_eq!(c, p.assignment[i]);
        }
        // inertia consistent with assignments
        let recompute: f64 = (0..x.count)
            .map(|i| sq_dist(x.row(i), p.centroid(p.assignment[i])))
            .sum();
        assert!((recompute - p.inertia).abs() < 1e-6);
    }

    #[test]
    fn init_centers_are_input_points() {
        let x = em(1, &[&[0.0], &[0.0], &[5.0], &[5.0]]);
        let c = kmeanspp_init(&x, 1, 9).unwrap();
        assert!(c[0] == 0.0 || c[0] == 5.0);
        // duplicate dataset: every chosen center still an input point
        let c2 = kmeanspp_init(&x, 2, 9).unwrap();
        for v in c2 {
            assert!(v == 0.0 || v == 5.0);
        }
    }

    #[test]
    fn far_clusters_each_get_a_center() {
        let x = em(1, &[&[0.0], &[0.2], &[0.1], &[100.0], &[100.2], &[100.1]]);
        let c = kmeanspp_init(&x, 2, 12345).unwrap();
        let low = c.iter().filter(|&&v| v < 50.0).count();
        assert_eq!(low, 1, "centers {c:?} should land in different clusters");
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = em(1, &[&[0.0], &[1.0]]);
        assert!(kmeans(&x, 3, 1, 10, 1e-6).is_err());
        assert!(kmeans(&x, 1, 1, 0, 1e-6).is_err());
        let bad = em(1, &[&[f64::NAN], &[1.0]]);
        assert!(kmeans(&bad, 1, 1, 10, 1e-6).is_err());
    }

    #[test]
    fn prototype_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let p = PrototypeMatrix {
            k_cls: 2,
            dim: 2,
            centroids: vec![0.5, 1.0, -0.25, 2.0],
            inertia: 0.0,
            assignment: vec![0, 1, 1],
        };
        let path = dir.path().join("p.prot");
        write_prototypes(&p, &path).unwrap();
        let back = read_prototypes(&path).unwrap();
        assert_eq!(back.k_cls, 2);
        assert_eq!(back.centroids, p.centroids);
        assert_eq!(back.assignment, p.assignment);
    }

    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
