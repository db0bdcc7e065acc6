//! Shared test oracles, independent of the library's implementation
//! paths: a hand-rolled Jacobi eigensolver driving a reference CCA, and
//! a longhand detection-mAP evaluator.

use nalgebra::{DMatrix, DVector};
use opd_core::datamodel::{bucket_of, FrequencyBucket, GroundTruthDataset, Phrase};
use opd_core::eval::ScoredPrediction;
use std::collections::BTreeMap;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching eigenvector columns.
pub fn jacobi_eigen(a: &DMatrix<f64>, sweeps: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let vectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&i| v.column(i).into_owned())
            .collect::<Vec<_>>(),
    );
    (values, vectors)
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let means = column_means(m);
    let mut out = m.clone();
    for (j, mu) in means.iter().enumerate() {
        for v in out.column_mut(j).iter_mut() {
            *v -= mu;
        }
    }
    out
}

fn jacobi_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = jacobi_eigen(m, 60);
    let mut scaled = vecs.clone();
    for (j, lambda) in vals.iter().enumerate() {
        assert!(*lambda > 0.0, "oracle inv-sqrt needs positive definiteness");
        scaled.column_mut(j).scale_mut(1.0 / lambda.sqrt());
    }
    scaled * vecs.transpose()
}

pub struct OracleCca {
    pub correlations: DVector<f64>,
    pub wx: DMatrix<f64>,
    pub wy: DMatrix<f64>,
}

/// Reference CCA through the SVD-free route: Jacobi eigendecomposition of
/// `T T^T` with the phrase side recovered as `T^T u / rho`.
pub fn oracle_cca(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize, eps: f64) -> OracleCca {
    let n = x.nrows() as f64;
    let xc = centered(x);
    let yc = centered(y);
    let mut sxx = xc.tr_mul(&xc) / n;
    let mut syy = yc.tr_mul(&yc) / n;
    for i in 0..sxx.nrows() {
        sxx[(i, i)] += eps;
    }
    for i in 0..syy.nrows() {
        syy[(i, i)] += eps;
    }
    let sxy = xc.tr_mul(&yc) / n;
    let pxx = jacobi_inv_sqrt(&sxx);
    let pyy = jacobi_inv_sqrt(&syy);
    let t = &pxx * &sxy * &pyy;
    let (vals, vecs) = jacobi_eigen(&(&t * t.transpose()), 60);
    let mut correlations = DVector::zeros(k);
    let mut wx = DMatrix::zeros(x.ncols(), k);
    let mut wy = DMatrix::zeros(y.ncols(), k);
    for i in 0..k {
        let rho = vals[i].max(0.0).sqrt().min(1.0);
        let u = vecs.column(i).into_owned();
        let wx_i = &pxx * &u;
        let v = t.tr_mul(&u) / rho.max(1e-12);
        let wy_i = &pyy * v;
        correlations[i] = rho;
        wx.set_column(i, &wx_i);
        wy.set_column(i, &wy_i);
    }
    // match the production sign convention: region column's
    // largest-magnitude entry positive, phrase column flipped in tandem
    for i in 0..k {
        let col = wx.column(i);
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(idx, _)| idx)
            .unwrap();
        if wx[(lead, i)] < 0.0 {
            wx.column_mut(i).neg_mut();
            wy.column_mut(i).neg_mut();
        }
    }
    OracleCca {
        correlations,
        wx,
        wy,
    }
}

fn oracle_iou(
    a: &opd_core::datamodel::BoundingBox,
    b: &opd_core::datamodel::BoundingBox,
) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

pub struct OracleDetection {
    pub per_phrase: BTreeMap<Phrase, f64>,
    pub bucket_means: [Option<f64>; 3],
    pub overall: f64,
}

/// Longhand detection mAP: per phrase, selection-sort the candidates,
/// greedily match in rank order, and accumulate precision at each true
/// positive.
pub fn brute_force_detection_map(
    candidates: &[ScoredPrediction],
    gt: &GroundTruthDataset,
    train_counts: &BTreeMap<Phrase, u64>,
) -> OracleDetection {
    // gather gt instances per phrase
    let mut gt_map: BTreeMap<Phrase, Vec<(String, opd_core::datamodel::BoundingBox)>> =
        BTreeMap::new();
    for image in &gt.images {
        for region in &image.regions {
            for ann in &region.phrases {
                if ann.augmented {
                    continue;
                }
                gt_map
                    .entry(ann.phrase.clone())
                    .or_default()
                    .push((image.image_id.clone(), region.bounds));
            }
        }
    }

    let mut per_phrase = BTreeMap::new();
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (phrase, instances) in &gt_map {
        let n_pos = instances.len();
        // selection-sort by (score desc, image asc, region asc)
        let mut pool: Vec<&ScoredPrediction> =
            candidates.iter().filter(|c| c.phrase == *phrase).collect();
        let mut ranked: Vec<&ScoredPrediction> = Vec::with_capacity(pool.len());
        while !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                let a = pool[i];
                let b = pool[best];
                let better = a.score > b.score
                    || (a.score == b.score
                        && (a.image_id < b.image_id
                            || (a.image_id == b.image_id && a.region_index < b.region_index)));
                if better {
                    best = i;
                }
            }
            ranked.push(pool.remove(best));
        }
        let mut used = vec![false; n_pos];
        let mut tp = 0usize;
        let mut ap = 0.0;
        for (rank, cand) in ranked.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (gi, (image_id, gbox)) in instances.iter().enumerate() {
                if used[gi] || *image_id != cand.image_id {
                    continue;
                }
                let overlap = oracle_iou(&cand.bounds, gbox);
                if overlap >= 0.5 {
                    let better = match best {
                        Some((_, b)) => overlap > b,
                        None => true,
                    };
                    if better {
                        best = Some((gi, overlap));
                    }
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tp += 1;
                ap += tp as f64 / (rank + 1) as f64;
            }
        }
        let ap = ap / n_pos as f64;
        per_phrase.insert(phrase.clone(), ap);
        let bucket = bucket_of(train_counts.get(phrase).copied().unwrap_or(0));
        let idx = match bucket {
            FrequencyBucket::ZeroShot => 0,
            FrequencyBucket::FewShot => 1,
            FrequencyBucket::Common => 2,
        };
        sums[idx] += ap;
        counts[idx] += 1;
    }
    let bucket_means = [
        (counts[0] > 0).then(|| sums[0] / counts[0] as f64),
        (counts[1] > 0).then(|| sums[1] / counts[1] as f64),
        (counts[2] > 0).then(|| sums[2] / counts[2] as f64),
    ];
    let present: Vec<f64> = bucket_means.iter().flatten().copied().collect();
    let overall = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    OracleDetection {
        per_phrase,
        bucket_means,
        overall,
    }
}
