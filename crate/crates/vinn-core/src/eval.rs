//! Segmentation metrics and paired statistics.
//!
//! Dice similarity (scaled to 0..100), average symmetric surface distance
//! via an exact Euclidean distance transform, three-plane view aggregation
//! with reduced sagittal weight, per-cluster laterality restoration against
//! white-matter centroids, and Wilcoxon signed-rank tests with
//! Benjamini-Hochberg correction.

use ndarray::{Array3, Array4};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{Hemisphere, LabelTable, LabelVolume, Tissue};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("volume dims differ: {0:?} vs {1:?}")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("probability volume shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("structure is empty; surface distance undefined")]
    EmptyStructure,
    #[error("records are not paired: {0}")]
    Unpaired(String),
    #[error("need at least {1} pairs, got {0}")]
    TooFewPairs(usize, usize),
}

/// Binary mask of one class id.
pub fn class_mask(labels: &Array3<u16>, id: u16) -> Array3<bool> {
    labels.mapv(|v| v == id)
}

/// Dice similarity coefficient scaled to `[0, 100]`:
/// `100 · 2|Y∩P| / (|Y| + |P|)`. Two empty masks count as perfect
/// agreement (100); exactly one empty mask scores 0.
pub fn dsc(y: &Array3<bool>, p: &Array3<bool>) -> Result<f64, EvalError> {
    if y.dim() != p.dim() {
        return Err(EvalError::DimMismatch(y.dim(), p.dim()));
    }
    let ny = y.iter().filter(|&&v| v).count();
    let np = p.iter().filter(|&&v| v).count();
    if ny + np == 0 {
        return Ok(100.0);
    }
    let inter = y.iter().zip(p.iter()).filter(|(&a, &b)| a && b).count();
    Ok(100.0 * 2.0 * inter as f64 / (ny + np) as f64)
}

/// Boundary voxels: foreground with at least one 6-connected face neighbor
/// that is background (voxels outside the array count as background, so
/// foreground touching the array face is boundary).
pub fn boundary_mask(m: &Array3<bool>) -> Array3<bool> {
    let (d0, d1, d2) = m.dim();
    let mut out = Array3::from_elem(m.dim(), false);
    for ((k, j, i), &v) in m.indexed_iter() {
        if !v {
            continue;
        }
        let exposed = (k == 0 || !m[[k - 1, j, i]])
            || (k + 1 == d0 || !m[[k + 1, j, i]])
            || (j == 0 || !m[[k, j - 1, i]])
            || (j + 1 == d1 || !m[[k, j + 1, i]])
            || (i == 0 || !m[[k, j, i - 1]])
            || (i + 1 == d2 || !m[[k, j, i + 1]]);
        if exposed {
            out[[k, j, i]] = true;
        }
    }
    out
}

/// Boundary voxel centers of one structure, in mm.
#[derive(Debug, Clone)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

pub fn surface_points(m: &Array3<bool>, voxel_mm: f64) -> SurfacePointSet {
    let b = boundary_mask(m);
    let points = b
        .indexed_iter()
        .filter(|(_, &v)| v)
        .map(|((k, j, i), _)| [k as f64 * voxel_mm, j as f64 * voxel_mm, i as f64 * voxel_mm])
        .collect();
    SurfacePointSet { points }
}

const DT_BIG: f64 = 1e18;

/// One-dimensional squared-distance transform (lower envelope of
/// parabolas). Exact for integer-valued inputs.
fn dt_line(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * q - 2 * p) as f64;
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (in voxel units) from every voxel to
/// the nearest seed voxel, by separable passes along the three axes.
pub fn edt_sq(seeds: &Array3<bool>) -> Array3<f64> {
    let (d0, d1, d2) = seeds.dim();
    let mut d = seeds.mapv(|v| if v { 0.0 } else { DT_BIG });
    let mut buf_in = vec![0.0f64; d0.max(d1).max(d2)];
    let mut buf_out = vec![0.0f64; d0.max(d1).max(d2)];
    // Along x.
    for k in 0..d0 {
        for j in 0..d1 {
            for i in 0..d2 {
                buf_in[i] = d[[k, j, i]];
            }
            dt_line(&buf_in[..d2], &mut buf_out[..d2]);
            for i in 0..d2 {
                d[[k, j, i]] = buf_out[i];
            }
        }
    }
    // Along y.
    for k in 0..d0 {
        for i in 0..d2 {
            for j in 0..d1 {
                buf_in[j] = d[[k, j, i]];
            }
            dt_line(&buf_in[..d1], &mut buf_out[..d1]);
            for j in 0..d1 {
                d[[k, j, i]] = buf_out[j];
            }
        }
    }
    // Along z.
    for j in 0..d1 {
        for i in 0..d2 {
            for k in 0..d0 {
                buf_in[k] = d[[k, j, i]];
            }
            dt_line(&buf_in[..d0], &mut buf_out[..d0]);
            for k in 0..d0 {
                d[[k, j, i]] = buf_out[k];
            }
        }
    }
    d
}

/// Average symmetric surface distance in mm between two structures:
/// the mean over both boundary point sets of the distance to the nearest
/// point of the opposite boundary. Distances are voxel-center to
/// voxel-center. Either structure empty → undefined (error, not zero).
pub fn asd(y: &Array3<bool>, p: &Array3<bool>, voxel_mm: f64) -> Result<f64, EvalError> {
    if y.dim() != p.dim() {
        return Err(EvalError::DimMismatch(y.dim(), p.dim()));
    }
    let by = boundary_mask(y);
    let bp = boundary_mask(p);
    let ny = by.iter().filter(|&&v| v).count();
    let np = bp.iter().filter(|&&v| v).count();
    if ny == 0 || np == 0 {
        return Err(EvalError::EmptyStructure);
    }
    let to_p = edt_sq(&bp);
    let to_y = edt_sq(&by);
    // Directional sums are kept separate so the result is bit-identical
    // under argument swap (addition commutes; a shared accumulator would
    // round in a different order).
    let mut y_to_p = 0.0;
    for (idx, &v) in by.indexed_iter() {
        if v {
            y_to_p += to_p[idx].sqrt();
        }
    }
    let mut p_to_y = 0.0;
    for (idx, &v) in bp.indexed_iter() {
        if v {
            p_to_y += to_y[idx].sqrt();
        }
    }
    Ok((y_to_p + p_to_y) * voxel_mm / (ny + np) as f64)
}

/// Relative weight of each plane's probabilities during aggregation.
#[derive(Debug, Clone, Copy)]
pub struct AggregateWeights {
    pub axial: f64,
    pub coronal: f64,
    pub sagittal: f64,
}

impl Default for AggregateWeights {
    /// The sagittal view carries half the weight of the other two.
    fn default() -> Self {
        AggregateWeights {
            axial: 1.0,
            coronal: 1.0,
            sagittal: 0.5,
        }
    }
}

/// Combine per-plane probability volumes (class-first layout `(C, D, H, W)`;
/// the sagittal volume is in merged-class space) into one segmentation:
/// sagittal merged probabilities broadcast to their lateralized children,
/// then per-voxel argmax of the weighted sum, ties to the lowest class id.
pub fn view_aggregate(
    axial: &Array4<f64>,
    coronal: &Array4<f64>,
    sagittal: &Array4<f64>,
    table: &LabelTable,
    weights: AggregateWeights,
    voxel_mm: f64,
) -> Result<LabelVolume, EvalError> {
    let classes = table.num_classes();
    let merged = table.num_merged_classes();
    let (ca, d0, d1, d2) = axial.dim();
    if ca != classes {
        return Err(EvalError::ShapeMismatch(format!(
            "axial has {ca} channels, table has {classes} classes"
        )));
    }
    if coronal.dim() != axial.dim() {
        return Err(EvalError::ShapeMismatch(format!(
            "coronal {:?} vs axial {:?}",
            coronal.dim(),
            axial.dim()
        )));
    }
    let (cs, s0, s1, s2) = sagittal.dim();
    if cs != merged || (s0, s1, s2) != (d0, d1, d2) {
        return Err(EvalError::ShapeMismatch(format!(
            "sagittal {:?}, expected ({merged}, {d0}, {d1}, {d2})",
            sagittal.dim()
        )));
    }
    let lut: Vec<usize> = table.entries().iter().map(|e| e.merged_id as usize).collect();
    let mut out = Array3::<u16>::zeros((d0, d1, d2));
    for k in 0..d0 {
        for j in 0..d1 {
            for i in 0..d2 {
                let mut best = 0usize;
                let mut best_score = f64::NEG_INFINITY;
                for (c, &m) in lut.iter().enumerate() {
                    let score = weights.axial * axial[[c, k, j, i]]
                        + weights.coronal * coronal[[c, k, j, i]]
                        + weights.sagittal * sagittal[[m, k, j, i]];
                    if score > best_score {
                        best_score = score;
                        best = c;
                    }
                }
                out[[k, j, i]] = best as u16;
            }
        }
    }
    Ok(LabelVolume {
        voxel_mm,
        data: out,
    })
}

/// 6-connected component labeling; returns (labels, component count) with
/// component ids starting at 1 and 0 meaning background.
pub fn connected_components(mask: &Array3<bool>) -> (Array3<u32>, usize) {
    let (d0, d1, d2) = mask.dim();
    let mut labels = Array3::<u32>::zeros(mask.dim());
    let mut next = 0u32;
    let mut stack = Vec::new();
    for k in 0..d0 {
        for j in 0..d1 {
            for i in 0..d2 {
                if !mask[[k, j, i]] || labels[[k, j, i]] != 0 {
                    continue;
                }
                next += 1;
                labels[[k, j, i]] = next;
                stack.push((k, j, i));
                while let Some((ck, cj, ci)) = stack.pop() {
                    let neighbors = [
                        (ck.wrapping_sub(1), cj, ci),
                        (ck + 1, cj, ci),
                        (ck, cj.wrapping_sub(1), ci),
                        (ck, cj + 1, ci),
                        (ck, cj, ci.wrapping_sub(1)),
                        (ck, cj, ci + 1),
                    ];
                    for (nk, nj, ni) in neighbors {
                        if nk < d0
                            && nj < d1
                            && ni < d2
                            && mask[[nk, nj, ni]]
                            && labels[[nk, nj, ni]] == 0
                        {
                            labels[[nk, nj, ni]] = next;
                            stack.push((nk, nj, ni));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// A component the restore step could not lateralize.
#[derive(Debug, Clone)]
pub struct FlaggedComponent {
    pub merged_id: u16,
    pub voxels: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RestoreReport {
    pub flagged: Vec<FlaggedComponent>,
}

/// Restore lateralized ids in a merged-space segmentation: each connected
/// component of a lateralized merged class goes to the hemisphere whose
/// white-matter centroid (mm) is nearer, ties to the left. The WM centroids
/// themselves are estimated by splitting the merged WM class at the volume's
/// mid-sagittal plane. Non-lateralized classes map through the inverse merge
/// table. If either hemisphere has no WM, lateralized components keep their
/// merged id and are flagged.
pub fn restore_laterality(
    seg: &LabelVolume,
    table: &LabelTable,
) -> (LabelVolume, RestoreReport) {
    let (_, _, d2) = seg.data.dim();
    let mid = (d2 as f64 - 1.0) / 2.0;
    let wm_merged: Option<u16> = table
        .entries()
        .iter()
        .find(|e| e.tissue == Tissue::WhiteMatter)
        .map(|e| e.merged_id);

    // Hemisphere anchors: centroids of the mid-plane split of merged WM.
    let mut anchors: Option<([f64; 3], [f64; 3])> = None;
    if let Some(wm) = wm_merged {
        let mut sums = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for ((k, j, i), &v) in seg.data.indexed_iter() {
            if v == wm {
                let side = usize::from(!((i as f64) < mid));
                sums[side][0] += k as f64;
                sums[side][1] += j as f64;
                sums[side][2] += i as f64;
                counts[side] += 1;
            }
        }
        if counts[0] > 0 && counts[1] > 0 {
            let c = |s: [f64; 3], n: usize| {
                [
                    s[0] / n as f64 * seg.voxel_mm,
                    s[1] / n as f64 * seg.voxel_mm,
                    s[2] / n as f64 * seg.voxel_mm,
                ]
            };
            anchors = Some((c(sums[0], counts[0]), c(sums[1], counts[1])));
        }
    }

    let mut out = seg.data.clone();
    let mut report = RestoreReport::default();

    // Non-lateralized merged classes have a unique full id.
    let mut unique_child = vec![None::<u16>; table.num_merged_classes()];
    for e in table.entries() {
        if e.hemisphere == Hemisphere::None {
            unique_child[e.merged_id as usize] = Some(e.id);
        }
    }
    for v in out.iter_mut() {
        if let Some(Some(id)) = unique_child.get(*v as usize) {
            *v = *id;
        }
    }

    for m in table.lateralized_merged_ids() {
        let (left_id, right_id) = table
            .lateral_pairs()
            .into_iter()
            .find(|&(l, _)| table.entries()[l as usize].merged_id == m)
            .expect("lateralized merged id has a pair");
        let mask = seg.data.mapv(|v| v == m);
        let (comp, n) = connected_components(&mask);
        for c in 1..=n as u32 {
            let mut sum = [0.0f64; 3];
            let mut count = 0usize;
            for ((k, j, i), &l) in comp.indexed_iter() {
                if l == c {
                    sum[0] += k as f64;
                    sum[1] += j as f64;
                    sum[2] += i as f64;
                    count += 1;
                }
            }
            let assign = match anchors {
                None => {
                    report.flagged.push(FlaggedComponent {
                        merged_id: m,
                        voxels: count,
                    });
                    continue; // keeps the merged id in place
                }
                Some((cl, cr)) => {
                    let centroid = [
                        sum[0] / count as f64 * seg.voxel_mm,
                        sum[1] / count as f64 * seg.voxel_mm,
                        sum[2] / count as f64 * seg.voxel_mm,
                    ];
                    let d2 = |a: [f64; 3], b: [f64; 3]| {
                        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
                    };
                    if d2(centroid, cl) <= d2(centroid, cr) {
                        left_id
                    } else {
                        right_id
                    }
                }
            };
            for (idx, &l) in comp.indexed_iter() {
                if l == c {
                    out[idx] = assign;
                }
            }
        }
    }
    (
        LabelVolume {
            voxel_mm: seg.voxel_mm,
            data: out,
        },
        report,
    )
}

/// Restore laterality in a full-id segmentation (the aggregation output).
/// Hemisphere anchors are the centroids of the left and right white-matter
/// classes; each connected component of every other lateralized class is
/// reassigned to the pair id on the side whose anchor is nearer (ties to the
/// left). Correctly sided components are untouched, so the operation is
/// idempotent. Components are taken per class id, not per pair, because
/// structures like the cortical shell are connected across the midline.
/// If either WM class is empty, lateral components keep their ids and are
/// flagged under the pair's merged id.
pub fn restore_laterality_full(
    seg: &LabelVolume,
    table: &LabelTable,
) -> (LabelVolume, RestoreReport) {
    let wm_pair = table
        .lateral_pairs()
        .into_iter()
        .find(|&(l, _)| table.entries()[l as usize].tissue == Tissue::WhiteMatter);

    let mut anchors: Option<([f64; 3], [f64; 3])> = None;
    if let Some((wl, wr)) = wm_pair {
        let mut sums = [[0.0f64; 3]; 2];
        let mut counts = [0usize; 2];
        for ((k, j, i), &v) in seg.data.indexed_iter() {
            let side = if v == wl {
                0
            } else if v == wr {
                1
            } else {
                continue;
            };
            sums[side][0] += k as f64;
            sums[side][1] += j as f64;
            sums[side][2] += i as f64;
            counts[side] += 1;
        }
        if counts[0] > 0 && counts[1] > 0 {
            let c = |s: [f64; 3], n: usize| {
                [
                    s[0] / n as f64 * seg.voxel_mm,
                    s[1] / n as f64 * seg.voxel_mm,
                    s[2] / n as f64 * seg.voxel_mm,
                ]
            };
            anchors = Some((c(sums[0], counts[0]), c(sums[1], counts[1])));
        }
    }

    let mut out = seg.data.clone();
    let mut report = RestoreReport::default();
    for (left_id, right_id) in table.lateral_pairs() {
        if table.entries()[left_id as usize].tissue == Tissue::WhiteMatter {
            continue; // WM is the anchor, never reassigned
        }
        for own in [left_id, right_id] {
            let mask = seg.data.mapv(|v| v == own);
            let (comp, n) = connected_components(&mask);
            for c in 1..=n as u32 {
                let mut sum = [0.0f64; 3];
                let mut count = 0usize;
                for ((k, j, i), &l) in comp.indexed_iter() {
                    if l == c {
                        sum[0] += k as f64;
                        sum[1] += j as f64;
                        sum[2] += i as f64;
                        count += 1;
                    }
                }
                let Some((cl, cr)) = anchors else {
                    report.flagged.push(FlaggedComponent {
                        merged_id: table.entries()[own as usize].merged_id,
                        voxels: count,
                    });
                    continue; // keeps the current id in place
                };
                let centroid = [
                    sum[0] / count as f64 * seg.voxel_mm,
                    sum[1] / count as f64 * seg.voxel_mm,
                    sum[2] / count as f64 * seg.voxel_mm,
                ];
                let d2 = |a: [f64; 3], b: [f64; 3]| {
                    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
                };
                let target = if d2(centroid, cl) <= d2(centroid, cr) {
                    left_id
                } else {
                    right_id
                };
                if target != own {
                    for (idx, &l) in comp.indexed_iter() {
                        if l == c {
                            out[idx] = target;
                        }
                    }
                }
            }
        }
    }
    (
        LabelVolume {
            voxel_mm: seg.voxel_mm,
            data: out,
        },
        report,
    )
}

/// One (subject, model, structure) evaluation row.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub subject: String,
    pub model: String,
    pub structure: u16,
    pub dsc: f64,
    /// None when the surface distance is undefined (empty structure).
    pub asd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// True when every difference was zero (p reported as 1).
    pub degenerate: bool,
}

const WILCOXON_EXACT_MAX: usize = 20;

/// Average ranks of |d|, doubled so ties (half-integer ranks) stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; n];
    let mut pos = 0usize;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && abs[order[end + 1]] == abs[order[pos]] {
            end += 1;
        }
        // Average of ranks pos+1..=end+1, doubled: (pos+1 + end+1).
        let doubled = (pos + 1 + end + 1) as u64;
        for &idx in &order[pos..=end] {
            ranks[idx] = doubled;
        }
        pos = end + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; all-zero input is degenerate and reported as p = 1 with a
/// flag. Exact sign-flip null distribution for n ≤ 20 (dynamic program over
/// doubled ranks, valid under ties), normal approximation with tie
/// correction beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Unpaired(format!(
            "sample sizes {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            p: 1.0,
            n_effective: 0,
            degenerate: true,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_ranks(&abs);
    let w2: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let total2: u64 = ranks2.iter().sum();
    let w_plus = w2 as f64 / 2.0;

    let p = if n <= WILCOXON_EXACT_MAX {
        // counts[s] = number of sign assignments with doubled rank-sum s.
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let assignments = 2u64.pow(n as u32) as f64;
        let le: u64 = counts[..=w2 as usize].iter().sum();
        let ge: u64 = counts[w2 as usize..].iter().sum();
        (2.0 * (le.min(ge) as f64) / assignments).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: group sizes t of equal |d| reduce the variance
        // by sum(t^3 - t)/48.
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
    };
    Ok(WilcoxonResult {
        w_plus,
        p,
        n_effective: n,
        degenerate: false,
    })
}

/// Benjamini-Hochberg step-up adjustment: sort the m p-values, set
/// `adj_(i) = min over j ≥ i of m·p_(j)/j` (clamped to 1), and return the
/// adjusted values in the original order.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0f64;
    for i in (0..m).rev() {
        let idx = order[i];
        let val = (m as f64) * p[idx] / (i + 1) as f64;
        running_min = running_min.min(val);
        adjusted[idx] = running_min;
    }
    adjusted
}

/// Which metric a paired comparison runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Dsc,
    Asd,
}

#[derive(Debug, Clone)]
pub struct StructureStats {
    pub structure: u16,
    pub n: usize,
    pub w_plus: f64,
    pub p_raw: f64,
    pub p_bh: f64,
    pub degenerate: bool,
}

pub const MIN_PAIRS: usize = 5;

/// Per-structure Wilcoxon signed-rank comparisons between two models'
/// records (paired by subject), with Benjamini-Hochberg correction across
/// structures. Records missing from either side are an error; pairs where
/// the chosen metric is undefined on either side are dropped.
pub fn paired_stats(
    a: &[EvalRecord],
    b: &[EvalRecord],
    metric: MetricKind,
) -> Result<Vec<StructureStats>, EvalError> {
    use std::collections::BTreeMap;
    let mut index_b: BTreeMap<(u16, &str), &EvalRecord> = BTreeMap::new();
    for r in b {
        if index_b.insert((r.structure, r.subject.as_str()), r).is_some() {
            return Err(EvalError::Unpaired(format!(
                "duplicate record for subject {} structure {}",
                r.subject, r.structure
            )));
        }
    }
    let mut by_structure: BTreeMap<u16, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut seen = 0usize;
    for r in a {
        let other = index_b
            .get(&(r.structure, r.subject.as_str()))
            .ok_or_else(|| {
                EvalError::Unpaired(format!(
                    "subject {} structure {} missing from second sample",
                    r.subject, r.structure
                ))
            })?;
        seen += 1;
        let pair = match metric {
            MetricKind::Dsc => Some((r.dsc, other.dsc)),
            MetricKind::Asd => r.asd.zip(other.asd),
        };
        if let Some((x, y)) = pair {
            let e = by_structure.entry(r.structure).or_default();
            e.0.push(x);
            e.1.push(y);
        }
    }
    if seen != b.len() {
        return Err(EvalError::Unpaired(format!(
            "{} records in second sample, {seen} matched",
            b.len()
        )));
    }
    let mut stats = Vec::new();
    for (&structure, (xa, xb)) in &by_structure {
        if xa.len() < MIN_PAIRS {
            return Err(EvalError::TooFewPairs(xa.len(), MIN_PAIRS));
        }
        let w = wilcoxon_signed_rank(xa, xb)?;
        stats.push(StructureStats {
            structure,
            n: w.n_effective,
            w_plus: w.w_plus,
            p_raw: w.p,
            p_bh: 0.0,
            degenerate: w.degenerate,
        });
    }
    let raw: Vec<f64> = stats.iter().map(|s| s.p_raw).collect();
    for (s, adj) in stats.iter_mut().zip(benjamini_hochberg(&raw)) {
        s.p_bh = adj;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(coords: &[[usize; 3]], dims: (usize, usize, usize)) -> Array3<bool> {
        let mut m = Array3::from_elem(dims, false);
        for c in coords {
            m[[c[0], c[1], c[2]]] = true;
        }
        m
    }

    #[test]
    fn dsc_basic_cases() {
        let d = (4, 4, 4);
        let a = mask_from(&[[0, 0, 0], [1, 1, 1]], d);
        let b = mask_from(&[[0, 0, 0], [2, 2, 2]], d);
        assert_eq!(dsc(&a, &a).unwrap(), 100.0);
        let disjoint = mask_from(&[[3, 3, 3]], d);
        assert_eq!(dsc(&a, &disjoint).unwrap(), 0.0);
        // |Y|=2, |P|=2, intersection 1 → 50.
        assert_eq!(dsc(&a, &b).unwrap(), 50.0);
        let empty = Array3::from_elem(d, false);
        assert_eq!(dsc(&empty, &empty).unwrap(), 100.0);
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
        assert!(dsc(&a, &Array3::from_elem((3, 3, 3), false)).is_err());
    }

    #[test]
    fn asd_hand_cases() {
        let d = (8, 8, 8);
        let a = mask_from(&[[4, 4, 1]], d);
        let b = mask_from(&[[4, 4, 4]], d);
        assert_eq!(asd(&a, &a, 1.0).unwrap(), 0.0);
        // Single voxels 3 apart at 1 mm → 3.0 mm.
        assert_eq!(asd(&a, &b, 1.0).unwrap(), 3.0);
        // Scale equivariance: doubling the voxel size doubles the distance.
        assert_eq!(asd(&a, &b, 2.0).unwrap(), 6.0);
        let empty = Array3::from_elem(d, false);
        assert!(matches!(
            asd(&a, &empty, 1.0),
            Err(EvalError::EmptyStructure)
        ));
    }

    #[test]
    fn asd_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let dims = (6, 7, 5);
            let a = Array3::from_shape_fn(dims, |_| rng.gen_bool(0.3));
            let b = Array3::from_shape_fn(dims, |_| rng.gen_bool(0.3));
            if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
                continue;
            }
            assert_eq!(asd(&a, &b, 0.7).unwrap(), asd(&b, &a, 0.7).unwrap());
        }
    }

    #[test]
    fn edt_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for round in 0..30 {
            let dims = (
                rng.gen_range(2..=12),
                rng.gen_range(2..=12),
                rng.gen_range(2..=12),
            );
            let density = rng.gen_range(0.05..0.5);
            let seeds = Array3::from_shape_fn(dims, |_| rng.gen_bool(density));
            if !seeds.iter().any(|&v| v) {
                continue;
            }
            let fast = edt_sq(&seeds);
            let seed_list: Vec<[i64; 3]> = seeds
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|((k, j, i), _)| [k as i64, j as i64, i as i64])
                .collect();
            for ((k, j, i), &got) in fast.indexed_iter() {
                let want = seed_list
                    .iter()
                    .map(|s| {
                        let dk = k as i64 - s[0];
                        let dj = j as i64 - s[1];
                        let di = i as i64 - s[2];
                        (dk * dk + dj * dj + di * di) as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(got, want, "round {round} voxel {:?}", (k, j, i));
            }
        }
    }

    #[test]
    fn boundary_counts_volume_faces_as_exposed() {
        let solid = Array3::from_elem((3, 3, 3), true);
        let b = boundary_mask(&solid);
        // Only the single interior voxel is not boundary.
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[[1, 1, 1]]);
        let pts = surface_points(&solid, 2.0);
        assert_eq!(pts.points.len(), 26);
        assert!(pts.points.iter().any(|p| *p == [0.0, 0.0, 0.0]));
        assert!(pts.points.iter().any(|p| *p == [4.0, 4.0, 2.0]));
    }

    fn uniform_prob(classes: usize, dims: (usize, usize, usize)) -> Array4<f64> {
        Array4::from_elem((classes, dims.0, dims.1, dims.2), 0.0)
    }

    #[test]
    fn aggregate_hand_trace() {
        let table = LabelTable::desk();
        let dims = (1, 1, 1);
        let mut ax = uniform_prob(9, dims);
        let mut co = uniform_prob(9, dims);
        let mut sa = uniform_prob(6, dims);
        // Axial and coronal: left GM (id 4) with p = 0.6; sagittal is
        // certain about CSF (merged id 1).
        ax[[4, 0, 0, 0]] = 0.6;
        co[[4, 0, 0, 0]] = 0.6;
        sa[[1, 0, 0, 0]] = 1.0;
        let seg = view_aggregate(&ax, &co, &sa, &table, AggregateWeights::default(), 1.0).unwrap();
        // GM scores 1.2; CSF scores 0.5.
        assert_eq!(seg.data[[0, 0, 0]], 4);
    }

    #[test]
    fn aggregate_agreement_and_scale_invariance() {
        let table = LabelTable::desk();
        let dims = (2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ax = Array4::from_shape_fn((9, 2, 2, 2), |_| rng.gen_range(0.0..1.0));
        let co = Array4::from_shape_fn((9, 2, 2, 2), |_| rng.gen_range(0.0..1.0));
        let sa = Array4::from_shape_fn((6, 2, 2, 2), |_| rng.gen_range(0.0..1.0));
        let w = AggregateWeights::default();
        let seg = view_aggregate(&ax, &co, &sa, &table, w, 1.0).unwrap();
        let scaled = view_aggregate(
            &ax.mapv(|v| v * 7.5),
            &co.mapv(|v| v * 7.5),
            &sa.mapv(|v| v * 7.5),
            &table,
            w,
            1.0,
        )
        .unwrap();
        assert_eq!(seg.data, scaled.data);
        // Unanimous probabilities pick that class.
        let mut ax1 = uniform_prob(9, dims);
        let mut co1 = uniform_prob(9, dims);
        let mut sa1 = uniform_prob(6, dims);
        ax1.index_axis_mut(ndarray::Axis(0), 7).fill(0.9);
        co1.index_axis_mut(ndarray::Axis(0), 7).fill(0.9);
        sa1.index_axis_mut(ndarray::Axis(0), 4).fill(0.9); // merged blob
        let seg1 = view_aggregate(&ax1, &co1, &sa1, &table, w, 1.0).unwrap();
        assert!(seg1.data.iter().all(|&v| v == 7));
    }

    #[test]
    fn aggregate_zero_sagittal_weight_is_two_view_vote() {
        let table = LabelTable::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ax = Array4::from_shape_fn((9, 3, 3, 3), |_| rng.gen_range(0.0..1.0));
        let co = Array4::from_shape_fn((9, 3, 3, 3), |_| rng.gen_range(0.0..1.0));
        let sa = Array4::from_shape_fn((6, 3, 3, 3), |_| rng.gen_range(0.0..1.0));
        let w0 = AggregateWeights {
            axial: 1.0,
            coronal: 1.0,
            sagittal: 0.0,
        };
        let seg = view_aggregate(&ax, &co, &sa, &table, w0, 1.0).unwrap();
        // Hand argmax over axial+coronal only.
        for ((k, j, i), &got) in seg.data.indexed_iter() {
            let mut best = 0usize;
            let mut score = f64::NEG_INFINITY;
            for c in 0..9 {
                let s = ax[[c, k, j, i]] + co[[c, k, j, i]];
                if s > score {
                    score = s;
                    best = c;
                }
            }
            assert_eq!(got as usize, best);
        }
    }

    #[test]
    fn aggregate_rejects_bad_shapes() {
        let table = LabelTable::desk();
        let ax = uniform_prob(9, (2, 2, 2));
        let co = uniform_prob(9, (2, 2, 2));
        let sa_bad = uniform_prob(9, (2, 2, 2)); // must be merged (6)
        assert!(view_aggregate(&ax, &co, &sa_bad, &table, AggregateWeights::default(), 1.0).is_err());
        let sa = uniform_prob(6, (2, 2, 3));
        assert!(view_aggregate(&ax, &co, &sa, &table, AggregateWeights::default(), 1.0).is_err());
    }

    /// Build a merged-space seg with WM anchors at x-index 2 (left) and
    /// x-index 5 (right) in an 8-wide volume.
    fn anchored_seg(extra: &[([usize; 3], u16)]) -> LabelVolume {
        let mut data = Array3::<u16>::zeros((8, 8, 8));
        for j in 3..5 {
            for k in 3..5 {
                data[[k, j, 2]] = 2; // merged WM, left of mid 3.5
                data[[k, j, 5]] = 2; // right
            }
        }
        for (c, id) in extra {
            data[[c[0], c[1], c[2]]] = *id;
        }
        LabelVolume {
            voxel_mm: 1.0,
            data,
        }
    }

    #[test]
    fn restore_assigns_component_by_nearest_wm_centroid() {
        let table = LabelTable::desk();
        // Merged GM (3) component near the right anchor.
        let seg = anchored_seg(&[([3, 3, 6], 3), ([3, 4, 6], 3)]);
        let (out, report) = restore_laterality(&seg, &table);
        assert!(report.flagged.is_empty());
        assert_eq!(out.data[[3, 3, 6]], 5, "right GM id expected");
        // The WM components themselves lateralize too.
        assert_eq!(out.data[[3, 3, 2]], 2);
        assert_eq!(out.data[[3, 3, 5]], 3);
        // Component strictly in the left half-space.
        let seg2 = anchored_seg(&[([6, 6, 0], 4), ([6, 6, 1], 4)]);
        let (out2, _) = restore_laterality(&seg2, &table);
        assert_eq!(out2.data[[6, 6, 0]], 6, "left blob id expected");
    }

    #[test]
    fn restore_tie_goes_left() {
        let table = LabelTable::desk();
        // Component centered exactly between the WM anchors (x = 3.5):
        // both distances are identical by symmetry.
        let seg = anchored_seg(&[([0, 0, 3], 3), ([0, 0, 4], 3)]);
        let (out, _) = restore_laterality(&seg, &table);
        assert_eq!(out.data[[0, 0, 3]], 4, "tie must resolve to the left id");
        assert_eq!(out.data[[0, 0, 4]], 4);
    }

    #[test]
    fn restore_without_wm_flags_and_keeps_merged() {
        let table = LabelTable::desk();
        let mut data = Array3::<u16>::zeros((4, 4, 4));
        data[[0, 0, 0]] = 3; // merged GM, but no WM anywhere
        let seg = LabelVolume {
            voxel_mm: 1.0,
            data,
        };
        let (out, report) = restore_laterality(&seg, &table);
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].merged_id, 3);
        assert_eq!(out.data[[0, 0, 0]], 3, "component stays merged");
    }

    #[test]
    fn restore_maps_non_lateralized_ids_through_inverse_table() {
        let table = LabelTable::desk();
        // Merged brainstem is 5; full-space brainstem is 8.
        let seg = anchored_seg(&[([7, 7, 7], 5), ([0, 7, 7], 1)]);
        let (out, _) = restore_laterality(&seg, &table);
        assert_eq!(out.data[[7, 7, 7]], 8);
        assert_eq!(out.data[[0, 7, 7]], 1);
        assert_eq!(out.data[[0, 0, 0]], 0);
    }

    #[test]
    fn restore_on_merged_phantom_truth_recovers_off_midline_components() {
        use crate::data::{render_phantom, PhantomSpec};
        let table = LabelTable::desk();
        let (_, gt) = render_phantom(&PhantomSpec::desk(2), 1.4, &table).unwrap();
        let merged = LabelVolume {
            voxel_mm: gt.voxel_mm,
            data: table.map_to_merged(&gt.data).unwrap(),
        };
        let (restored, report) = restore_laterality(&merged, &table);
        assert!(report.flagged.is_empty());
        // Blobs are off-midline components: restoration must be perfect.
        for id in [6u16, 7] {
            let want = class_mask(&gt.data, id);
            let got = class_mask(&restored.data, id);
            assert_eq!(want, got, "blob {id} not restored exactly");
        }
        // Non-lateralized classes survive the round trip everywhere.
        for id in [0u16, 1, 8] {
            assert_eq!(
                class_mask(&gt.data, id),
                class_mask(&restored.data, id),
                "class {id} altered"
            );
        }
    }

    /// Full-id seg with left WM (2) at x-index 2 and right WM (3) at 5.
    fn full_anchored_seg(extra: &[([usize; 3], u16)]) -> LabelVolume {
        let mut data = Array3::<u16>::zeros((8, 8, 8));
        for j in 3..5 {
            for k in 3..5 {
                data[[k, j, 2]] = 2;
                data[[k, j, 5]] = 3;
            }
        }
        for (c, id) in extra {
            data[[c[0], c[1], c[2]]] = *id;
        }
        LabelVolume {
            voxel_mm: 1.0,
            data,
        }
    }

    #[test]
    fn full_restore_flips_wrong_sided_component_and_is_idempotent() {
        let table = LabelTable::desk();
        // A blob near the right anchor wrongly carries the left id 6; a
        // correctly sided left GM patch sits far left.
        let seg = full_anchored_seg(&[([3, 3, 6], 6), ([3, 4, 6], 6), ([6, 6, 0], 4)]);
        let (out, report) = restore_laterality_full(&seg, &table);
        assert!(report.flagged.is_empty());
        assert_eq!(out.data[[3, 3, 6]], 7, "component must flip to the right id");
        assert_eq!(out.data[[3, 4, 6]], 7);
        assert_eq!(out.data[[6, 6, 0]], 4, "correct side untouched");
        let (again, _) = restore_laterality_full(&out, &table);
        assert_eq!(again.data, out.data, "idempotent once corrected");
    }

    #[test]
    fn full_restore_tie_goes_left_and_wm_never_moves() {
        let table = LabelTable::desk();
        // Component centroid x = 3.5 is equidistant from the two anchors.
        let seg = full_anchored_seg(&[([0, 0, 3], 5), ([0, 0, 4], 5)]);
        let (out, _) = restore_laterality_full(&seg, &table);
        assert_eq!(out.data[[0, 0, 3]], 4, "tie resolves to the left id");
        assert_eq!(out.data[[0, 0, 4]], 4);
        assert_eq!(out.data[[3, 3, 2]], 2, "WM anchors keep their ids");
        assert_eq!(out.data[[3, 3, 5]], 3);
    }

    #[test]
    fn full_restore_without_wm_flags_and_keeps_ids() {
        let table = LabelTable::desk();
        let mut data = Array3::<u16>::zeros((4, 4, 4));
        data[[0, 0, 0]] = 6;
        let seg = LabelVolume {
            voxel_mm: 1.0,
            data,
        };
        let (out, report) = restore_laterality_full(&seg, &table);
        assert_eq!(out.data[[0, 0, 0]], 6);
        assert_eq!(report.flagged.len(), 1);
        assert_eq!(report.flagged[0].merged_id, 4, "blob pair merged id");
    }

    #[test]
    fn full_restore_is_identity_on_phantom_truth() {
        use crate::data::{render_phantom, PhantomSpec};
        let table = LabelTable::desk();
        let (_, gt) = render_phantom(&PhantomSpec::desk(3), 1.4, &table).unwrap();
        let (out, report) = restore_laterality_full(&gt, &table);
        assert!(report.flagged.is_empty());
        assert_eq!(out.data, gt.data, "truth is already correctly sided");
    }

    #[test]
    fn wilcoxon_all_positive_n6_exact() {
        let a = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w_plus, 21.0);
        assert!((r.p - 2.0 / 64.0).abs() < 1e-12, "p = {}", r.p);
        assert!(!r.degenerate);
        assert_eq!(r.n_effective, 6);
    }

    #[test]
    fn wilcoxon_identical_samples_degenerate() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.n_effective, 0);
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for round in 0..200 {
            let n = rng.gen_range(1..=10usize);
            // Integer-valued differences produce plenty of ties.
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let mut d = 0.0;
                    while d == 0.0 {
                        d = rng.gen_range(-4i32..=4) as f64;
                    }
                    d
                })
                .collect();
            let a: Vec<f64> = diffs.clone();
            let b = vec![0.0; n];
            let r = wilcoxon_signed_rank(&a, &b).unwrap();

            // Enumerate all 2^n sign assignments.
            let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
            let ranks2 = doubled_ranks(&abs);
            let w2_obs: u64 = diffs
                .iter()
                .zip(&ranks2)
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, &r)| r)
                .sum();
            let mut le = 0u64;
            let mut ge = 0u64;
            for mask in 0u32..(1 << n) {
                let w2: u64 = (0..n)
                    .filter(|&i| mask >> i & 1 == 1)
                    .map(|i| ranks2[i])
                    .sum();
                if w2 <= w2_obs {
                    le += 1;
                }
                if w2 >= w2_obs {
                    ge += 1;
                }
            }
            let p_enum = (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0);
            assert!(
                (r.p - p_enum).abs() < 1e-12,
                "round {round}: dp {} vs enum {p_enum} for {diffs:?}",
                r.p
            );
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_tracks_exact() {
        // n = 25 exceeds the exact cutoff; check the approximation against
        // the exact distribution computed directly.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..10.0)).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| x + rng.gen_range(-2.0..3.0))
            .collect();
        let approx = wilcoxon_signed_rank(&a, &b).unwrap();
        // Exact via the same DP, bypassing the cutoff.
        let diffs: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x - y)
            .filter(|d| *d != 0.0)
            .collect();
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let ranks2 = doubled_ranks(&abs);
        let w2: u64 = diffs
            .iter()
            .zip(&ranks2)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, &r)| r)
            .sum();
        let total2: u64 = ranks2.iter().sum();
        let mut counts = vec![0.0f64; total2 as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let all: f64 = counts.iter().sum();
        let le: f64 = counts[..=w2 as usize].iter().sum();
        let ge: f64 = counts[w2 as usize..].iter().sum();
        let p_exact = (2.0 * (le.min(ge)) / all).min(1.0);
        assert!(
            (approx.p - p_exact).abs() < 0.02,
            "approx {} vs exact {p_exact}",
            approx.p
        );
    }

    #[test]
    fn benjamini_hochberg_hand_example() {
        let adj = benjamini_hochberg(&[0.01, 0.02, 0.05]);
        assert!((adj[0] - 0.03).abs() < 1e-12);
        assert!((adj[1] - 0.03).abs() < 1e-12);
        assert!((adj[2] - 0.05).abs() < 1e-12);
        // Order-independence of the mapping back to input positions.
        let adj2 = benjamini_hochberg(&[0.05, 0.01, 0.02]);
        assert!((adj2[0] - 0.05).abs() < 1e-12);
        assert!((adj2[1] - 0.03).abs() < 1e-12);
        assert!((adj2[2] - 0.03).abs() < 1e-12);
        // Clamped to 1.
        let adj3 = benjamini_hochberg(&[0.9, 0.95]);
        assert!(adj3.iter().all(|&p| p <= 1.0));
    }

    #[test]
    fn paired_stats_groups_and_corrects() {
        let rec = |subject: &str, structure: u16, dsc: f64| EvalRecord {
            subject: subject.into(),
            model: "m".into(),
            structure,
            dsc,
            asd: Some(1.0),
        };
        let subjects = ["s0", "s1", "s2", "s3", "s4", "s5"];
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, s) in subjects.iter().enumerate() {
            // Structure 2: a clearly better; structure 4: identical.
            a.push(rec(s, 2, 90.0 + i as f64));
            b.push(rec(s, 2, 80.0 + i as f64 * 0.5));
            a.push(rec(s, 4, 70.0));
            b.push(rec(s, 4, 70.0));
        }
        let stats = paired_stats(&a, &b, MetricKind::Dsc).unwrap();
        assert_eq!(stats.len(), 2);
        let s2 = stats.iter().find(|s| s.structure == 2).unwrap();
        assert!((s2.p_raw - 2.0 / 64.0).abs() < 1e-12);
        let s4 = stats.iter().find(|s| s.structure == 4).unwrap();
        assert!(s4.degenerate && s4.p_raw == 1.0);
        assert!(s2.p_bh >= s2.p_raw);
        // Unpaired input errors.
        let mut b_missing = b.clone();
        b_missing.pop();
        assert!(paired_stats(&a, &b_missing, MetricKind::Dsc).is_err());
    }
}
