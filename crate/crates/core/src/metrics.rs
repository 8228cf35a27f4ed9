//! Field-quality metrics and uncertainty/error correlations.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::GridIndexer;
use crate::numeric::{pairwise_mean, pearson};

/// Returned by [`psnr`] for identical fields.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "fields have {} and {} elements",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::domain(
            "metrics",
            format!("data_range must be positive, got {data_range}"),
        ));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_same_len(pred, truth)?;
    let sq: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).collect();
    Ok(pairwise_mean(&sq))
}

/// `10 log10(range^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &[f64], truth: &[f64], data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    let m = mse(pred, truth)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region of a `rows x cols` image.
fn filter_valid(img: &[f64], rows: usize, cols: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let oc = cols - k + 1;
    let or = rows - k + 1;
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..k).map(|j| w[j] * img[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..k).map(|j| w[j] * tmp[(r + j) * oc + c]).sum();
        }
    }
    out
}

/// Mean structural similarity of two 2D fields (11x11 Gaussian window,
/// sigma 1.5, K1 = 0.01, K2 = 0.03, valid region only).
pub fn ssim_2d(pred: &[f64], truth: &[f64], rows: usize, cols: usize, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    check_same_len(pred, truth)?;
    if pred.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} field", pred.len())));
    }
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs fields of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {rows}x{cols}"
        )));
    }
    let w = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mu_x = filter_valid(pred, rows, cols, &w);
    let mu_y = filter_valid(truth, rows, cols, &w);
    let xx = filter_valid(&prod(pred, pred), rows, cols, &w);
    let yy = filter_valid(&prod(truth, truth), rows, cols, &w);
    let xy = filter_valid(&prod(pred, truth), rows, cols, &w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let map: Vec<f64> = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .collect();
    Ok(pairwise_mean(&map))
}

/// The 2D slice through the centre of `field` orthogonal to `axis`.
pub fn center_slice(field: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, usize, usize) {
    let g = GridIndexer::new(shape);
    let mid = shape[axis] / 2;
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (rows, cols) = (shape[others[0]], shape[others[1]]);
    let mut out = Vec::with_capacity(rows * cols);
    let mut coord = [0usize; 3];
    for r in 0..rows {
        for c in 0..cols {
            coord[axis] = mid;
            coord[others[0]] = r;
            coord[others[1]] = c;
            out.push(field[g.ravel(&coord)]);
        }
    }
    (out, rows, cols)
}

/// SSIM for 2D fields; for 3D fields the mean over the three axis-aligned
/// centre slices.
pub fn ssim(pred: &[f64], truth: &[f64], shape: &[usize], data_range: f64) -> Result<f64> {
    match shape {
        [r, c] => ssim_2d(pred, truth, *r, *c, data_range),
        [_, _, _] => {
            check_same_len(pred, truth)?;
            if pred.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!("{} values for grid {shape:?}", pred.len())));
            }
            let mut total = 0.0;
            for axis in 0..3 {
                let (p, r, c) = center_slice(pred, shape, axis);
                let (t, _, _) = center_slice(truth, shape, axis);
                total += ssim_2d(&p, &t, r, c, data_range)?;
            }
            Ok(total / 3.0)
        }
        _ => Err(Error::Shape(format!("SSIM supports 2D and 3D grids, got {shape:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    /// Mean of the per-member correlations that are defined.
    pub voxel_level: f64,
    /// Correlation of member means; `None` with fewer than 3 members or
    /// constant means.
    pub member_level: Option<f64>,
    /// Per-member correlation, `None` where a member's field was constant.
    pub per_member: Vec<Option<f64>>,
    pub excluded_members: usize,
}

fn check_members(u: &[Vec<f64>], e: &[Vec<f64>]) -> Result<()> {
    if u.len() != e.len() || u.is_empty() {
        return Err(Error::Shape(format!(
            "{} uncertainty and {} error members",
            u.len(),
            e.len()
        )));
    }
    for (a, b) in u.iter().zip(e) {
        check_same_len(a, b)?;
    }
    Ok(())
}

/// Mean over members of the per-member Pearson correlation between
/// uncertainty and error. Members with a constant field are skipped.
pub fn voxel_level_corr(u: &[Vec<f64>], e: &[Vec<f64>]) -> Result<(f64, Vec<Option<f64>>)> {
    check_members(u, e)?;
    let per: Vec<Option<f64>> = u.iter().zip(e).map(|(a, b)| pearson(a, b)).collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::domain("voxel_level_corr", "every member has a constant field"));
    }
    Ok((pairwise_mean(&defined), per))
}

/// Pearson correlation between member-mean uncertainty and member-mean error.
pub fn member_level_corr(u: &[Vec<f64>], e: &[Vec<f64>]) -> Result<f64> {
    check_members(u, e)?;
    if u.len() < 3 {
        return Err(Error::domain(
            "member_level_corr",
            format!("needs at least 3 members, got {}", u.len()),
        ));
    }
    let ub: Vec<f64> = u.iter().map(|v| pairwise_mean(v)).collect();
    let eb: Vec<f64> = e.iter().map(|v| pairwise_mean(v)).collect();
    pearson(&ub, &eb).ok_or_else(|| Error::domain("member_level_corr", "member means have zero variance"))
}

pub fn correlation_report(u: &[Vec<f64>], e: &[Vec<f64>]) -> Result<CorrelationReport> {
    let (voxel_level, per_member) = voxel_level_corr(u, e)?;
    let excluded_members = per_member.iter().filter(|p| p.is_none()).count();
    Ok(CorrelationReport {
        voxel_level,
        member_level: member_level_corr(u, e).ok(),
        per_member,
        excluded_members,
    })
}

/// Absolute error field `|pred - truth|`.
pub fn abs_error(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect()
}

/// Root-mean-square error divided by the range of `truth`.
pub fn normalized_rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let m = mse(pred, truth)?;
    let (lo, hi) = truth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::domain("normalized_rmse", "truth field is constant"));
    }
    Ok(m.sqrt() / range)
}
