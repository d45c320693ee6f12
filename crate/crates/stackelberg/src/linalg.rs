//! Small dense helpers shared by the builders and solvers.

use nalgebra::SVD;

use crate::model::{Mat, Vector};

/// Assembles a block matrix. `entries` lists `(block_row, block_col, value)`;
/// unlisted blocks are zero.
pub fn assemble(row_sizes: &[usize], col_sizes: &[usize], entries: &[(usize, usize, Mat)]) -> Mat {
    let offset = |sizes: &[usize], i: usize| sizes[..i].iter().sum::<usize>();
    let mut out = Mat::zeros(row_sizes.iter().sum(), col_sizes.iter().sum());
    for (i, j, m) in entries {
        debug_assert_eq!(m.shape(), (row_sizes[*i], col_sizes[*j]));
        out.view_mut((offset(row_sizes, *i), offset(col_sizes, *j)), m.shape())
            .copy_from(m);
    }
    out
}

/// Stacks vectors on top of each other.
pub fn stack(parts: &[&Vector]) -> Vector {
    let data: Vec<f64> = parts.iter().flat_map(|v| v.iter().copied()).collect();
    Vector::from_vec(data)
}

/// Stacks matrices with equal column counts.
pub fn vstack(parts: &[&Mat]) -> Mat {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for m in parts {
        out.view_mut((r, 0), m.shape()).copy_from(m);
        r += m.nrows();
    }
    out
}

/// Inverse with a condition check; `None` when singular or the 2-norm
/// condition number exceeds `max_cond`.
pub fn inverse_checked(m: &Mat, max_cond: f64) -> Option<(Mat, f64)> {
    let svd = SVD::new(m.clone(), false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !(cond <= max_cond) {
        return None;
    }
    m.clone().try_inverse().map(|inv| (inv, cond))
}

/// Plain inverse via LU; `None` when singular.
pub fn inverse(m: &Mat) -> Option<Mat> {
    m.clone().try_inverse()
}

pub fn col(v: &Vector) -> Mat {
    Mat::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn as_vector(m: &Mat) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `n × (blocks·n)` row selecting block `j`.
pub fn block_selector(n: usize, blocks: usize, j: usize) -> Mat {
    let mut m = Mat::zeros(n, n * blocks);
    for i in 0..n {
        m[(i, j * n + i)] = 1.0;
    }
    m
}
