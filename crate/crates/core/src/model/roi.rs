//! RoI pooling as a constant sampling matrix applied to the token grid.
//!
//! Token `(r, c)` sits at pixel `((c + 0.5) * cell, (r + 0.5) * cell)`.
//! Lattice point `(i, j)` of an `S x S` tile sits at
//! `(u_min + (j + 0.5) / S * width, v_min + (i + 0.5) / S * height)`.

use skd_autodiff::{NodeId, Tape, Tensor};

use crate::error::{CoreError, Result};
use crate::geometry::Box2D;

/// Lattice sample positions in pixels, row-major over the tile.
pub fn lattice(b: &Box2D, s: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(s * s);
    for i in 0..s {
        for j in 0..s {
            let u = b.u_min + (j as f64 + 0.5) / s as f64 * b.width();
            let v = b.v_min + (i as f64 + 0.5) / s as f64 * b.height();
            out.push((u, v));
        }
    }
    out
}

fn check_box(b: &Box2D) -> Result<()> {
    if !(b.width() > 0.0 && b.height() > 0.0) || !b.to_array().iter().all(|v| v.is_finite()) {
        return Err(CoreError::contract(format!(
            "RoI must have positive area, got {b:?}"
        )));
    }
    Ok(())
}

/// Continuous token coordinate of a pixel coordinate, clamped to the grid.
fn grid_coord(p: f64, cell: f64, grid: usize) -> (usize, f64) {
    let g = (p / cell - 0.5).clamp(0.0, (grid - 1) as f64);
    let i0 = (g.floor() as usize).min(grid - 2);
    (i0, g - i0 as f64)
}

/// `[S*S, grid*grid]` bilinear interpolation weights.
pub fn bilinear_matrix(b: &Box2D, grid: usize, cell: f64, s: usize) -> Result<Tensor> {
    check_box(b)?;
    let n = grid * grid;
    let mut m = vec![0.0; s * s * n];
    for (k, (u, v)) in lattice(b, s).into_iter().enumerate() {
        let (c0, fx) = grid_coord(u, cell, grid);
        let (r0, fy) = grid_coord(v, cell, grid);
        let row = &mut m[k * n..(k + 1) * n];
        row[r0 * grid + c0] += (1.0 - fx) * (1.0 - fy);
        row[r0 * grid + c0 + 1] += fx * (1.0 - fy);
        row[(r0 + 1) * grid + c0] += (1.0 - fx) * fy;
        row[(r0 + 1) * grid + c0 + 1] += fx * fy;
    }
    Ok(Tensor::new(vec![s * s, n], m)?)
}

/// Token index whose cell contains each lattice point.
pub fn nearest_tokens(b: &Box2D, grid: usize, cell: f64, s: usize) -> Vec<usize> {
    let clamp = |p: f64| ((p / cell).floor().max(0.0) as usize).min(grid - 1);
    lattice(b, s)
        .into_iter()
        .map(|(u, v)| clamp(v) * grid + clamp(u))
        .collect()
}

/// Differentiable `[S*S, d]` tile of `tokens` (`[grid*grid, d]`) inside `b`.
pub fn roi_pool(
    tape: &mut Tape,
    tokens: NodeId,
    b: &Box2D,
    grid: usize,
    cell: f64,
    s: usize,
) -> Result<NodeId> {
    let m = bilinear_matrix(b, grid, cell, s)?;
    let m = tape.constant(m);
    Ok(tape.matmul(m, tokens)?)
}
