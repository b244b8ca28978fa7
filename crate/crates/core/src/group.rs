//! The cyclic rotation group `C_n` and its action on grids and group-feature
//! maps.
//!
//! Coordinates place the origin at the grid center: index `(r, c)` of a
//! `k x k` grid sits at `x = c - (k-1)/2`, `y = (k-1)/2 - r`, with `y` up.
//! Element `i` rotates counterclockwise by `2*pi*i/n`. Grids are rotated by
//! inverse mapping: the destination cell samples the source at the
//! back-rotated coordinate, bilinearly interpolated, reading zero outside the
//! grid. Whenever the angle is an exact multiple of 90 degrees the rotation
//! routes through an integer permutation instead, so `C_1`, `C_2` and `C_4`
//! (and the even elements of `C_8`) are bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The cyclic group of planar rotations by multiples of `2*pi/order`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CyclicGroup {
    order: usize,
}

impl CyclicGroup {
    pub fn new(order: usize) -> Result<CyclicGroup> {
        if order == 0 {
            return Err(Error::BadShape {
                op: "CyclicGroup::new",
                shape: vec![order],
                reason: "order must be at least 1".into(),
            });
        }
        Ok(CyclicGroup { order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// `(i + j) mod n`.
    pub fn add(&self, i: usize, j: usize) -> usize {
        (i + j) % self.order
    }

    /// `(i - j) mod n`.
    pub fn sub(&self, i: usize, j: usize) -> usize {
        (i + self.order - j % self.order) % self.order
    }

    pub fn check_element(&self, i: usize) -> Result<()> {
        if i >= self.order {
            return Err(Error::GroupIndexOutOfRange {
                index: i,
                order: self.order,
            });
        }
        Ok(())
    }

    pub fn check_axis_extent(&self, extent: usize) -> Result<()> {
        if extent != self.order {
            return Err(Error::GroupAxisMismatch {
                extent,
                order: self.order,
            });
        }
        Ok(())
    }

    /// The affine matrix of element `i`:
    /// `[[cos t, -sin t], [sin t, cos t]]` with `t = 2*pi*i/n`.
    pub fn rotation_matrix(&self, i: usize) -> Result<RotationMatrix> {
        self.check_element(i)?;
        let theta = self.angle(i);
        let (s, c) = theta.sin_cos();
        Ok(RotationMatrix([[c, -s], [s, c]]))
    }

    pub fn angle(&self, i: usize) -> f64 {
        2.0 * std::f64::consts::PI * i as f64 / self.order as f64
    }

    /// Number of exact quarter turns for element `i`, when the angle is a
    /// multiple of 90 degrees.
    fn quarter_turns(&self, i: usize) -> Option<usize> {
        if (4 * i) % self.order == 0 {
            Some((4 * i / self.order) % 4)
        } else {
            None
        }
    }
}

/// 2x2 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix([[f64; 2]; 2]);

impl RotationMatrix {
    pub fn entries(&self) -> &[[f64; 2]; 2] {
        &self.0
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        let a = &self.0;
        let b = &other.0;
        let mut out = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
        }
        RotationMatrix(out)
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.0[0][0] * x + self.0[0][1] * y,
            self.0[1][0] * x + self.0[1][1] * y,
        )
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn transposed(&self) -> RotationMatrix {
        RotationMatrix([
            [self.0[0][0], self.0[1][0]],
            [self.0[0][1], self.0[1][1]],
        ])
    }
}

#[inline]
fn sample_zero(src: &[f64], k: usize, r: i64, c: i64) -> f64 {
    if r >= 0 && c >= 0 && (r as usize) < k && (c as usize) < k {
        src[r as usize * k + c as usize]
    } else {
        0.0
    }
}

/// Rotates one `k x k` plane by group element `i`, writing into `dst`.
pub(crate) fn rotate_plane(src: &[f64], k: usize, g: &CyclicGroup, i: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), k * k);
    debug_assert_eq!(dst.len(), k * k);
    if let Some(q) = g.quarter_turns(i) {
        match q {
            0 => dst.copy_from_slice(src),
            1 => {
                for r in 0..k {
                    for c in 0..k {
                        dst[r * k + c] = src[c * k + (k - 1 - r)];
                    }
                }
            }
            2 => {
                for r in 0..k {
                    for c in 0..k {
                        dst[r * k + c] = src[(k - 1 - r) * k + (k - 1 - c)];
                    }
                }
            }
            _ => {
                for r in 0..k {
                    for c in 0..k {
                        dst[r * k + c] = src[(k - 1 - c) * k + r];
                    }
                }
            }
        }
        return;
    }
    // General angle: inverse-map each destination cell and sample bilinearly.
    let theta = g.angle(i);
    let (sin_t, cos_t) = theta.sin_cos();
    let m = (k - 1) as f64 / 2.0;
    for r in 0..k {
        let y_dst = m - r as f64;
        for c in 0..k {
            let x_dst = c as f64 - m;
            // A_i^{-1} (x, y): rotate by -theta.
            let x_src = cos_t * x_dst + sin_t * y_dst;
            let y_src = -sin_t * x_dst + cos_t * y_dst;
            let cf = x_src + m;
            let rf = m - y_src;
            let r0 = rf.floor();
            let c0 = cf.floor();
            let fr = rf - r0;
            let fc = cf - c0;
            let (r0, c0) = (r0 as i64, c0 as i64);
            let v00 = sample_zero(src, k, r0, c0);
            let v01 = sample_zero(src, k, r0, c0 + 1);
            let v10 = sample_zero(src, k, r0 + 1, c0);
            let v11 = sample_zero(src, k, r0 + 1, c0 + 1);
            dst[r * k + c] = v00 * (1.0 - fr) * (1.0 - fc)
                + v01 * (1.0 - fr) * fc
                + v10 * fr * (1.0 - fc)
                + v11 * fr * fc;
        }
    }
}

/// Adjoint (transpose) of [`rotate_plane`]: scatters a gradient at the
/// rotated output back onto the source grid.
pub(crate) fn rotate_plane_adjoint(
    d_rot: &[f64],
    k: usize,
    g: &CyclicGroup,
    i: usize,
    d_src: &mut [f64],
) {
    if let Some(q) = g.quarter_turns(i) {
        // Permutations are orthogonal: the adjoint is the inverse rotation.
        let inv = [0usize, 3, 2, 1][q];
        match inv {
            0 => {
                for (d, s) in d_src.iter_mut().zip(d_rot) {
                    *d += s;
                }
            }
            1 => {
                for r in 0..k {
                    for c in 0..k {
                        d_src[r * k + c] += d_rot[c * k + (k - 1 - r)];
                    }
                }
            }
            2 => {
                for r in 0..k {
                    for c in 0..k {
                        d_src[r * k + c] += d_rot[(k - 1 - r) * k + (k - 1 - c)];
                    }
                }
            }
            _ => {
                for r in 0..k {
                    for c in 0..k {
                        d_src[r * k + c] += d_rot[(k - 1 - c) * k + r];
                    }
                }
            }
        }
        return;
    }
    let theta = g.angle(i);
    let (sin_t, cos_t) = theta.sin_cos();
    let m = (k - 1) as f64 / 2.0;
    let mut add = |r: i64, c: i64, w: f64, v: f64| {
        if r >= 0 && c >= 0 && (r as usize) < k && (c as usize) < k {
            d_src[r as usize * k + c as usize] += w * v;
        }
    };
    for r in 0..k {
        let y_dst = m - r as f64;
        for c in 0..k {
            let x_dst = c as f64 - m;
            let x_src = cos_t * x_dst + sin_t * y_dst;
            let y_src = -sin_t * x_dst + cos_t * y_dst;
            let cf = x_src + m;
            let rf = m - y_src;
            let r0 = rf.floor();
            let c0 = cf.floor();
            let fr = rf - r0;
            let fc = cf - c0;
            let (r0, c0) = (r0 as i64, c0 as i64);
            let v = d_rot[r * k + c];
            add(r0, c0, (1.0 - fr) * (1.0 - fc), v);
            add(r0, c0 + 1, (1.0 - fr) * fc, v);
            add(r0 + 1, c0, fr * (1.0 - fc), v);
            add(r0 + 1, c0 + 1, fr * fc, v);
        }
    }
}

fn check_square_trailing(t: &Tensor, op: &'static str) -> Result<usize> {
    let shape = t.shape();
    if shape.len() < 2 || shape[shape.len() - 1] != shape[shape.len() - 2] {
        return Err(Error::BadShape {
            op,
            shape: shape.to_vec(),
            reason: "trailing two dimensions must be square".into(),
        });
    }
    Ok(shape[shape.len() - 1])
}

/// Rotates the trailing `k x k` planes of `grid` by group element `i`.
pub fn rotate_spatial(grid: &Tensor, g: &CyclicGroup, i: usize) -> Result<Tensor> {
    g.check_element(i)?;
    let k = check_square_trailing(grid, "rotate_spatial")?;
    let mut out = Tensor::zeros(grid.shape());
    let plane = k * k;
    for (src, dst) in grid
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        rotate_plane(src, k, g, i, dst);
    }
    Ok(out)
}

/// Adjoint of [`rotate_spatial`].
pub fn rotate_spatial_adjoint(grid: &Tensor, g: &CyclicGroup, i: usize) -> Result<Tensor> {
    g.check_element(i)?;
    let k = check_square_trailing(grid, "rotate_spatial_adjoint")?;
    let mut out = Tensor::zeros(grid.shape());
    let plane = k * k;
    for (src, dst) in grid
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        rotate_plane_adjoint(src, k, g, i, dst);
    }
    Ok(out)
}

/// Cyclic shift of a designated group axis by `j`: the element at index `i`
/// moves to index `(i + j) mod n`.
pub fn roll_group_axis(t: &Tensor, axis: usize, g: &CyclicGroup, j: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: t.rank(),
        });
    }
    let n = t.shape()[axis];
    g.check_axis_extent(n)?;
    let j = j % n;
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..n {
            let from = (i + n - j) % n;
            let s = (o * n + from) * inner;
            let d = (o * n + i) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Ok(out)
}

/// Regular representation of element `j` on a group feature map
/// `[C, n, h, w]`: rotates the spatial plane by `2*pi*j/n` and rolls the
/// group axis by `j`.
pub fn act_on_feature(y: &Tensor, g: &CyclicGroup, j: usize) -> Result<Tensor> {
    g.check_element(j)?;
    if y.rank() != 4 {
        return Err(Error::BadShape {
            op: "act_on_feature",
            shape: y.shape().to_vec(),
            reason: "expected [C, n, h, w]".into(),
        });
    }
    let (c_dim, n, h, w) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    g.check_axis_extent(n)?;
    if h != w {
        return Err(Error::BadShape {
            op: "act_on_feature",
            shape: y.shape().to_vec(),
            reason: "spatial dimensions must be square".into(),
        });
    }
    let plane = h * w;
    let mut out = Tensor::zeros(y.shape());
    let src = y.data();
    let dst = out.data_mut();
    for c in 0..c_dim {
        for v in 0..n {
            let from = (v + n - j) % n;
            let s = (c * n + from) * plane;
            let d = (c * n + v) * plane;
            rotate_plane(&src[s..s + plane], h, g, j, &mut dst[d..d + plane]);
        }
    }
    Ok(out)
}
