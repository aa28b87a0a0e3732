//! Plain-`f64` planar geometry: homographies, affine maps, thin-plate
//! splines and Brown–Conrady radial distortion, with exact point maps and
//! Newton inverses. The differentiable image-side counterparts live in
//! [`crate::augment`]; label recalculation uses the maps here directly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("singular system (collinear or degenerate points)")]
    Singular,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

/// Solve `A x = b` for several right-hand sides with partial pivoting.
/// `a` is row-major `n x n` and is consumed.
pub fn solve_linear(mut a: Vec<f64>, n: usize, mut rhs: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, GeometryError> {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-12 {
            return Err(GeometryError::Singular);
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            for b in rhs.iter_mut() {
                b.swap(col, piv);
            }
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            for b in rhs.iter_mut() {
                b[r] -= f * b[col];
            }
        }
    }
    for b in rhs.iter_mut() {
        for col in (0..n).rev() {
            let mut s = b[col];
            for c in col + 1..n {
                s -= a[col * n + c] * b[c];
            }
            b[col] = s / a[col * n + col];
        }
    }
    Ok(rhs)
}

/// 3x3 projective map, row-major, h22 normalized to 1 where possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    /// Map the unit square (0,0),(1,0),(1,1),(0,1) onto `quad` (TL,TR,BR,BL order).
    pub fn unit_square_to_quad(quad: &[(f64, f64); 4]) -> Result<Self, GeometryError> {
        let src = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        Self::from_points(&src, quad)
    }

    /// DLT from 4 correspondences.
    pub fn from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self, GeometryError> {
        let mut a = vec![0.0; 64];
        let mut b = vec![0.0; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            let r1 = 2 * i;
            let r2 = 2 * i + 1;
            a[r1 * 8] = x;
            a[r1 * 8 + 1] = y;
            a[r1 * 8 + 2] = 1.0;
            a[r1 * 8 + 6] = -x * u;
            a[r1 * 8 + 7] = -y * u;
            b[r1] = u;
            a[r2 * 8 + 3] = x;
            a[r2 * 8 + 4] = y;
            a[r2 * 8 + 5] = 1.0;
            a[r2 * 8 + 6] = -x * v;
            a[r2 * 8 + 7] = -y * v;
            b[r2] = v;
        }
        let sol = solve_linear(a, 8, vec![b])?.remove(0);
        let mut h = [0.0; 9];
        h[..8].copy_from_slice(&sol);
        h[8] = 1.0;
        Ok(Homography(h))
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * p.0 + h[7] * p.1 + h[8];
        (
            (h[0] * p.0 + h[1] * p.1 + h[2]) / w,
            (h[3] * p.0 + h[4] * p.1 + h[5]) / w,
        )
    }

    pub fn compose(&self, other: &Homography) -> Homography {
        // self ∘ other
        let (a, b) = (&self.0, &other.0);
        let mut m = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                m[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
            }
        }
        Homography(m)
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let h = &self.0;
        let det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6]);
        if det.abs() < 1e-14 {
            return Err(GeometryError::Singular);
        }
        let inv = [
            (h[4] * h[8] - h[5] * h[7]) / det,
            (h[2] * h[7] - h[1] * h[8]) / det,
            (h[1] * h[5] - h[2] * h[4]) / det,
            (h[5] * h[6] - h[3] * h[8]) / det,
            (h[0] * h[8] - h[2] * h[6]) / det,
            (h[2] * h[3] - h[0] * h[5]) / det,
            (h[3] * h[7] - h[4] * h[6]) / det,
            (h[1] * h[6] - h[0] * h[7]) / det,
            (h[0] * h[4] - h[1] * h[3]) / det,
        ];
        Ok(Homography(inv))
    }
}

/// 2x3 affine map `[a b tx; c d ty]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine(pub [f64; 6]);

impl Affine {
    pub fn identity() -> Self {
        Affine([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Affine([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let a = &self.0;
        (a[0] * p.0 + a[1] * p.1 + a[2], a[3] * p.0 + a[4] * p.1 + a[5])
    }

    pub fn inverse(&self) -> Result<Affine, GeometryError> {
        let a = &self.0;
        let det = a[0] * a[4] - a[1] * a[3];
        if det.abs() < 1e-14 {
            return Err(GeometryError::Singular);
        }
        let (i0, i1, i3, i4) = (a[4] / det, -a[1] / det, -a[3] / det, a[0] / det);
        Ok(Affine([
            i0,
            i1,
            -(i0 * a[2] + i1 * a[5]),
            i3,
            i4,
            -(i3 * a[2] + i4 * a[5]),
        ]))
    }

    pub fn to_homography(&self) -> Homography {
        let a = &self.0;
        Homography([a[0], a[1], a[2], a[3], a[4], a[5], 0.0, 0.0, 1.0])
    }
}

/// TPS radial kernel `U(r) = r^2 log r^2`.
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 1e-24 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Thin-plate spline map R^2 -> R^2 fitted from control correspondences.
#[derive(Debug, Clone)]
pub struct Tps {
    pub control: Vec<(f64, f64)>,
    /// Kernel weights then affine part, per output coordinate:
    /// `[w_0..w_n, a0, ax, ay]`.
    pub wx: Vec<f64>,
    pub wy: Vec<f64>,
    pub lambda: f64,
}

impl Tps {
    /// Solve the standard TPS system mapping `src` control points to `dst`
    /// targets. `lambda = 0` gives exact interpolation.
    pub fn fit(src: &[(f64, f64)], dst: &[(f64, f64)], lambda: f64) -> Result<Self, GeometryError> {
        let n = src.len();
        if n < 3 {
            return Err(GeometryError::TooFewPoints { need: 3, got: n });
        }
        assert_eq!(dst.len(), n);
        let m = n + 3;
        let mut a = vec![0.0; m * m];
        for i in 0..n {
            for j in 0..n {
                let dx = src[i].0 - src[j].0;
                let dy = src[i].1 - src[j].1;
                a[i * m + j] = tps_kernel(dx * dx + dy * dy);
            }
            a[i * m + i] += lambda;
            a[i * m + n] = 1.0;
            a[i * m + n + 1] = src[i].0;
            a[i * m + n + 2] = src[i].1;
            a[n * m + i] = 1.0;
            a[(n + 1) * m + i] = src[i].0;
            a[(n + 2) * m + i] = src[i].1;
        }
        let mut bx = vec![0.0; m];
        let mut by = vec![0.0; m];
        for i in 0..n {
            bx[i] = dst[i].0;
            by[i] = dst[i].1;
        }
        let mut sols = solve_linear(a, m, vec![bx, by])?;
        let wy = sols.pop().unwrap();
        let wx = sols.pop().unwrap();
        Ok(Tps { control: src.to_vec(), wx, wy, lambda })
    }

    /// Basis row `[U_0(p)..U_{n-1}(p), 1, px, py]`; the map is linear in the
    /// solved weights, and also linear in the *targets* for fixed controls.
    pub fn basis_row(control: &[(f64, f64)], p: (f64, f64)) -> Vec<f64> {
        let n = control.len();
        let mut row = Vec::with_capacity(n + 3);
        for c in control {
            let dx = p.0 - c.0;
            let dy = p.1 - c.1;
            row.push(tps_kernel(dx * dx + dy * dy));
        }
        row.push(1.0);
        row.push(p.0);
        row.push(p.1);
        row
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let row = Self::basis_row(&self.control, p);
        let x = row.iter().zip(&self.wx).map(|(a, b)| a * b).sum();
        let y = row.iter().zip(&self.wy).map(|(a, b)| a * b).sum();
        (x, y)
    }

    /// Jacobian of the map at `p`.
    pub fn jacobian(&self, p: (f64, f64)) -> [f64; 4] {
        let n = self.control.len();
        // affine part
        let mut j = [self.wx[n + 1], self.wx[n + 2], self.wy[n + 1], self.wy[n + 2]];
        for (i, c) in self.control.iter().enumerate() {
            let dx = p.0 - c.0;
            let dy = p.1 - c.1;
            let r2 = dx * dx + dy * dy;
            if r2 <= 1e-24 {
                continue;
            }
            let du = 2.0 * r2.ln() + 2.0; // dU/d(dx) = dx * du etc.
            j[0] += self.wx[i] * dx * du;
            j[1] += self.wx[i] * dy * du;
            j[2] += self.wy[i] * dx * du;
            j[3] += self.wy[i] * dy * du;
        }
        j
    }

    /// Newton inverse: find `p` with `apply(p) = q`.
    pub fn invert(&self, q: (f64, f64)) -> Result<(f64, f64), GeometryError> {
        let mut p = q;
        for _ in 0..50 {
            let f = self.apply(p);
            let (rx, ry) = (f.0 - q.0, f.1 - q.1);
            if rx.abs() < 1e-11 && ry.abs() < 1e-11 {
                return Ok(p);
            }
            let j = self.jacobian(p);
            let det = j[0] * j[3] - j[1] * j[2];
            if det.abs() < 1e-14 {
                return Err(GeometryError::Singular);
            }
            p.0 -= (j[3] * rx - j[1] * ry) / det;
            p.1 -= (-j[2] * rx + j[0] * ry) / det;
        }
        Ok(p)
    }

    /// Bending energy `w^T K w` (x and y sheets summed).
    pub fn bending_energy(&self) -> f64 {
        let n = self.control.len();
        let mut e = 0.0;
        for i in 0..n {
            for j in 0..n {
                let dx = self.control[i].0 - self.control[j].0;
                let dy = self.control[i].1 - self.control[j].1;
                let u = tps_kernel(dx * dx + dy * dy);
                e += self.wx[i] * u * self.wx[j] + self.wy[i] * u * self.wy[j];
            }
        }
        e
    }
}

/// Brown–Conrady radial distortion (barrel for negative coefficients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radial {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub center: (f64, f64),
    pub focal: f64,
}

impl Radial {
    pub fn identity(center: (f64, f64), focal: f64) -> Self {
        Radial { k1: 0.0, k2: 0.0, k3: 0.0, center, focal }
    }

    fn scale(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2 + self.k3 * r2 * r2 * r2
    }

    /// Forward distortion: `r_d = r (1 + k1 r^2 + k2 r^4 + k3 r^6)`.
    pub fn distort(&self, p: (f64, f64)) -> (f64, f64) {
        let nx = (p.0 - self.center.0) / self.focal;
        let ny = (p.1 - self.center.1) / self.focal;
        let s = self.scale(nx * nx + ny * ny);
        (
            self.center.0 + self.focal * s * nx,
            self.center.1 + self.focal * s * ny,
        )
    }

    /// Newton inverse of [`Radial::distort`].
    pub fn undistort(&self, p: (f64, f64)) -> (f64, f64) {
        let nx = (p.0 - self.center.0) / self.focal;
        let ny = (p.1 - self.center.1) / self.focal;
        let rd = (nx * nx + ny * ny).sqrt();
        if rd < 1e-12 {
            return p;
        }
        // solve r * scale(r^2) = rd for r
        let mut r = rd;
        for _ in 0..30 {
            let r2 = r * r;
            let f = r * self.scale(r2) - rd;
            if f.abs() < 1e-13 {
                break;
            }
            let df = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2 + 7.0 * self.k3 * r2 * r2 * r2;
            r -= f / df;
        }
        let s = r / rd;
        (
            self.center.0 + self.focal * s * nx * 1.0,
            self.center.1 + self.focal * s * ny * 1.0,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_identity_and_inverse() {
        let quad = [(10.0, 20.0), (110.0, 25.0), (105.0, 120.0), (12.0, 115.0)];
        let h = Homography::unit_square_to_quad(&quad).unwrap();
        for (i, &(u, v)) in quad.iter().enumerate() {
            let src = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)][i];
            let m = h.apply(src);
            assert!((m.0 - u).abs() < 1e-9 && (m.1 - v).abs() < 1e-9);
        }
        let inv = h.inverse().unwrap();
        let p = (0.3, 0.7);
        let q = h.apply(p);
        let r = inv.apply(q);
        assert!((r.0 - p.0).abs() < 1e-10 && (r.1 - p.1).abs() < 1e-10);
    }

    #[test]
    fn homography_collinear_is_singular() {
        let quad = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(Homography::unit_square_to_quad(&quad).is_err());
    }

    #[test]
    fn affine_inverse() {
        let a = Affine([1.2, 0.3, 5.0, -0.2, 0.9, -3.0]);
        let inv = a.inverse().unwrap();
        let p = (2.0, -1.0);
        let q = inv.apply(a.apply(p));
        assert!((q.0 - p.0).abs() < 1e-12 && (q.1 - p.1).abs() < 1e-12);
    }

    fn grid(n: usize, size: f64) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for j in 0..n {
            for i in 0..n {
                pts.push((
                    i as f64 * size / (n - 1) as f64,
                    j as f64 * size / (n - 1) as f64,
                ));
            }
        }
        pts
    }

    #[test]
    fn tps_zero_shift_is_identity() {
        let src = grid(4, 90.0);
        let tps = Tps::fit(&src, &src, 0.0).unwrap();
        for p in [(13.0, 71.0), (45.5, 2.0), (88.0, 88.0)] {
            let q = tps.apply(p);
            assert!((q.0 - p.0).abs() < 1e-6 && (q.1 - p.1).abs() < 1e-6);
        }
    }

    #[test]
    fn tps_reproduces_affine() {
        let src = grid(4, 90.0);
        let a = Affine([1.1, -0.1, 4.0, 0.2, 0.95, -2.0]);
        let dst: Vec<_> = src.iter().map(|&p| a.apply(p)).collect();
        let tps = Tps::fit(&src, &dst, 0.0).unwrap();
        for j in 0..20 {
            for i in 0..20 {
                let p = (i as f64 * 90.0 / 19.0, j as f64 * 90.0 / 19.0);
                let q = tps.apply(p);
                let e = a.apply(p);
                assert!(
                    (q.0 - e.0).abs() < 1e-6 && (q.1 - e.1).abs() < 1e-6,
                    "affine reproduction failed at {p:?}"
                );
            }
        }
    }

    #[test]
    fn tps_interpolates_control_points() {
        let src = grid(4, 90.0);
        let dst: Vec<_> = src
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x + ((i * 7) % 11) as f64 - 5.0, y + ((i * 5) % 9) as f64 - 4.0))
            .collect();
        let tps = Tps::fit(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let q = tps.apply(*s);
            assert!((q.0 - d.0).abs() < 1e-6 && (q.1 - d.1).abs() < 1e-6);
        }
    }

    #[test]
    fn tps_collinear_controls_fail() {
        let src = vec![(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        let dst = src.clone();
        assert!(Tps::fit(&src, &dst, 0.0).is_err());
    }

    #[test]
    fn tps_newton_inverse() {
        let src = grid(4, 90.0);
        let dst: Vec<_> = src
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x + ((i * 3) % 7) as f64 - 3.0, y + ((i * 11) % 5) as f64 - 2.0))
            .collect();
        let tps = Tps::fit(&src, &dst, 0.0).unwrap();
        for p in [(20.0, 30.0), (70.0, 10.0), (44.0, 85.0)] {
            let q = tps.apply(p);
            let back = tps.invert(q).unwrap();
            assert!((back.0 - p.0).abs() < 1e-8 && (back.1 - p.1).abs() < 1e-8);
        }
    }

    #[test]
    fn tps_energy_non_increasing_in_lambda() {
        let src = grid(4, 90.0);
        let dst: Vec<_> = src
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (x + ((i * 7) % 11) as f64 - 5.0, y + ((i * 5) % 9) as f64 - 4.0))
            .collect();
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let tps = Tps::fit(&src, &dst, lambda).unwrap();
            let e = tps.bending_energy();
            assert!(e <= last + 1e-9, "energy should not increase with lambda");
            last = e;
        }
    }

    #[test]
    fn radial_identity_and_center_fixed() {
        let r = Radial::identity((64.0, 64.0), 64.0);
        assert_eq!(r.distort((30.0, 40.0)), (30.0, 40.0));
        let r = Radial { k1: -0.2, k2: 0.05, k3: -0.01, center: (64.0, 64.0), focal: 64.0 };
        let c = r.distort((64.0, 64.0));
        assert!((c.0 - 64.0).abs() < 1e-12 && (c.1 - 64.0).abs() < 1e-12);
    }

    #[test]
    fn radial_k1_scaling() {
        // point one focal length from center with k1 = -0.1 scales radius by 0.9
        let r = Radial { k1: -0.1, k2: 0.0, k3: 0.0, center: (100.0, 50.0), focal: 80.0 };
        let p = r.distort((180.0, 50.0));
        assert!((p.0 - (100.0 + 80.0 * 0.9)).abs() < 1e-10);
        assert!((p.1 - 50.0).abs() < 1e-12);
    }

    #[test]
    fn radial_undistort_roundtrip() {
        let r = Radial { k1: -0.15, k2: 0.03, k3: -0.002, center: (128.0, 128.0), focal: 128.0 };
        for p in [(30.0, 200.0), (128.0, 10.0), (250.0, 250.0), (128.0, 128.0)] {
            let d = r.distort(p);
            let u = r.undistort(d);
            assert!(
                (u.0 - p.0).abs() < 1e-8 && (u.1 - p.1).abs() < 1e-8,
                "roundtrip failed for {p:?}"
            );
        }
    }
}
