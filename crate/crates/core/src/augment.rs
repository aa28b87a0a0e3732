//! Imaging artifacts between the rendered scene and the detector input:
//! a geometric warp chain (perspective jitter, affine, radial distortion,
//! thin-plate spline) applied to image and labels in lockstep, followed by a
//! photometric stack (blur, sensor noise, brightness/gamma/hue, approximate
//! JPEG). Every image-space op is differentiable on the tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{Affine, GeometryError, Homography, Radial, Tps, solve_linear};
use crate::render::Annotation;
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("invalid augment config: {0}")]
    BadConfig(String),
}

/// Parameter ranges for sampled augmentations. All probabilities in `[0,1]`,
/// angles in radians.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Corner jitter of the perspective stage, fraction of image dims.
    pub perspective_jitter: f64,
    pub rotation_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Translation bound, fraction of image dims.
    pub translate_frac: f64,
    pub radial_k1_min: f64,
    pub radial_k1_max: f64,
    /// Control grid side of the TPS stage.
    pub tps_grid: usize,
    /// Max control shift, fraction of min image dimension. Zero disables TPS.
    pub tps_shift_frac: f64,
    pub blur_prob: f64,
    pub blur_radius_max: f64,
    pub motion_len_max: f64,
    pub noise_sigma_max: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Hue rotation bound about the gray axis.
    pub hue_max: f64,
    pub jpeg_prob: f64,
    pub jpeg_quality_min: u32,
    pub jpeg_quality_max: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            perspective_jitter: 0.08,
            rotation_max: 10f64.to_radians(),
            scale_min: 0.85,
            scale_max: 1.15,
            translate_frac: 0.05,
            radial_k1_min: -0.10,
            radial_k1_max: 0.05,
            tps_grid: 4,
            tps_shift_frac: 0.12,
            blur_prob: 0.3,
            blur_radius_max: 2.0,
            motion_len_max: 5.0,
            noise_sigma_max: 0.02,
            brightness_min: 0.7,
            brightness_max: 1.3,
            gamma_min: 0.8,
            gamma_max: 1.25,
            hue_max: 27f64.to_radians(),
            jpeg_prob: 0.5,
            jpeg_quality_min: 30,
            jpeg_quality_max: 95,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::BadConfig(m.into()));
        if !(0.0..0.5).contains(&self.perspective_jitter) {
            return bad("perspective_jitter must be in [0, 0.5)");
        }
        if self.scale_min <= 0.0 || self.scale_min > self.scale_max {
            return bad("scale range must satisfy 0 < min <= max");
        }
        if self.tps_grid < 2 {
            return bad("tps_grid must be at least 2");
        }
        if !(0.0..0.5).contains(&self.tps_shift_frac) {
            return bad("tps_shift_frac must be in [0, 0.5)");
        }
        if self.jpeg_quality_min < 1
            || self.jpeg_quality_max > 100
            || self.jpeg_quality_min > self.jpeg_quality_max
        {
            return bad("jpeg quality range must be within [1, 100]");
        }
        for (name, p) in [("blur_prob", self.blur_prob), ("jpeg_prob", self.jpeg_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadConfig(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}

/// One geometric stage, with exact forward (label) and backward (resampling)
/// point maps.
#[derive(Debug, Clone)]
pub enum WarpStage {
    /// Forward homography and its inverse.
    Perspective { fwd: Homography, bwd: Homography },
    AffineMap { fwd: Affine, bwd: Affine },
    /// Forward distortion; labels use the analytic map, resampling the Newton
    /// inverse.
    RadialDistort(Radial),
    /// Backward-fitted TPS: `bwd` maps output pixels to source pixels exactly;
    /// the forward label map is its Newton inverse.
    TpsWarp { bwd: Tps },
}

impl WarpStage {
    pub fn forward_point(&self, p: (f64, f64)) -> (f64, f64) {
        match self {
            WarpStage::Perspective { fwd, .. } => fwd.apply(p),
            WarpStage::AffineMap { fwd, .. } => fwd.apply(p),
            WarpStage::RadialDistort(r) => r.distort(p),
            WarpStage::TpsWarp { bwd } => bwd.invert(p).unwrap_or((f64::NAN, f64::NAN)),
        }
    }

    pub fn backward_point(&self, q: (f64, f64)) -> (f64, f64) {
        match self {
            WarpStage::Perspective { bwd, .. } => bwd.apply(q),
            WarpStage::AffineMap { bwd, .. } => bwd.apply(q),
            WarpStage::RadialDistort(r) => r.undistort(q),
            WarpStage::TpsWarp { bwd } => bwd.apply(q),
        }
    }
}

/// Ordered geometric stages over a fixed image size.
#[derive(Debug, Clone, Default)]
pub struct WarpChain {
    pub stages: Vec<WarpStage>,
}

impl WarpChain {
    pub fn identity() -> Self {
        WarpChain { stages: Vec::new() }
    }

    /// Label map: apply every stage in order.
    pub fn forward_point(&self, p: (f64, f64)) -> (f64, f64) {
        self.stages.iter().fold(p, |q, s| s.forward_point(q))
    }

    /// Resampling map: invert the chain, last stage first.
    pub fn backward_point(&self, q: (f64, f64)) -> (f64, f64) {
        self.stages.iter().rev().fold(q, |p, s| s.backward_point(p))
    }
}

/// Draw a warp chain; stage order is perspective, affine, radial, TPS.
pub fn sample_warp_chain(
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WarpChain, AugmentError> {
    let (w, h) = (width as f64, height as f64);
    let mut stages = Vec::new();

    if cfg.perspective_jitter > 0.0 {
        let (jx, jy) = (w * cfg.perspective_jitter, h * cfg.perspective_jitter);
        let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let mut dst = src;
        for d in &mut dst {
            d.0 += rng.gen_range(-jx..=jx);
            d.1 += rng.gen_range(-jy..=jy);
        }
        let fwd = Homography::from_points(&src, &dst)?;
        let bwd = fwd.inverse()?;
        stages.push(WarpStage::Perspective { fwd, bwd });
    }

    let theta = rng.gen_range(-cfg.rotation_max..=cfg.rotation_max);
    let s = rng.gen_range(cfg.scale_min..=cfg.scale_max);
    let (tx, ty) = (
        rng.gen_range(-w * cfg.translate_frac..=w * cfg.translate_frac),
        rng.gen_range(-h * cfg.translate_frac..=h * cfg.translate_frac),
    );
    // rotate/scale about the image center, then translate
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ct, st) = (theta.cos() * s, theta.sin() * s);
    let fwd = Affine([
        ct,
        -st,
        cx - ct * cx + st * cy + tx,
        st,
        ct,
        cy - st * cx - ct * cy + ty,
    ]);
    let bwd = fwd.inverse()?;
    stages.push(WarpStage::AffineMap { fwd, bwd });

    let k1 = rng.gen_range(cfg.radial_k1_min..=cfg.radial_k1_max);
    if k1 != 0.0 {
        stages.push(WarpStage::RadialDistort(Radial {
            k1,
            k2: 0.0,
            k3: 0.0,
            center: (cx, cy),
            focal: w.min(h) / 2.0,
        }));
    }

    if cfg.tps_shift_frac > 0.0 {
        let shift = cfg.tps_shift_frac * w.min(h) * rng.gen_range(0.2..=1.0);
        let tps = sample_backward_tps(cfg.tps_grid, width, height, shift, rng)?;
        stages.push(WarpStage::TpsWarp { bwd: tps });
    }

    Ok(WarpChain { stages })
}

/// Fit a backward TPS whose controls are a uniform grid over the output image
/// and whose targets are the same grid with random shifts up to `shift` px.
pub fn sample_backward_tps(
    grid: usize,
    width: usize,
    height: usize,
    shift: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tps, AugmentError> {
    let (w, h) = (width as f64, height as f64);
    let mut src = Vec::with_capacity(grid * grid);
    let mut dst = Vec::with_capacity(grid * grid);
    for j in 0..grid {
        for i in 0..grid {
            let p = (
                i as f64 / (grid - 1) as f64 * (w - 1.0),
                j as f64 / (grid - 1) as f64 * (h - 1.0),
            );
            src.push(p);
            dst.push((
                p.0 + rng.gen_range(-shift..=shift),
                p.1 + rng.gen_range(-shift..=shift),
            ));
        }
    }
    Ok(Tps::fit(&src, &dst, 0.0)?)
}

/// Resample an image through the chain: `out[q] = img[chain.backward(q)]`,
/// bilinear with replicate borders. Differentiable in the image.
pub fn warp_image(tape: &mut Tape, img: Var, chain: &WarpChain) -> Var {
    let shape = tape.val(img).shape.clone();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = chain.backward_point((x as f64, y as f64));
            xs.push(if sx.is_finite() { sx } else { 0.0 });
            ys.push(if sy.is_finite() { sy } else { 0.0 });
        }
    }
    let xs = tape.leaf(Tensor::from_vec(xs));
    let ys = tape.leaf(Tensor::from_vec(ys));
    let out = tape.grid_sample(img, xs, ys);
    tape.reshape(out, vec![c, h, w])
}

/// Push annotations through the chain's forward map. A marker is dropped when
/// fewer than half of its lattice points land inside the image; kept
/// annotations have all corners and grid points remapped exactly.
pub fn warp_annotations(
    anns: &[Annotation],
    chain: &WarpChain,
    width: usize,
    height: usize,
) -> (Vec<Annotation>, Vec<usize>) {
    let inside = |p: (f64, f64)| {
        p.0.is_finite()
            && p.1.is_finite()
            && (0.0..width as f64).contains(&p.0)
            && (0.0..height as f64).contains(&p.1)
    };
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, ann) in anns.iter().enumerate() {
        let corners = ann.corners.map(|p| chain.forward_point(p));
        let grid: Vec<(f64, f64)> = ann.grid.iter().map(|&p| chain.forward_point(p)).collect();
        let vis = grid.iter().filter(|&&p| inside(p)).count();
        let finite = corners.iter().all(|p| p.0.is_finite() && p.1.is_finite());
        if !finite || vis * 2 < grid.len() {
            dropped.push(i);
            continue;
        }
        kept.push(Annotation { corners, grid, ..ann.clone() });
    }
    (kept, dropped)
}

/// Constant matrix `M` with `map_x(out_pts) = M * dst_x` (same for y) for a
/// TPS with fixed controls: the fitted map is linear in its targets.
pub fn tps_coord_matrix(
    control: &[(f64, f64)],
    lambda: f64,
    out_pts: &[(f64, f64)],
) -> Result<Arc<Vec<f64>>, GeometryError> {
    let n = control.len();
    let m = n + 3;
    let mut a = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            let dx = control[i].0 - control[j].0;
            let dy = control[i].1 - control[j].1;
            a[i * m + j] = crate::geometry::tps_kernel(dx * dx + dy * dy);
        }
        a[i * m + i] += lambda;
        a[i * m + n] = 1.0;
        a[i * m + n + 1] = control[i].0;
        a[i * m + n + 2] = control[i].1;
        a[n * m + i] = 1.0;
        a[(n + 1) * m + i] = control[i].0;
        a[(n + 2) * m + i] = control[i].1;
    }
    // columns 0..n of L^-1: weights as a linear function of the targets
    let rhs: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    let cols = solve_linear(a, m, rhs)?;
    let k = out_pts.len();
    let mut out = vec![0.0; k * n];
    for (pi, &p) in out_pts.iter().enumerate() {
        let row = Tps::basis_row(control, p);
        for j in 0..n {
            out[pi * n + j] = row.iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Arc::new(out))
}

/// TPS-mapped coordinates of `out_pts` as tape nodes, differentiable in the
/// target control coordinates `dst_x`/`dst_y` (each `[n]`).
pub fn tps_coords(
    tape: &mut Tape,
    control: &[(f64, f64)],
    lambda: f64,
    out_pts: &[(f64, f64)],
    dst_x: Var,
    dst_y: Var,
) -> Result<(Var, Var), GeometryError> {
    let m = tps_coord_matrix(control, lambda, out_pts)?;
    let k = out_pts.len();
    let n = control.len();
    let xs = tape.matvec_const(m.clone(), k, n, dst_x);
    let ys = tape.matvec_const(m, k, n, dst_y);
    Ok((xs, ys))
}

/// Radially distorted point coordinates with differentiable coefficients.
pub fn radial_distort_points(
    tape: &mut Tape,
    pts: &[(f64, f64)],
    k1: Var,
    k2: Var,
    k3: Var,
    center: (f64, f64),
    focal: f64,
) -> (Var, Var) {
    let k = pts.len();
    let mut nx = Vec::with_capacity(k);
    let mut ny = Vec::with_capacity(k);
    let mut r2 = Vec::with_capacity(k);
    for &(px, py) in pts {
        let x = (px - center.0) / focal;
        let y = (py - center.1) / focal;
        nx.push(x);
        ny.push(y);
        r2.push(x * x + y * y);
    }
    let r2 = tape.leaf(Tensor::from_vec(r2));
    let r4 = tape.square(r2);
    let r6 = tape.mul(r4, r2);
    let t1 = tape.mul(k1, r2);
    let t2 = tape.mul(k2, r4);
    let t3 = tape.mul(k3, r6);
    let s = tape.add(t1, t2);
    let s = tape.add(s, t3);
    let s = tape.add_const(s, 1.0);
    let nx_t = tape.leaf(Tensor::from_vec(nx));
    let ny_t = tape.leaf(Tensor::from_vec(ny));
    let sx = tape.mul(s, nx_t);
    let sy = tape.mul(s, ny_t);
    let sx = tape.mul_const(sx, focal);
    let sy = tape.mul_const(sy, focal);
    let xs = tape.add_const(sx, center.0);
    let ys = tape.add_const(sy, center.1);
    (xs, ys)
}

// ------------------------------------------------------------- photometric

/// Normalized disc kernel of the given radius (defocus blur).
pub fn disc_kernel(radius: f64) -> (Arc<Vec<f64>>, usize) {
    let r = radius.max(0.0);
    let k = 2 * r.ceil() as usize + 1;
    let c = (k / 2) as f64;
    let mut w = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            // soft edge keeps the kernel smooth in the radius
            w[y * k + x] = (r + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    (Arc::new(w), k)
}

/// Normalized oriented line kernel (motion blur) of the given length.
pub fn line_kernel(len: f64, angle: f64) -> (Arc<Vec<f64>>, usize) {
    let l = len.max(1.0);
    let k = 2 * (l / 2.0).ceil() as usize + 1;
    let c = (k / 2) as f64;
    let mut w = vec![0.0; k * k];
    let (dx, dy) = (angle.cos(), angle.sin());
    let steps = (l * 4.0).ceil() as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64 - 0.5;
        let (x, y) = (c + t * l * dx, c + t * l * dy);
        // bilinear deposit
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ox, oy, wt) in [
            (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
            (1.0, 0.0, fx * (1.0 - fy)),
            (0.0, 1.0, (1.0 - fx) * fy),
            (1.0, 1.0, fx * fy),
        ] {
            let (xi, yi) = ((x0 + ox) as isize, (y0 + oy) as isize);
            if xi >= 0 && yi >= 0 && (xi as usize) < k && (yi as usize) < k {
                w[yi as usize * k + xi as usize] += wt;
            }
        }
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    (Arc::new(w), k)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlurKind {
    None,
    Disc { radius: f64 },
    Motion { len: f64, angle: f64 },
}

/// Apply a blur (replicate-padded depthwise convolution).
pub fn apply_blur(tape: &mut Tape, img: Var, blur: &BlurKind) -> Var {
    match blur {
        BlurKind::None => img,
        BlurKind::Disc { radius } => {
            let (kern, k) = disc_kernel(*radius);
            tape.depthwise_conv_const(img, kern, k)
        }
        BlurKind::Motion { len, angle } => {
            let (kern, k) = line_kernel(*len, *angle);
            tape.depthwise_conv_const(img, kern, k)
        }
    }
}

/// Add iid Gaussian sensor noise with the given sigma.
pub fn add_noise(tape: &mut Tape, img: Var, sigma: f64, seed: u64) -> Var {
    if sigma <= 0.0 {
        return img;
    }
    let shape = tape.val(img).shape.clone();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            sigma * (-2.0 * u.ln()).sqrt() * v.cos()
        })
        .collect();
    let noise = tape.leaf(Tensor::new(shape, data));
    tape.add(img, noise)
}

/// Rotate hue by `angle` about the gray axis (Rodrigues rotation of the RGB
/// cube); differentiable in the image and the angle. A rotation of 120
/// degrees permutes the channels exactly.
pub fn hue_rotate(tape: &mut Tape, img: Var, angle: Var) -> Var {
    assert_eq!(tape.val(img).shape.len(), 3);
    let c = tape.cos(angle);
    let s = tape.sin(angle);
    let one_m_c = tape.neg(c);
    let one_m_c = tape.add_const(one_m_c, 1.0);
    let third = tape.mul_const(one_m_c, 1.0 / 3.0);
    let s3 = tape.mul_const(s, 1.0 / 3f64.sqrt());

    let ch: Vec<Var> = (0..3).map(|k| tape.channel(img, k)).collect();
    let sum01 = tape.add(ch[0], ch[1]);
    let sum = tape.add(sum01, ch[2]);
    let gray = tape.mul(third, sum);
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        // (a x v)_k = (v_{k+2} - v_{k+1}) / sqrt(3), indices mod 3
        let cross = tape.sub(ch[(k + 2) % 3], ch[(k + 1) % 3]);
        let a = tape.mul(c, ch[k]);
        let b = tape.mul(s3, cross);
        let ab = tape.add(a, b);
        out.push(tape.add(ab, gray));
    }
    tape.concat0(&out)
}

const LUMA_Q: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

const CHROMA_Q: [f64; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0, //
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0, //
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// Quantization table at the given quality, libjpeg scaling rule.
pub fn quant_table(base: &[f64; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for i in 0..64 {
        out[i] = ((base[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Differentiable JPEG surrogate: RGB -> YCbCr, 8x8 block DCT, quantization
/// with smooth rounding, inverse. No chroma subsampling. Sizes that are not
/// multiples of 8 are reflect-padded and cropped back.
pub fn jpeg_approx(tape: &mut Tape, img: Var, quality: u32) -> Var {
    let shape = tape.val(img).shape.clone();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], 3);
    let (h, w) = (shape[1], shape[2]);

    // to YCbCr on the 0..255 scale, DC-centered
    let x255 = tape.mul_const(img, 255.0);
    let r = tape.channel(x255, 0);
    let g = tape.channel(x255, 1);
    let b = tape.channel(x255, 2);
    let mix = |tape: &mut Tape, cr: f64, cg: f64, cb: f64, off: f64| {
        let a = tape.mul_const(r, cr);
        let bb = tape.mul_const(g, cg);
        let c = tape.mul_const(b, cb);
        let ab = tape.add(a, bb);
        let abc = tape.add(ab, c);
        tape.add_const(abc, off)
    };
    let y = mix(tape, 0.299, 0.587, 0.114, -128.0);
    let cb = mix(tape, -0.168_736, -0.331_264, 0.5, 0.0);
    let cr = mix(tape, 0.5, -0.418_688, -0.081_312, 0.0);
    let ycc = tape.concat0(&[y, cb, cr]);

    // reflect-pad to multiples of 8
    let h8 = h.div_ceil(8) * 8;
    let w8 = w.div_ceil(8) * 8;
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let padded = if h8 != h || w8 != w {
        let mut idx = Vec::with_capacity(3 * h8 * w8);
        for c in 0..3 {
            for yy in 0..h8 {
                for xx in 0..w8 {
                    idx.push(c * h * w + reflect(yy, h) * w + reflect(xx, w));
                }
            }
        }
        let flat = tape.gather(ycc, &idx);
        tape.reshape(flat, vec![3, h8, w8])
    } else {
        ycc
    };

    let dct = tape.block_dct8(padded);
    let lq = quant_table(&LUMA_Q, quality);
    let cq = quant_table(&CHROMA_Q, quality);
    let mut table = Vec::with_capacity(3 * h8 * w8);
    for c in 0..3 {
        let base = if c == 0 { &lq } else { &cq };
        for yy in 0..h8 {
            for xx in 0..w8 {
                table.push(base[(yy % 8) * 8 + (xx % 8)]);
            }
        }
    }
    let table = tape.leaf(Tensor::new(vec![3, h8, w8], table));
    let qd = tape.div(dct, table);
    let rounded = tape.smooth_round(qd);
    let deq = tape.mul(rounded, table);
    let rec = tape.block_idct8(deq);

    let rec = if h8 != h || w8 != w {
        let mut idx = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for yy in 0..h {
                for xx in 0..w {
                    idx.push(c * h8 * w8 + yy * w8 + xx);
                }
            }
        }
        let flat = tape.gather(rec, &idx);
        tape.reshape(flat, vec![3, h, w])
    } else {
        rec
    };

    // back to RGB in [0,1]
    let y = tape.channel(rec, 0);
    let cb = tape.channel(rec, 1);
    let cr = tape.channel(rec, 2);
    let y = tape.add_const(y, 128.0);
    let comb = |tape: &mut Tape, fcb: f64, fcr: f64| {
        let a = tape.mul_const(cb, fcb);
        let b = tape.mul_const(cr, fcr);
        let ab = tape.add(a, b);
        let s = tape.add(y, ab);
        tape.mul_const(s, 1.0 / 255.0)
    };
    let r = comb(tape, 0.0, 1.402);
    let g = comb(tape, -0.344_136, -0.714_136);
    let b = comb(tape, 1.772, 0.0);
    tape.concat0(&[r, g, b])
}

/// One sampled photometric configuration.
#[derive(Debug, Clone)]
pub struct PhotoSample {
    pub blur: BlurKind,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub brightness: f64,
    pub gamma: f64,
    pub hue: f64,
    pub jpeg_quality: Option<u32>,
}

pub fn sample_photo(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> PhotoSample {
    let blur = if rng.gen_bool(cfg.blur_prob) {
        if rng.gen_bool(0.5) {
            BlurKind::Disc { radius: rng.gen_range(0.5..=cfg.blur_radius_max.max(0.5)) }
        } else {
            BlurKind::Motion {
                len: rng.gen_range(1.5..=cfg.motion_len_max.max(1.5)),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        }
    } else {
        BlurKind::None
    };
    let jpeg_quality = if rng.gen_bool(cfg.jpeg_prob) {
        Some(rng.gen_range(cfg.jpeg_quality_min..=cfg.jpeg_quality_max))
    } else {
        None
    };
    PhotoSample {
        blur,
        noise_sigma: rng.gen_range(0.0..=cfg.noise_sigma_max),
        noise_seed: rng.gen(),
        brightness: rng.gen_range(cfg.brightness_min..=cfg.brightness_max),
        gamma: rng.gen_range(cfg.gamma_min..=cfg.gamma_max),
        hue: rng.gen_range(-cfg.hue_max..=cfg.hue_max),
        jpeg_quality,
    }
}

/// One full sampled augmentation.
#[derive(Debug, Clone)]
pub struct AugmentSample {
    pub chain: WarpChain,
    pub photo: PhotoSample,
}

pub fn sample_augment(
    cfg: &AugmentConfig,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<AugmentSample, AugmentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = sample_warp_chain(cfg, width, height, &mut rng)?;
    let photo = sample_photo(cfg, &mut rng);
    Ok(AugmentSample { chain, photo })
}

/// Apply the whole stack to a linear-light image and its labels: geometric
/// warp (labels in lockstep), blur, noise, brightness, gamma jitter, hue,
/// display gamma, JPEG, final clamp. Returns the augmented image plus kept
/// annotations and the indices of dropped ones.
pub fn apply_pipeline(
    tape: &mut Tape,
    img: Var,
    anns: &[Annotation],
    sample: &AugmentSample,
) -> (Var, Vec<Annotation>, Vec<usize>) {
    let shape = tape.val(img).shape.clone();
    let (h, w) = (shape[1], shape[2]);
    let x = warp_image(tape, img, &sample.chain);
    let (kept, dropped) = warp_annotations(anns, &sample.chain, w, h);

    let x = apply_blur(tape, x, &sample.photo.blur);
    let x = add_noise(tape, x, sample.photo.noise_sigma, sample.photo.noise_seed);
    let bright = tape.scalar(sample.photo.brightness);
    let x = tape.mul(x, bright);
    let gamma = tape.scalar(sample.photo.gamma);
    let x = tape.pow_svar(x, gamma);
    let hue = tape.scalar(sample.photo.hue);
    let x = hue_rotate(tape, x, hue);
    let x = crate::render::gamma_encode_tape(tape, x);
    let x = match sample.photo.jpeg_quality {
        Some(q) => jpeg_approx(tape, x, q),
        None => x,
    };
    let x = tape.clamp01(x);
    (x, kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Message;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(tape: &mut Tape, c: usize, h: usize, w: usize, seed: u64) -> Var {
        let mut r = rng(seed);
        let data = (0..c * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
        tape.leaf(Tensor::new(vec![c, h, w], data))
    }

    fn smooth_image(tape: &mut Tape, h: usize, w: usize) -> Var {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(
                        0.5 + 0.3 * ((x as f64 / w as f64 + c as f64 * 0.2) * 3.0).sin()
                            * ((y as f64 / h as f64) * 2.5).cos(),
                    );
                }
            }
        }
        tape.leaf(Tensor::new(vec![3, h, w], data))
    }

    #[test]
    fn chain_roundtrip_forward_backward() {
        let cfg = AugmentConfig::default();
        let mut r = rng(3);
        for _ in 0..5 {
            let chain = sample_warp_chain(&cfg, 64, 64, &mut r).unwrap();
            for p in [(10.0, 12.0), (32.0, 32.0), (50.0, 20.0)] {
                let q = chain.forward_point(p);
                if !q.0.is_finite() {
                    continue;
                }
                let back = chain.backward_point(q);
                assert!(
                    (back.0 - p.0).abs() < 1e-5 && (back.1 - p.1).abs() < 1e-5,
                    "roundtrip {p:?} -> {q:?} -> {back:?}"
                );
            }
        }
    }

    #[test]
    fn identity_chain_is_noop() {
        let mut tape = Tape::new();
        let img = random_image(&mut tape, 3, 16, 16, 1);
        let chain = WarpChain::identity();
        let out = warp_image(&mut tape, img, &chain);
        let (a, b) = (tape.val(img).data.clone(), tape.val(out).data.clone());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_lands_where_labels_say() {
        let cfg = AugmentConfig { tps_shift_frac: 0.05, ..AugmentConfig::default() };
        let mut r = rng(7);
        for trial in 0..5 {
            let chain = sample_warp_chain(&cfg, 64, 64, &mut r).unwrap();
            let p = (30.0 + trial as f64, 28.0);
            let q = chain.forward_point(p);
            if !(5.0..59.0).contains(&q.0) || !(5.0..59.0).contains(&q.1) {
                continue;
            }
            let mut data = vec![0.0; 64 * 64];
            // smooth gaussian bump at p so bilinear resampling peaks cleanly
            for y in 0..64 {
                for x in 0..64 {
                    let d2 = (x as f64 - p.0).powi(2) + (y as f64 - p.1).powi(2);
                    data[y * 64 + x] = (-d2 / 4.0).exp();
                }
            }
            let mut tape = Tape::new();
            let img = tape.leaf(Tensor::new(vec![1, 64, 64], data));
            let out = warp_image(&mut tape, img, &chain);
            let ov = tape.val(out);
            let mut best = (0usize, 0usize);
            let mut bv = f64::MIN;
            for y in 0..64 {
                for x in 0..64 {
                    if ov.data[y * 64 + x] > bv {
                        bv = ov.data[y * 64 + x];
                        best = (x, y);
                    }
                }
            }
            let dx = best.0 as f64 - q.0;
            let dy = best.1 as f64 - q.1;
            assert!(
                (dx * dx + dy * dy).sqrt() < 1.0,
                "trial {trial}: peak {best:?} vs predicted {q:?}"
            );
        }
    }

    #[test]
    fn warp_image_gradient_matches_finite_differences() {
        let cfg = AugmentConfig::default();
        let mut r = rng(11);
        let chain = sample_warp_chain(&cfg, 12, 12, &mut r).unwrap();
        let mut base = rng(12);
        let t = Tensor::new(vec![1, 12, 12], (0..144).map(|_| base.gen_range(0.0..1.0)).collect());
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let img = tape.leaf(t.clone());
            let out = warp_image(&mut tape, img, &chain);
            let loss = tape.mean(out);
            let g = tape.backward(loss).get_or_zeros(img, 144);
            (tape.val(loss).data[0], g)
        };
        let (_, g) = eval(&t);
        let eps = 1e-6;
        for i in [5usize, 40, 77, 110] {
            let mut tp = t.clone();
            tp.data[i] += eps;
            let fp = eval(&tp).0;
            tp.data[i] -= 2.0 * eps;
            let fm = eval(&tp).0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-7, "elem {i}: fd={fd} ad={}", g[i]);
        }
    }

    #[test]
    fn annotations_warp_exactly_and_offscreen_drops() {
        let ann = |cx: f64, cy: f64| Annotation {
            marker_id: 0,
            message: Message::new(vec![0; 4]),
            corners: [
                (cx - 5.0, cy - 5.0),
                (cx + 5.0, cy - 5.0),
                (cx + 5.0, cy + 5.0),
                (cx - 5.0, cy + 5.0),
            ],
            grid: vec![(cx, cy), (cx - 4.0, cy - 4.0), (cx + 4.0, cy + 4.0)],
            grid_side: 0,
        };
        // big translation pushes the second marker out
        let fwd = Affine::translation(30.0, 0.0);
        let chain = WarpChain {
            stages: vec![WarpStage::AffineMap { fwd, bwd: fwd.inverse().unwrap() }],
        };
        let anns = vec![ann(20.0, 32.0), ann(60.0, 32.0)];
        let (kept, dropped) = warp_annotations(&anns, &chain, 64, 64);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped, vec![1]);
        assert_eq!(kept[0].corners[0], (45.0, 27.0));
        assert_eq!(kept[0].grid[0], (50.0, 32.0));
    }

    #[test]
    fn tps_coords_match_fitted_map() {
        let mut r = rng(21);
        let control: Vec<(f64, f64)> = (0..9)
            .map(|i| ((i % 3) as f64 * 20.0, (i / 3) as f64 * 20.0))
            .collect();
        let dst: Vec<(f64, f64)> = control
            .iter()
            .map(|&(x, y)| (x + r.gen_range(-3.0..3.0), y + r.gen_range(-3.0..3.0)))
            .collect();
        let tps = Tps::fit(&control, &dst, 0.0).unwrap();
        let pts = vec![(5.0, 7.0), (25.0, 33.0), (38.0, 12.0)];
        let mut tape = Tape::new();
        let dx = tape.leaf(Tensor::from_vec(dst.iter().map(|p| p.0).collect()));
        let dy = tape.leaf(Tensor::from_vec(dst.iter().map(|p| p.1).collect()));
        let (xs, ys) = tps_coords(&mut tape, &control, 0.0, &pts, dx, dy).unwrap();
        for (i, &p) in pts.iter().enumerate() {
            let e = tps.apply(p);
            assert!((tape.val(xs).data[i] - e.0).abs() < 1e-9);
            assert!((tape.val(ys).data[i] - e.1).abs() < 1e-9);
        }
    }

    #[test]
    fn tps_coords_gradient_wrt_targets() {
        let control: Vec<(f64, f64)> = (0..9)
            .map(|i| ((i % 3) as f64 * 10.0, (i / 3) as f64 * 10.0))
            .collect();
        let mut r = rng(22);
        let dst: Vec<f64> = control
            .iter()
            .map(|&(x, _)| x + r.gen_range(-2.0..2.0))
            .collect();
        let dy_vals: Vec<f64> = control
            .iter()
            .map(|&(_, y)| y + r.gen_range(-2.0..2.0))
            .collect();
        let pts = vec![(4.0, 6.0), (15.0, 11.0)];
        let eval = |dst: &Vec<f64>| {
            let mut tape = Tape::new();
            let dx = tape.leaf(Tensor::from_vec(dst.clone()));
            let dy = tape.leaf(Tensor::from_vec(dy_vals.clone()));
            let (xs, _) = tps_coords(&mut tape, &control, 0.0, &pts, dx, dy).unwrap();
            let loss = tape.sum(xs);
            let g = tape.backward(loss).get_or_zeros(dx, dst.len());
            (tape.val(loss).data[0], g)
        };
        let (_, g) = eval(&dst);
        let eps = 1e-6;
        for i in 0..dst.len() {
            let mut d = dst.clone();
            d[i] += eps;
            let fp = eval(&d).0;
            d[i] -= 2.0 * eps;
            let fm = eval(&d).0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6, "i={i} fd={fd} ad={}", g[i]);
        }
    }

    #[test]
    fn radial_tape_matches_analytic() {
        let rad = Radial { k1: -0.08, k2: 0.01, k3: -0.002, center: (32.0, 32.0), focal: 32.0 };
        let pts = vec![(10.0, 20.0), (50.0, 40.0), (32.0, 5.0)];
        let mut tape = Tape::new();
        let k1 = tape.scalar(rad.k1);
        let k2 = tape.scalar(rad.k2);
        let k3 = tape.scalar(rad.k3);
        let (xs, ys) = radial_distort_points(&mut tape, &pts, k1, k2, k3, rad.center, rad.focal);
        for (i, &p) in pts.iter().enumerate() {
            let e = rad.distort(p);
            assert!((tape.val(xs).data[i] - e.0).abs() < 1e-10);
            assert!((tape.val(ys).data[i] - e.1).abs() < 1e-10);
        }
    }

    #[test]
    fn radial_gradient_wrt_coefficients() {
        let pts = vec![(10.0, 20.0), (50.0, 40.0)];
        let eval = |k1v: f64| {
            let mut tape = Tape::new();
            let k1 = tape.scalar(k1v);
            let k2 = tape.scalar(0.01);
            let k3 = tape.scalar(-0.002);
            let (xs, _) = radial_distort_points(&mut tape, &pts, k1, k2, k3, (32.0, 32.0), 32.0);
            let loss = tape.sum(xs);
            (tape.val(loss).data[0], tape.backward(loss).get_or_zeros(k1, 1)[0])
        };
        let (_, ad) = eval(-0.08);
        let eps = 1e-7;
        let fd = (eval(-0.08 + eps).0 - eval(-0.08 - eps).0) / (2.0 * eps);
        assert!((fd - ad).abs() / fd.abs().max(1e-9) < 1e-6, "fd={fd} ad={ad}");
    }

    #[test]
    fn blur_kernels_are_normalized_and_preserve_constants() {
        for (kern, k) in [disc_kernel(1.7), line_kernel(4.0, 0.7)] {
            let s: f64 = kern.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(kern.len(), k * k);
        }
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::full(vec![3, 10, 10], 0.42));
        let out = apply_blur(&mut tape, img, &BlurKind::Disc { radius: 1.5 });
        assert!(tape.val(out).data.iter().all(|&v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn noise_is_reproducible_and_zero_sigma_noop() {
        let mut tape = Tape::new();
        let img = random_image(&mut tape, 3, 6, 6, 31);
        let a = add_noise(&mut tape, img, 0.05, 99);
        let b = add_noise(&mut tape, img, 0.05, 99);
        assert_eq!(tape.val(a).data, tape.val(b).data);
        let c = add_noise(&mut tape, img, 0.0, 99);
        assert_eq!(c, img);
    }

    #[test]
    fn hue_zero_is_identity_and_gray_is_fixed() {
        let mut tape = Tape::new();
        let img = random_image(&mut tape, 3, 4, 4, 41);
        let zero = tape.scalar(0.0);
        let out = hue_rotate(&mut tape, img, zero);
        for (a, b) in tape.val(img).data.clone().iter().zip(&tape.val(out).data.clone()) {
            assert!((a - b).abs() < 1e-12);
        }
        let gray = tape.leaf(Tensor::full(vec![3, 2, 2], 0.37));
        let ang = tape.scalar(0.9);
        let out = hue_rotate(&mut tape, gray, ang);
        assert!(tape.val(out).data.iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn hue_120_degrees_permutes_channels() {
        let mut tape = Tape::new();
        let img = random_image(&mut tape, 3, 3, 3, 43);
        let ang = tape.scalar(std::f64::consts::TAU / 3.0);
        let out = hue_rotate(&mut tape, img, ang);
        let (iv, ov) = (tape.val(img).data.clone(), tape.val(out).data.clone());
        let hw = 9;
        for i in 0..hw {
            assert!((ov[i] - iv[2 * hw + i]).abs() < 1e-12); // out r = in b
            assert!((ov[hw + i] - iv[i]).abs() < 1e-12); // out g = in r
            assert!((ov[2 * hw + i] - iv[hw + i]).abs() < 1e-12); // out b = in g
        }
    }

    #[test]
    fn hue_gradient_wrt_angle() {
        let t = {
            let mut r = rng(44);
            Tensor::new(vec![3, 4, 4], (0..48).map(|_| r.gen_range(0.0..1.0)).collect())
        };
        let w = {
            let mut r = rng(45);
            Tensor::new(vec![3, 4, 4], (0..48).map(|_| r.gen_range(-1.0..1.0)).collect())
        };
        let eval = |a: f64| {
            let mut tape = Tape::new();
            let img = tape.leaf(t.clone());
            let ang = tape.scalar(a);
            let out = hue_rotate(&mut tape, img, ang);
            // weighted loss: a rotation-invariant loss would have zero gradient
            let wl = tape.leaf(w.clone());
            let prod = tape.mul(out, wl);
            let loss = tape.sum(prod);
            (tape.val(loss).data[0], tape.backward(loss).get_or_zeros(ang, 1)[0])
        };
        let (_, ad) = eval(0.3);
        let eps = 1e-6;
        let fd = (eval(0.3 + eps).0 - eval(0.3 - eps).0) / (2.0 * eps);
        assert!((fd - ad).abs() / fd.abs().max(1e-9) < 1e-7, "fd={fd} ad={ad}");
    }

    #[test]
    fn jpeg_high_quality_is_near_identity() {
        let mut tape = Tape::new();
        let img = smooth_image(&mut tape, 16, 16);
        let out = jpeg_approx(&mut tape, img, 95);
        let (iv, ov) = (tape.val(img).data.clone(), tape.val(out).data.clone());
        let err: f64 = iv.iter().zip(&ov).map(|(a, b)| (a - b).abs()).sum::<f64>() / iv.len() as f64;
        assert!(err < 0.02, "mean abs err {err}");
    }

    #[test]
    fn jpeg_error_grows_as_quality_drops() {
        let mut errs = Vec::new();
        for q in [90, 50, 10] {
            let mut tape = Tape::new();
            let img = smooth_image(&mut tape, 16, 16);
            let out = jpeg_approx(&mut tape, img, q);
            let (iv, ov) = (tape.val(img).data.clone(), tape.val(out).data.clone());
            let err: f64 =
                iv.iter().zip(&ov).map(|(a, b)| (a - b).abs()).sum::<f64>() / iv.len() as f64;
            errs.push(err);
        }
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "errs {errs:?}");
    }

    #[test]
    fn jpeg_handles_non_multiple_of_eight() {
        let mut tape = Tape::new();
        let img = smooth_image(&mut tape, 13, 21);
        let out = jpeg_approx(&mut tape, img, 80);
        assert_eq!(tape.val(out).shape, vec![3, 13, 21]);
        assert!(tape.val(out).data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn jpeg_gradient_matches_finite_differences() {
        let t = {
            let mut r = rng(55);
            Tensor::new(vec![3, 8, 8], (0..192).map(|_| r.gen_range(0.2..0.8)).collect())
        };
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let img = tape.leaf(t.clone());
            let out = jpeg_approx(&mut tape, img, 60);
            let sq = tape.square(out);
            let loss = tape.sum(sq);
            let g = tape.backward(loss).get_or_zeros(img, t.numel());
            (tape.val(loss).data[0], g)
        };
        let (_, g) = eval(&t);
        let eps = 1e-6;
        for i in [3usize, 60, 120, 185] {
            let mut tp = t.clone();
            tp.data[i] += eps;
            let fp = eval(&tp).0;
            tp.data[i] -= 2.0 * eps;
            let fm = eval(&tp).0;
            let fd = (fp - fm) / (2.0 * eps);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-3, "elem {i}: fd={fd} ad={}", g[i]);
        }
    }

    #[test]
    fn sampled_params_respect_config_ranges() {
        let cfg = AugmentConfig::default();
        cfg.validate().unwrap();
        let mut r = rng(66);
        for _ in 0..200 {
            let s = sample_photo(&cfg, &mut r);
            assert!(s.noise_sigma <= cfg.noise_sigma_max);
            assert!(s.brightness >= cfg.brightness_min && s.brightness <= cfg.brightness_max);
            assert!(s.gamma >= cfg.gamma_min && s.gamma <= cfg.gamma_max);
            assert!(s.hue.abs() <= cfg.hue_max);
            if let Some(q) = s.jpeg_quality {
                assert!(q >= cfg.jpeg_quality_min && q <= cfg.jpeg_quality_max);
            }
            match s.blur {
                BlurKind::Disc { radius } => assert!(radius <= cfg.blur_radius_max),
                BlurKind::Motion { len, .. } => assert!(len <= cfg.motion_len_max),
                BlurKind::None => {}
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let mut cfg = AugmentConfig::default();
        cfg.jpeg_quality_min = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.tps_grid = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentConfig::default();
        cfg.scale_min = 1.5;
        cfg.scale_max = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_pipeline_runs_and_backprops_to_input() {
        let cfg = AugmentConfig::default();
        let sample = sample_augment(&cfg, 32, 32, 7).unwrap();
        let mut tape = Tape::new();
        let img = random_image(&mut tape, 3, 32, 32, 70);
        let ann = Annotation {
            marker_id: 0,
            message: Message::new(vec![0; 4]),
            corners: [(10.0, 10.0), (22.0, 10.0), (22.0, 22.0), (10.0, 22.0)],
            grid: vec![(16.0, 16.0)],
            grid_side: 1,
        };
        let (out, kept, dropped) = apply_pipeline(&mut tape, img, &[ann], &sample);
        assert_eq!(tape.val(out).shape, vec![3, 32, 32]);
        assert!(tape.val(out).data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(kept.len() + dropped.len(), 1);
        let loss = tape.mean(out);
        let g = tape.backward(loss).get_or_zeros(img, 3 * 32 * 32);
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
