//! Board-scene synthesis and differentiable marker compositing: markers are
//! warped onto a shaded planar board, lit by a diffuse-ratio rule plus a
//! bounded Cook-Torrance/GGX specular layer, all in linear light.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::Message;
use crate::geometry::{GeometryError, Homography};
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("geometry error: {0}")]
    Geometry(#[from] GeometryError),
    #[error("assignment must cover every slot: {slots} slots, {assigned} assignments")]
    AssignmentMismatch { slots: usize, assigned: usize },
    #[error("marker id {id} out of range ({count} markers)")]
    BadMarkerId { id: usize, count: usize },
}

/// A synthetic planar board in a scene, with per-pixel shading and normals
/// for the board region.
#[derive(Debug, Clone)]
pub struct BoardScene {
    pub width: usize,
    pub height: usize,
    /// Linear-light background with the shaded white board painted in, `[3,H,W]`.
    pub base: Tensor,
    /// Board corners in px (TL, TR, BR, BL).
    pub board_quad: [(f64, f64); 4],
    /// Unit board square -> px homography.
    pub board_h: Homography,
    /// Per-channel board reflectance.
    pub board_albedo: [f64; 3],
    /// Flat pixel indices of the board region (row-major).
    pub board_idx: Vec<usize>,
    /// Illumination shade per board pixel (aligned with `board_idx`).
    pub shade: Vec<f64>,
    /// Unit surface normal per board pixel.
    pub normals: Vec<[f64; 3]>,
    /// Unit vector from the surface toward the camera.
    pub view_dir: [f64; 3],
}

/// Marker slots in unit board coordinates `(x0, y0, x1, y1)`.
#[derive(Debug, Clone)]
pub struct LayoutConfig {
    pub slots: Vec<[f64; 4]>,
    pub preset_id: usize,
}

/// Layout presets: single large slot, 2x1, 2x2, 3x3.
pub fn layout_preset(id: usize) -> LayoutConfig {
    let slots = match id % 4 {
        0 => vec![[0.2, 0.2, 0.8, 0.8]],
        1 => vec![[0.06, 0.25, 0.48, 0.75], [0.52, 0.25, 0.94, 0.75]],
        2 => vec![
            [0.06, 0.06, 0.48, 0.48],
            [0.52, 0.06, 0.94, 0.48],
            [0.06, 0.52, 0.48, 0.94],
            [0.52, 0.52, 0.94, 0.94],
        ],
        _ => {
            let mut s = Vec::new();
            for j in 0..3 {
                for i in 0..3 {
                    let x0 = 0.04 + i as f64 * 0.32;
                    let y0 = 0.04 + j as f64 * 0.32;
                    s.push([x0, y0, x0 + 0.28, y0 + 0.28]);
                }
            }
            s
        }
    };
    LayoutConfig { slots, preset_id: id % 4 }
}

/// Specular lobe parameters.
#[derive(Debug, Clone)]
pub struct SpecularParams {
    pub roughness: f64,
    pub specular_albedo: f64,
    pub light_dir: [f64; 3],
    pub light_color: [f64; 3],
    pub intensity: f64,
}

/// Ground truth for one placed marker.
#[derive(Debug, Clone)]
pub struct Annotation {
    pub marker_id: usize,
    pub message: Message,
    /// TL, TR, BR, BL in px.
    pub corners: [(f64, f64); 4],
    /// Image of a uniform SxS lattice on the marker, row-major, px.
    pub grid: Vec<(f64, f64)>,
    pub grid_side: usize,
}

impl Annotation {
    /// Axis-aligned hull of the corners.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let xs = self.corners.iter().map(|c| c.0);
        let ys = self.corners.iter().map(|c| c.1);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

/// Rendered training image (tape node) plus ground truth.
pub struct RenderOutput {
    pub image: Var,
    pub annotations: Vec<Annotation>,
}

/// Value-level rendered sample.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Procedural board scene: gradient background, convex board quad with an
/// illumination ramp and slightly perturbed normals.
pub fn synth_board_scene(width: usize, height: usize, seed: u64) -> BoardScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = height * width;
    let mut base = vec![0.0; 3 * hw];
    // smooth two-corner gradient background
    let c0: [f64; 3] = [rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)];
    let c1: [f64; 3] = [rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)];
    let diag = rng.gen_bool(0.5);
    for y in 0..height {
        for x in 0..width {
            let t = if diag {
                (x + y) as f64 / (width + height - 2) as f64
            } else {
                x as f64 / (width - 1) as f64
            };
            for c in 0..3 {
                base[c * hw + y * width + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // board quad: central rectangle with jittered corners, kept convex by
    // limiting jitter to a fraction of the rectangle size
    let mx = width as f64 * rng.gen_range(0.05..0.12);
    let my = height as f64 * rng.gen_range(0.05..0.12);
    let rect = [
        (mx, my),
        (width as f64 - mx, my),
        (width as f64 - mx, height as f64 - my),
        (mx, height as f64 - my),
    ];
    let jx = width as f64 * 0.04;
    let jy = height as f64 * 0.04;
    let mut quad = [(0.0, 0.0); 4];
    for i in 0..4 {
        quad[i] = (
            rect[i].0 + rng.gen_range(-jx..jx),
            rect[i].1 + rng.gen_range(-jy..jy),
        );
    }
    let board_h = Homography::unit_square_to_quad(&quad).expect("jittered quad stays convex");
    let inv = board_h.inverse().expect("board homography invertible");

    let board_albedo = [0.95, 0.95, 0.95];
    // illumination ramp over the unit board
    let s0 = rng.gen_range(0.55..0.85);
    let gx = rng.gen_range(-0.35..0.35);
    let gy = rng.gen_range(-0.35..0.35);
    // smooth normal perturbation field, sigma ~= 2 degrees
    let sigma = 2.0f64.to_radians();
    let (ax, ay) = (rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5));
    let (px_, py_) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));

    let mut board_idx = Vec::new();
    let mut shade = Vec::new();
    let mut normals = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let (u, v) = inv.apply((x as f64 + 0.5, y as f64 + 0.5));
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                continue;
            }
            let s = (s0 + gx * (u - 0.5) + gy * (v - 0.5)).clamp(0.3, 1.0);
            board_idx.push(y * width + x);
            shade.push(s);
            let nx = sigma * (ax * u * std::f64::consts::TAU + px_).sin();
            let ny = sigma * (ay * v * std::f64::consts::TAU + py_).sin();
            normals.push(normalize3([nx, ny, 1.0]));
            for c in 0..3 {
                base[c * hw + y * width + x] = board_albedo[c] * s;
            }
        }
    }

    BoardScene {
        width,
        height,
        base: Tensor::new(vec![3, height, width], base),
        board_quad: quad,
        board_h,
        board_albedo,
        board_idx,
        shade,
        normals,
        view_dir: [0.0, 0.0, 1.0],
    }
}

/// Homography mapping the unit marker square into a slot (with margin) on a
/// board placed by `board_h`.
pub fn slot_homography(
    board_h: &Homography,
    slot: &[f64; 4],
    margin: f64,
) -> Result<Homography, GeometryError> {
    let w = slot[2] - slot[0];
    let h = slot[3] - slot[1];
    let x0 = slot[0] + margin * w;
    let y0 = slot[1] + margin * h;
    let x1 = slot[2] - margin * w;
    let y1 = slot[3] - margin * h;
    let rect = Homography([x1 - x0, 0.0, x0, 0.0, y1 - y0, y0, 0.0, 0.0, 1.0]);
    Ok(board_h.compose(&rect))
}

/// Warp each assigned marker into its slot, shade it by the diffuse
/// reflectance ratio against the board, and collect exact labels.
///
/// `markers[i]` are `[3,R,R]` tape nodes; `assignment[s]` picks the marker for
/// slot `s`; `messages[i]` is the message rendered into marker `i`.
#[allow(clippy::too_many_arguments)]
pub fn place_markers(
    tape: &mut Tape,
    scene: &BoardScene,
    layout: &LayoutConfig,
    markers: &[Var],
    assignment: &[usize],
    messages: &[Message],
    grid_side: usize,
    margin: f64,
) -> Result<RenderOutput, RenderError> {
    if assignment.len() != layout.slots.len() {
        return Err(RenderError::AssignmentMismatch {
            slots: layout.slots.len(),
            assigned: assignment.len(),
        });
    }
    for &id in assignment {
        if id >= markers.len() {
            return Err(RenderError::BadMarkerId { id, count: markers.len() });
        }
    }
    let (w, h) = (scene.width, scene.height);
    let hw = w * h;
    // shade lookup for board pixels
    let mut shade_of = vec![1.0f64; hw];
    for (i, &p) in scene.board_idx.iter().enumerate() {
        shade_of[p] = scene.shade[i];
    }

    let mut image = tape.leaf(scene.base.clone());
    let mut annotations = Vec::new();
    for (slot, &mid) in layout.slots.iter().zip(assignment) {
        let hm = slot_homography(&scene.board_h, slot, margin)?;
        let hm_inv = hm.inverse()?;
        let res = tape.val(markers[mid]).shape[1];
        let mut idx = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut lmp = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = hm_inv.apply((x as f64 + 0.5, y as f64 + 0.5));
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    continue;
                }
                idx.push(y * w + x);
                xs.push(u * (res - 1) as f64);
                ys.push(v * (res - 1) as f64);
                lmp.push(shade_of[y * w + x]);
            }
        }
        if !idx.is_empty() {
            let k = idx.len();
            let xs = tape.leaf(Tensor::from_vec(xs));
            let ys = tape.leaf(Tensor::from_vec(ys));
            let rho_t = tape.grid_sample(markers[mid], xs, ys);
            // L_mt = L_mp * rho_t / rho_p, with L_mp = rho_p * shade
            let mut lmp3 = Vec::with_capacity(3 * k);
            let mut rhop3 = Vec::with_capacity(3 * k);
            for c in 0..3 {
                for &s in &lmp {
                    lmp3.push(scene.board_albedo[c] * s);
                    rhop3.push(scene.board_albedo[c]);
                }
            }
            let lmp3 = tape.leaf(Tensor::new(vec![3, k], lmp3));
            let rhop3 = tape.leaf(Tensor::new(vec![3, k], rhop3));
            let shaded = shade_diffuse(tape, lmp3, rho_t, rhop3);
            image = tape.paste(image, Arc::new(idx), shaded);
        }

        let corners = [
            hm.apply((0.0, 0.0)),
            hm.apply((1.0, 0.0)),
            hm.apply((1.0, 1.0)),
            hm.apply((0.0, 1.0)),
        ];
        let mut grid = Vec::with_capacity(grid_side * grid_side);
        for j in 0..grid_side {
            for i in 0..grid_side {
                let u = i as f64 / (grid_side - 1) as f64;
                let v = j as f64 / (grid_side - 1) as f64;
                grid.push(hm.apply((u, v)));
            }
        }
        annotations.push(Annotation {
            marker_id: mid,
            message: messages[mid].clone(),
            corners,
            grid,
            grid_side,
        });
    }
    Ok(RenderOutput { image, annotations })
}

/// `L_mt = L_mp * rho_t / rho_p`, elementwise and differentiable in `rho_t`.
pub fn shade_diffuse(tape: &mut Tape, board_pixels: Var, rho_t: Var, rho_p: Var) -> Var {
    let ratio = tape.div(rho_t, rho_p);
    tape.mul(board_pixels, ratio)
}

/// Cook-Torrance specular term per pixel with GGX distribution, Schlick
/// Fresnel and Smith-GGX geometry, clamped to zero below the horizon.
///
/// Geometry (normals, light, view) is constant; `alpha` is a scalar tape node
/// so roughness stays differentiable. Returns the scalar layer `[K]`, already
/// multiplied by `n·l`.
pub fn ggx_layer(
    tape: &mut Tape,
    normals: &[[f64; 3]],
    view_dir: [f64; 3],
    light_dir: [f64; 3],
    specular_albedo: f64,
    alpha: Var,
) -> Var {
    let k = normals.len();
    let v = normalize3(view_dir);
    let l = normalize3(light_dir);
    let half = normalize3([v[0] + l[0], v[1] + l[1], v[2] + l[2]]);
    let mut nh = Vec::with_capacity(k);
    let mut nl = Vec::with_capacity(k);
    let mut nv = Vec::with_capacity(k);
    let mut mask = Vec::with_capacity(k);
    for n in normals {
        let cnl = dot3(n, &l);
        let cnv = dot3(n, &v);
        let visible = cnl > 0.0 && cnv > 0.0;
        mask.push(if visible { 1.0 } else { 0.0 });
        nl.push(cnl.max(1e-6));
        nv.push(cnv.max(1e-6));
        nh.push(dot3(n, &half).clamp(0.0, 1.0));
    }
    let lh = dot3(&l, &half).clamp(0.0, 1.0);
    let fresnel = specular_albedo + (1.0 - specular_albedo) * (1.0 - lh).powi(5);

    let nh = tape.leaf(Tensor::from_vec(nh));
    let nl_t = tape.leaf(Tensor::from_vec(nl.clone()));
    let nv_t = tape.leaf(Tensor::from_vec(nv.clone()));
    let a2 = tape.square(alpha);

    // D = a2 / (pi * (nh^2 (a2 - 1) + 1)^2)
    let nh2 = tape.square(nh);
    let a2m1 = tape.add_const(a2, -1.0);
    let t = tape.mul(nh2, a2m1);
    let t = tape.add_const(t, 1.0);
    let t2 = tape.square(t);
    let pit2 = tape.mul_const(t2, std::f64::consts::PI);
    let d = tape.div(a2, pit2);

    // Smith G1(x) = 2x / (x + sqrt(a2 + (1 - a2) x^2))
    let g1 = |tape: &mut Tape, nx: Var, a2: Var| {
        let nx2 = tape.square(nx);
        let one_m_a2 = tape.neg(a2);
        let one_m_a2 = tape.add_const(one_m_a2, 1.0);
        let inner = tape.mul(one_m_a2, nx2);
        let inner = tape.add(a2, inner);
        let root = tape.sqrt(inner);
        let denom = tape.add(nx, root);
        let num = tape.mul_const(nx, 2.0);
        tape.div(num, denom)
    };
    let gl = g1(tape, nl_t, a2);
    let gv = g1(tape, nv_t, a2);
    let g = tape.mul(gl, gv);

    // f_spec * n·l = D F G / (4 n·v)
    let dg = tape.mul(d, g);
    let dgf = tape.mul_const(dg, fresnel * 0.25);
    let out = tape.div(dgf, nv_t);
    let mask = tape.leaf(Tensor::from_vec(mask));
    tape.mul(out, mask)
}

/// Light direction and color from the brightest board pixel: the view vector
/// reflected about that pixel's normal, and the pixel color normalized to
/// unit max.
pub fn pick_light_from_brightest(scene: &BoardScene) -> ([f64; 3], [f64; 3]) {
    assert!(!scene.board_idx.is_empty(), "board region must be non-empty");
    let hw = scene.width * scene.height;
    let mut best = 0usize;
    let mut best_lum = f64::NEG_INFINITY;
    for (i, &p) in scene.board_idx.iter().enumerate() {
        let lum: f64 = (0..3).map(|c| scene.base.data[c * hw + p]).sum::<f64>() / 3.0;
        if lum > best_lum {
            best_lum = lum;
            best = i;
        }
    }
    let n = scene.normals[best];
    let v = scene.view_dir;
    let d = 2.0 * dot3(&n, &v);
    let light_dir = normalize3([d * n[0] - v[0], d * n[1] - v[1], d * n[2] - v[2]]);
    let p = scene.board_idx[best];
    let col = [0, 1, 2].map(|c| scene.base.data[c * hw + p]);
    let m = col.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
    (light_dir, [col[0] / m, col[1] / m, col[2] / m])
}

/// Largest `s >= 0` with `max(diffuse + s * highlight) = 1`; `+inf` when the
/// highlight is identically zero (callers must cap).
pub fn bound_specular_intensity(diffuse: &[f64], highlight: &[f64]) -> f64 {
    assert_eq!(diffuse.len(), highlight.len());
    let mut s = f64::INFINITY;
    for (&d, &h) in diffuse.iter().zip(highlight) {
        if h > 1e-12 {
            s = s.min(((1.0 - d) / h).max(0.0));
        }
    }
    s
}

/// Add the specular layer on the board region; intensity is bounded so the
/// composite barely saturates. Returns the new image node.
pub fn add_specular(
    tape: &mut Tape,
    scene: &BoardScene,
    image: Var,
    params: &SpecularParams,
) -> Var {
    let hw = scene.width * scene.height;
    let alpha = tape.leaf(Tensor::scalar(params.roughness));
    let layer = ggx_layer(
        tape,
        &scene.normals,
        scene.view_dir,
        params.light_dir,
        params.specular_albedo,
        alpha,
    );
    // bound intensity against the current composite
    let k = scene.board_idx.len();
    let img_vals = tape.val(image);
    let layer_vals = tape.val(layer).data.clone();
    let mut bound = f64::INFINITY;
    for c in 0..3 {
        let diffuse: Vec<f64> = scene.board_idx.iter().map(|&p| img_vals.data[c * hw + p]).collect();
        let shaped: Vec<f64> = layer_vals.iter().map(|&v| v * params.light_color[c]).collect();
        bound = bound.min(bound_specular_intensity(&diffuse, &shaped));
    }
    let intensity = params.intensity.min(if bound.is_finite() { bound } else { params.intensity });
    let iv = tape.leaf(Tensor::scalar(intensity));
    let scaled = tape.mul(layer, iv);
    let chans: Vec<Var> = (0..3).map(|c| tape.mul_const(scaled, params.light_color[c])).collect();
    let add = tape.concat0(&chans);
    let add = tape.reshape(add, vec![3, k]);
    tape.paste_add(image, Arc::new(scene.board_idx.clone()), add)
}

/// Gamma encoding `x^(1/2.2)` clamped to `[0,1]`, as a tape op.
pub fn gamma_encode_tape(tape: &mut Tape, image: Var) -> Var {
    // backward floored at 0.01: the curve's slope diverges at black, and
    // saturated-dark marker cells otherwise swamp the global gradient norm
    let g = tape.powf_const_floored(image, 1.0 / 2.2, 0.01);
    tape.clamp01(g)
}

/// Gamma encode a plain value.
pub fn gamma_encode(x: f64) -> f64 {
    x.max(0.0).powf(1.0 / 2.2).clamp(0.0, 1.0)
}

/// Inverse of [`gamma_encode`] on `[0,1]`.
pub fn gamma_decode(x: f64) -> f64 {
    x.max(0.0).powf(2.2)
}
