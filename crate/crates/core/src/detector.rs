//! Two-stage marker detector: a small stride-4 stem feeds a three-level
//! feature pyramid (strides 8/16/32); a single-anchor RPN proposes boxes;
//! RoI-aligned features drive a corner head (learned affine sampling windows
//! over the stem) and a decoding head (learned resampling lattice over the
//! pooled features) plus a per-RoI objectness score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::Dictionary;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tape::{Pad, Tape, Tensor, Var};

/// Axis-aligned box `(x0, y0, x1, y1)` in image px.
pub type BoxF = (f64, f64, f64, f64);

pub fn box_area(b: &BoxF) -> f64 {
    (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0)
}

pub fn box_iou(a: &BoxF, b: &BoxF) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 { 0.0 } else { inter / union }
}

/// Greedy NMS: indices of kept boxes in descending score order.
pub fn nms(boxes: &[BoxF], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep = Vec::new();
    let mut dead = vec![false; boxes.len()];
    for &i in &order {
        if dead[i] {
            continue;
        }
        keep.push(i);
        for &j in &order {
            if !dead[j] && j != i && box_iou(&boxes[i], &boxes[j]) > iou_thresh {
                dead[j] = true;
            }
        }
    }
    keep
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub n_bits: usize,
    /// Decoding lattice side S.
    pub grid_side: usize,
    pub c_stem: usize,
    pub c_fpn: usize,
    /// RoI-align output side (sampled at 2x2 subsamples per bin).
    pub roi_size: usize,
    pub common_dim: usize,
    pub corner_fc: (usize, usize),
    pub corner_conv_channels: usize,
    pub decode_hidden: (usize, usize),
    pub train_proposals: usize,
    pub test_proposals: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub rpn_nms_iou: f64,
    pub fg_iou: f64,
    pub leaky_slope: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            n_bits: 36,
            grid_side: 9,
            c_stem: 64,
            c_fpn: 128,
            roi_size: 12,
            common_dim: 256,
            corner_fc: (128, 64),
            corner_conv_channels: 32,
            decode_hidden: (512, 256),
            train_proposals: 256,
            test_proposals: 64,
            score_thresh: 0.5,
            nms_iou: 0.5,
            rpn_nms_iou: 0.7,
            fg_iou: 0.5,
            leaky_slope: 0.2,
        }
    }
}

pub const PYRAMID_STRIDES: [usize; 3] = [8, 16, 32];

/// Square anchor side at each pyramid level.
pub fn anchor_side(stride: usize) -> f64 {
    4.0 * stride as f64
}

/// Anchor box centered on feature cell `(fx, fy)` of a level.
pub fn anchor_box(stride: usize, fx: usize, fy: usize) -> BoxF {
    let s = stride as f64;
    let side = anchor_side(stride);
    let cx = (fx as f64 + 0.5) * s;
    let cy = (fy as f64 + 0.5) * s;
    (cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0)
}

/// Standard box-delta encoding of `gt` against `anchor`.
pub fn encode_deltas(anchor: &BoxF, gt: &BoxF) -> [f64; 4] {
    let (aw, ah) = (anchor.2 - anchor.0, anchor.3 - anchor.1);
    let (acx, acy) = ((anchor.0 + anchor.2) / 2.0, (anchor.1 + anchor.3) / 2.0);
    let (gw, gh) = ((gt.2 - gt.0).max(1e-6), (gt.3 - gt.1).max(1e-6));
    let (gcx, gcy) = ((gt.0 + gt.2) / 2.0, (gt.1 + gt.3) / 2.0);
    [(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

/// Inverse of [`encode_deltas`].
pub fn decode_deltas(anchor: &BoxF, d: &[f64; 4]) -> BoxF {
    let (aw, ah) = (anchor.2 - anchor.0, anchor.3 - anchor.1);
    let (acx, acy) = ((anchor.0 + anchor.2) / 2.0, (anchor.1 + anchor.3) / 2.0);
    let cx = acx + d[0] * aw;
    let cy = acy + d[1] * ah;
    let w = aw * d[2].clamp(-6.0, 6.0).exp();
    let h = ah * d[3].clamp(-6.0, 6.0).exp();
    (cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Pyramid level for a box, by scale.
pub fn assign_level(b: &BoxF) -> usize {
    let s = box_area(b).sqrt();
    if s < 64.0 {
        0
    } else if s < 128.0 {
        1
    } else {
        2
    }
}

struct ConvP {
    w: ParamId,
    b: ParamId,
}

struct FcP {
    w: ParamId,
    b: ParamId,
}

pub struct Detector {
    pub cfg: DetectorConfig,
    stem1: ConvP,
    stem2: ConvP,
    down: [ConvP; 3],
    lateral: [ConvP; 3],
    rpn_conv: ConvP,
    rpn_cls: ConvP,
    rpn_box: ConvP,
    fc_common: FcP,
    obj: FcP,
    corner_fc1: FcP,
    corner_affine: FcP,
    corner_conv: ConvP,
    corner_fc2: FcP,
    corner_fc3: FcP,
    corner_out: FcP,
    resample: FcP,
    decode_fc1: FcP,
    decode_fc2: FcP,
    decode_out: FcP,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // He init: keeps activation/gradient scale roughly constant per layer
        let mut conv = |store: &mut ParamStore, name: &str, o: usize, c: usize, k: usize| ConvP {
            w: store.register_normal(
                &format!("det.{name}.w"),
                vec![o, c, k, k],
                (2.0 / (c * k * k) as f64).sqrt(),
                &mut rng,
            ),
            b: store.register_zeros(&format!("det.{name}.b"), vec![o]),
        };
        let stem1 = conv(store, "stem1", cfg.c_stem, 3, 3);
        let stem2 = conv(store, "stem2", cfg.c_stem, cfg.c_stem, 3);
        let down = [
            conv(store, "down3", cfg.c_fpn, cfg.c_stem, 3),
            conv(store, "down4", cfg.c_fpn, cfg.c_fpn, 3),
            conv(store, "down5", cfg.c_fpn, cfg.c_fpn, 3),
        ];
        let lateral = [
            conv(store, "lat3", cfg.c_fpn, cfg.c_fpn, 1),
            conv(store, "lat4", cfg.c_fpn, cfg.c_fpn, 1),
            conv(store, "lat5", cfg.c_fpn, cfg.c_fpn, 1),
        ];
        let rpn_conv = conv(store, "rpn.conv", cfg.c_fpn, cfg.c_fpn, 3);
        let rpn_cls = conv(store, "rpn.cls", 1, cfg.c_fpn, 1);
        let rpn_box = conv(store, "rpn.box", 4, cfg.c_fpn, 1);
        let corner_conv = conv(store, "corner.conv", cfg.corner_conv_channels, cfg.c_stem, 3);

        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut fc = |store: &mut ParamStore, name: &str, i: usize, o: usize| FcP {
            w: store.register_normal(
                &format!("det.{name}.w"),
                vec![i, o],
                (2.0 / i as f64).sqrt(),
                &mut rng2,
            ),
            b: store.register_zeros(&format!("det.{name}.b"), vec![o]),
        };
        let pooled = cfg.c_fpn * cfg.roi_size * cfg.roi_size;
        let fc_common = fc(store, "fc_common", pooled, cfg.common_dim);
        let obj = fc(store, "obj", cfg.common_dim, 1);
        let corner_fc1 = fc(store, "corner.fc1", cfg.common_dim, cfg.corner_fc.0);
        // affine head: zero weights, biases set to quarter-RoI windows around
        // the quadrant centers so the initial corner estimates are sensible
        let corner_affine = FcP {
            w: store.register("det.corner.affine.w", Tensor::zeros(vec![cfg.corner_fc.0, 24])),
            b: store.register("det.corner.affine.b", Tensor::from_vec(Self::affine_init())),
        };
        let ccc = cfg.corner_conv_channels;
        let corner_fc2 = fc(store, "corner.fc2", ccc * 6 * 6, cfg.corner_fc.0);
        let corner_fc3 = fc(store, "corner.fc3", cfg.corner_fc.0, cfg.corner_fc.1);
        let corner_out = fc(store, "corner.out", cfg.corner_fc.1, 2);
        // resampling head: zero weights, bias = uniform lattice over the RoI
        let s = cfg.grid_side;
        let mut lattice = Vec::with_capacity(s * s * 2);
        for j in 0..s {
            for i in 0..s {
                lattice.push(i as f64 / (s - 1) as f64);
                lattice.push(j as f64 / (s - 1) as f64);
            }
        }
        let resample = FcP {
            w: store.register("det.resample.w", Tensor::zeros(vec![cfg.common_dim, s * s * 2])),
            b: store.register("det.resample.b", Tensor::from_vec(lattice)),
        };
        let decode_fc1 = fc(store, "decode.fc1", cfg.c_fpn * s * s, cfg.decode_hidden.0);
        let decode_fc2 = fc(store, "decode.fc2", cfg.decode_hidden.0, cfg.decode_hidden.1);
        let decode_out = fc(store, "decode.out", cfg.decode_hidden.1, cfg.n_bits);

        Detector {
            cfg,
            stem1,
            stem2,
            down,
            lateral,
            rpn_conv,
            rpn_cls,
            rpn_box,
            fc_common,
            obj,
            corner_fc1,
            corner_affine,
            corner_conv,
            corner_fc2,
            corner_fc3,
            corner_out,
            resample,
            decode_fc1,
            decode_fc2,
            decode_out,
        }
    }

    /// Initial affine windows in RoI coords `[-1,1]^2`: half scale, centered
    /// on the quadrant centers, TL/TR/BR/BL order.
    fn affine_init() -> Vec<f64> {
        let centers = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
        let mut v = Vec::with_capacity(24);
        for (cx, cy) in centers {
            v.extend_from_slice(&[0.5, 0.0, cx, 0.0, 0.5, cy]);
        }
        v
    }
}

/// Backbone features: stride-4 stem and the stride 8/16/32 pyramid.
pub struct Backbone {
    pub stem: Var,
    pub pyramid: [Var; 3],
    /// Padded input size (multiple of 32); coordinates are unchanged.
    pub padded: (usize, usize),
}

/// Per-level raw RPN maps.
pub struct RpnLevel {
    pub cls: Var,
    pub boxes: Var,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

/// Per-RoI head outputs. Point nodes are in RoI-normalized coordinates;
/// `*_px` carries the same points mapped to image px.
pub struct RoiOutput {
    pub roi: BoxF,
    /// Corner positions `[8]` (x,y per corner, TL/TR/BR/BL) in `[-1,1]` RoI coords.
    pub corners: Var,
    pub corners_px: Var,
    /// Resampling lattice `[S*S*2]` in `[0,1]` RoI coords.
    pub grid: Var,
    pub grid_px: Var,
    pub bit_logits: Var,
    pub objectness: Var,
}

/// One final detection after postprocessing.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BoxF,
    pub corners: [(f64, f64); 4],
    pub grid: Vec<(f64, f64)>,
    pub objectness: f64,
    pub soft_bits: Vec<f64>,
    pub confidence: f64,
    pub matched_id: Option<usize>,
}

/// Reflect-pad `[C,H,W]` on the bottom/right to multiples of `m`.
fn pad_to_multiple(tape: &mut Tape, img: Var, m: usize) -> (Var, usize, usize) {
    let shape = tape.val(img).shape.clone();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return (img, h, w);
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * n - 2 - i };
    let mut idx = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for y in 0..hp {
            for x in 0..wp {
                idx.push(ch * h * w + reflect(y, h) * w + reflect(x, w));
            }
        }
    }
    let flat = tape.gather(img, &idx);
    (tape.reshape(flat, vec![c, hp, wp]), hp, wp)
}

impl Detector {
    pub fn backbone(&self, tape: &mut Tape, binder: &mut Binder, img: Var) -> Backbone {
        let sl = self.cfg.leaky_slope;
        let (x, hp, wp) = pad_to_multiple(tape, img, 32);
        let cv = |tape: &mut Tape, binder: &mut Binder, x: Var, p: &ConvP, stride, pad| {
            let w = binder.var(tape, p.w);
            let b = binder.var(tape, p.b);
            tape.conv2d(x, w, b, stride, pad)
        };
        let x = cv(tape, binder, x, &self.stem1, 2, Pad::Zero(1));
        let x = tape.leaky_relu(x, sl);
        let stem = cv(tape, binder, x, &self.stem2, 2, Pad::Zero(1));
        let stem = tape.leaky_relu(stem, sl);

        let c3 = cv(tape, binder, stem, &self.down[0], 2, Pad::Zero(1));
        let c3 = tape.leaky_relu(c3, sl);
        let c4 = cv(tape, binder, c3, &self.down[1], 2, Pad::Zero(1));
        let c4 = tape.leaky_relu(c4, sl);
        let c5 = cv(tape, binder, c4, &self.down[2], 2, Pad::Zero(1));
        let c5 = tape.leaky_relu(c5, sl);

        let p5 = cv(tape, binder, c5, &self.lateral[2], 1, Pad::Valid);
        let l4 = cv(tape, binder, c4, &self.lateral[1], 1, Pad::Valid);
        let up5 = tape.upsample2x(p5);
        let p4 = tape.add(l4, up5);
        let l3 = cv(tape, binder, c3, &self.lateral[0], 1, Pad::Valid);
        let up4 = tape.upsample2x(p4);
        let p3 = tape.add(l3, up4);

        Backbone { stem, pyramid: [p3, p4, p5], padded: (hp, wp) }
    }

    pub fn rpn_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        backbone: &Backbone,
    ) -> Vec<RpnLevel> {
        let sl = self.cfg.leaky_slope;
        let mut out = Vec::with_capacity(3);
        for (li, &p) in backbone.pyramid.iter().enumerate() {
            let w = binder.var(tape, self.rpn_conv.w);
            let b = binder.var(tape, self.rpn_conv.b);
            let x = tape.conv2d(p, w, b, 1, Pad::Zero(1));
            let x = tape.leaky_relu(x, sl);
            let cw = binder.var(tape, self.rpn_cls.w);
            let cb = binder.var(tape, self.rpn_cls.b);
            let cls = tape.conv2d(x, cw, cb, 1, Pad::Valid);
            let bw = binder.var(tape, self.rpn_box.w);
            let bb = binder.var(tape, self.rpn_box.b);
            let boxes = tape.conv2d(x, bw, bb, 1, Pad::Valid);
            let shape = tape.val(cls).shape.clone();
            out.push(RpnLevel {
                cls,
                boxes,
                stride: PYRAMID_STRIDES[li],
                h: shape[1],
                w: shape[2],
            });
        }
        out
    }

    /// Decode proposals from the RPN maps (values only, no gradient through
    /// the boxes), NMS them, keep the top `k` by score.
    pub fn proposals(
        &self,
        tape: &Tape,
        rpn: &[RpnLevel],
        image_size: (usize, usize),
        k: usize,
    ) -> Vec<(BoxF, f64)> {
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for level in rpn {
            let cls = tape.val(level.cls);
            let bx = tape.val(level.boxes);
            let (h, w) = (level.h, level.w);
            for fy in 0..h {
                for fx in 0..w {
                    let score = cls.data[fy * w + fx];
                    let d = [
                        bx.data[fy * w + fx],
                        bx.data[h * w + fy * w + fx],
                        bx.data[2 * h * w + fy * w + fx],
                        bx.data[3 * h * w + fy * w + fx],
                    ];
                    let anchor = anchor_box(level.stride, fx, fy);
                    let b = decode_deltas(&anchor, &d);
                    let b = (
                        b.0.clamp(0.0, image_size.0 as f64),
                        b.1.clamp(0.0, image_size.1 as f64),
                        b.2.clamp(0.0, image_size.0 as f64),
                        b.3.clamp(0.0, image_size.1 as f64),
                    );
                    if b.2 - b.0 < 2.0 || b.3 - b.1 < 2.0 {
                        continue;
                    }
                    boxes.push(b);
                    scores.push(score);
                }
            }
        }
        let keep = nms(&boxes, &scores, self.cfg.rpn_nms_iou);
        keep.into_iter().take(k).map(|i| (boxes[i], scores[i])).collect()
    }

    /// RoI align: 2x2 subsamples per bin, average pooled to `roi_size^2`.
    pub fn roi_align(&self, tape: &mut Tape, level: Var, stride: usize, roi: &BoxF) -> Var {
        let c = tape.val(level).shape[0];
        let n = self.cfg.roi_size * 2;
        let (w, h) = (roi.2 - roi.0, roi.3 - roi.1);
        let mut xs = Vec::with_capacity(n * n);
        let mut ys = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let u = roi.0 + (i as f64 + 0.5) / n as f64 * w;
                let v = roi.1 + (j as f64 + 0.5) / n as f64 * h;
                xs.push(u / stride as f64 - 0.5);
                ys.push(v / stride as f64 - 0.5);
            }
        }
        let xs = tape.leaf(Tensor::from_vec(xs));
        let ys = tape.leaf(Tensor::from_vec(ys));
        let s = tape.grid_sample(level, xs, ys);
        let s = tape.reshape(s, vec![c, n, n]);
        tape.avg_pool2x2(s)
    }

    /// Run the RoI heads on one proposal box.
    pub fn roi_forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        backbone: &Backbone,
        roi: &BoxF,
    ) -> RoiOutput {
        let sl = self.cfg.leaky_slope;
        let level = assign_level(roi);
        let pooled = self.roi_align(tape, backbone.pyramid[level], PYRAMID_STRIDES[level], roi);
        let flat = {
            let n: usize = tape.val(pooled).numel();
            tape.reshape(pooled, vec![n])
        };
        let fc = |tape: &mut Tape, binder: &mut Binder, x: Var, p: &FcP| {
            let w = binder.var(tape, p.w);
            let b = binder.var(tape, p.b);
            tape.linear(x, w, b)
        };
        let common = fc(tape, binder, flat, &self.fc_common);
        let common = tape.leaky_relu(common, sl);
        let objectness = fc(tape, binder, common, &self.obj);

        // corner branch: predict 4 affine windows over the RoI, sample 8x8
        // stem patches through them, regress one corner per patch
        let cf = fc(tape, binder, common, &self.corner_fc1);
        let cf = tape.leaky_relu(cf, sl);
        let affines = fc(tape, binder, cf, &self.corner_affine);
        let (cx, cy) = ((roi.0 + roi.2) / 2.0, (roi.1 + roi.3) / 2.0);
        let (hw, hh) = ((roi.2 - roi.0) / 2.0, (roi.3 - roi.1) / 2.0);
        let mut corner_vars = Vec::with_capacity(4);
        for k in 0..4 {
            let a = tape.slice_flat(affines, k * 6, 6);
            // patch coords: p = A (g, 1) for the canonical 8x8 grid in [-1,1]^2
            let mut mx = Vec::with_capacity(64 * 6);
            let mut my = Vec::with_capacity(64 * 6);
            for j in 0..8 {
                for i in 0..8 {
                    let gx = -1.0 + 2.0 * (i as f64 + 0.5) / 8.0;
                    let gy = -1.0 + 2.0 * (j as f64 + 0.5) / 8.0;
                    mx.extend_from_slice(&[gx, gy, 1.0, 0.0, 0.0, 0.0]);
                    my.extend_from_slice(&[0.0, 0.0, 0.0, gx, gy, 1.0]);
                }
            }
            let px = tape.matvec_const(std::sync::Arc::new(mx), 64, 6, a);
            let py = tape.matvec_const(std::sync::Arc::new(my), 64, 6, a);
            // RoI-normalized -> stem feature coords (stride 4)
            let ix = tape.mul_const(px, hw);
            let ix = tape.add_const(ix, cx);
            let ix = tape.mul_const(ix, 0.25);
            let ix = tape.add_const(ix, -0.5);
            let iy = tape.mul_const(py, hh);
            let iy = tape.add_const(iy, cy);
            let iy = tape.mul_const(iy, 0.25);
            let iy = tape.add_const(iy, -0.5);
            let patch = tape.grid_sample(backbone.stem, ix, iy);
            let patch = tape.reshape(patch, vec![self.cfg.c_stem, 8, 8]);
            let ww = binder.var(tape, self.corner_conv.w);
            let wb = binder.var(tape, self.corner_conv.b);
            let feat = tape.conv2d(patch, ww, wb, 1, Pad::Valid);
            let feat = tape.leaky_relu(feat, sl);
            let n = tape.val(feat).numel();
            let feat = tape.reshape(feat, vec![n]);
            let f = fc(tape, binder, feat, &self.corner_fc2);
            let f = tape.leaky_relu(f, sl);
            let f = fc(tape, binder, f, &self.corner_fc3);
            let f = tape.leaky_relu(f, sl);
            let o = fc(tape, binder, f, &self.corner_out);
            // corner (window coords) -> RoI coords through the same affine
            let ox = tape.slice_flat(o, 0, 1);
            let oy = tape.slice_flat(o, 1, 1);
            let a0 = tape.slice_flat(a, 0, 1);
            let a1 = tape.slice_flat(a, 1, 1);
            let a2 = tape.slice_flat(a, 2, 1);
            let a3 = tape.slice_flat(a, 3, 1);
            let a4 = tape.slice_flat(a, 4, 1);
            let a5 = tape.slice_flat(a, 5, 1);
            let t0 = tape.mul(a0, ox);
            let t1 = tape.mul(a1, oy);
            let t01 = tape.add(t0, t1);
            let corner_x = tape.add(t01, a2);
            let t3 = tape.mul(a3, ox);
            let t4 = tape.mul(a4, oy);
            let t34 = tape.add(t3, t4);
            let corner_y = tape.add(t34, a5);
            corner_vars.push(corner_x);
            corner_vars.push(corner_y);
        }
        let corners = tape.concat0(&corner_vars);
        let corners = tape.reshape(corners, vec![8]);
        let corners_px = {
            // interleaved x,y: scale/offset via a constant affine per element
            let scale: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { hw } else { hh }).collect();
            let off: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { cx } else { cy }).collect();
            let sc = tape.leaf(Tensor::from_vec(scale));
            let of = tape.leaf(Tensor::from_vec(off));
            let m = tape.mul(corners, sc);
            tape.add(m, of)
        };

        // decoding branch: predicted lattice over the RoI, resample the
        // pooled features there, decode bits
        let grid = fc(tape, binder, common, &self.resample);
        let s2 = self.cfg.grid_side * self.cfg.grid_side;
        let even: Vec<usize> = (0..s2).map(|i| 2 * i).collect();
        let odd: Vec<usize> = (0..s2).map(|i| 2 * i + 1).collect();
        let gx = tape.gather(grid, &even);
        let gy = tape.gather(grid, &odd);
        // [0,1] RoI coords -> pooled feature coords
        let r = self.cfg.roi_size as f64;
        let fx = tape.mul_const(gx, r);
        let fx = tape.add_const(fx, -0.5);
        let fy = tape.mul_const(gy, r);
        let fy = tape.add_const(fy, -0.5);
        let pooled3 = tape.reshape(flat, vec![self.cfg.c_fpn, self.cfg.roi_size, self.cfg.roi_size]);
        let sampled = tape.grid_sample(pooled3, fx, fy);
        let n = tape.val(sampled).numel();
        let sampled = tape.reshape(sampled, vec![n]);
        let d = fc(tape, binder, sampled, &self.decode_fc1);
        let d = tape.leaky_relu(d, sl);
        let d = fc(tape, binder, d, &self.decode_fc2);
        let d = tape.leaky_relu(d, sl);
        let bit_logits = fc(tape, binder, d, &self.decode_out);

        let grid_px = {
            let scale: Vec<f64> =
                (0..s2 * 2).map(|i| if i % 2 == 0 { 2.0 * hw } else { 2.0 * hh }).collect();
            let off: Vec<f64> = (0..s2 * 2).map(|i| if i % 2 == 0 { roi.0 } else { roi.1 }).collect();
            let sc = tape.leaf(Tensor::from_vec(scale));
            let of = tape.leaf(Tensor::from_vec(off));
            let m = tape.mul(grid, sc);
            tape.add(m, of)
        };

        RoiOutput {
            roi: *roi,
            corners,
            corners_px,
            grid,
            grid_px,
            bit_logits,
            objectness,
        }
    }

    /// Full inference: RPN proposals, RoI heads, objectness filter, NMS,
    /// dictionary identification.
    pub fn detect(
        &self,
        store: &ParamStore,
        image: &Tensor,
        dict: &Dictionary,
        accept_threshold: f64,
    ) -> Vec<Detection> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let img = tape.leaf(image.clone());
        let (h, w) = (image.shape[1], image.shape[2]);
        let backbone = self.backbone(&mut tape, &mut binder, img);
        let rpn = self.rpn_forward(&mut tape, &mut binder, &backbone);
        let props = self.proposals(&tape, &rpn, (w, h), self.cfg.test_proposals);

        let mut cands = Vec::new();
        for (roi, _) in &props {
            let first = self.roi_forward(&mut tape, &mut binder, &backbone, roi);
            let obj = sigmoid(tape.val(first.objectness).data[0]);
            if obj < self.cfg.score_thresh {
                continue;
            }
            // refinement passes: re-pool on the corner-tightened box so the
            // heads see features aligned the way they were trained (RoIs
            // snug around the marker)
            let mut out = first;
            for _ in 0..2 {
                let cp = tape.val(out.corners_px).data.clone();
                let tight = corner_bbox(&cp);
                if !valid_box(&tight, w as f64, h as f64) {
                    break;
                }
                out = self.roi_forward(&mut tape, &mut binder, &backbone, &tight);
            }
            let cp = tape.val(out.corners_px).data.clone();
            let corners = [(cp[0], cp[1]), (cp[2], cp[3]), (cp[4], cp[5]), (cp[6], cp[7])];
            let bbox = corner_bbox(&cp);
            let gp = tape.val(out.grid_px).data.clone();
            let grid: Vec<(f64, f64)> = gp.chunks(2).map(|c| (c[0], c[1])).collect();
            let soft_bits: Vec<f64> =
                tape.val(out.bit_logits).data.iter().map(|&l| sigmoid(l)).collect();
            let ident = dict
                .identify(&soft_bits, accept_threshold)
                .expect("dictionary bit length matches detector");
            cands.push(Detection {
                bbox,
                corners,
                grid,
                objectness: obj,
                soft_bits,
                confidence: ident.confidence,
                matched_id: ident.matched_id,
            });
        }
        let boxes: Vec<BoxF> = cands.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = cands.iter().map(|d| d.objectness).collect();
        let keep = nms(&boxes, &scores, self.cfg.nms_iou);
        keep.into_iter().map(|i| cands[i].clone()).collect()
    }
}

/// Axis-aligned bounding box of 4 corner points packed `[x0,y0,...,x3,y3]`.
fn corner_bbox(cp: &[f64]) -> BoxF {
    let xs = [cp[0], cp[2], cp[4], cp[6]];
    let ys = [cp[1], cp[3], cp[5], cp[7]];
    (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    )
}

fn valid_box(b: &BoxF, w: f64, h: f64) -> bool {
    b.0.is_finite()
        && b.1.is_finite()
        && b.2.is_finite()
        && b.3.is_finite()
        && b.2 - b.0 >= 4.0
        && b.3 - b.1 >= 4.0
        && b.0 > -0.25 * w
        && b.1 > -0.25 * h
        && b.2 < 1.25 * w
        && b.3 < 1.25 * h
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Match proposals to ground-truth boxes: foreground iff best IoU >= fg_iou;
/// returns per-proposal `Option<gt index>`.
pub fn match_proposals(proposals: &[BoxF], gts: &[BoxF], fg_iou: f64) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|p| {
            let mut best = None;
            let mut best_iou = fg_iou;
            for (gi, gt) in gts.iter().enumerate() {
                let iou = box_iou(p, gt);
                if iou >= best_iou {
                    best_iou = iou;
                    best = Some(gi);
                }
            }
            best
        })
        .collect()
}

/// RPN anchor labels for one level: `Some(true)` fg, `Some(false)` bg,
/// `None` ignore. One anchor per cell; the best anchor of every gt is always
/// foreground.
pub fn rpn_anchor_labels(
    level: &RpnLevel,
    gts: &[BoxF],
    fg_iou: f64,
    bg_iou: f64,
) -> Vec<Option<bool>> {
    let (h, w) = (level.h, level.w);
    let mut labels: Vec<Option<bool>> = vec![None; h * w];
    let mut best_for_gt: Vec<(usize, f64)> = vec![(0, 0.0); gts.len()];
    for fy in 0..h {
        for fx in 0..w {
            let a = anchor_box(level.stride, fx, fy);
            let mut best = 0.0f64;
            for (gi, gt) in gts.iter().enumerate() {
                let iou = box_iou(&a, gt);
                if iou > best {
                    best = iou;
                }
                if iou > best_for_gt[gi].1 {
                    best_for_gt[gi] = (fy * w + fx, iou);
                }
            }
            labels[fy * w + fx] = if best >= fg_iou {
                Some(true)
            } else if best < bg_iou {
                Some(false)
            } else {
                None
            };
        }
    }
    for &(idx, iou) in &best_for_gt {
        if iou > 0.1 {
            labels[idx] = Some(true);
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            n_bits: 8,
            grid_side: 3,
            c_stem: 4,
            c_fpn: 6,
            roi_size: 4,
            common_dim: 16,
            corner_fc: (8, 8),
            corner_conv_channels: 4,
            decode_hidden: (16, 12),
            train_proposals: 8,
            test_proposals: 4,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn iou_oracle_cases() {
        let a = (0.0, 0.0, 10.0, 10.0);
        assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = (5.0, 0.0, 15.0, 10.0);
        assert!((box_iou(&a, &b) - 50.0 / 150.0).abs() < 1e-12);
        let c = (20.0, 20.0, 30.0, 30.0);
        assert_eq!(box_iou(&a, &c), 0.0);
    }

    #[test]
    fn nms_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 20;
            let boxes: Vec<BoxF> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..80.0);
                    let y = rng.gen_range(0.0..80.0);
                    let w = rng.gen_range(5.0..25.0);
                    let h = rng.gen_range(5.0..25.0);
                    (x, y, x + w, y + h)
                })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let keep = nms(&boxes, &scores, 0.5);
            // brute force: walk in score order, keep a box iff it does not
            // overlap a previously kept box above the threshold
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            let mut expect = Vec::new();
            for &i in &order {
                if expect.iter().all(|&j: &usize| box_iou(&boxes[i], &boxes[j]) <= 0.5) {
                    expect.push(i);
                }
            }
            assert_eq!(keep, expect);
        }
    }

    #[test]
    fn delta_encode_decode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let anchor = anchor_box(8, rng.gen_range(0..16), rng.gen_range(0..16));
            let x = rng.gen_range(0.0..100.0);
            let y = rng.gen_range(0.0..100.0);
            let gt = (x, y, x + rng.gen_range(4.0..60.0), y + rng.gen_range(4.0..60.0));
            let d = encode_deltas(&anchor, &gt);
            let back = decode_deltas(&anchor, &d);
            assert!((back.0 - gt.0).abs() < 1e-9);
            assert!((back.3 - gt.3).abs() < 1e-9);
        }
    }

    #[test]
    fn level_assignment_by_scale() {
        assert_eq!(assign_level(&(0.0, 0.0, 30.0, 30.0)), 0);
        assert_eq!(assign_level(&(0.0, 0.0, 100.0, 100.0)), 1);
        assert_eq!(assign_level(&(0.0, 0.0, 200.0, 200.0)), 2);
    }

    #[test]
    fn backbone_shapes_default_config() {
        // full-size audit: stride-4 stem, pyramid at strides 8/16/32
        let cfg = DetectorConfig::default();
        let mut store = ParamStore::new();
        let det = Detector::new(cfg, &mut store, 1);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let img = tape.leaf(Tensor::zeros(vec![3, 256, 256]));
        let bb = det.backbone(&mut tape, &mut binder, img);
        assert_eq!(tape.val(bb.stem).shape, vec![64, 64, 64]);
        assert_eq!(tape.val(bb.pyramid[0]).shape, vec![128, 32, 32]);
        assert_eq!(tape.val(bb.pyramid[1]).shape, vec![128, 16, 16]);
        assert_eq!(tape.val(bb.pyramid[2]).shape, vec![128, 8, 8]);
    }

    #[test]
    fn backbone_pads_indivisible_sizes() {
        let mut store = ParamStore::new();
        let det = Detector::new(tiny_cfg(), &mut store, 1);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let img = tape.leaf(Tensor::zeros(vec![3, 100, 70]));
        let bb = det.backbone(&mut tape, &mut binder, img);
        assert_eq!(bb.padded, (128, 96));
        assert_eq!(tape.val(bb.pyramid[0]).shape, vec![6, 16, 12]);
    }

    #[test]
    fn roi_head_shapes_and_types() {
        let cfg = tiny_cfg();
        let s2 = cfg.grid_side * cfg.grid_side;
        let nb = cfg.n_bits;
        let mut store = ParamStore::new();
        let det = Detector::new(cfg, &mut store, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let img = tape.leaf(Tensor::zeros(vec![3, 64, 64]));
        let bb = det.backbone(&mut tape, &mut binder, img);
        let out = det.roi_forward(&mut tape, &mut binder, &bb, &(10.0, 12.0, 40.0, 44.0));
        assert_eq!(tape.val(out.corners).shape, vec![8]);
        assert_eq!(tape.val(out.grid).numel(), s2 * 2);
        assert_eq!(tape.val(out.bit_logits).numel(), nb);
        assert_eq!(tape.val(out.objectness).numel(), 1);
    }

    #[test]
    fn corner_head_initializes_at_quadrant_centers() {
        // fresh weights: affine head weights are zero, so the predicted
        // corners sit wherever the FC chain's zero-input bias path puts them;
        // with zero biases everywhere, output o = 0 and corner = window center
        let mut store = ParamStore::new();
        let det = Detector::new(tiny_cfg(), &mut store, 3);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let img = tape.leaf(Tensor::zeros(vec![3, 64, 64]));
        let bb = det.backbone(&mut tape, &mut binder, img);
        let roi = (16.0, 16.0, 48.0, 48.0);
        let out = det.roi_forward(&mut tape, &mut binder, &bb, &roi);
        let c = tape.val(out.corners_px).data.clone();
        // quadrant centers of the RoI: center +- quarter extent
        let expect = [24.0, 24.0, 40.0, 24.0, 40.0, 40.0, 24.0, 40.0];
        for (got, want) in c.iter().zip(&expect) {
            assert!((got - want).abs() < 1.0, "corners {c:?} vs {expect:?}");
        }
    }

    #[test]
    fn decode_lattice_initializes_uniform() {
        let cfg = tiny_cfg();
        let s = cfg.grid_side;
        let mut store = ParamStore::new();
        let det = Detector::new(cfg, &mut store, 4);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let img = tape.leaf(Tensor::zeros(vec![3, 64, 64]));
        let bb = det.backbone(&mut tape, &mut binder, img);
        let roi = (0.0, 0.0, 32.0, 32.0);
        let out = det.roi_forward(&mut tape, &mut binder, &bb, &roi);
        let g = tape.val(out.grid_px).data.clone();
        for j in 0..s {
            for i in 0..s {
                let k = (j * s + i) * 2;
                let ex = i as f64 / (s - 1) as f64 * 32.0;
                let ey = j as f64 / (s - 1) as f64 * 32.0;
                assert!((g[k] - ex).abs() < 1.0 && (g[k + 1] - ey).abs() < 1.0);
            }
        }
    }

    #[test]
    fn roi_align_constant_feature_map() {
        let mut store = ParamStore::new();
        let det = Detector::new(tiny_cfg(), &mut store, 5);
        let mut tape = Tape::new();
        let level = tape.leaf(Tensor::full(vec![2, 8, 8], 0.7));
        let out = det.roi_align(&mut tape, level, 8, &(8.0, 8.0, 40.0, 40.0));
        assert_eq!(tape.val(out).shape, vec![2, 4, 4]);
        assert!(tape.val(out).data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let mut store = ParamStore::new();
        let det = Detector::new(tiny_cfg(), &mut store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // the affine/resample heads start at exactly zero weight, which
        // blocks gradient into their input layers until training moves them;
        // jitter them so the connectivity check covers every path
        for name in ["det.corner.affine.w", "det.resample.w"] {
            let id = store.by_name(name).unwrap();
            for v in &mut store.tensor_mut(id).data {
                *v = rng.gen_range(-0.02..0.02);
            }
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = tape.leaf(Tensor::new(vec![3, 64, 64], data));
        let bb = det.backbone(&mut tape, &mut binder, img);
        let rpn = det.rpn_forward(&mut tape, &mut binder, &bb);
        let out = det.roi_forward(&mut tape, &mut binder, &bb, &(10.0, 10.0, 44.0, 46.0));
        let mut terms = Vec::new();
        for l in &rpn {
            terms.push(tape.sum(l.cls));
            terms.push(tape.sum(l.boxes));
        }
        terms.push(tape.sum(out.corners));
        terms.push(tape.sum(out.grid));
        terms.push(tape.sum(out.bit_logits));
        terms.push(tape.sum(out.objectness));
        let all = tape.concat0(&terms);
        let loss = tape.sum(all);
        let grads = tape.backward(loss);
        for (id, var) in binder.bound() {
            let g = grads.get(var);
            assert!(
                g.map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false),
                "no gradient for {}",
                store.name(id)
            );
        }
        // every registered parameter was bound by the pass
        assert_eq!(binder.bound().len(), store.len());
    }

    #[test]
    fn proposals_respect_k_and_bounds() {
        let mut store = ParamStore::new();
        let det = Detector::new(tiny_cfg(), &mut store, 8);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = tape.leaf(Tensor::new(vec![3, 64, 64], data));
        let bb = det.backbone(&mut tape, &mut binder, img);
        let rpn = det.rpn_forward(&mut tape, &mut binder, &bb);
        let props = det.proposals(&tape, &rpn, (64, 64), 4);
        assert!(props.len() <= 4);
        for (b, _) in &props {
            assert!(b.0 >= 0.0 && b.1 >= 0.0 && b.2 <= 64.0 && b.3 <= 64.0);
            assert!(b.2 > b.0 && b.3 > b.1);
        }
        // scores are descending
        for w in props.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn proposal_matching_rule() {
        let gts = vec![(10.0, 10.0, 30.0, 30.0), (50.0, 50.0, 70.0, 70.0)];
        let props = vec![
            (11.0, 9.0, 31.0, 29.0),  // high IoU with gt 0
            (48.0, 52.0, 72.0, 68.0), // high IoU with gt 1
            (0.0, 0.0, 8.0, 8.0),     // background
        ];
        let m = match_proposals(&props, &gts, 0.5);
        assert_eq!(m, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn rpn_labels_cover_every_gt() {
        let level = RpnLevel {
            cls: Var(0),
            boxes: Var(0),
            stride: 8,
            h: 8,
            w: 8,
        };
        // small gt that no anchor reaches 0.5 IoU with still gets one fg anchor
        let gts = vec![(20.0, 20.0, 34.0, 34.0)];
        let labels = rpn_anchor_labels(&level, &gts, 0.5, 0.3);
        assert!(labels.iter().any(|&l| l == Some(true)));
        assert!(labels.iter().any(|&l| l == Some(false)));
    }

    #[test]
    fn detect_runs_end_to_end_untrained() {
        let cfg = tiny_cfg();
        let nb = cfg.n_bits;
        let mut store = ParamStore::new();
        let det = Detector::new(cfg, &mut store, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Tensor::new(vec![3, 64, 64], data);
        let msgs = crate::codec::sample_messages(4, nb, 1).unwrap();
        let dict = Dictionary::new(msgs).unwrap();
        let dets = det.detect(&store, &img, &dict, 0.8);
        for d in &dets {
            assert_eq!(d.soft_bits.len(), nb);
            assert!(d.objectness >= 0.5);
        }
    }
}
