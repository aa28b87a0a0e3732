use tagforge_core::codec::{sample_messages, Dictionary};
use tagforge_core::config::preset_desk;
use tagforge_core::derive_seed;
use tagforge_core::eval::{
    ap_at_iou, corner_rmse, decoding_accuracy, fp_rate, EvalDetection, EvalGroundTruth,
    SizeBucket,
};
use tagforge_core::training::{synthesize_sample, Trainer};

fn eval_model(tr: &Trainer, dict: &Dictionary, n_scenes: usize, seed_base: u64) {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..n_scenes {
        let s = synthesize_sample(
            &tr.generator,
            &tr.store,
            &tr.cfg.scene,
            Some(&tr.cfg.aug),
            tr.cfg.det.grid_side,
            dict.entries(),
            derive_seed(seed_base, i as u64),
        )
        .unwrap();
        for ann in &s.annotations {
            gts.push(EvalGroundTruth {
                image_id: i,
                marker_id: ann.marker_id,
                bbox: ann.bbox(),
                corners: ann.corners,
                bits: ann.message.bits().to_vec(),
            });
        }
        for d in tr.detector.detect(&tr.store, &s.image, dict, 0.8) {
            dets.push(EvalDetection {
                image_id: i,
                bbox: d.bbox,
                corners: d.corners,
                score: d.objectness,
                bits: d.soft_bits.iter().map(|&b| u8::from(b >= 0.5)).collect(),
                matched_id: d.matched_id,
                confidence: d.confidence,
            });
        }
    }
    println!(
        "EVAL decode {:.4} ap50 {:.4} rmse {:.3} fp {:.4} ({} gts, {} dets)",
        decoding_accuracy(&gts, &dets),
        ap_at_iou(&gts, &dets, 0.5, SizeBucket::All),
        corner_rmse(&gts, &dets),
        fp_rate(&gts, &dets),
        gts.len(),
        dets.len()
    );
}

// corner error and bit accuracy when the RoI head sees the ground-truth box
fn oracle_probe(tr: &Trainer, dict: &Dictionary, n_scenes: usize, seed_base: u64) {
    use tagforge_core::params::Binder;
    use tagforge_core::Tape;
    let (mut ok, mut tot) = (0usize, 0usize);
    let (mut se, mut nc) = (0.0f64, 0usize);
    let (mut gse, mut gn) = (0.0f64, 0usize);
    for i in 0..n_scenes {
        let s = synthesize_sample(
            &tr.generator,
            &tr.store,
            &tr.cfg.scene,
            Some(&tr.cfg.aug),
            tr.cfg.det.grid_side,
            dict.entries(),
            derive_seed(seed_base, i as u64),
        )
        .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&tr.store);
        let img = tape.leaf(s.image.clone());
        let backbone = tr.detector.backbone(&mut tape, &mut binder, img);
        for ann in &s.annotations {
            let out = tr.detector.roi_forward(&mut tape, &mut binder, &backbone, &ann.bbox());
            let logits = tape.val(out.bit_logits).data.clone();
            for (l, &b) in logits.iter().zip(ann.message.bits()) {
                ok += usize::from((*l >= 0.0) == (b == 1));
                tot += 1;
            }
            let cp = tape.val(out.corners_px).data.clone();
            for (k, &(gx, gy)) in ann.corners.iter().enumerate() {
                se += (cp[2 * k] - gx).powi(2) + (cp[2 * k + 1] - gy).powi(2);
            }
            nc += 8;
            // the grid head's outer lattice points are the same corners
            let gp = tape.val(out.grid_px).data.clone();
            let s_side = tr.cfg.det.grid_side;
            // annotation corners are clockwise TL,TR,BR,BL; lattice is row-major
            let idx = [0, s_side - 1, s_side * s_side - 1, s_side * (s_side - 1)];
            for (k, &(gx, gy)) in ann.corners.iter().enumerate() {
                let j = idx[k];
                gse += (gp[2 * j] - gx).powi(2) + (gp[2 * j + 1] - gy).powi(2);
                gn += 2;
            }
        }
    }
    println!(
        "ORACLE-BOX bits {:.4} corner rmse {:.3}px grid-corner rmse {:.3}px",
        ok as f64 / tot as f64,
        (se / nc as f64).sqrt(),
        (gse / gn as f64).sqrt()
    );
}

#[test]
#[ignore]
fn diag_variants() {
    let rc = preset_desk();
    let mut tr = Trainer::new(rc.to_pipeline().unwrap());
    let ckpt = std::path::Path::new("/tmp/desk_diag.ckpt");
    if ckpt.exists() {
        tr.load_checkpoint(ckpt).unwrap();
        println!("loaded checkpoint at step {}", tr.step);
    }
    let dict = Dictionary::new(sample_messages(16, 8, 424242).unwrap()).unwrap();
    let mut t0 = std::time::Instant::now();
    let mut acc = (0.0, 0.0, 0.0);
    let mut n = 0.0;
    while tr.step < 2000 {
        let r = tr.train_step().unwrap();
        acc.0 += r.decode;
        acc.1 += r.objectness;
        acc.2 += r.rpn_class;
        n += 1.0;
        if r.step % 100 == 99 {
            println!(
                "step {:4} decode {:.4} obj {:.4} rpn_cls {:.4} fg {} ({:.2} s/step)",
                r.step,
                acc.0 / n,
                acc.1 / n,
                acc.2 / n,
                r.fg_rois,
                t0.elapsed().as_secs_f64() / (n.max(1.0))
            );
            acc = (0.0, 0.0, 0.0);
            n = 0.0;
            t0 = std::time::Instant::now();
        }
        if r.step % 400 == 399 {
            tr.save_checkpoint(ckpt, &rc.echo()).unwrap();
            eval_model(&tr, &dict, 8, 555_000);
        }
    }
    tr.save_checkpoint(ckpt, &rc.echo()).unwrap();
    eval_model(&tr, &dict, 24, 777_000);
    oracle_probe(&tr, &dict, 24, 777_000);
}
