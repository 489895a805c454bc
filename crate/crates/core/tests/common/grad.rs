//! Finite-difference checks of every training loss and of the adapter and
//! branch-weight gradients, on small f64 problems.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use sketchfeat::aggregator::{Aggregator, AggregatorConfig, FusedFeatureMap};
use sketchfeat::backbone::{Backbone, ImageBatch, MockBackbone, MockConfig, PromptTokens};
use sketchfeat::heads::correspondence::flow_targets;
use sketchfeat::heads::{
    ce_loss, correlation_mask_logits, epe_loss, flow_at_cells, patch_contrastive_loss, seg_train_loss, triplet_loss,
    CorrespondenceAnnotation, Keypoint, LinearClassifier, SegMask,
};
use sketchfeat::injection::{AdapterInit, AdapterStack, InjectionMode};
use sketchfeat::params::ParamStore;

use super::{max_fd_error, random_var, rng, sample_coords, FD_STEP};

const CELLS: usize = 3600;

pub fn triplet() -> f64 {
    let mut r = rng(1);
    let (s, p, n) = (random_var(&mut r, &[3, 6], 1.0), random_var(&mut r, &[3, 6], 1.0), random_var(&mut r, &[3, 6], 1.0));
    // A margin above the largest possible distance gap keeps every hinge active.
    let f = || triplet_loss(s.as_tensor(), p.as_tensor(), n.as_tensor(), 2.5);
    max_fd_error(&[("anchor", &s, None), ("positive", &p, None), ("negative", &n, None)], &f, FD_STEP)
}

pub fn cross_entropy() -> f64 {
    let mut r = rng(2);
    let mut params = ParamStore::new(3, DType::F64, &Device::Cpu);
    let cls = LinearClassifier::new(&mut params, 5, 4).unwrap();
    let x = random_var(&mut r, &[3, 5], 1.0);
    let f = || ce_loss(&cls.forward(x.as_tensor())?, &[0, 3, 1]);
    let w = params.get("head.cls.weight").unwrap().clone();
    let b = params.get("head.cls.bias").unwrap().clone();
    max_fd_error(&[("pooled", &x, None), ("weight", &w, None), ("bias", &b, None)], &f, FD_STEP)
}

fn annotation(pairs: &[((f64, f64), (f64, f64))]) -> CorrespondenceAnnotation {
    CorrespondenceAnnotation {
        sketch_id: "s".into(),
        photo_id: "p".into(),
        pairs: pairs.iter().map(|&((a, b), (c, d))| (Keypoint::new(a, b), Keypoint::new(c, d))).collect(),
    }
}

fn toy_annotation() -> CorrespondenceAnnotation {
    annotation(&[
        ((12.0, 20.0), (30.0, 22.0)),
        ((200.0, 100.0), (210.0, 140.0)),
        ((400.0, 380.0), (350.0, 390.0)),
        ((90.0, 300.0), (100.0, 260.0)),
    ])
}

/// Coordinates at the annotated cells of every channel, plus random ones.
fn map_coords(r: &mut rand_chacha::ChaCha8Rng, d: usize, cells: &[usize], extra: usize) -> Vec<usize> {
    let mut c: Vec<usize> = (0..d).flat_map(|ch| cells.iter().map(move |cell| ch * CELLS + cell)).collect();
    c.extend(sample_coords(r, d * CELLS, extra));
    c.sort_unstable();
    c.dedup();
    c
}

pub fn contrastive() -> f64 {
    let mut r = rng(3);
    let d = 4;
    let (fs, fp) = (random_var(&mut r, &[1, d, 60, 60], 1.0), random_var(&mut r, &[1, d, 60, 60], 1.0));
    let log_tau = Var::from_tensor(&Tensor::new(0.1f64.ln(), &Device::Cpu).unwrap()).unwrap();
    let ann = toy_annotation();
    let size = 480;
    let s_cells: Vec<usize> = ann.sketch_points().iter().map(|k| sketchfeat::heads::keypoint_cell(*k, size)).collect();
    let p_cells: Vec<usize> = ann.photo_points().iter().map(|k| sketchfeat::heads::keypoint_cell(*k, size)).collect();
    let f = || {
        patch_contrastive_loss(
            &FusedFeatureMap::new(fs.as_tensor().clone())?,
            &FusedFeatureMap::new(fp.as_tensor().clone())?,
            &ann,
            size,
            &log_tau.as_tensor().exp()?,
        )
    };
    max_fd_error(
        &[
            ("sketch map", &fs, Some(map_coords(&mut r, d, &s_cells, 8))),
            ("photo map", &fp, Some(map_coords(&mut r, d, &p_cells, 8))),
            ("log tau", &log_tau, None),
        ],
        &f,
        FD_STEP,
    )
}

pub fn end_point_error() -> f64 {
    let mut r = rng(4);
    let d = 4;
    let (fs, fp) = (random_var(&mut r, &[1, d, 60, 60], 1.0), random_var(&mut r, &[1, d, 60, 60], 1.0));
    let ann = toy_annotation();
    let (cells, gt) = flow_targets(&ann, 480, DType::F64, &Device::Cpu).unwrap();
    let mut worst = 0f64;
    for squared in [true, false] {
        let f = || {
            let est = flow_at_cells(
                &FusedFeatureMap::new(fs.as_tensor().clone())?,
                &FusedFeatureMap::new(fp.as_tensor().clone())?,
                &cells,
                0.05,
            )?;
            epe_loss(&est, &gt, squared)
        };
        worst = worst.max(max_fd_error(
            &[
                ("sketch map", &fs, Some(map_coords(&mut r, d, &cells, 8))),
                ("photo map", &fp, Some(sample_coords(&mut r, d * CELLS, 40))),
            ],
            &f,
            FD_STEP,
        ));
    }
    worst
}

pub fn segmentation() -> f64 {
    let mut r = rng(5);
    let d = 4;
    let fs = random_var(&mut r, &[2, d], 1.0);
    let fp = random_var(&mut r, &[2, d, 60, 60], 1.0);
    let size = 32;
    let masks: Vec<SegMask> = (0..2)
        .map(|_| SegMask::new(size, size, (0..size * size).map(|_| r.random_range(0..2u8)).collect()).unwrap())
        .collect();
    let f = || {
        let logits = correlation_mask_logits(fs.as_tensor(), &FusedFeatureMap::new(fp.as_tensor().clone())?, (size, size))?;
        seg_train_loss(&logits, &masks, 50.0, 0.47)
    };
    // The steep sigmoid has large higher derivatives; a smaller step keeps
    // the central-difference truncation error below the tolerance.
    max_fd_error(
        &[("pooled sketch", &fs, None), ("photo map", &fp, Some(sample_coords(&mut r, 2 * d * CELLS, 40)))],
        &f,
        1e-5,
    )
}

/// Gradients reaching the adapters (through the frozen mock UNet) and the
/// branch weights (through the aggregator).
pub fn adapters_and_alpha() -> f64 {
    let dev = Device::Cpu;
    let mut r = rng(6);
    let bb = MockBackbone::new(MockConfig::tiny(7), DType::F64, &dev).unwrap();
    let mut params = ParamStore::new(8, DType::F64, &dev);
    let adapters = AdapterStack::new(&mut params, bb.patch_dim(), bb.tap_channels(), InjectionMode::Learned, true, AdapterInit::Scaled).unwrap();
    let taps = bb.tap_channels();
    let agg = Aggregator::new(
        &mut params,
        [taps[0], taps[1], taps[2]],
        AggregatorConfig {
            d_agg: 4,
            ..AggregatorConfig::default()
        },
    )
    .unwrap();
    let v: Vec<f64> = (0..3 * 64 * 64).map(|_| r.random_range(0.0..1.0)).collect();
    let images = ImageBatch::new(Tensor::from_vec(v, (1, 3, 64, 64), &dev).unwrap()).unwrap();
    let z = bb.encode_latent(&images).unwrap();
    let f_v = bb.extract_patch_features(&images).unwrap();
    let probe = Tensor::randn(0f64, 1.0, (1, 4, 60, 60), &dev).unwrap();
    let f = || {
        let mut hook = adapters.hook(&f_v);
        let feats = bb.extract_unet_features(&z, 195, &PromptTokens::null(), Some(&mut *hook))?;
        Ok((agg.forward(&feats)?.tensor() * &probe)?.sum_all()?)
    };
    let mut vars = Vec::new();
    for name in params.names() {
        if name.starts_with("adapter.") || name == "agg.alpha" {
            let var = params.get(&name).unwrap().clone();
            let coords = sample_coords(&mut r, var.elem_count(), 6);
            vars.push((name, var, coords));
        }
    }
    assert_eq!(vars.len(), 9, "four adapters with bias plus the branch weights");
    let listed: Vec<(&str, &Var, Option<Vec<usize>>)> = vars.iter().map(|(n, v, c)| (n.as_str(), v, Some(c.clone()))).collect();
    // The aggregator's ReLUs are kinked at zero and thousands of
    // pre-activations sit near it; a short step avoids crossing them.
    max_fd_error(&listed, &f, 1e-6)
}

pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("triplet", triplet()),
        ("cross-entropy", cross_entropy()),
        ("patch contrastive", contrastive()),
        ("end-point error", end_point_error()),
        ("segmentation bce", segmentation()),
        ("adapters and alpha", adapters_and_alpha()),
    ]
}
