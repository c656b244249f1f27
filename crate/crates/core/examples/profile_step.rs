use std::time::Instant;

use pdisco_core::autodiff::Graph;
use pdisco_core::config::ExperimentConfig;
use pdisco_core::losses::*;
use pdisco_core::model::*;
use pdisco_core::synthgen::{generate, GlyphConfig};
use pdisco_core::transforms::{sample_transform, warp, TransformRanges};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let exp = ExperimentConfig::default();
    let cfg = exp.model_config(64, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = PartModel::init(cfg.clone(), &mut rng).unwrap();
    let samples = generate(0, 16, &GlyphConfig::default()).unwrap();
    let ranges = TransformRanges::default();

    // Warm up.
    for _ in 0..2 {
        let (_, _) = eval_forward(&model, &samples[0].image).unwrap();
    }

    let t0 = Instant::now();
    let mut g = Graph::new();
    let nodes = model.insert(&mut g);
    let mut class_acc = None;
    let mut attentions = Vec::new();
    for s in &samples {
        let out = forward(
            &mut g,
            &nodes,
            &cfg,
            &s.image,
            Mode::Train { dropout_rate: 0.3, rng: &mut rng },
        )
        .unwrap();
        attentions.push(out.attention);
        let cls = classification_loss(&mut g, out.scores, s.class).unwrap();
        class_acc = Some(match class_acc {
            Some(a) => g.add(a, cls).unwrap(),
            None => cls,
        });
    }
    let t_fwd = t0.elapsed();

    let t1 = Instant::now();
    let mut warped_atts = Vec::new();
    for s in &samples {
        let t = sample_transform(&mut rng, &ranges).unwrap();
        let wimg = warp(&s.image, &t).unwrap();
        let img = g.constant(wimg);
        let feats = backbone_features(&mut g, &nodes, &cfg, img).unwrap();
        let att = compute_attention(&mut g, feats, nodes.prototypes).unwrap();
        let back = g.warp(att, &t.invert()).unwrap();
        warped_atts.push(back);
    }
    let t_warp_fwd = t1.elapsed();

    let t2 = Instant::now();
    let mut loss_acc = class_acc.unwrap();
    for (i, &att) in attentions.iter().enumerate() {
        let c = concentration_loss(&mut g, att).unwrap();
        let e = equivariance_loss(&mut g, att, warped_atts[i]).unwrap();
        let s = g.add(c, e).unwrap();
        loss_acc = g.add(loss_acc, s).unwrap();
    }
    let p = presence_loss(&mut g, &attentions).unwrap();
    loss_acc = g.add(loss_acc, p).unwrap();
    let total = g.scale(loss_acc, 1.0 / 16.0).unwrap();
    let t_losses = t2.elapsed();

    let t3 = Instant::now();
    g.backward(total).unwrap();
    let t_bwd = t3.elapsed();

    println!("nodes: {}", g.len());
    println!("forward x16:        {:?}", t_fwd);
    println!("warped forward x16: {:?}", t_warp_fwd);
    println!("losses:             {:?}", t_losses);
    println!("backward:           {:?}", t_bwd);
}
