use pdisco_core::config::ExperimentConfig;
use pdisco_core::model::*;
use pdisco_core::synthgen::{generate, GlyphConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stats(name: &str, data: &[f64]) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("{name:22} mean {mean:10.5} sd {:10.5} min {lo:9.4} max {hi:9.4}", var.sqrt());
}

fn main() {
    let exp = ExperimentConfig::default();
    let cfg = exp.model_config(64, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = PartModel::init(cfg.clone(), &mut rng).unwrap();
    let samples = generate(0, 4, &GlyphConfig::default()).unwrap();
    for s in &samples[..2] {
        let mut g = pdisco_core::autodiff::Graph::new();
        let nodes = model.insert(&mut g);
        let img = g.constant(s.image.clone());
        let feats = backbone_features(&mut g, &nodes, &cfg, img).unwrap();
        stats("features", g.value(feats).data());
        let att = compute_attention(&mut g, feats, nodes.prototypes).unwrap();
        stats("attention", g.value(att).data());
        let v = pool_part_vectors(&mut g, feats, att, cfg.pooling_norm).unwrap();
        stats("part vectors", g.value(v).data());
        let (pp, sc, probs) = classify(
            &mut g,
            v,
            nodes.modulation,
            nodes.classifier,
            &[true; 4],
            true,
        )
        .unwrap();
        stats("per-part scores", g.value(pp).data());
        stats("scores", g.value(sc).data());
        stats("probs", g.value(probs).data());
    }
}
