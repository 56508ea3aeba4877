//! Scratch diagnostic (deleted before release): how separable are the
//! mean-pooled tokens / latents at init?

use pillgrade_core::autograd::Graph;
use pillgrade_core::gpt::{prepare_sample, FusionMode, GptConfig, GptModel};
use pillgrade_core::synth::{mix_seed, pilling_sphere};

fn config() -> GptConfig {
    GptConfig {
        n_tokens: 32,
        group_size: 16,
        d_model: 64,
        n_heads: 4,
        extractor_depth: 2,
        generator_depth: 1,
        ffn_dim: 256,
        embed_hidden: 64,
        head_hidden: 64,
        num_classes: 3,
        extra_mask_ratio: 0.0,
        gamma: 0.0,
        lambda: 3.0,
        fusion_mode: FusionMode::None,
        ..GptConfig::default()
    }
}

#[test]
#[ignore]
fn probe_token_separability() {
    let cfg = config();
    let model = GptModel::init(cfg.clone(), 1).unwrap();
    let bump_counts = [32usize, 8, 0];

    let mut feats: Vec<(u8, Vec<f64>, Vec<f64>)> = Vec::new();
    for (gi, &bumps) in bump_counts.iter().enumerate() {
        for i in 0..25 {
            let cloud = pilling_sphere(512, bumps, mix_seed(99, gi as u64, i));
            let sample = prepare_sample(&cloud, &cfg).unwrap();
            let mask = model.causal_mask();
            let mut g = Graph::new();
            let latent = model.latent_graph(&mut g, &sample, &mask).unwrap();
            let pooled_latent = g.mean_rows(latent).unwrap();
            let latent_vec = g.value(pooled_latent).data().to_vec();

            let mut g2 = Graph::new();
            let tokens =
                pillgrade_core::embed::pointnet_embed_graph(&mut g2, &model.params, &sample.patches)
                    .unwrap();
            let pooled_tokens = g2.mean_rows(tokens).unwrap();
            let token_vec = g2.value(pooled_tokens).data().to_vec();

            feats.push(((gi + 1) as u8, token_vec, latent_vec));
        }
    }

    let knn_acc = |select: &dyn Fn(&(u8, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> f64 {
        let mut correct = 0;
        for i in 0..feats.len() {
            let vi = select(&feats[i]);
            let mut best = (f64::INFINITY, 0u8);
            for (j, fj) in feats.iter().enumerate() {
                if i == j {
                    continue;
                }
                let vj = select(fj);
                let d: f64 = vi.iter().zip(vj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, fj.0);
                }
            }
            if best.1 == feats[i].0 {
                correct += 1;
            }
        }
        correct as f64 / feats.len() as f64
    };

    println!("1-NN on mean-pooled TOKENS at init: {}", knn_acc(&|f| &f.1));
    println!("1-NN on mean-pooled LATENT at init: {}", knn_acc(&|f| &f.2));
}
