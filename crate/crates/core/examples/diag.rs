use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom::channel::ChannelRealization;
use semcom::fem::{FemConfig, FemParams};
use semcom::model::{Model, ModelConfig};
use semcom::nn::{Activation, ParamBinder};
use semcom::tasks::{build_corpus, TaskId, Vocabulary};
use semcom::training::{sample_forward, MaskMode};
use std::collections::HashMap;

fn main() {
    let vocab = Vocabulary::standard();
    for seed in [62u64, 63, 64] {
        let cfg = ModelConfig {
            layers: 1, dim: 16, heads: 2, experts: 2, top_k: 1,
            vocab: vocab.len(), max_seq: 48, ffn_hidden: 24,
            activation: Activation::Gelu, tied_embeddings: true,
        };
        let mut model = Model::new(cfg, seed).unwrap();
        let mut fem = FemParams::new(16, FemConfig { extractors: 2, feature_hidden: 8, snr_hidden: 4, ..FemConfig::default() }, seed + 100);
        for (n, p) in fem.named_params_mut() {
            if n.contains("extractor") && n.ends_with(".b") { p.values[0] = 12.0; }
        }
        let corpus = build_corpus(&vocab, seed, 2, 2);
        let sample = corpus.train[&TaskId::Polarity][0].clone();
        let realization = ChannelRealization::noiseless();
        let loss_value = |model: &Model, fem: &FemParams| -> f64 {
            let binder = ParamBinder::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            sample_forward(model, fem, &sample, 20.0, &realization, &mut rng, MaskMode::Fem, &binder).unwrap().ce.value() as f64
        };
        let binder = ParamBinder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loss = sample_forward(&model, &fem, &sample, 20.0, &realization, &mut rng, MaskMode::Fem, &binder).unwrap();
        loss.ce.backward();
        println!("seed {seed}: loss {}", loss.ce.value());
        let mut analytic: HashMap<String, Vec<f32>> = HashMap::new();
        for (name, p) in model.named_params().iter().chain(fem.named_params().iter()) {
            if let Some(g) = binder.grad_of(p) { analytic.insert(name.clone(), g); }
        }
        let mut coord_rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
        let step = 5e-3f32;
        let mut entries: Vec<(f32, f32, f32, f32, String)> = Vec::new();
        let names: Vec<String> = analytic.keys().cloned().collect();
        for name in names {
            let grads = analytic[&name].clone();
            let len = grads.len();
            for _ in 0..12.min(len) {
                let i = coord_rng.gen_range(0..len);
                let mutate = |model: &mut Model, fem: &mut FemParams, delta: f32| {
                    for (n, p) in model.named_params_mut().into_iter().chain(fem.named_params_mut()) {
                        if n == name { p.values[i] += delta; return; }
                    }
                };
                mutate(&mut model, &mut fem, step);
                let up = loss_value(&model, &fem);
                mutate(&mut model, &mut fem, -2.0 * step);
                let down = loss_value(&model, &fem);
                mutate(&mut model, &mut fem, step);
                let n1 = ((up - down) / (2.0 * step as f64)) as f32;
                // half step
                mutate(&mut model, &mut fem, step / 2.0);
                let up2 = loss_value(&model, &fem);
                mutate(&mut model, &mut fem, -step);
                let down2 = loss_value(&model, &fem);
                mutate(&mut model, &mut fem, step / 2.0);
                let n2 = ((up2 - down2) / (step as f64)) as f32;
                let rel = (grads[i] - n1).abs() / (grads[i].abs() + 1e-3);
                entries.push((rel, grads[i], n1, n2, format!("{name}[{i}]")));
            }
        }
        entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for e in &entries[..6] {
            println!("  rel {:.3e} analytic {:+.4e} fd(h) {:+.4e} fd(h/2) {:+.4e} {}", e.0, e.1, e.2, e.3, e.4);
        }
    }
}
