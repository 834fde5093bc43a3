use uovn_core::config::ModelConfig;
use uovn_core::encoders::TextEncoder;
use uovn_core::synth::{generate_sample, is_connected, DomainSpec, MIN_REGION_PIXELS};
use uovn_core::ParamStore;

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn regions_are_connected_and_boxes_inside_the_image() {
    for spec in DomainSpec::stock() {
        for seed in 0..40 {
            let s = generate_sample(&spec, seed).unwrap();
            for r in &s.regions {
                if let Some(m) = &r.mask {
                    assert!(m.iter().filter(|&&v| v).count() >= MIN_REGION_PIXELS);
                    assert!(is_connected(m, s.mask_size.1), "{} seed {seed}", spec.id);
                }
                let b = r.bbox.expect("every region carries a box");
                let (x0, x1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
                let (y0, y1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
                for v in [x0, x1, y0, y1] {
                    assert!((-1e-6..=1.0 + 1e-6).contains(&v), "{b:?}");
                }
            }
        }
    }
}

#[test]
fn shared_query_wording_raises_frozen_text_similarity() {
    let cfg = ModelConfig::tiny();
    let text = TextEncoder::new(&mut ParamStore::new(), &cfg, &mut rand_chacha_rng()).unwrap();
    let pooled = |q: &[String]| {
        let e = text.frozen_embeddings(q).unwrap();
        let d = e.cols();
        (0..d).map(|j| (0..e.rows()).map(|r| e.row(r)[j]).sum::<f32>() / e.rows() as f32).collect::<Vec<f32>>()
    };
    let unrelated: Vec<String> = ["zebra kettle", "violin", "quantum harbor lamp"].map(String::from).to_vec();
    for seed in 0..20 {
        let a = generate_sample(&DomainSpec::d1(), seed).unwrap();
        let b = generate_sample(&DomainSpec::d1(), seed + 100).unwrap();
        let pa = pooled(&a.query_texts());
        let same = cosine(&pa, &pooled(&b.query_texts()));
        let other = cosine(&pa, &pooled(&unrelated));
        assert!(same > other, "seed {seed}: {same} vs {other}");
    }
}

fn rand_chacha_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}
