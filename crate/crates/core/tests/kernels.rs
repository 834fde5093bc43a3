use proptest::prelude::*;
use uovn_core::config::ModelConfig;
use uovn_core::decoder::MaskSource;
use uovn_core::graph::DeformLayout;
use uovn_core::model::Uovn;
use uovn_core::{Graph, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in (1usize..6, 1usize..12).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let s = g.softmax(x);
        for r in 0..t.rows() {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_stays_open(t in matrix(1, 16)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t);
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn layer_norm_standardizes(t in (1usize..5, 2usize..16).prop_flat_map(|(r, c)| matrix(r, c))) {
        let cols = t.cols();
        // The stabilizing epsilon shifts the variance of near-constant rows.
        prop_assume!((0..t.rows()).all(|r| {
            let row = t.row(r);
            let m = row.iter().sum::<f64>() / cols as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64 > 0.5
        }));
        let mut g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let gain = g.constant(Tensor::filled(&[cols], 1.0));
        let bias = g.constant(Tensor::zeros(&[cols]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..t.rows() {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn bilinear_at_lattice_points_is_a_gather(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let c = 3;
        let data: Vec<f64> = (0..h * w * c).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0).collect();
        let mut g = Graph::<f64>::new();
        let map = g.constant(Tensor::new(&[h, w, c], data.clone()).unwrap());
        let pts: Vec<f64> = (0..h).flat_map(|y| (0..w).flat_map(move |x| [x as f64, y as f64])).collect();
        let points = g.constant(Tensor::new(&[h * w, 2], pts).unwrap());
        let s = g.bilinear_sample(map, points).unwrap();
        prop_assert_eq!(g.value(s).data(), &data[..]);
    }
}

#[test]
fn deform_sample_with_zero_offsets_gathers_same_level() {
    let layout = DeformLayout { heads: 2, points: 3, head_dim: 2, levels: vec![(2, 3), (4, 6)] };
    let mut g = Graph::<f64>::new();
    let mut refs = Vec::new();
    let mut maps = Vec::new();
    for &(h, w) in &layout.levels {
        let vals: Vec<f64> = (0..h * w * 4).map(|i| (i * 31 % 17) as f64 + 0.25).collect();
        maps.push(g.constant(Tensor::new(&[h * w, 4], vals).unwrap()));
        for y in 0..h {
            for x in 0..w {
                refs.push([(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64]);
            }
        }
    }
    let offsets = g.constant(Tensor::zeros(&[refs.len(), layout.offset_width()]));
    let s = g.deform_sample(&maps, offsets, &refs, &layout).unwrap();
    let mut t = 0;
    for (l, &(h, w)) in layout.levels.iter().enumerate() {
        for cell in 0..h * w {
            for head in 0..2 {
                for k in 0..3 {
                    let row = ((t * 2 + head) * 2 + l) * 3 + k;
                    let want = &g.value(maps[l]).row(cell)[head * 2..head * 2 + 2];
                    assert_eq!(g.value(s).row(row), want);
                }
            }
            t += 1;
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = ModelConfig { queries: 4, ..ModelConfig::tiny() };
    let model = Uovn::new(cfg, 3).unwrap();
    let image = Tensor::new(&[32, 32, 3], (0..32 * 32 * 3).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    let queries = vec!["red circle".to_string(), "sky".to_string()];
    let run = || {
        let mut g = Graph::<f32>::new();
        let p = model.store.bind(&mut g);
        let out = model.forward(&mut g, &p, &image, &queries, &MaskSource::Predicted).unwrap();
        let mut v = g.value(out.mask_logits()).data().to_vec();
        v.extend_from_slice(g.value(out.sim).data());
        v.extend_from_slice(g.value(out.boxes).data());
        v.into_iter().map(f32::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
