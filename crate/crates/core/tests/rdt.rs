use resdiff::diffusion::Denoiser;
use resdiff::rdt::{
    banded_mask, cross_attention_weights, gaussian_vec, load_checkpoint, masked_cross_attention, read_checkpoint_header,
    save_checkpoint, Ablation, CheckpointHeader, Conditioned, RdtConfig, RdtModel, Stream,
};
use resdiff::rng;

fn tiny(ablation: Ablation) -> RdtConfig {
    RdtConfig {
        seq_len: 16,
        num_tokens: 4,
        hidden_dim: 8,
        num_blocks: 1,
        num_heads: 2,
        band_radius: 1,
        timestep_embed_dim: 16,
        ..Default::default()
    }
    .with_ablation(ablation)
}

/// Model with every parameter drawn from N(0, 0.3^2), so that gates and
/// modulations are active.
fn randomized(cfg: RdtConfig, seed: u64) -> RdtModel<f64> {
    let mut m = RdtModel::<f64>::new(cfg, seed).unwrap();
    let mut r = rng::stream(seed, "test/params");
    let noise: Vec<f64> = gaussian_vec(m.param_count(), &mut r);
    for (p, z) in m.params_mut().iter_mut().zip(noise) {
        *p = 0.3 * z;
    }
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn band_mask_examples() {
    let inf = f64::NEG_INFINITY;
    assert_eq!(banded_mask(3, 1).to_matrix(), vec![vec![0.0, 0.0, inf], vec![0.0, 0.0, 0.0], vec![inf, 0.0, 0.0]]);
    assert!(banded_mask(5, 4).to_matrix().iter().flatten().all(|&v| v == 0.0));
    let diag = banded_mask(4, 0).to_matrix();
    for (i, row) in diag.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v == 0.0, i == j);
        }
    }
    for u in 0..4 {
        let m = banded_mask(7, u);
        for i in 0..7 {
            let zeros = (0..7).filter(|&j| m.allows(i, j)).count();
            assert!((u + 1..=2 * u + 1).contains(&zeros));
            for j in 0..7 {
                assert_eq!(m.value(i, j), m.value(j, i));
            }
        }
    }
}

#[test]
fn cross_attention_hand_example() {
    let out = masked_cross_attention(&[1.0, 0.0], &[1.0, 0.0], &[2.0, 4.0], 2, 1, &banded_mask(2, 1), 1).unwrap();
    let w = 1.0f64.exp() / (1.0f64.exp() + 1.0);
    assert!((out[0] - (2.0 * w + 4.0 * (1.0 - w))).abs() < 1e-12);
    assert!((out[0] - 2.537).abs() < 1e-3);
}

#[test]
fn wide_band_equals_unmasked_attention() {
    let mut r = rng::stream(1, "t");
    let (n, d) = (5, 6);
    let q: Vec<f64> = gaussian_vec(n * d, &mut r);
    let k: Vec<f64> = gaussian_vec(n * d, &mut r);
    let v: Vec<f64> = gaussian_vec(n * d, &mut r);
    let banded = masked_cross_attention(&q, &k, &v, n, d, &banded_mask(n, n - 1), 2).unwrap();
    // plain softmax attention per head
    let dh = d / 2;
    let mut plain = vec![0.0; n * d];
    for h in 0..2 {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|e| q[i * d + h * dh + e] * k[j * d + h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..n {
                let p = (s[j] - mx).exp() / z;
                for e in 0..dh {
                    plain[i * d + h * dh + e] += p * v[j * d + h * dh + e];
                }
            }
        }
    }
    assert!(max_abs_diff(&banded, &plain) < 1e-12);
}

#[test]
fn diagonal_mask_reads_only_its_own_token() {
    let mut r = rng::stream(2, "t");
    let (n, d) = (4, 4);
    let q: Vec<f64> = gaussian_vec(n * d, &mut r);
    let k: Vec<f64> = gaussian_vec(n * d, &mut r);
    let v: Vec<f64> = gaussian_vec(n * d, &mut r);
    let base = masked_cross_attention(&q, &k, &v, n, d, &banded_mask(n, 0), 2).unwrap();
    for row in 0..n {
        assert!(max_abs_diff(&base[row * d..(row + 1) * d], &v[row * d..(row + 1) * d]) < 1e-12);
    }
    for j in 0..n {
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for e in 0..d {
            k2[j * d + e] += 1.0;
            v2[j * d + e] -= 2.0;
        }
        let out = masked_cross_attention(&q, &k2, &v2, n, d, &banded_mask(n, 0), 2).unwrap();
        for i in (0..n).filter(|&i| i != j) {
            assert!(max_abs_diff(&out[i * d..(i + 1) * d], &base[i * d..(i + 1) * d]) <= 1e-12);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng::stream(3, "t");
    let (n, d, h) = (9, 8, 4);
    let q: Vec<f64> = gaussian_vec(n * d, &mut r);
    let k: Vec<f64> = gaussian_vec(n * d, &mut r);
    for u in [0, 1, 3, 8] {
        let mask = banded_mask(n, u);
        let p = cross_attention_weights(&q, &k, n, d, &mask, h).unwrap();
        for (row_i, row) in p.chunks(n).enumerate() {
            let i = row_i % n;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, &w) in row.iter().enumerate() {
                if !mask.allows(i, j) {
                    assert_eq!(w, 0.0);
                }
            }
        }
    }
}

#[test]
fn patchify_shapes_and_locality() {
    let model = RdtModel::<f32>::new(RdtConfig::default(), 0).unwrap();
    let seq = vec![0.5f32; 400];
    assert_eq!(model.patchify(&seq, Stream::Main).unwrap().len(), 20 * 256);
    assert!(model.patchify(&seq[..399], Stream::Main).is_err());

    let mut r = rng::stream(4, "t");
    let a: Vec<f32> = gaussian_vec(400, &mut r);
    let mut b = a.clone();
    for v in &mut b[100..120] {
        *v += 1.0;
    }
    for stream in [Stream::Main, Stream::Cond] {
        let ta = model.patchify(&a, stream).unwrap();
        let tb = model.patchify(&b, stream).unwrap();
        for row in 0..20 {
            let same = ta[row * 256..(row + 1) * 256] == tb[row * 256..(row + 1) * 256];
            assert_eq!(same, row != 5, "row {row}");
        }
    }

    let cfg = RdtConfig::default();
    let mut zero = RdtModel::<f32>::new(cfg.clone(), 0).unwrap();
    for name in ["embed.main.bias", "pos.main"] {
        let range = zero.tensor(name).unwrap().range();
        zero.params_mut()[range].fill(0.0);
    }
    assert!(zero.patchify(&vec![0.0; 400], Stream::Main).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn unpatchify_shapes_and_permutation() {
    let mut model = RdtModel::<f64>::new(tiny(Ablation::None), 5).unwrap();
    let mut r = rng::stream(5, "t");
    let tokens: Vec<f64> = gaussian_vec(4 * 8, &mut r);
    let out = model.unpatchify(&tokens).unwrap();
    assert_eq!(out.len(), 16);
    let mut swapped = tokens.clone();
    let (a, b) = swapped.split_at_mut(8);
    a.swap_with_slice(&mut b[..8]);
    let out2 = model.unpatchify(&swapped).unwrap();
    assert_eq!(&out[..4], &out2[4..8]);
    assert_eq!(&out[4..8], &out2[..4]);
    assert_eq!(&out[8..], &out2[8..]);
    assert!(model.unpatchify(&tokens[..31]).is_err());

    let range = model.tensor("final.head.bias").unwrap().range();
    model.params_mut()[range].fill(0.0);
    assert!(model.unpatchify(&[0.0; 32]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn timestep_embedding_is_deterministic_and_non_degenerate() {
    let model = RdtModel::<f64>::new(RdtConfig::default(), 6).unwrap();
    let e1 = model.timestep_embed(1);
    let e_t = model.timestep_embed(1000);
    assert_eq!(e1.len(), 256);
    assert_eq!(e1, model.timestep_embed(1));
    let dot: f64 = e1.iter().zip(&e_t).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(dot / (norm(&e1) * norm(&e_t)) < 0.999);
}

#[test]
fn fresh_blocks_are_identity() {
    let model = RdtModel::<f64>::new(RdtConfig::default(), 7).unwrap();
    let mut r = rng::stream(7, "t");
    let main: Vec<f64> = gaussian_vec(20 * 256, &mut r);
    let cond = model.patchify(&gaussian_vec(400, &mut r), Stream::Cond).unwrap();
    let temb = model.timestep_embed(500);
    for k in 0..2 {
        assert_eq!(model.block_forward(k, &main, &cond, &temb).unwrap(), main);
    }
}

#[test]
fn no_condition_ignores_observation() {
    let model = randomized(tiny(Ablation::V2), 8);
    let mut r = rng::stream(8, "t");
    let x: Vec<f64> = gaussian_vec(16, &mut r);
    let y1: Vec<f64> = gaussian_vec(16, &mut r);
    let y2: Vec<f64> = gaussian_vec(16, &mut r);
    assert_eq!(model.forward(&x, &y1, 3).unwrap(), model.forward(&x, &y2, 3).unwrap());
    assert!(model.tensor("embed.cond.weight").is_none());
}

#[test]
fn observation_patches_act_only_inside_the_band() {
    for ablation in [Ablation::V1] {
        let model = randomized(tiny(ablation), 9);
        let mut r = rng::stream(9, "t");
        let x: Vec<f64> = gaussian_vec(16, &mut r);
        let y: Vec<f64> = gaussian_vec(16, &mut r);
        let base = model.forward(&x, &y, 10).unwrap();
        for j in 0..4 {
            let mut y2 = y.clone();
            for v in &mut y2[j * 4..(j + 1) * 4] {
                *v += 0.5;
            }
            let out = model.forward(&x, &y2, 10).unwrap();
            for i in 0..4 {
                let diff = max_abs_diff(&out[i * 4..(i + 1) * 4], &base[i * 4..(i + 1) * 4]);
                if i.abs_diff(j) > 1 {
                    assert_eq!(diff, 0.0, "patch {i} moved with observation patch {j}");
                } else {
                    assert!(diff > 0.0);
                }
            }
        }
    }
}

#[test]
fn swapping_positional_rows_changes_output() {
    let mut model = randomized(tiny(Ablation::None), 10);
    let mut r = rng::stream(10, "t");
    let x: Vec<f64> = gaussian_vec(16, &mut r);
    let y: Vec<f64> = gaussian_vec(16, &mut r);
    let before = model.forward(&x, &y, 4).unwrap();
    let pos = model.tensor("pos.main").unwrap().range();
    let p = &mut model.params_mut()[pos];
    let (a, b) = p.split_at_mut(8);
    a.swap_with_slice(&mut b[8..16]);
    let after = model.forward(&x, &y, 4).unwrap();
    assert!(max_abs_diff(&before, &after) > 1e-6);
}

#[test]
fn default_forward_is_deterministic() {
    let model = RdtModel::<f32>::new(RdtConfig::default(), 11).unwrap();
    let mut r = rng::stream(11, "t");
    let x: Vec<f32> = gaussian_vec(400, &mut r);
    let y: Vec<f32> = gaussian_vec(400, &mut r);
    let a = model.forward(&x, &y, 20).unwrap();
    assert_eq!(a.len(), 400);
    let b = model.forward(&x, &y, 20).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(model.forward(&x, &y, 0).is_err());
}

#[test]
fn batched_forward_matches_single() {
    for ablation in Ablation::ALL {
        let model = randomized(tiny(ablation), 12);
        let mut r = rng::stream(12, "t");
        let xs: Vec<f64> = gaussian_vec(48, &mut r);
        let ys: Vec<f64> = gaussian_vec(48, &mut r);
        let ts = [1, 500, 1000];
        let batch = model.forward_batch(&xs, &ys, &ts).unwrap();
        for i in 0..3 {
            let single = model.forward(&xs[i * 16..(i + 1) * 16], &ys[i * 16..(i + 1) * 16], ts[i]).unwrap();
            assert!(max_abs_diff(&single, &batch[i * 16..(i + 1) * 16]) < 1e-12, "{ablation}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    for ablation in Ablation::ALL {
        let model = randomized(tiny(ablation), 13);
        let mut r = rng::stream(13, "t");
        let xs: Vec<f64> = gaussian_vec(32, &mut r);
        let ys: Vec<f64> = gaussian_vec(32, &mut r);
        let x0: Vec<f64> = gaussian_vec(32, &mut r);
        let ts = [3, 700];
        let (_, grad) = model.loss_and_grad(&xs, &ys, &ts, &x0).unwrap();
        let h = 1e-4;
        let mut probe = model.clone();
        for spec in model.tensors() {
            let mut num = Vec::new();
            for i in spec.range() {
                let orig = probe.params()[i];
                probe.params_mut()[i] = orig + h;
                let lp = probe.loss(&xs, &ys, &ts, &x0).unwrap();
                probe.params_mut()[i] = orig - h;
                let lm = probe.loss(&xs, &ys, &ts, &x0).unwrap();
                probe.params_mut()[i] = orig;
                num.push((lp - lm) / (2.0 * h));
            }
            let ana = &grad[spec.range()];
            let err: f64 = num.iter().zip(ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(ana.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(scale > 0.0, "{ablation} {} has no gradient", spec.name);
            assert!(err / scale <= 1e-3, "{ablation} {}: rel err {}", spec.name, err / scale);
        }
    }
}

#[test]
fn ablation_names_round_trip() {
    for a in Ablation::ALL {
        assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        assert_eq!(Ablation::from_flags(a.flags()), Some(a));
    }
    assert!("v5".parse::<Ablation>().is_err());
    let bad = RdtConfig { num_tokens: 7, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = RdtConfig { num_heads: 3, ..Default::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn denoiser_matches_forward() {
    let model = randomized(tiny(Ablation::None), 14).cast::<f32>();
    let mut r = rng::stream(14, "t");
    let x: Vec<f64> = gaussian_vec(16, &mut r);
    let y: Vec<f64> = gaussian_vec(16, &mut r);
    let a = model.denoise(&x, &y, 9).unwrap();
    let b = model.denoise_batch(&[x.clone(), x.clone()], &[&y, &y], &[9, 9]).unwrap();
    assert_eq!(a, b[0]);
    assert_eq!(a, b[1]);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = randomized(tiny(Ablation::V4), 15).cast::<f32>();
    let header = CheckpointHeader::new(&model, Default::default(), 3, 120, Some(0.5));
    save_checkpoint(&path, &model, &header).unwrap();
    let (h2, m2) = load_checkpoint(&path).unwrap();
    assert_eq!(h2, header);
    assert_eq!(h2.variant, "v4");
    assert_eq!(m2.params(), model.params());
    assert_eq!(read_checkpoint_header(&path).unwrap().epoch, 3);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn precomputed_timesteps_give_the_same_output() {
    let mut model = randomized(tiny(Ablation::None), 16);
    let mut r = rng::stream(16, "t");
    let x: Vec<f64> = gaussian_vec(32, &mut r);
    let y: Vec<f64> = gaussian_vec(32, &mut r);
    let before = model.forward_batch(&x, &y, &[5, 900]).unwrap();
    model.precompute_timesteps(&[5, 900]);
    let after = model.forward_batch(&x, &y, &[5, 900]).unwrap();
    assert!(max_abs_diff(&before, &after) < 1e-12);
    model.params_mut()[0] += 1.0;
    let changed = model.forward_batch(&x, &y, &[5, 900]).unwrap();
    assert!(max_abs_diff(&before, &changed) > 0.0);
}

#[test]
fn conditioned_denoiser_matches_plain_model() {
    for ablation in Ablation::ALL {
        let model = randomized(tiny(ablation), 17);
        let mut r = rng::stream(17, "t");
        let x: Vec<f64> = gaussian_vec(16, &mut r);
        let y: Vec<f64> = gaussian_vec(16, &mut r);
        let other: Vec<f64> = gaussian_vec(16, &mut r);
        let bound = Conditioned::new(&model, &y).unwrap();
        for t in [1, 250, 1000] {
            assert_eq!(bound.denoise(&x, &y, t).unwrap(), model.denoise(&x, &y, t).unwrap(), "{ablation}");
            assert_eq!(bound.denoise(&x, &other, t).unwrap(), model.denoise(&x, &other, t).unwrap(), "{ablation}");
        }
    }
}
