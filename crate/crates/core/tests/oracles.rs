mod common;

use rand::Rng;
use sccan::attention::{
    block_alignment, scca_block_forward, AttentionConfig, BlockMode, SccaBlockParams,
};
use sccan::cost::{cost_report, AttentionKind, CostConfig};
use sccan::episodes::{class_directions, synth_episode, SynthSpec};
use sccan::model::{decode, DecoderParams};
use sccan::params::{Init, ParamStore};
use sccan::pma::{aggregate_pseudo_mask, max_similarity_prior};
use sccan::tensor::{masked_average_pool, matmul, transpose};
use sccan::DType;

use common::*;

#[test]
fn matmul_and_transpose_match_loops() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let (m, k, n) = (
            r.random_range(1..=8),
            r.random_range(1..=8),
            r.random_range(1..=8),
        );
        let a = random_tensor(&mut r, &[m, k]);
        let b = random_tensor(&mut r, &[k, n]);
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[m, n]);
        assert!(all_rel_close(
            got.data(),
            &common::matmul(a.data(), b.data(), m, k, n),
            1e-12
        ));
        let t = transpose(&a).unwrap();
        for i in 0..m {
            for j in 0..k {
                assert_eq!(t.data()[j * m + i], a.data()[i * k + j]);
            }
        }
    }
}

#[test]
fn masked_average_pool_matches_loop() {
    let mut r = rng(3);
    let feat = random_tensor(&mut r, &[3, 4, 5]);
    let mask = random_mask(&mut r, 4, 5);
    let got = masked_average_pool(&feat, &mask).unwrap();
    let fg: Vec<usize> = (0..20).filter(|&p| mask.data()[p] == 1.0).collect();
    for ch in 0..3 {
        let want = fg.iter().map(|&p| pixel(&feat, p)[ch]).sum::<f64>() / fg.len() as f64;
        assert!(rel_close(got.data()[ch], want, 1e-12));
    }
}

#[test]
fn pma_matches_double_loop() {
    for seed in 0..100 {
        let mut r = rng(100 + seed);
        let (c, h, w) = (
            r.random_range(1..=4),
            r.random_range(1..=4),
            r.random_range(1..=4),
        );
        let fq = random_tensor(&mut r, &[c, h, w]);
        let fs = random_tensor(&mut r, &[c, h, w]);
        let ms = random_mask(&mut r, h, w);
        let agg = aggregate_pseudo_mask(&fq, &fs, &ms).unwrap();
        assert!(
            all_rel_close(agg.values.data(), &pma_aggregated(&fq, &fs, &ms), 1e-10),
            "seed {seed}"
        );
        let max = max_similarity_prior(&fq, &fs, &ms).unwrap();
        assert!(
            all_rel_close(max.values.data(), &pma_max_similarity(&fq, &fs, &ms), 1e-10),
            "seed {seed}"
        );
    }
}

#[test]
fn alignment_matches_enumeration_on_padded_lattices() {
    for seed in 0..100 {
        let mut r = rng(200 + seed);
        let k = r.random_range(1..=4);
        let (h, w) = (r.random_range(k..=8), r.random_range(k..=8));
        let c = r.random_range(1..=3);
        let fq = random_tensor(&mut r, &[c, h, w]);
        let fs = random_tensor(&mut r, &[c, h, w]);
        let ms = random_mask(&mut r, h, w);
        let got = block_alignment(&fq, &fs, &ms, k, true).unwrap().indices;
        assert_eq!(
            got,
            alignment(&fq, &fs, &ms, k, true).unwrap(),
            "seed {seed}"
        );
    }
}

#[test]
fn single_window_block_matches_dense_reference() {
    for seed in 0..30 {
        let mut r = rng(300 + seed);
        let heads = r.random_range(1..=2);
        let dim = heads * r.random_range(1..=4);
        let k = r.random_range(1..=4);
        let cfg = AttentionConfig {
            dim,
            heads,
            window: k,
            mlp_ratio: r.random_range(1..=3),
            mode: BlockMode::Standard,
        };
        let mut store = ParamStore::new();
        let b = SccaBlockParams::new(&mut store, &mut Init::new(seed), "block0", &cfg);
        randomize(&mut store, &mut r);
        let fq = random_tensor(&mut r, &[dim, k, k]);
        let fs = random_tensor(&mut r, &[dim, k, k]);
        let ms = random_mask(&mut r, k, k);
        let got = scca_block_forward(&fq, &fs, &ms, &b, &cfg, false, &store).unwrap();
        let fg: Vec<bool> = ms.data().iter().map(|&v| v == 1.0).collect();
        let want = single_window_block(
            &store,
            "block0",
            heads,
            fq.to_pixel_major().unwrap().data(),
            fs.to_pixel_major().unwrap().data(),
            &fg,
        );
        assert!(
            all_rel_close(got.to_pixel_major().unwrap().data(), &want, 1e-10),
            "seed {seed}"
        );
    }
}

#[test]
fn decode_matches_per_pixel_reference() {
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let dec = DecoderParams::new(&mut store, &mut Init::new(7), 4);
    randomize(&mut store, &mut r);
    let x = random_tensor(&mut r, &[4, 2, 2]);
    let got = decode(&x, &dec, &store).unwrap();
    let want = common::decode(&store, x.to_pixel_major().unwrap().data());
    assert!(all_rel_close(
        got.to_pixel_major().unwrap().data(),
        &want,
        1e-10
    ));
}

/// Hand recount of the 60x60, K=8, D=256 configuration.
#[test]
fn cost_matches_independent_recount() {
    let cfg = CostConfig {
        height: 60,
        width: 60,
        window: 8,
        dim: 256,
        heads: 8,
        blocks: 8,
        mlp_ratio: 1,
        dtype: DType::F32,
    };
    let r = cost_report(&cfg).unwrap();
    // ceil(60/8) = 8 windows per side, 64 tokens each.
    let windows: u64 = 8 * 8;
    let tokens_per_window: u64 = 64;
    let d: u64 = 256;
    let self_logits = windows * tokens_per_window * tokens_per_window * d * 2;
    assert_eq!(self_logits, 134_217_728);
    let s = r.get(AttentionKind::WindowSelf);
    assert_eq!(s.logit_flops, self_logits);
    assert_eq!(s.aggregation_flops, self_logits);
    assert_eq!(r.get(AttentionKind::WindowCross).logit_flops, self_logits);
    let scca = r.get(AttentionKind::Scca);
    assert_eq!(scca.logit_flops, 268_435_456);
    assert_eq!(scca.softmax_flops, 3 * 8 * 64 * 64 * 128);
    assert_eq!(scca.projection_flops, 6 * 2 * 4096 * 256 * 256);
}

#[test]
fn generator_separates_foreground_from_background() {
    let spec = SynthSpec::default();
    let (mut ff, mut fb) = (0.0, 0.0);
    for seed in 0..100 {
        let ep = synth_episode(seed, &spec).unwrap();
        let s = &ep.support_feats[0];
        let sm = &ep.support_masks[0];
        let fg: Vec<usize> = (0..256)
            .filter(|&p| ep.query_mask.data()[p] == 1.0)
            .collect();
        let sfg: Vec<usize> = (0..256).filter(|&p| sm.data()[p] == 1.0).collect();
        let sbg: Vec<usize> = (0..256).filter(|&p| sm.data()[p] == 0.0).collect();
        let q = pixel(&ep.query_feat, fg[0]);
        ff += sfg.iter().map(|&p| cosine(&q, &pixel(s, p))).sum::<f64>() / sfg.len() as f64;
        fb += sbg.iter().map(|&p| cosine(&q, &pixel(s, p))).sum::<f64>() / sbg.len() as f64;
    }
    assert!(ff > fb, "FG-FG {ff} vs FG-BG {fb}");
    let dirs = class_directions(spec.channels, spec.classes);
    for d in &dirs {
        assert!((norm(d) - 1.0).abs() < 1e-12);
    }
}
