//! Encoder oracles: blockify against direct index arithmetic, patch
//! embedding against a naive per-patch loop, and the attention invariants
//! (convex rows, per-block locality, shared weights).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unest::encoder::{blockify, patch_embed, unblockify, NestEncoder, TransformerLayer};
use unest::params::ParamBuilder;
use unest::tensor::Tensor;

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Where each input voxel lands in (B, T, n, C), written out longhand.
fn blockify_oracle(data: &[f64], sh: [usize; 5], g: usize) -> Vec<f64> {
    let (b, c, hh, ww, dd) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let e = [hh / g, ww / g, dd / g];
    let (t, n) = (g * g * g, e[0] * e[1] * e[2]);
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..hh {
                for j in 0..ww {
                    for k in 0..dd {
                        let tb = ((i / e[0]) * g + j / e[1]) * g + k / e[2];
                        let tn = ((i % e[0]) * e[1] + j % e[1]) * e[2] + k % e[2];
                        let src = (((bi * c + ci) * hh + i) * ww + j) * dd + k;
                        let dst = ((bi * t + tb) * n + tn) * c + ci;
                        out[dst] = data[src];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn blockify_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let g = rng.gen_range(1..=4usize);
        let sh = [
            rng.gen_range(1..=2usize),
            rng.gen_range(1..=3usize),
            g * rng.gen_range(1..=3usize),
            g * rng.gen_range(1..=3usize),
            g * rng.gen_range(1..=3usize),
        ];
        let data = ramp(sh.iter().product());
        let x = Tensor::<f64>::from_vec(data.clone(), &sh).unwrap();
        let got = blockify(&x, g).unwrap();
        let e = [sh[2] / g, sh[3] / g, sh[4] / g];
        assert_eq!(got.shape(), &[sh[0], g * g * g, e[0] * e[1] * e[2], sh[1]]);
        assert_eq!(got.to_vec(), blockify_oracle(&data, sh, g), "shape {sh:?} g {g}");
    }
}

#[test]
fn blockify_roundtrip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let g = rng.gen_range(1..=5usize);
        let sh = [
            rng.gen_range(1..=2usize),
            rng.gen_range(1..=4usize),
            g * rng.gen_range(1..=3usize),
            g * rng.gen_range(1..=3usize),
            g * rng.gen_range(1..=3usize),
        ];
        let x = Tensor::<f64>::from_vec(uniform(&mut rng, sh.iter().product()), &sh).unwrap();
        let back = unblockify(&blockify(&x, g).unwrap(), g, [sh[2], sh[3], sh[4]]).unwrap();
        assert_eq!(back.shape(), &sh);
        assert_eq!(back.to_vec(), x.to_vec());
    }
}

#[test]
fn blockify_pinned_geometry() {
    // A 24^3 grid with g = 4 splits into 64 blocks of 6^3 = 216 tokens.
    let x = Tensor::<f64>::zeros(&[1, 2, 24, 24, 24]);
    let seq = blockify(&x, 4).unwrap();
    assert_eq!(seq.shape(), &[1, 64, 216, 2]);

    // g = 1 is a single global block: channels-last flatten.
    let x = Tensor::<f64>::from_vec(ramp(2 * 3 * 2 * 2 * 2), &[2, 3, 2, 2, 2]).unwrap();
    let seq = blockify(&x, 1).unwrap();
    assert_eq!(seq.shape(), &[2, 1, 8, 3]);
    let flat = x.permute(&[0, 2, 3, 4, 1]).unwrap();
    assert_eq!(seq.to_vec(), flat.to_vec());
}

#[test]
fn blockify_rejects_bad_geometry() {
    let x = Tensor::<f64>::zeros(&[1, 2, 6, 6, 6]);
    assert!(blockify(&x, 4).unwrap_err().to_string().contains("divisible"));
    assert!(blockify(&x, 0).is_err());
    let flat = Tensor::<f64>::zeros(&[1, 2, 3]);
    assert!(blockify(&flat, 1).is_err());

    let seq = blockify(&x, 2).unwrap();
    assert!(unblockify(&seq, 3, [6, 6, 6]).unwrap_err().to_string().contains("blocks"));
    assert!(unblockify(&seq, 2, [12, 6, 6]).unwrap_err().to_string().contains("tokens"));
}

#[test]
fn patch_embed_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (c, c0, p) = (2usize, 3usize, 2usize);
    let sh = [1, c, 4, 6, 2];
    let t = [sh[2] / p, sh[3] / p, sh[4] / p];
    let x = uniform(&mut rng, sh.iter().product());
    let flat = c * p * p * p;
    let w = uniform(&mut rng, flat * c0);
    let b = uniform(&mut rng, c0);

    let got = patch_embed(
        &Tensor::<f64>::from_vec(x.clone(), &sh).unwrap(),
        &Tensor::from_vec(w.clone(), &[flat, c0]).unwrap(),
        &Tensor::from_vec(b.clone(), &[c0]).unwrap(),
        p,
    )
    .unwrap();
    assert_eq!(got.shape(), &[1, c0, t[0], t[1], t[2]]);

    let mut expect = vec![0.0; c0 * t[0] * t[1] * t[2]];
    for ti in 0..t[0] {
        for tj in 0..t[1] {
            for tk in 0..t[2] {
                for co in 0..c0 {
                    let mut acc = b[co];
                    let mut f = 0;
                    for ci in 0..c {
                        for pi in 0..p {
                            for pj in 0..p {
                                for pk in 0..p {
                                    let src = ((ci * sh[2] + ti * p + pi) * sh[3] + tj * p + pj)
                                        * sh[4]
                                        + tk * p
                                        + pk;
                                    acc += x[src] * w[f * c0 + co];
                                    f += 1;
                                }
                            }
                        }
                    }
                    expect[((co * t[0] + ti) * t[1] + tj) * t[2] + tk] = acc;
                }
            }
        }
    }
    for (a, b) in got.to_vec().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn test_layer(width: usize, heads: usize) -> (TransformerLayer<f64>, Vec<(String, Tensor<f64>)>) {
    let mut pb = ParamBuilder::new(7);
    let layer = TransformerLayer::new(&mut pb, "t", width, heads, 4).unwrap();
    (layer, pb.finish())
}

#[test]
fn attention_rows_are_convex_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (layer, _params) = test_layer(8, 2);
    let x = Tensor::from_vec(uniform(&mut rng, 2 * 3 * 5 * 8), &[2, 3, 5, 8]).unwrap();
    let attn = layer.attention(&x).unwrap();
    assert_eq!(attn.shape(), &[2, 3, 2, 5, 5]);
    let a = attn.to_vec();
    for (i, row) in a.chunks(5).enumerate() {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
        assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn attention_is_local_to_blocks_and_equivariant_within() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (layer, _params) = test_layer(8, 2);
    let (t, n, c) = (2usize, 4usize, 8usize);
    let x = uniform(&mut rng, t * n * c);
    let perm = [2usize, 0, 3, 1];

    // Permute the tokens of block 0 only; block 1 is untouched.
    let mut x2 = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        x2[i * c..(i + 1) * c].copy_from_slice(&x[p * c..(p + 1) * c]);
    }
    let y = layer.forward(&Tensor::from_vec(x, &[1, t, n, c]).unwrap()).unwrap().to_vec();
    let y2 = layer.forward(&Tensor::from_vec(x2, &[1, t, n, c]).unwrap()).unwrap().to_vec();

    // Block 0's output rows are permuted the same way.
    for (i, &p) in perm.iter().enumerate() {
        for ci in 0..c {
            let (a, b) = (y2[i * c + ci], y[p * c + ci]);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
    // Block 1's output is bitwise unchanged: no cross-block mixing.
    assert_eq!(y[n * c..], y2[n * c..]);
}

#[test]
fn one_weight_set_serves_every_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (layer, params) = test_layer(8, 2);
    let (t, n, c) = (5usize, 3usize, 8usize);
    let x = Tensor::from_vec(uniform(&mut rng, t * n * c), &[1, t, n, c]).unwrap();
    let before = layer.forward(&x).unwrap().to_vec();

    let (_, qkv_w) = params.iter().find(|(name, _)| name == "t.qkv.weight").unwrap();
    qkv_w.update_data(|w| w[0] += 0.25);
    let after = layer.forward(&x).unwrap().to_vec();

    for b in 0..t {
        let block = b * n * c..(b + 1) * n * c;
        assert!(
            before[block.clone()] != after[block],
            "perturbing the shared weights must change block {b}"
        );
    }
}

#[test]
fn posemb_is_added_once_per_hierarchy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut pb = ParamBuilder::new(3);
    let posemb = pb.trunc_normal("h.posemb", &[8, 8, 4], 0.02).unwrap();
    let hier = unest::encoder::Hierarchy { g: 2, width: 4, posemb: posemb.clone(), layers: vec![] };
    let x = Tensor::from_vec(uniform(&mut rng, 4 * 4 * 4 * 4), &[1, 4, 4, 4, 4]).unwrap();
    let y = hier.forward(&x).unwrap();

    let expect = unblockify(
        &blockify(&x, 2).unwrap().bias_add(&posemb).unwrap(),
        2,
        [4, 4, 4],
    )
    .unwrap();
    assert_eq!(y.to_vec(), expect.to_vec());
}

fn micro_encoder(seed: u64) -> (NestEncoder<f64>, Vec<(String, Tensor<f64>)>) {
    let mut pb = ParamBuilder::new(seed);
    let enc = NestEncoder::new(
        &mut pb,
        1,
        2,
        [16; 3],
        &[1, 1, 1],
        &[2, 4, 8],
        &[16, 32, 64],
        4,
        true,
    )
    .unwrap();
    (enc, pb.finish())
}

#[test]
fn micro_encoder_shapes_and_block_geometry() {
    let (enc, params) = micro_encoder(1);
    // Block grids 4, 2, 1 and a constant 8 tokens per block at 16^3.
    let geom: Vec<(usize, &[usize])> =
        enc.hierarchies.iter().map(|h| (h.g, h.posemb.shape())).collect();
    assert_eq!(geom[0], (4, &[64, 8, 16][..]));
    assert_eq!(geom[1], (2, &[8, 8, 32][..]));
    assert_eq!(geom[2], (1, &[1, 8, 64][..]));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_vec(uniform(&mut rng, 16 * 16 * 16), &[1, 1, 16, 16, 16]).unwrap();
    let out = enc.forward(&x).unwrap();
    assert_eq!(out.skips.len(), 2);
    assert_eq!(out.skips[0].shape(), &[1, 16, 8, 8, 8]);
    assert_eq!(out.skips[1].shape(), &[1, 32, 4, 4, 4]);
    assert_eq!(out.output.shape(), &[1, 64, 2, 2, 2]);
    assert!(out.output.to_vec().iter().all(|v| v.is_finite()));

    // Every parameter name is unique and the registry is non-trivial.
    let mut names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total);
}

#[test]
fn encoder_rejects_wrong_window() {
    let (enc, _params) = micro_encoder(1);
    let x = Tensor::<f64>::zeros(&[1, 1, 24, 24, 24]);
    let err = match enc.forward(&x) {
        Ok(_) => panic!("forward must reject a mismatched window"),
        Err(e) => e.to_string(),
    };
    assert!(err.contains("positional embedding"), "{err}");
}

#[test]
fn ablated_encoder_uses_single_blocks() {
    let mut pb = ParamBuilder::<f64>::new(1);
    let enc = NestEncoder::new(
        &mut pb,
        1,
        2,
        [16; 3],
        &[1, 1, 1],
        &[2, 4, 8],
        &[16, 32, 64],
        4,
        false,
    )
    .unwrap();
    // Same posemb sizes as the aggregated encoder, so the parameter count
    // cannot change; only the block partition does.
    let geom: Vec<(usize, &[usize])> =
        enc.hierarchies.iter().map(|h| (h.g, h.posemb.shape())).collect();
    assert_eq!(geom[0], (1, &[1, 512, 16][..]));
    assert_eq!(geom[1], (1, &[1, 64, 32][..]));
    assert_eq!(geom[2], (1, &[1, 8, 64][..]));
}
