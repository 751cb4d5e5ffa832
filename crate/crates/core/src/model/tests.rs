use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::error::Error;
use crate::rng::{normal, seeded};
use crate::tensor::{grad_check, Graph, Tensor};

fn small_config(pattern: &[LayerKind]) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: 12,
        n_layers: pattern.len(),
        layer_pattern: pattern.to_vec(),
        global_heads: 2,
        global_head_dim: 6,
        swa_heads: 3,
        swa_head_dim: 4,
        window_size: 3,
        rope_base: 1e4,
        conv_kernel_size: 2,
        kv_conv: true,
        ffn_hidden: 16,
        kv_group_size: 1,
        norm_eps: 1e-6,
    }
}

/// Larger init so untrained models have visibly position-dependent outputs.
fn noisy_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = build_model(config, seed).unwrap();
    let mut rng = seeded(seed + 1000);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += normal(&mut rng, 0.3);
        }
    }
    params
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(0..vocab as u32)).collect()
}

#[test]
fn build_is_deterministic_and_validates() {
    let config = ModelConfig::desk(256, 4);
    assert_eq!(build_model(&config, 7).unwrap(), build_model(&config, 7).unwrap());
    assert_ne!(build_model(&config, 7).unwrap(), build_model(&config, 8).unwrap());

    let mut bad = config.clone();
    bad.layer_pattern.pop();
    assert!(matches!(build_model(&bad, 1), Err(Error::Config(_))));
    let mut odd = config.clone();
    odd.swa_head_dim = 15;
    assert!(matches!(build_model(&odd, 1), Err(Error::Config(_))));
}

#[test]
fn desk_parameter_count_matches_hand_count() {
    // d=64, V=256, four layers of width 64 (2x32 global, 4x16 swa), ffn 128, conv k=2:
    // embedding 16384; per layer 128 + 16384 + 256 + 24576 = 41344; final norm 64; head 16384.
    let hand = 16_384 + 4 * 41_344 + 64 + 16_384;
    let config = ModelConfig::desk(256, 4);
    assert_eq!(config.layer_pattern, [LayerKind::Swa, LayerKind::Swa, LayerKind::Swa, LayerKind::Global]);
    assert_eq!(param_count(&config), hand);
    assert_eq!(build_model(&config, 0).unwrap().count(), hand);

    let mut no_conv = config.clone();
    no_conv.kv_conv = false;
    assert_eq!(param_count(&no_conv), hand - 4 * 256);
    assert_eq!(build_model(&no_conv, 0).unwrap().count(), hand - 4 * 256);
}

#[test]
fn sliding_window_mask_examples() {
    let causal = |t| crate::tensor::AttentionMask::from_fn(t, t, |i, j| j <= i);
    assert_eq!(sliding_window_mask(5, 5), causal(5));
    assert_eq!(sliding_window_mask(5, 9), causal(5));
    let ident = sliding_window_mask(4, 1);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(ident.allowed(i, j), i == j);
        }
    }
    let m = sliding_window_mask(4, 2);
    let rows: Vec<Vec<usize>> = (0..4).map(|i| (0..4).filter(|&j| m.allowed(i, j)).collect()).collect();
    assert_eq!(rows, vec![vec![0], vec![0, 1], vec![1, 2], vec![2, 3]]);
}

fn single_layer(kind: LayerKind, seed: u64) -> (ModelConfig, ModelParams) {
    let mut config = small_config(&[kind]);
    config.conv_kernel_size = 3;
    (config.clone(), noisy_params(&config, seed))
}

fn run_attention(config: &ModelConfig, params: &ModelParams, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let t = x.shape()[0];
    let kind = config.layer_pattern[0];
    let mask = Rc::new(layer_mask(kind, config.window_size, t, 0, None).unwrap());
    let xv = g.constant(x.clone());
    let y = attention_forward(&mut g, xv, &bound.layers[0], config, mask, 0, None, None).unwrap();
    g.value(y).clone()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal(&mut rng, 1.0)).collect()).unwrap()
}

#[test]
fn single_token_attention_is_the_value_path() {
    for kind in [LayerKind::Global, LayerKind::Swa] {
        let (config, params) = single_layer(kind, 3);
        let x = randn(&[1, config.d_model], 5);
        let out = run_attention(&config, &params, &x);
        // one key: softmax weight 1, so out = (x·Wv ⊙ last conv tap)·Wo
        let layer = &params.layers[0];
        let w = config.attn_width(kind);
        let mut v = vec![0.0; w];
        for c in 0..w {
            for p in 0..config.d_model {
                v[c] += x.data()[p] * layer.wv.data()[p * w + c];
            }
        }
        let last_tap = &layer.conv_v.as_ref().unwrap().data()[(config.conv_kernel_size - 1) * w..];
        for c in 0..w {
            v[c] *= last_tap[c];
        }
        for o in 0..config.d_model {
            let expected: f64 = (0..w).map(|c| v[c] * layer.wo.data()[c * config.d_model + o]).sum();
            assert!((out.data()[o] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn swa_output_ignores_tokens_outside_window_plus_conv() {
    let (config, params) = single_layer(LayerKind::Swa, 11);
    let t = 12;
    let horizon = config.window_size + config.conv_kernel_size - 1;
    for seed in 0..10 {
        let x = randn(&[t, config.d_model], seed);
        let base = run_attention(&config, &params, &x);
        for i in horizon..t {
            let mut perturbed = x.clone();
            let old = i + 1 - horizon; // positions < old are out of reach
            for p in 0..old {
                for c in 0..config.d_model {
                    perturbed.data_mut()[p * config.d_model + c] += 5.0;
                }
            }
            let y = run_attention(&config, &params, &perturbed);
            assert_eq!(y.row(i), base.row(i), "position {i}");
            // the oldest reachable position does matter
            let mut reach = x.clone();
            for c in 0..config.d_model {
                reach.data_mut()[old * config.d_model + c] += 5.0;
            }
            assert_ne!(run_attention(&config, &params, &reach).row(i), base.row(i));
        }
    }
}

#[test]
fn global_output_sees_first_token() {
    let (config, params) = single_layer(LayerKind::Global, 12);
    let t = 3 * config.window_size;
    let x = randn(&[t, config.d_model], 1);
    let base = run_attention(&config, &params, &x);
    let mut perturbed = x.clone();
    perturbed.data_mut()[0] += 3.0;
    let y = run_attention(&config, &params, &perturbed);
    assert_ne!(y.row(t - 1), base.row(t - 1));
}

#[test]
fn attention_rejects_inconsistent_cache_state() {
    let (config, params) = single_layer(LayerKind::Global, 2);
    let mut g = Graph::new();
    let bound = bind_params(&mut g, &params, false);
    let x = g.constant(randn(&[2, config.d_model], 1));
    let mask = Rc::new(layer_mask(LayerKind::Global, 3, 2, 3, None).unwrap());
    let mut cache = LayerCache::default();
    let r = attention_forward(&mut g, x, &bound.layers[0], &config, mask.clone(), 3, None, Some(&mut cache));
    assert!(matches!(r, Err(Error::State(_))));
    let r = attention_forward(&mut g, x, &bound.layers[0], &config, mask, 3, None, None);
    assert!(matches!(r, Err(Error::State(_))));
}

#[test]
fn packed_samples_match_isolated_runs() {
    let config = small_config(&[LayerKind::Swa, LayerKind::Global, LayerKind::Swa]);
    for seed in 0..10 {
        let params = noisy_params(&config, seed);
        let mut rng = seeded(seed + 99);
        let (la, lb) = (rng.random_range(1..9), rng.random_range(1..9));
        let a = random_tokens(la, config.vocab_size, seed * 2);
        let b = random_tokens(lb, config.vocab_size, seed * 2 + 1);
        let packed: Vec<u32> = a.iter().chain(&b).copied().collect();
        let ids: Vec<u32> = (0..la + lb).map(|i| if i < la { 1 } else { 2 }).collect();
        let joint = model_forward(&packed, &params, &config, Some(&ids)).unwrap();
        let alone_a = model_forward(&a, &params, &config, None).unwrap();
        let alone_b = model_forward(&b, &params, &config, None).unwrap();
        for i in 0..la {
            for (x, y) in joint.row(i).iter().zip(alone_a.row(i)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for i in 0..lb {
            for (x, y) in joint.row(la + i).iter().zip(alone_b.row(i)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        // without the boundary mask the second sample is contaminated
        let leaky = model_forward(&packed, &params, &config, None).unwrap();
        assert!(leaky.row(la).iter().zip(alone_b.row(0)).any(|(x, y)| (x - y).abs() > 1e-6));
    }
}

#[test]
fn identical_tokens_still_vary_by_position() {
    let config = small_config(&[LayerKind::Swa, LayerKind::Global]);
    let params = noisy_params(&config, 4);
    let logits = model_forward(&[5; 8], &params, &config, None).unwrap();
    for i in 1..8 {
        assert_ne!(logits.row(i), logits.row(i - 1));
    }
}

#[test]
fn forward_rejects_out_of_range_tokens() {
    let config = small_config(&[LayerKind::Swa]);
    let params = build_model(&config, 0).unwrap();
    assert!(matches!(model_forward(&[1, 24], &params, &config, None), Err(Error::Index(_))));
}

#[test]
fn incremental_decoding_matches_full_forward() {
    for kv_conv in [true, false] {
        let mut config = small_config(&[LayerKind::Swa, LayerKind::Global, LayerKind::Swa]);
        config.kv_conv = kv_conv;
        config.conv_kernel_size = 3;
        let params = noisy_params(&config, 21);
        let tokens = random_tokens(14, config.vocab_size, 5);
        let full = model_forward(&tokens, &params, &config, None).unwrap();

        let mut cache = KvCache::new(&config);
        let mut rows: Vec<f64> = Vec::new();
        for chunk in [&tokens[..5], &tokens[5..6], &tokens[6..7], &tokens[7..14]] {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &params, false);
            let out = model_forward_graph(&mut g, &bound, &config, chunk, None, Some(&mut cache)).unwrap();
            rows.extend_from_slice(g.value(out).data());
        }
        assert_eq!(cache.len(), 14);
        let inc = Tensor::new(&[14, config.vocab_size], rows).unwrap();
        assert!(inc.max_abs_diff(&full) < 1e-9, "kv_conv={kv_conv}: {}", inc.max_abs_diff(&full));
    }
}

/// Flat parameter vector -> bound params, for whole-model finite differences.
fn flat_params(params: &ModelParams) -> Tensor {
    let data: Vec<f64> = params.tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new(&[n, 1], data).unwrap()
}

fn bind_flat(g: &mut Graph, params: &ModelParams, flat: crate::tensor::Var) -> BoundParams {
    let mut offset = 0;
    bind_params_with(g, params, |g, t| {
        let slice = g.slice_rows(flat, offset, t.numel()).unwrap();
        offset += t.numel();
        g.reshape(slice, t.shape()).unwrap()
    })
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let config = small_config(&[LayerKind::Swa, LayerKind::Global]);
    for seed in 0..3 {
        let params = noisy_params(&config, seed);
        let tokens = random_tokens(7, config.vocab_size, seed);
        let targets: Vec<usize> = random_tokens(7, config.vocab_size, seed + 50).iter().map(|&t| t as usize).collect();
        let err = grad_check(
            |g, flat| {
                let bound = bind_flat(g, &params, flat);
                let logits = model_forward_graph(g, &bound, &config, &tokens, None, None)?;
                g.cross_entropy(logits, &targets)
            },
            &flat_params(&params),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn batch_gradient_matches_single_graph() {
    let config = small_config(&[LayerKind::Swa, LayerKind::Global]);
    let params = noisy_params(&config, 9);
    let tokens = random_tokens(6, config.vocab_size, 1);
    let targets: Vec<Option<u32>> = vec![Some(1), None, Some(3), Some(4), None, Some(0)];
    let ex = SequenceExample { tokens: &tokens, targets: &targets, sample_ids: None };
    let out = batch_loss_and_grad(&params, &config, &[ex, ex]).unwrap();
    assert_eq!(out.scored, 8);

    let mut g = Graph::new();
    let bound = bind_params(&mut g, &params, true);
    let logits = model_forward_graph(&mut g, &bound, &config, &tokens, None, None).unwrap();
    let t: Vec<Option<usize>> = targets.iter().map(|t| t.map(|v| v as usize)).collect();
    let ce = g.cross_entropy_masked(logits, &t).unwrap();
    g.backward(ce).unwrap();
    assert!((out.loss - g.value(ce).data()[0]).abs() < 1e-12);
    for (a, &v) in out.grads.iter().zip(&bound.all) {
        assert!(a.max_abs_diff(&g.grad(v).unwrap()) < 1e-12);
    }
}

#[test]
fn kv_cache_size_examples() {
    let hybrid = ModelConfig::desk(256, 8);
    let mut global = hybrid.clone();
    global.layer_pattern = vec![LayerKind::Global; 8];
    let w = hybrid.window_size;

    // inside the window nothing is capped
    let mut uncapped = hybrid.clone();
    uncapped.window_size = usize::MAX;
    for ctx in [1, 7, w] {
        assert_eq!(kv_cache_size(&hybrid, ctx, 2), kv_cache_size(&uncapped, ctx, 2));
    }
    assert!(kv_cache_size(&hybrid, 4 * w, 2) < kv_cache_size(&global, 4 * w, 2));

    // past the window the slope comes from global layers alone
    let per_pos_global: u128 = 2 * 2 * 32 * 2 * 2; // 2 global layers, 2 heads x 32, k and v, 2 bytes
    for ctx in w..w + 50 {
        assert_eq!(kv_cache_size(&hybrid, ctx + 1, 2) - kv_cache_size(&hybrid, ctx, 2), per_pos_global);
    }

    // the full-scale geometry: 2 heads x 256 global vs 8 heads x 128 swa
    let mut big = hybrid.clone();
    big.global_heads = 2;
    big.global_head_dim = 256;
    big.swa_heads = 8;
    big.swa_head_dim = 128;
    big.kv_group_size = 2;
    assert_eq!(kv_cache_size(&big, 1, 1), (2 * 256 * 2 + 6 * 2 * 4 * 128) as u128);
}
