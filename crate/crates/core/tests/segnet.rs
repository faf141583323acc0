use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s5_core::model::{self, param_count, ModelConfig, Regime, SegNet, LN_EPS};
use s5_core::{Error, Graph, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        ffn_hidden: 16,
        depth: 2,
        heads: 2,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Overwrite every buffer with U(-s, s) so no parameter is trivially zero.
fn randomize(net: &mut SegNet, seed: u64, s: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.params.for_each_mut(&mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-s..s));
    });
}

fn images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Tensor::from_fn(&[size, size, 3], |_| rng.random_range(0.0..1.0)))
        .collect()
}

fn logits(net: &SegNet, imgs: &[Tensor], t: usize) -> Vec<f64> {
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let (l, _) = net.predict(&refs, t).unwrap();
    l.into_iter().flat_map(|t| t.into_data()).collect()
}

fn row_ln(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * gain[i] + bias[i])
        .collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (i_n, o_n) = (w.rows(), w.cols());
    (0..o_n)
        .map(|o| b.data()[o] + (0..i_n).map(|i| x[i] * w.at2(i, o)).sum::<f64>())
        .collect()
}

/// Scalar attention oracle: `x + Attn(LN(x))` per head.
fn attention_oracle(x: &[Vec<f64>], net: &SegNet, heads: usize) -> Vec<Vec<f64>> {
    let b = &net.params.blocks[0];
    let h: Vec<Vec<f64>> = x
        .iter()
        .map(|r| row_ln(r, b.norm1.gain.data(), b.norm1.bias.data()))
        .collect();
    let q: Vec<_> = h.iter().map(|r| affine(r, &b.query.weight, &b.query.bias)).collect();
    let k: Vec<_> = h.iter().map(|r| affine(r, &b.key.weight, &b.key.bias)).collect();
    let v: Vec<_> = h.iter().map(|r| affine(r, &b.value.weight, &b.value.bias)).collect();
    let d = x[0].len();
    let dh = d / heads;
    let n = x.len();
    let mut concat = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                concat[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    concat
        .iter()
        .zip(x)
        .map(|(o, xr)| {
            affine(o, &b.output.weight, &b.output.bias)
                .iter()
                .zip(xr)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

fn run_mhsa(net: &SegNet, x: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let xv = g.constant(Tensor::from_rows(x));
    let out = model::mhsa(&mut g, &net.config, &p.blocks[0], xv, 1).unwrap();
    g.value(out).data().to_vec()
}

#[test]
fn attention_matches_scalar_oracle() {
    let mut net = SegNet::init(&small(), 1).unwrap();
    randomize(&mut net, 2, 0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let got = run_mhsa(&net, &x);
    let want: Vec<f64> = attention_oracle(&x, &net, 2).concat();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn attention_residual_only_when_value_path_is_zero() {
    let mut net = SegNet::init(&small(), 1).unwrap();
    randomize(&mut net, 4, 0.6);
    let b = &mut net.params.blocks[0];
    b.value.weight = Tensor::zeros(b.value.weight.shape());
    b.value.bias = Tensor::zeros(b.value.bias.shape());
    b.output.bias = Tensor::zeros(b.output.bias.shape());
    let x = vec![vec![0.3, -0.2, 0.9, 0.1, 0.0, 0.5, -0.7, 0.2]; 2];
    assert_eq!(run_mhsa(&net, &x), x.concat());
}

#[test]
fn single_token_attends_to_itself() {
    let mut net = SegNet::init(&small(), 1).unwrap();
    randomize(&mut net, 5, 0.6);
    let x = vec![vec![0.4, -0.1, 0.3, 0.8, -0.6, 0.2, 0.0, 0.5]];
    let b = &net.params.blocks[0];
    let h = row_ln(&x[0], b.norm1.gain.data(), b.norm1.bias.data());
    let v = affine(&h, &b.value.weight, &b.value.bias);
    let o = affine(&v, &b.output.weight, &b.output.bias);
    let want: Vec<f64> = o.iter().zip(&x[0]).map(|(a, b)| a + b).collect();
    for (a, b) in run_mhsa(&net, &x).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn alpha_zero_moe_reproduces_plain_logits() {
    let mut plain = SegNet::init(&small(), 9).unwrap();
    randomize(&mut plain, 10, 0.4);
    let moe = plain.to_moe(0.0, &[3], 11).unwrap();
    assert_eq!(moe.config.expert_widths(), (8, 0));
    let imgs = images(3, 16, 12);
    let a = logits(&plain, &imgs, 0);
    let b = logits(&moe, &imgs, 0);
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert_eq!(diff, 0.0);
}

#[test]
fn moe_conversion_is_a_no_op_for_every_dataset() {
    let mut plain = SegNet::init(&small(), 13).unwrap();
    randomize(&mut plain, 14, 0.4);
    let moe = plain.to_moe(0.25, &[3, 3, 3], 15).unwrap();
    let imgs = images(2, 16, 16);
    let base = logits(&plain, &imgs, 0);
    for t in 0..3 {
        let got = logits(&moe, &imgs, t);
        assert!(base.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits()), "dataset {t}");
    }
}

#[test]
fn datasets_differ_iff_expert_weights_differ() {
    let mut plain = SegNet::init(&small(), 17).unwrap();
    randomize(&mut plain, 18, 0.4);
    let mut moe = plain.to_moe(0.25, &[3, 3], 19).unwrap();
    let imgs = images(1, 16, 20);
    assert_eq!(logits(&moe, &imgs, 0), logits(&moe, &imgs, 1));
    moe.params.blocks[1].specific_experts[1].bias.data_mut()[0] += 0.3;
    assert_ne!(logits(&moe, &imgs, 0), logits(&moe, &imgs, 1));
}

#[test]
fn expert_width_conservation_over_alpha_grid() {
    for alpha in [0.0, 0.125, 0.25, 0.5, 1.0] {
        let cfg = ModelConfig {
            moe_enabled: true,
            alpha,
            ..small()
        };
        let (s, p) = cfg.expert_widths();
        assert_eq!(s + p, cfg.ffn_out());
        let mut net = SegNet::init(&small(), 1).unwrap().to_moe(alpha, &[3, 3], 2).unwrap();
        randomize(&mut net, 3, 0.3);
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[4, 8], 0.1));
        let out = model::ffn_moe(&mut g, &net.config, &p.blocks[0], x, 1).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 8]);
    }
    let cfg = ModelConfig {
        moe_enabled: true,
        alpha: 0.3,
        ..small()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn decoder_constant_field_from_bias() {
    let cfg = small();
    let mut net = SegNet::init(&cfg, 1).unwrap();
    let d = &mut net.params.decoders[0].proj;
    d.weight = Tensor::zeros(d.weight.shape());
    let b: Vec<f64> = (0..16).flat_map(|_| [0.5, -1.0, 2.0]).collect();
    d.bias = Tensor::new(vec![48], b).unwrap();
    let mut g = Graph::new();
    let p = net.bind(&mut g, false);
    let tokens = g.constant(Tensor::zeros(&[16, 8]));
    let out = model::decode(&mut g, &cfg, &p, tokens, 0).unwrap();
    assert_eq!(g.value(out).shape(), &[256, 3]);
    for row in g.value(out).data().chunks(3) {
        assert_eq!(row, &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn single_class_decoder_predicts_class_zero() {
    let mut net = SegNet::init_with_classes(&small(), &[1], 1).unwrap();
    randomize(&mut net, 2, 0.5);
    let (l, _) = net.predict(&[&images(1, 16, 3)[0]], 0).unwrap();
    let map = s5_core::metrics::argmax_map(l[0].data(), 1);
    assert!(map.iter().all(|&c| c == 0));
}

#[test]
fn decoder_locality() {
    let cfg = small();
    let mut net = SegNet::init(&cfg, 1).unwrap();
    randomize(&mut net, 2, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = Tensor::from_fn(&[16, 8], |_| rng.random_range(-1.0..1.0));
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let tv = g.constant(t.clone());
        let out = model::decode(&mut g, &cfg, &p, tv, 0).unwrap();
        model::PatchOrder::new(&cfg).logits_to_pixels(g.value(out).data(), 3)
    };
    let token = 6;
    let mut moved = base.clone();
    moved.data_mut()[token * 8 + 3] += 0.7;
    let (a, b) = (run(&base), run(&moved));
    let (gy, gx) = (token / 4, token % 4);
    for y in 0..16 {
        for x in 0..16 {
            let inside = y / 4 == gy && x / 4 == gx;
            let i = (y * 16 + x) * 3;
            let changed = a.data()[i..i + 3] != b.data()[i..i + 3];
            assert_eq!(changed, inside, "pixel ({y},{x})");
        }
    }
}

/// Parameters needed to serve dataset 0 alone and all datasets, by walking
/// the buffers of concrete networks.
fn brute_force(cfg: &ModelConfig, regime: Regime, t: usize) -> (u64, u64) {
    let classes = vec![cfg.num_classes; t];
    let count = |net: &SegNet, keep: &dyn Fn(&str) -> bool| {
        let mut n = 0u64;
        net.params.visit(&mut |name, b| {
            if keep(name) {
                n += b.numel() as u64;
            }
        });
        n
    };
    let only_first = |name: &str| {
        let other = |prefix: &str| {
            name.split('.')
                .collect::<Vec<_>>()
                .windows(2)
                .any(|w| w[0] == prefix && w[1] != "0")
        };
        !other("decoders") && !other("specific")
    };
    match regime {
        Regime::Sdf => {
            let nets: Vec<SegNet> = (0..t)
                .map(|i| SegNet::init_with_classes(cfg, &[classes[i]], i as u64).unwrap())
                .collect();
            let all = nets.iter().map(|n| count(n, &|_| true)).sum();
            (count(&nets[0], &|_| true), all)
        }
        Regime::Mdf => {
            let net = SegNet::init_with_classes(cfg, &classes, 0).unwrap();
            (count(&net, &only_first), count(&net, &|_| true))
        }
        Regime::MoeMdf => {
            let net = SegNet::init(cfg, 0).unwrap().to_moe(cfg.alpha, &classes, 0).unwrap();
            (count(&net, &only_first), count(&net, &|_| true))
        }
    }
}

#[test]
fn param_count_matches_buffer_walk() {
    for regime in [Regime::Sdf, Regime::Mdf, Regime::MoeMdf] {
        for t in 1..=4 {
            for alpha in [0.0, 0.125, 0.25, 0.5, 1.0] {
                let cfg = ModelConfig {
                    alpha,
                    ..ModelConfig::toy()
                };
                let r = param_count(&cfg, regime, &vec![cfg.num_classes; t]).unwrap();
                assert_eq!((r.total_single, r.total_multiple), brute_force(&cfg, regime, t), "{regime} T={t} α={alpha}");
            }
        }
    }
}

#[test]
fn sdf_equals_mdf_for_one_dataset() {
    let cfg = ModelConfig::toy();
    let a = param_count(&cfg, Regime::Sdf, &[4]).unwrap();
    let b = param_count(&cfg, Regime::Mdf, &[4]).unwrap();
    assert_eq!(a.total_multiple, b.total_multiple);
}

#[test]
fn mdf_strictly_smaller_than_sdf_on_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let heads = rng.random_range(1..=4);
        let cfg = ModelConfig {
            image_size: 8 * rng.random_range(1..=4),
            patch_size: 8,
            embed_dim: heads * rng.random_range(1..=8),
            ffn_hidden: rng.random_range(1..=64),
            depth: rng.random_range(1..=3),
            heads,
            num_classes: rng.random_range(1..=6),
            alpha: 0.0,
            ..ModelConfig::default()
        };
        let t = rng.random_range(2..=5);
        let classes = vec![cfg.num_classes; t];
        let sdf = param_count(&cfg, Regime::Sdf, &classes).unwrap();
        let mdf = param_count(&cfg, Regime::Mdf, &classes).unwrap();
        assert!(mdf.total_multiple < sdf.total_multiple);
    }
}

#[test]
fn routing_isolation_of_gradients() {
    let mut net = SegNet::init(&small(), 1).unwrap().to_moe(0.25, &[3, 3, 3], 2).unwrap();
    randomize(&mut net, 3, 0.3);
    let imgs = images(2, 16, 4);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    for t in 0..3 {
        let mut g = Graph::new();
        let p = net.bind(&mut g, true);
        let out = model::forward(&mut g, &net.config, &p, &refs, t).unwrap();
        let n = g.value(out.logits).rows();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let loss = g.weighted_cross_entropy(out.logits, &labels, &vec![1.0 / n as f64; n]).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<(String, Option<Vec<f64>>)> = {
            let mut v = Vec::new();
            p.visit(&mut |name, var| v.push((name.to_string(), g.grad(*var).map(<[f64]>::to_vec))));
            v
        };
        for (name, grad) in grads {
            let nonzero = grad.is_some_and(|g| g.iter().any(|&x| x != 0.0));
            let foreign = (0..3).filter(|&u| u != t).any(|u| {
                name.starts_with(&format!("decoders.{u}.")) || name.contains(&format!("specific.{u}."))
            });
            if foreign {
                assert!(!nonzero, "dataset {t} leaked into {name}");
            }
            if name.contains("shared") {
                assert!(nonzero, "shared expert {name} got no gradient from dataset {t}");
            }
        }
    }
}

#[test]
fn toy_second_layer_counts() {
    let cfg = ModelConfig::toy();
    let second_layer = |net: &SegNet| {
        let mut n = 0u64;
        net.params.visit(&mut |name, b| {
            if name.starts_with("blocks.0.ffn.") && !name.contains("fc1") {
                n += b.numel() as u64;
            }
        });
        n
    };
    let plain = SegNet::init(&cfg, 0).unwrap();
    let moe = plain.to_moe(0.25, &[4; 4], 0).unwrap();
    assert_eq!(second_layer(&moe), 28_784);
    assert_eq!(4 * second_layer(&plain), 65_792);
}
