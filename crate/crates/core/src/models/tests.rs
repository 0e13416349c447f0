use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::ops::{softmax_cross_entropy, Mode};
use crate::tensor::Tensor;

fn lstm(k: usize, cin: usize, c: usize) -> usize {
    k * k * cin * 4 * c + k * k * c * 4 * c + 4 * c
}

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

#[test]
fn reference_parameter_counts() {
    let stateless = build_stateless::<f32>(60, 0).unwrap();
    let want = lstm(3, 1, 32)
        + 64
        + lstm(3, 32, 32)
        + 64
        + lstm(3, 32, 128)
        + 256
        + lstm(3, 128, 256)
        + 512
        + conv(3, 256, 128)
        + lstm(7, 1, 8)
        + 16
        + lstm(5, 8, 16)
        + 32
        + conv(1, 16, 128)
        + conv(3, 128, 128)
        + 256
        + conv(1, 128, 60);
    assert_eq!(stateless.count_parameters(), want);

    let layers = stateless.layer_parameters();
    let reducer = layers.iter().find(|(n, _)| n == "main.conv2d").unwrap();
    assert_eq!(reducer.1, 295_040);

    let stateful = build_stateful::<f32>(60, 0).unwrap();
    let want = lstm(3, 1, 32)
        + 64
        + lstm(3, 32, 64)
        + 128
        + lstm(3, 64, 128)
        + 256
        + lstm(3, 128, 256)
        + 512
        + conv(3, 256, 128)
        + 256
        + conv(3, 128, 128)
        + 256
        + conv(1, 128, 60);
    assert_eq!(stateful.count_parameters(), want);
    // The wider second recurrent layer and the extra decision convolution
    // outweigh the support branch.
    assert!(stateful.count_parameters() > stateless.count_parameters());
}

fn tiny_config(arch: Architecture, peephole: bool) -> NetworkSpec {
    let mut cfg = match arch {
        Architecture::Stateless => ArchConfig::stateless(3),
        Architecture::Stateful => ArchConfig::stateful(3),
    }
    .scaled(8, [3, 3, 4, 4], [2, 3], 4);
    cfg.frames = 3;
    cfg.peephole = peephole;
    match arch {
        Architecture::Stateless => NetworkSpec::stateless(cfg).unwrap(),
        Architecture::Stateful => NetworkSpec::stateful(cfg).unwrap(),
    }
}

fn random_clips(b: usize, t: usize, s: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, t, s, s, 1], |_| rng.gen_range(-1.0..1.0))
}

fn check_network_gradients(arch: Architecture, peephole: bool, seed: u64) {
    let mut net: Network<f64> = Network::new(tiny_config(arch, peephole), seed).unwrap();
    // Perturb zero-initialized tensors so their gradients are generic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    net.visit_params_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    });
    let x = random_clips(3, 3, 8, seed);
    let labels = [0, 2, 1];
    let pass = Pass::train(seed);
    let loss_at = |net: &mut Network<f64>| {
        net.reset_states();
        let logits = net.forward_logits(&x, Pass { record: false, ..pass }).unwrap();
        softmax_cross_entropy(&logits, &labels).unwrap().0
    };

    net.zero_grad();
    let logits = net.forward_logits(&x, pass).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    net.backward(&g).unwrap();

    let mut analytic = Vec::new();
    net.visit_params(&mut |n, t| analytic.push((n.to_string(), t.grad().unwrap().to_vec())));
    // Kept small: some leaky-ReLU inputs sit within 1e-5 of the kink.
    let h = 1e-6;
    for (name, grad) in analytic {
        for _ in 0..4 {
            let i = rng.gen_range(0..grad.len());
            let set = |net: &mut Network<f64>, delta: f64| {
                net.visit_params_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += delta;
                    }
                })
            };
            set(&mut net, h);
            let up = loss_at(&mut net);
            set(&mut net, -2.0 * h);
            let down = loss_at(&mut net);
            set(&mut net, h);
            let numeric = (up - down) / (2.0 * h);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-5);
            assert!(err < 1e-4, "{arch} {name}[{i}]: analytic {} numeric {numeric}", grad[i]);
        }
    }
}

#[test]
fn stateless_network_gradients() {
    for seed in 0..3 {
        check_network_gradients(Architecture::Stateless, false, seed);
    }
}

#[test]
fn stateful_network_gradients() {
    for seed in 0..3 {
        check_network_gradients(Architecture::Stateful, false, seed);
    }
}

#[test]
fn peephole_network_gradients() {
    check_network_gradients(Architecture::Stateless, true, 11);
}

#[test]
fn probabilities_are_normalized() {
    let mut net: Network<f64> = Network::new(tiny_config(Architecture::Stateless, false), 1).unwrap();
    let p = net.predict(&random_clips(4, 3, 8, 2)).unwrap();
    assert_eq!(p.shape(), &[4, 3]);
    for row in p.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn inference_rows_are_independent() {
    let mut net: Network<f64> = Network::new(tiny_config(Architecture::Stateless, false), 3).unwrap();
    let x = random_clips(3, 3, 8, 4);
    let all = net.predict(&x).unwrap();
    let first = Tensor::new(&[1, 3, 8, 8, 1], x.data()[..192].to_vec()).unwrap();
    let alone = net.predict(&first).unwrap();
    for (a, b) in alone.data().iter().zip(&all.data()[..3]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stateless_calls_do_not_carry_state() {
    let mut net: Network<f64> = Network::new(tiny_config(Architecture::Stateless, false), 3).unwrap();
    let x = random_clips(2, 3, 8, 5);
    let a = net.predict(&x).unwrap();
    let b = net.predict(&x).unwrap();
    assert_eq!(a, b);
    assert!(net.states().iter().all(|(_, s)| s.is_none()));
}

#[test]
fn stateful_state_lifecycle() {
    let mut net: Network<f64> = Network::new(tiny_config(Architecture::Stateful, false), 3).unwrap();
    let x = random_clips(2, 3, 8, 6);
    let first = net.predict(&x).unwrap();
    let states = net.states();
    assert_eq!(states.len(), 4);
    assert!(states
        .iter()
        .all(|(_, s)| s.is_some_and(|s| !s.is_zero() && !s.attached)));
    let second = net.predict(&x).unwrap();
    assert_ne!(first, second, "carried state must influence the next window");

    net.reset_rows(&[true, false]).unwrap();
    for (_, s) in net.states() {
        let s = s.unwrap();
        let per = s.h.len() / 2;
        assert!(s.h.data()[..per].iter().all(|&v| v == 0.0));
        assert!(s.h.data()[per..].iter().any(|&v| v != 0.0));
    }
    assert!(net.reset_rows(&[true]).is_err());

    net.reset_states();
    let again = net.predict(&x).unwrap();
    assert_eq!(first, again);
}

#[test]
fn non_finite_names_the_layer() {
    let mut net: Network<f32> = Network::new(tiny_config(Architecture::Stateless, false), 0).unwrap();
    net.visit_params_mut(&mut |n, t| {
        if n == "main.convlstm2.bias" {
            t.data_mut()[0] = f32::NAN;
        }
    });
    let x = random_clips(1, 3, 8, 0).cast::<f32>();
    match net.predict(&x) {
        Err(Error::NonFinite { layer }) => assert_eq!(layer, "main.convlstm2"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn backward_requires_recorded_pass() {
    let mut net: Network<f64> = Network::new(tiny_config(Architecture::Stateless, false), 0).unwrap();
    let x = random_clips(2, 3, 8, 0);
    net.predict(&x).unwrap();
    let g = Tensor::zeros(&[2, 3]);
    assert!(matches!(net.backward(&g), Err(Error::MissingCache(_))));
    assert!(net
        .forward(
            &x,
            Pass {
                mode: Mode::Infer,
                record: true,
                seed: 0
            }
        )
        .is_err());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let mut net: Network<f64> = Network::new(tiny_config(Architecture::Stateless, false), 0).unwrap();
    let x = random_clips(2, 4, 8, 0);
    assert!(matches!(net.predict(&x), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.clck");
    let mut net: Network<f32> = Network::new(tiny_config(Architecture::Stateful, false), 9).unwrap();
    let x = random_clips(2, 3, 8, 1).cast::<f32>();
    // Train-mode pass so running statistics differ from their defaults.
    net.forward(&x, Pass::train(0)).unwrap();
    net.reset_states();
    let before = net.predict(&x).unwrap();
    save_checkpoint(&net, &path).unwrap();
    assert!(!dir.path().join("net.clck.tmp").exists());

    let (mut loaded, ck) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ck.metadata["arch"], "stateful");
    assert_eq!(loaded.predict(&x).unwrap(), before);
}

#[test]
fn checkpoint_rejects_other_architectures() {
    let net: Network<f32> = Network::new(tiny_config(Architecture::Stateful, false), 9).unwrap();
    let ck = Checkpoint::from_network(&net);
    let mut other: Network<f32> = Network::new(tiny_config(Architecture::Stateless, false), 9).unwrap();
    assert!(matches!(
        load_into(&mut other, &ck),
        Err(Error::ArchitectureMismatch { .. })
    ));
}

#[test]
fn checkpoint_format_errors() {
    let net: Network<f32> = Network::new(tiny_config(Architecture::Stateless, false), 9).unwrap();
    let bytes = Checkpoint::from_network(&net).to_bytes().unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::from_network(&net));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format { offset: 0, .. })
    ));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::VersionMismatch { expected: 1, found: 9 })
    ));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Format { .. })));
}
