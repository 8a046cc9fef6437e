use super::*;
use crate::autodiff::{grad_check, FnTarget, GradCheckConfig, Mode, Tape};
use crate::rng::SplitMix64;

fn random_batch(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap()
}

fn micro_config() -> NetworkConfig {
    NetworkConfig {
        num_blocks: 1,
        layers_per_block: 1,
        growth_rate: 4,
        stem_channels: 4,
        tap_fc_dim: 8,
        ..NetworkConfig::new(1, 8, 3)
    }
}

#[test]
fn config_validation_catches_bad_extents() {
    let mut cfg = NetworkConfig::new(1, 32, 6);
    assert!(cfg.validate().is_ok());
    cfg.num_classes = 1;
    assert!(cfg.validate().is_err());
    cfg.num_classes = 6;
    cfg.transition_compression = 0.0;
    assert!(cfg.validate().is_err());
    cfg.transition_compression = 0.5;
    cfg.input_size = 20; // 20 -> 10 -> 5: odd before the third transition
    assert!(cfg.validate().is_err());
}

#[test]
fn tap_count_is_blocks_plus_one() {
    for blocks in 1..=3 {
        let cfg = NetworkConfig {
            num_blocks: blocks,
            ..NetworkConfig::new(1, 32, 4)
        };
        assert_eq!(cfg.tap_count(), blocks + 1);
    }
}

#[test]
fn channel_plan_follows_the_compression_recurrence() {
    let cfg = NetworkConfig::new(1, 32, 6);
    // stem 16 -> block +24 = 40 -> ceil(20) -> +24 = 44 -> 22 -> +24 = 46 -> 23
    assert_eq!(cfg.channel_plan(), vec![(40, 20), (44, 22), (46, 23)]);
    assert_eq!(cfg.final_channels(), 23);

    let odd = NetworkConfig {
        growth_rate: 5,
        layers_per_block: 3,
        transition_compression: 0.4,
        ..NetworkConfig::new(1, 32, 6)
    };
    // 16 + 15 = 31 -> ceil(12.4) = 13 -> 28 -> ceil(11.2) = 12 -> 27 -> ceil(10.8) = 11
    assert_eq!(odd.channel_plan(), vec![(31, 13), (28, 12), (27, 11)]);
}

#[test]
fn tap_dims_match_transition_type() {
    let a = NetworkConfig::new(1, 32, 6);
    assert_eq!(a.tap_dims(), vec![64, 64, 64, 6]);
    let b = NetworkConfig {
        transition_type: TransitionType::B,
        ..NetworkConfig::new(1, 32, 6)
    };
    // 20 ch @ 16x16, 22 ch @ 8x8, 23 ch @ 4x4, then the logits.
    assert_eq!(b.tap_dims(), vec![20 * 256, 22 * 64, 23 * 16, 6]);
}

#[test]
fn dense_layer_outputs_growth_channels_and_preserves_space() {
    for in_c in [3usize, 16, 25] {
        let mut rng = SplitMix64::new(1);
        let mut params = ParamSet::new();
        let mut states = Vec::new();
        let layer =
            DenseLayer::new(&mut params, &mut states, "l", in_c, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(random_batch(&[2, in_c, 8, 8], 5));
        let y = layer
            .forward(&mut tape, &params, &mut states, x, Mode::Train)
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 8, 8, 8]);
    }
}

#[test]
fn dense_layer_gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(3);
    let mut params = ParamSet::new();
    let mut states = Vec::new();
    let layer = DenseLayer::new(&mut params, &mut states, "l", 3, 4, &mut rng).unwrap();
    let x = random_batch(&[2, 3, 6, 6], 9);

    let build = {
        let states = states.clone();
        let x = x.clone();
        move |tape: &mut Tape, ps: &ParamSet| -> crate::error::Result<Var> {
            let mut st = states.clone();
            let xin = tape.input(x.clone());
            let y = layer.forward(tape, ps, &mut st, xin, Mode::Train)?;
            Ok(tape.sum_all(y))
        }
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, &params).unwrap();
    tape.backward(loss, &mut params).unwrap();
    let rebuild = build.clone();
    let mut target = FnTarget::new(params, move |ps: &ParamSet| {
        let mut tape = Tape::new();
        let loss = rebuild(&mut tape, ps)?;
        tape.value(loss).item()
    });
    let report = grad_check(
        &mut target,
        &GradCheckConfig {
            step: 1e-5,
            coords_per_tensor: 32,
            seed: 11,
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn dense_block_concatenation_arithmetic() {
    let mut rng = SplitMix64::new(4);
    let mut params = ParamSet::new();
    let mut states = Vec::new();
    let block = DenseBlock::new(&mut params, &mut states, "b", 16, 3, 8, &mut rng).unwrap();
    let mut tape = Tape::new();
    let x = tape.input(random_batch(&[2, 16, 8, 8], 6));
    let y = block
        .forward(&mut tape, &params, &mut states, x, Mode::Train)
        .unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 40, 8, 8]);
}

#[test]
fn dense_block_single_layer_is_concat_of_input_and_layer() {
    let mut rng = SplitMix64::new(7);
    let mut params = ParamSet::new();
    let mut states = Vec::new();
    let block = DenseBlock::new(&mut params, &mut states, "b", 5, 1, 3, &mut rng).unwrap();
    let x = random_batch(&[2, 5, 4, 4], 8);

    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let mut st = states.clone();
    let whole = block
        .forward(&mut tape, &params, &mut st, xin, Mode::Train)
        .unwrap();

    let mut st2 = states.clone();
    let y = block.layers[0]
        .forward(&mut tape, &params, &mut st2, xin, Mode::Train)
        .unwrap();
    let manual = tape.concat_channels(&[xin, y]).unwrap();
    assert_eq!(tape.value(whole).data(), tape.value(manual).data());
}

#[test]
fn dense_block_embeds_each_layer_output_verbatim() {
    let mut rng = SplitMix64::new(12);
    let mut params = ParamSet::new();
    let mut states = Vec::new();
    let (in_c, growth, n_layers) = (4usize, 3usize, 3usize);
    let block =
        DenseBlock::new(&mut params, &mut states, "b", in_c, n_layers, growth, &mut rng).unwrap();
    let x = random_batch(&[2, in_c, 4, 4], 13);

    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let mut st = states.clone();
    let whole = block
        .forward(&mut tape, &params, &mut st, xin, Mode::Train)
        .unwrap();
    let out = tape.value(whole).clone();

    // Execute the layers individually, rebuilding each layer's input by
    // concatenation, and compare channel slices bitwise.
    let mut st2 = states.clone();
    let mut features = vec![xin];
    let mut layer_outputs = Vec::new();
    for layer in &block.layers {
        let input = if features.len() == 1 {
            features[0]
        } else {
            tape.concat_channels(&features).unwrap()
        };
        let y = layer
            .forward(&mut tape, &params, &mut st2, input, Mode::Train)
            .unwrap();
        layer_outputs.push(tape.value(y).clone());
        features.push(y);
    }

    let plane = 16;
    let c_total = in_c + n_layers * growth;
    for s in 0..2 {
        // Input occupies the first in_c channels.
        for c in 0..in_c {
            for p in 0..plane {
                assert_eq!(
                    out.data()[(s * c_total + c) * plane + p],
                    x.data()[(s * in_c + c) * plane + p]
                );
            }
        }
        // Layer i occupies channels in_c + i*growth .. in_c + (i+1)*growth.
        for (i, ly) in layer_outputs.iter().enumerate() {
            for c in 0..growth {
                for p in 0..plane {
                    assert_eq!(
                        out.data()[(s * c_total + in_c + i * growth + c) * plane + p],
                        ly.data()[(s * growth + c) * plane + p]
                    );
                }
            }
        }
    }
}

#[test]
fn transition_a_shapes_and_gradients() {
    let mut rng = SplitMix64::new(21);
    let mut params = ParamSet::new();
    let mut states = Vec::new();
    let tr = Transition::new(
        &mut params,
        &mut states,
        "t",
        40,
        20,
        TransitionType::A,
        16,
        &mut rng,
    )
    .unwrap();
    let x = random_batch(&[2, 40, 8, 8], 22);
    let mut tape = Tape::new();
    let xin = tape.input(x.clone());
    let mut st = states.clone();
    let (down, tap) = tr
        .forward(&mut tape, &params, &mut st, xin, Mode::Train)
        .unwrap();
    assert_eq!(tape.value(down).shape(), &[2, 20, 4, 4]);
    assert_eq!(tape.value(tap).shape(), &[2, 16]);

    // Odd spatial extent is a configuration error.
    let odd = tape.input(Tensor::zeros(&[2, 40, 7, 7]));
    let mut st2 = states.clone();
    assert!(matches!(
        tr.forward(&mut tape, &params, &mut st2, odd, Mode::Train),
        Err(MagnetError::Config(_))
    ));

    let build = {
        let states = states.clone();
        let x = x.clone();
        move |tape: &mut Tape, ps: &ParamSet| -> crate::error::Result<Var> {
            let mut st = states.clone();
            let xin = tape.input(x.clone());
            let (down, tap) = tr.forward(tape, ps, &mut st, xin, Mode::Train)?;
            let a = tape.sum_all(down);
            let b = tape.sum_all(tap);
            tape.add(a, b)
        }
    };
    let mut params2 = params;
    let mut tape = Tape::new();
    let loss = build(&mut tape, &params2).unwrap();
    tape.backward(loss, &mut params2).unwrap();
    let rebuild = build.clone();
    let mut target = FnTarget::new(params2, move |ps: &ParamSet| {
        let mut tape = Tape::new();
        let loss = rebuild(&mut tape, ps)?;
        tape.value(loss).item()
    });
    let report = grad_check(
        &mut target,
        &GradCheckConfig {
            step: 1e-5,
            coords_per_tensor: 32,
            seed: 23,
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn transition_b_gates_and_flattens_the_tap() {
    let mut rng = SplitMix64::new(31);
    let mut params = ParamSet::new();
    let mut states = Vec::new();
    let tr = Transition::new(
        &mut params,
        &mut states,
        "t",
        12,
        6,
        TransitionType::B,
        16,
        &mut rng,
    )
    .unwrap();
    let x = random_batch(&[3, 12, 8, 8], 32);
    let mut tape = Tape::new();
    let xin = tape.input(x);
    let mut st = states.clone();
    let (down, tap) = tr
        .forward(&mut tape, &params, &mut st, xin, Mode::Train)
        .unwrap();
    assert_eq!(tape.value(down).shape(), &[3, 6, 4, 4]);
    assert_eq!(tape.value(tap).shape(), &[3, 96]);
    // Tap is the flattened gated map, so exactly ceil(96/2) entries survive.
    let d = 96;
    for s in 0..3 {
        let row = &tape.value(tap).data()[s * d..(s + 1) * d];
        let nonzero = row.iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= d.div_ceil(2));
        // Kept entries of the tap match the downsampled map bitwise.
        assert_eq!(row, &tape.value(down).data()[s * d..(s + 1) * d]);
    }
}

#[test]
fn residual_classifier_starts_as_source_classifier() {
    let cfg = micro_config();
    let mut model = MagnetModel::new(cfg, 77).unwrap();
    let batch = random_batch(&[5, 1, 8, 8], 78);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Mode::Train).unwrap();
    let fs = tape.value(out.fs_logits);
    let fs_soft = {
        let mut t2 = Tape::new();
        let v = t2.input(fs.clone());
        let s = t2.softmax(v).unwrap();
        t2.value(s).clone()
    };
    // Zero-initialized residual output layer: f_t == softmax(f_s) exactly.
    assert_eq!(tape.value(out.ft_probs).data(), fs_soft.data());
    for i in 0..5 {
        let row = &tape.value(out.ft_probs).data()[i * 3..(i + 1) * 3];
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_reports_taps_and_is_deterministic_in_eval() {
    let cfg = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        stem_channels: 6,
        tap_fc_dim: 8,
        ..NetworkConfig::new(1, 16, 4)
    };
    let mut model = MagnetModel::new(cfg.clone(), 5).unwrap();
    let batch = random_batch(&[3, 1, 16, 16], 6);

    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Mode::Eval).unwrap();
    // One tap per transition plus the classifier site.
    assert_eq!(out.transition_taps.len() + 1, cfg.tap_count());
    for (tap, dim) in out.transition_taps.iter().zip(cfg.tap_dims()) {
        assert_eq!(tape.value(*tap).shape(), &[3, dim]);
        assert!(tape.value(*tap).is_finite());
    }
    assert_eq!(
        tape.value(out.fs_logits).shape(),
        &[3, *cfg.tap_dims().last().unwrap()]
    );

    let mut tape2 = Tape::new();
    let out2 = model.forward(&mut tape2, &batch, Mode::Eval).unwrap();
    assert_eq!(
        tape.value(out.ft_probs).data(),
        tape2.value(out2.ft_probs).data()
    );
    for (a, b) in out.transition_taps.iter().zip(&out2.transition_taps) {
        assert_eq!(tape.value(*a).data(), tape2.value(*b).data());
    }
}

#[test]
fn eval_forward_permutes_with_the_batch() {
    let cfg = NetworkConfig {
        transition_type: TransitionType::B,
        num_blocks: 2,
        layers_per_block: 1,
        growth_rate: 4,
        stem_channels: 6,
        ..NetworkConfig::new(1, 16, 4)
    };
    let mut model = MagnetModel::new(cfg, 9).unwrap();
    let batch = random_batch(&[4, 1, 16, 16], 10);
    let perm = [2usize, 0, 3, 1];
    let plane = 16 * 16;
    let mut permuted = vec![0.0; batch.numel()];
    for (dst, &src) in perm.iter().enumerate() {
        permuted[dst * plane..(dst + 1) * plane]
            .copy_from_slice(&batch.data()[src * plane..(src + 1) * plane]);
    }
    let permuted = Tensor::from_vec(vec![4, 1, 16, 16], permuted).unwrap();

    let mut tape_a = Tape::new();
    let out_a = model.forward(&mut tape_a, &batch, Mode::Eval).unwrap();
    let mut tape_b = Tape::new();
    let out_b = model.forward(&mut tape_b, &permuted, Mode::Eval).unwrap();

    let c = 4;
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(
            &tape_b.value(out_b.ft_probs).data()[dst * c..(dst + 1) * c],
            &tape_a.value(out_a.ft_probs).data()[src * c..(src + 1) * c]
        );
    }
}

#[test]
fn argmax_agreement_at_initialization() {
    let cfg = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        stem_channels: 6,
        ..NetworkConfig::new(1, 16, 5)
    };
    let mut model = MagnetModel::new(cfg, 40).unwrap();
    let batch = random_batch(&[6, 1, 16, 16], 41);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, Mode::Eval).unwrap();
    let fs = tape.value(out.fs_logits);
    let ft = tape.value(out.ft_probs);
    for i in 0..6 {
        let argmax = |row: &[f64]| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (j, &v)| {
                    if v > acc.1 {
                        (j, v)
                    } else {
                        acc
                    }
                })
                .0
        };
        assert_eq!(
            argmax(&fs.data()[i * 5..(i + 1) * 5]),
            argmax(&ft.data()[i * 5..(i + 1) * 5])
        );
    }
}

#[test]
fn param_count_is_a_pure_function_of_config() {
    // Independent closed-form count of every tensor the layout registers.
    fn expected(cfg: &NetworkConfig) -> usize {
        let mut total = cfg.stem_channels * cfg.input_channels * 9;
        let (k, bott) = (cfg.growth_rate, 4 * cfg.growth_rate);
        let mut c = cfg.stem_channels;
        for _ in 0..cfg.num_blocks {
            for i in 0..cfg.layers_per_block {
                let cin = c + i * k;
                total += 2 * cin; // bn1
                total += bott * cin; // 1x1 conv
                total += 2 * bott; // bn2
                total += k * bott * 9; // 3x3 conv
            }
            let block_out = c + cfg.layers_per_block * k;
            let ct = (cfg.transition_compression * block_out as f64).ceil() as usize;
            total += 2 * block_out; // transition bn
            total += ct * block_out; // transition 1x1 conv
            if cfg.transition_type == TransitionType::A {
                total += 2 * (ct * cfg.tap_fc_dim + cfg.tap_fc_dim);
            }
            c = ct;
        }
        let classes = cfg.num_classes;
        total += c * classes + classes; // source head
        total += classes * cfg.residual_hidden + cfg.residual_hidden;
        total += cfg.residual_hidden * classes + classes;
        total
    }

    for cfg in [
        NetworkConfig::new(1, 32, 6),
        NetworkConfig {
            transition_type: TransitionType::B,
            num_blocks: 2,
            layers_per_block: 2,
            growth_rate: 4,
            stem_channels: 8,
            ..NetworkConfig::new(1, 32, 6)
        },
        micro_config(),
    ] {
        let model = MagnetModel::new(cfg.clone(), 1).unwrap();
        assert_eq!(model.param_count(), expected(&cfg), "{cfg:?}");
    }
}

#[test]
fn batch_shape_mismatch_is_rejected() {
    let mut model = MagnetModel::new(micro_config(), 2).unwrap();
    let mut tape = Tape::new();
    let bad = random_batch(&[2, 1, 16, 16], 3);
    assert!(model.forward(&mut tape, &bad, Mode::Train).is_err());
}
